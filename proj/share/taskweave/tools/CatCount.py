import pandas as pd


class CatCount:
    """Add value counts of a categorical column as a new feature."""

    def __init__(self, col: str):
        self.col = col
        self.counts = None

    def fit(self, df: pd.DataFrame):
        self.counts = df[self.col].value_counts().to_dict()
        return self

    def transform(self, df: pd.DataFrame) -> pd.DataFrame:
        out = df.copy()
        out[f"{self.col}_cnt"] = out[self.col].map(self.counts).fillna(0).astype(int)
        return out

    def fit_transform(self, df: pd.DataFrame) -> pd.DataFrame:
        return self.fit(df).transform(df)
