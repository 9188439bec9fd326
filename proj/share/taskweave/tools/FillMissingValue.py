import pandas as pd


class FillMissingValue:
    """Fill missing values in the given columns with a simple statistic."""

    def __init__(self, features: list, strategy: str = "mean", fill_value=None):
        if strategy not in ("mean", "median", "most_frequent", "constant"):
            raise ValueError(f"unknown strategy {strategy!r}")
        self.features = list(features)
        self.strategy = strategy
        self.fill_value = fill_value
        self.values = {}

    def fit(self, df: pd.DataFrame):
        for col in self.features:
            if self.strategy == "mean":
                self.values[col] = df[col].mean()
            elif self.strategy == "median":
                self.values[col] = df[col].median()
            elif self.strategy == "most_frequent":
                mode = df[col].mode()
                self.values[col] = mode.iloc[0] if len(mode) else self.fill_value
            else:
                self.values[col] = self.fill_value
        return self

    def transform(self, df: pd.DataFrame) -> pd.DataFrame:
        out = df.copy()
        for col, value in self.values.items():
            out[col] = out[col].fillna(value)
        return out

    def fit_transform(self, df: pd.DataFrame) -> pd.DataFrame:
        return self.fit(df).transform(df)
