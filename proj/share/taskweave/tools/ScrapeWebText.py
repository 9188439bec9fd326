import re
import urllib.request


def ScrapeWebText(url: str, timeout: float = 10.0) -> str:
    """Fetch a page and return its visible text with tags and scripts removed."""
    with urllib.request.urlopen(url, timeout=timeout) as resp:
        html = resp.read().decode(resp.headers.get_content_charset() or "utf-8", errors="replace")
    html = re.sub(r"(?is)<(script|style).*?</\1>", " ", html)
    text = re.sub(r"(?s)<[^>]+>", " ", html)
    return re.sub(r"\s+", " ", text).strip()
