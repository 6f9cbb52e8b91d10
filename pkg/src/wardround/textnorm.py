"""Text normalization shared by the dataset loader and the metric suite."""

from __future__ import annotations

import re

_WS_RUN = re.compile(r"\s+")

# CJK unified ideograph blocks (base, extension A, compatibility, and the
# supplementary-plane extensions). Enough for clinical Chinese text.
_CJK_RANGES = (
    (0x4E00, 0x9FFF),
    (0x3400, 0x4DBF),
    (0xF900, 0xFAFF),
    (0x20000, 0x2FFFF),
)


def normalize_text(text: str) -> str:
    """Trim, collapse whitespace runs to single spaces, and lowercase ASCII.

    Case folding is applied only to ASCII letters; CJK and other non-ASCII
    characters pass through untouched.
    """
    collapsed = _WS_RUN.sub(" ", text).strip()
    return "".join(
        ch.lower() if "A" <= ch <= "Z" else ch
        for ch in collapsed
    )


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)
