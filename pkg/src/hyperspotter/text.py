"""Character vocabulary shared by the keyword encoder and the CTC head."""

from __future__ import annotations

import re

CHARSET = "abcdefghijklmnopqrstuvwxyz '-"
CHAR_TO_ID = {c: i for i, c in enumerate(CHARSET)}
BLANK = len(CHARSET)


class CharsetError(ValueError):
    """Text contains a character outside the fixed charset."""


def normalize(text: str) -> str:
    """Lowercase and collapse runs of whitespace."""
    return re.sub(r"\s+", " ", text.strip().lower())


def encode_chars(text: str) -> list[int]:
    bad = sorted({c for c in text if c not in CHAR_TO_ID})
    if bad:
        raise CharsetError(f"characters outside charset in {text!r}: {''.join(bad)!r}")
    return [CHAR_TO_ID[c] for c in text]


def decode_ids(ids) -> str:
    return "".join(CHARSET[i] for i in ids)
