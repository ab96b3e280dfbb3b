"""Token counting for chunk sizing.

The chunker never needs real model tokenization: chunk-size effects are
about magnitude, so the default counter treats words and punctuation runs
as tokens. Any object with a ``count(text) -> int`` method can be plugged
in instead (e.g. an endpoint-backed tokenizer).
"""

from __future__ import annotations

import re
from functools import lru_cache
from typing import Protocol

_TOKEN_RE = re.compile(r"\w+|[^\w\s]+", re.UNICODE)


class TokenCounter(Protocol):
    def count(self, text: str) -> int: ...


@lru_cache(maxsize=131072)
def _count_text(text: str) -> int:
    # pure function of the text; memoized because the same sentences are
    # recounted across chunk-size settings (RAG vs CPT segmentation)
    total = 0
    for piece in text.split():
        if piece.isalnum():
            total += 1
        else:
            total += len(_TOKEN_RE.findall(piece))
    return total


class WordTokenCounter:
    """Counts word runs plus punctuation runs (``\\w+|[^\\w\\s]+``).

    Pure-alphanumeric pieces take a fast path; anything else falls back to
    the defining regex, so the count always equals
    ``len(_TOKEN_RE.findall(text))``.
    """

    def count(self, text: str) -> int:
        return _count_text(text)


DEFAULT_COUNTER = WordTokenCounter()
