"""Rule-based sentence segmentation for English and German lecture text.

A boundary is terminal punctuation followed by whitespace and an
uppercase letter or digit, unless the preceding word is a known
abbreviation or a single-letter initial. Deterministic by construction:
no model, no locale state.
"""

from __future__ import annotations

import re

# Lowercased, trailing period stripped. German entries include the
# dotted short forms as they appear mid-sentence.
_ABBREVIATIONS = frozenset(
    {
        # English
        "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st",
        "vs", "etc", "e.g", "i.e", "cf", "al", "fig", "eq",
        "no", "vol", "pp", "p", "approx", "dept", "univ",
        # German
        "z.b", "d.h", "u.a", "o.ä", "u.ä", "z.t", "s.o", "s.u",
        "bzw", "ca", "evtl", "ggf", "inkl", "max", "min",
        "nr", "abb", "usw", "vgl", "sog", "bspw", "bzgl", "tel",
    }
)

_BOUNDARY_RE = re.compile(r"([.!?…]+[\"'»)\]]*)\s+(?=[\"'«(\[]*[A-Z0-9ÄÖÜ])")
_LAST_WORD_RE = re.compile(r"(\S+)\Z")
_TRIM_CHARS = "\"'«»()[]"


def _is_abbreviation(text: str, punct_start: int) -> bool:
    # last word before the punctuation; abbreviations are short, so a
    # bounded backward window keeps this O(1) per boundary candidate
    m = _LAST_WORD_RE.search(text, max(0, punct_start - 24), punct_start)
    if not m:
        return False
    word = m.group(1).rstrip(".!?…").strip(_TRIM_CHARS)
    if not word:
        return False
    if len(word) == 1 and word.isalpha() and word.isupper():
        return True  # initials: "J. Smith"
    return word.lower() in _ABBREVIATIONS


def split_sentences(text: str) -> list[str]:
    """Split ``text`` into sentences, each stripped of surrounding space.

    Whitespace-only input yields an empty list. Text without any boundary
    comes back as a single sentence.
    """
    stripped = text.strip()
    if not stripped:
        return []
    sentences = []
    start = 0
    for m in _BOUNDARY_RE.finditer(stripped):
        if _is_abbreviation(stripped, m.start()):
            continue
        piece = stripped[start : m.end(1)]
        if piece:
            sentences.append(piece)
        start = m.end()
    if start < len(stripped):
        sentences.append(stripped[start:])
    return sentences
