"""Shared fixtures: synthetic sentences, corpora, stub endpoints."""

from __future__ import annotations

import random

import pytest


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    outcome = "PASS" if report.passed else "FAIL"
    print(f"\n[ACCEPTANCE] {outcome}: {name}")

from lectern.corpus import CourseMaterial, Language, MaterialKind, SlidePage, slide_to_chunk
from lectern.embedding import StubEmbedder
from lectern.tokens import DEFAULT_COUNTER


def make_sentence(idx: int, tokens: int, vocab: str = "w") -> str:
    """A sentence with exactly ``tokens`` tokens under the default counter
    (words plus the terminal period)."""
    assert tokens >= 2
    words = [f"S{idx}"] + [f"{vocab}{idx}x{j}" for j in range(tokens - 2)]
    return " ".join(words) + "."


def make_transcript(token_counts: list[int]) -> tuple[str, list[str]]:
    sentences = [make_sentence(i, t) for i, t in enumerate(token_counts)]
    return " ".join(sentences), sentences


@pytest.fixture
def counter():
    return DEFAULT_COUNTER


@pytest.fixture
def stub_embedder():
    return StubEmbedder(dim=64)


@pytest.fixture
def slide_deck():
    return CourseMaterial(
        course_id="HCI",
        language=Language.EN,
        kind=MaterialKind.SLIDE_DECK,
        source_path="decks/hci-01.ndjson",
    )


@pytest.fixture
def transcript_material():
    return CourseMaterial(
        course_id="HCI",
        language=Language.EN,
        kind=MaterialKind.TRANSCRIPT,
        source_path="transcripts/hci-lecture-01.txt",
    )


def make_slide_chunks(deck: CourseMaterial, texts: list[str], deck_id: str = "HCI-01", image_refs=None):
    chunks = []
    for i, text in enumerate(texts, start=1):
        image_ref = image_refs[i - 1] if image_refs else None
        page = SlidePage(deck_id=deck_id, page_number=i, text=text, image_ref=image_ref)
        chunks.append(slide_to_chunk(page, deck))
    return chunks


def check_chunking_invariants(chunks, sentences: list[str], max_tokens: int, overlap_fraction: float,
                              counter=DEFAULT_COUNTER, tok=None, check_text=True):
    """Coverage, bound and overlap invariants for one segmented transcript.

    Overlap passes when the shared region reaches the token target, OR it
    is all but one sentence of the earlier chunk, OR growing it by one
    more sentence would push the later chunk past the token ceiling (the
    size bound always outranks the overlap target).

    ``tok`` supplies per-sentence token counts when the caller constructed
    the sentences with known counts (independent ground truth).
    """
    if not sentences:
        assert chunks == []
        return
    if tok is None:
        tok = [counter.count(s) for s in sentences]
    spans = [c.span for c in chunks]
    # coverage: ordered walk over all sentences, no gaps
    assert spans[0][0] == 0
    assert spans[-1][1] == len(sentences)
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        assert a0 < b0 and a1 < b1, "chunks must strictly advance"
        assert b0 <= a1, f"gap between spans ({a0},{a1}) and ({b0},{b1})"
    # bound: every chunk fits unless it is a single flagged oversized sentence
    for c in chunks:
        s0, s1 = c.span
        assert c.token_count == sum(tok[s0:s1])
        if check_text:
            assert c.text == " ".join(sentences[s0:s1])
        if c.token_count > max_tokens:
            assert s1 - s0 == 1 and c.oversized
        else:
            assert not c.oversized
    # overlap
    target = overlap_fraction * max_tokens
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        shared = sum(tok[b0:a1])
        all_but_one = b0 == a0 + 1
        bound_limited = b0 > a0 and sum(tok[b0 - 1 : a1]) + tok[a1] > max_tokens
        assert shared >= target or all_but_one or bound_limited, (
            f"overlap violated between {(a0, a1)} and {(b0, b1)}: shared={shared}, target={target}"
        )


def _codename(rng: random.Random, seen: set) -> str:
    consonants = "bcdfgklmnprstvz"
    vowels = "aeiou"
    while True:
        word = "".join(rng.choice(consonants) + rng.choice(vowels) for _ in range(4))
        if word not in seen:
            seen.add(word)
            return word


def planted_corpus(n_distractors: int = 100, n_facts: int = 50, seed: int = 11):
    """Slide chunks where ``n_facts`` of them carry a planted fact about a
    unique nonsense term; returns (chunks, [(question, gold_chunk_id), ...])."""
    rng = random.Random(seed)
    deck = CourseMaterial(
        course_id="SYN",
        language=Language.EN,
        kind=MaterialKind.SLIDE_DECK,
        source_path="decks/synthetic.ndjson",
    )
    filler_words = [f"topic{i}" for i in range(300)]
    texts = []
    queries = []
    for i in range(n_distractors):
        words = rng.sample(filler_words, 12)
        texts.append("Slide about " + " ".join(words))
    fact_slides = sorted(rng.sample(range(n_distractors), n_facts))
    seen: set = set()
    for fact_no, slide_idx in enumerate(fact_slides):
        term = _codename(rng, seen)
        texts[slide_idx] += (
            f". Definition: the term {term} denotes value {1000 + fact_no}. Remember {term} for the exam."
        )
        queries.append((f"What does the term {term} denote in this course?", slide_idx))
    chunks = make_slide_chunks(deck, texts, deck_id="SYN-01")
    return chunks, [(q, chunks[idx].chunk_id) for q, idx in queries]
