#!/usr/bin/env python3
"""Chunk-size sweep over synthetic transcripts.

Segments randomized transcripts at the 100/300/750-token grid used for
retrieval experiments and prints per-setting corpus statistics: chunk
counts, token means, realized overlap, oversized flags.
"""

from __future__ import annotations

import argparse
import random
import statistics

from lectern.corpus import segment_transcript
from lectern.tokens import DEFAULT_COUNTER


def synthetic_transcript(rng: random.Random, n_sentences: int) -> str:
    words = ["model", "retrieval", "slide", "usability", "gradient", "token",
             "exam", "layout", "context", "lecture", "replay", "cosine"]
    sentences = []
    for i in range(n_sentences):
        body = " ".join(rng.choices(words, k=rng.randint(4, 60)))
        sentences.append(f"Sentence {i} covers {body}.")
    return " ".join(sentences)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--transcripts", type=int, default=50)
    parser.add_argument("--sentences", type=int, default=300)
    parser.add_argument("--overlap", type=float, default=0.1)
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()

    rng = random.Random(args.seed)
    texts = [synthetic_transcript(rng, rng.randint(20, args.sentences)) for _ in range(args.transcripts)]

    header = f"{'max_tokens':>10}  {'chunks':>7}  {'mean_tok':>8}  {'p95_tok':>7}  {'overlap_tok':>11}  {'oversized':>9}"
    print(header)
    print("-" * len(header))
    for max_tokens in (100, 300, 750):
        counts = []
        tokens = []
        overlaps = []
        oversized = 0
        for text in texts:
            chunks = segment_transcript(text, max_tokens, args.overlap)
            counts.append(len(chunks))
            tokens.extend(c.token_count for c in chunks)
            oversized += sum(1 for c in chunks if c.oversized)
            for left, right in zip(chunks, chunks[1:]):
                shared = left.span[1] - right.span[0]
                if shared > 0:
                    sentence_tokens = [DEFAULT_COUNTER.count(s) for s in right.text.split(". ")]
                    overlaps.append(sum(sentence_tokens[:shared]))
        quantile = statistics.quantiles(tokens, n=20)[-1] if len(tokens) > 20 else max(tokens)
        print(
            f"{max_tokens:>10}  {sum(counts):>7}  {statistics.mean(tokens):>8.1f}  "
            f"{quantile:>7.0f}  {statistics.mean(overlaps) if overlaps else 0:>11.1f}  {oversized:>9}"
        )


if __name__ == "__main__":
    main()
