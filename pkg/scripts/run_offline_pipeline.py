#!/usr/bin/env python3
"""Drive the full pipeline offline against the demo corpus.

ingest -> index -> ask -> eval run -> eval grade -> eval report, all with
stub endpoints (no network). Build the corpus first:

    python scripts/make_demo_corpus.py
    python scripts/run_offline_pipeline.py
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
from pathlib import Path


def run(args: list[str], env_overrides: dict | None = None) -> None:
    print(f"$ {' '.join(args)}")
    env = {**os.environ, **(env_overrides or {})}
    result = subprocess.run(args, text=True, env=env)
    if result.returncode != 0:
        sys.exit(result.returncode)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--demo", default="demo", help="demo corpus directory")
    args = parser.parse_args()
    demo = Path(args.demo)
    if not (demo / "lectern.toml").exists():
        sys.exit(f"no demo corpus at {demo}/ (run scripts/make_demo_corpus.py first)")
    cli = [sys.executable, "-m", "lectern.cli", "--config", str(demo / "lectern.toml")]

    run(cli + ["ingest",
               "--deck", str(demo / "deck.ndjson"), "--course", "HCI:en",
               "--transcript", str(demo / "lecture01.txt"), "--sidecar", str(demo / "lecture01.meta.json"),
               "--out", str(demo / "chunks.ndjson")])
    run(cli + ["index", "--chunks", str(demo / "chunks.ndjson"), "--out", str(demo / "index.ndjson")])
    run(cli + ["ask", "--question", "Explain the concept of heuristic evaluation.", "--show-sources"])
    run(cli + ["eval", "run", "--exam", str(demo / "exam.json"),
               "--answers", str(demo / "answers.ndjson"), "--force"])
    run(cli + ["eval", "grade", "--exam", str(demo / "exam.json"),
               "--answers", str(demo / "answers.ndjson"),
               "--out", str(demo / "report_rag.json"), "--model-id", "stub-rag"])

    # vanilla baseline for the delta table
    run(cli + ["eval", "run", "--exam", str(demo / "exam.json"), "--mode", "vanilla",
               "--answers", str(demo / "answers_vanilla.ndjson"), "--force"])
    run(cli + ["eval", "grade", "--exam", str(demo / "exam.json"),
               "--answers", str(demo / "answers_vanilla.ndjson"),
               "--out", str(demo / "report_vanilla.json"), "--model-id", "stub-rag"])
    run(cli + ["eval", "report", "--baseline", str(demo / "report_vanilla.json"),
               "--treatment", str(demo / "report_rag.json"),
               "--json-out", str(demo / "delta.json")])
    # the echo grader replays the reference answer, whose trailing number is
    # the expert score, so the parsed grades correlate perfectly
    run(cli + ["eval", "validate-grader", "--expert-scores", str(demo / "expert_scores.json")],
        env_overrides={"LECTERN_GRADER_BEHAVIOR": "echo"})
    print("offline pipeline complete; artifacts in", demo)


if __name__ == "__main__":
    main()
