#!/usr/bin/env python3
"""Build a small self-contained demo course under ./demo/.

Generates a slide deck manifest (with rendered PNG slide images), a raw
lecture transcript with its metadata sidecar, an exam file, an
expert-score file for grader validation, and a stub-only config so the
whole pipeline runs offline.
"""

from __future__ import annotations

import argparse
import json
import random
from pathlib import Path

from PIL import Image, ImageDraw

TOPICS = [
    ("usability", "Usability measures how effectively users reach their goals"),
    ("user experience", "User experience covers emotions before during and after use"),
    ("heuristic evaluation", "Heuristic evaluation inspects an interface against rules of thumb"),
    ("fitts law", "Fitts law predicts pointing time from distance and target width"),
    ("affordances", "Affordances suggest how an object wants to be used"),
    ("prototyping", "Paper prototypes trade fidelity for iteration speed"),
    ("ab testing", "AB testing compares design variants on live traffic"),
    ("accessibility", "Accessibility makes interfaces usable with assistive technology"),
    ("cognitive load", "Cognitive load limits how much interface novelty users absorb"),
    ("gestalt principles", "Gestalt principles describe how users group visual elements"),
]


def render_slide(path: Path, title: str, body: str, page: int) -> None:
    image = Image.new("RGB", (640, 360), (245, 243, 235))
    draw = ImageDraw.Draw(image)
    draw.rectangle([0, 0, 640, 56], fill=(40, 70, 120))
    draw.text((16, 20), f"{page:02d}  {title.title()}", fill=(255, 255, 255))
    for i, line in enumerate(body.split(". ")):
        draw.text((24, 90 + 34 * i), f"- {line.strip()}", fill=(30, 30, 30))
    image.save(path)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="demo", help="output directory (default ./demo)")
    parser.add_argument("--course", default="HCI")
    parser.add_argument("--slides", type=int, default=24)
    parser.add_argument("--seed", type=int, default=13)
    args = parser.parse_args()

    rng = random.Random(args.seed)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)

    # deck manifest + images
    manifest_path = out / "deck.ndjson"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for page in range(1, args.slides + 1):
            topic, fact = TOPICS[(page - 1) % len(TOPICS)]
            detail = f"{fact}. Example {page} shows it in a {rng.choice(['mobile', 'desktop', 'kiosk'])} setting."
            image_path = out / "images" / f"slide{page:02d}.png"
            render_slide(image_path, topic, detail, page)
            fh.write(
                json.dumps(
                    {
                        "deck_id": f"{args.course}-01",
                        "page_number": page,
                        "text": f"{topic.title()}: {detail}",
                        "image_ref": str(image_path),
                    }
                )
                + "\n"
            )

    # raw transcript (spoken-style, with one hallucinated repeat to clean)
    sentences = []
    for page in range(1, args.slides + 1):
        topic, fact = TOPICS[(page - 1) % len(TOPICS)]
        sentences.append(f"Okay so now let us talk about {topic}.")
        sentences.append(f"{fact}, and this matters for the exam.")
        if page == 3:
            sentences.extend(["Thanks for watching."] * 4)  # ASR hallucination
    transcript_path = out / "lecture01.txt"
    transcript_path.write_text(" ".join(sentences), encoding="utf-8")
    (out / "lecture01.meta.json").write_text(
        json.dumps({"course_id": args.course, "language": "en", "kind": "transcript"}, indent=2)
    )

    # exam + expert scores
    questions = []
    for i, (topic, fact) in enumerate(TOPICS[:6], start=1):
        questions.append(
            {
                "question_id": f"q{i}",
                "text": f"Explain the concept of {topic}.",
                "max_points": rng.choice([4, 6, 10]),
                "difficulty": rng.choice(["easy", "difficult", "hard"]),
            }
        )
    (out / "exam.json").write_text(
        json.dumps({"exam_id": f"{args.course}-EN", "language": "en", "topic": args.course,
                    "questions": questions}, indent=2)
    )
    expert = [
        {
            "question_id": q["question_id"],
            "question": q["text"],
            "max_points": q["max_points"],
            "difficulty": q["difficulty"],
            "answer": f"A reference answer about {TOPICS[i][0]} scoring {round(q['max_points'] * 0.75, 1)}",
            "expert_score": round(q["max_points"] * 0.75, 1),
        }
        for i, q in enumerate(questions)
    ]
    (out / "expert_scores.json").write_text(json.dumps(expert, indent=2))

    # offline config (stub endpoints only)
    (out / "lectern.toml").write_text(
        f"""[rag]
mode = "text"
k = 4
max_chunk_tokens = 300
material_kind = "slides"

[embedder]
id = "stub-embedder"
type = "stub"
dim = 256

[generator]
id = "stub-generator"
type = "stub"
behavior = "first-context"

[grader]
id = "stub-grader"
type = "stub"
behavior = "fixed:Score: 3"

[paths]
chunk_store = "{out / 'chunks.ndjson'}"
index = "{out / 'index.ndjson'}"
run_log = "{out / 'run_log.ndjson'}"

[service]
host = "127.0.0.1"
port = 8040
frontend_dir = "frontend/dist"
""",
    )
    print(f"demo corpus written to {out}/ ({args.slides} slides, {len(sentences)} transcript sentences)")


if __name__ == "__main__":
    main()
