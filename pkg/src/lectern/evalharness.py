"""Exam running, LLM-judge grading, grader validation and report tables.

Question scores are normalized to 0-100; exam totals are rescaled to the
0-60 exam scale. The grader's free-form reply is parsed by an ordered
pattern list (explicit Score: prefix, then x/y fraction, then the last
standalone number), tolerant of German comma decimals.
"""

from __future__ import annotations

import json
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

from .llm import ChatError, ChatRequest, TextPart
from .templates import TemplateSet, load_templates

EXAM_SCALE = 60.0
QUESTION_SCALE = 100.0


class Difficulty(str, Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


_DIFFICULTY_ALIASES = {
    "easy": Difficulty.EASY,
    "medium": Difficulty.MEDIUM,
    # upstream exam sets label the middle tier "difficult"
    "difficult": Difficulty.MEDIUM,
    "hard": Difficulty.HARD,
}


def parse_difficulty(label: str) -> tuple[Difficulty, bool]:
    """Canonicalize a difficulty label; the bool marks an alias rewrite
    that should be surfaced for review."""
    key = label.strip().lower()
    if key not in _DIFFICULTY_ALIASES:
        raise ValueError(f"unknown difficulty label {label!r}")
    return _DIFFICULTY_ALIASES[key], key == "difficult"


@dataclass(frozen=True)
class ExamQuestion:
    exam_id: str
    question_id: str
    text: str
    max_points: float
    difficulty: Difficulty
    language: str = "en"
    attachments: tuple[str, ...] = ()
    topic: Optional[str] = None

    def __post_init__(self):
        if self.max_points <= 0:
            raise ValueError("max_points must be > 0")

    @property
    def topic_label(self) -> str:
        return self.topic if self.topic else self.exam_id


@dataclass(frozen=True)
class GradedAnswer:
    question_id: str
    answer_text: str
    raw_score: float
    max_points: float
    normalized_score: float
    grader_id: str
    grader_rationale: str
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0 <= self.raw_score <= self.max_points:
            raise ValueError("raw_score must lie in [0, max_points]")
        expected = QUESTION_SCALE * self.raw_score / self.max_points
        if not math.isclose(self.normalized_score, expected, rel_tol=1e-9, abs_tol=1e-9):
            raise ValueError("normalized_score must equal 100 * raw_score / max_points")

    @classmethod
    def build(
        cls,
        question: ExamQuestion,
        answer_text: str,
        raw_score: float,
        grader_id: str,
        rationale: str,
        flags: Sequence[str] = (),
    ) -> "GradedAnswer":
        raw = float(raw_score)
        flag_list = list(flags)
        if raw < 0:
            raw, flag_list = 0.0, flag_list + ["clamped_low"]
        elif raw > question.max_points:
            raw, flag_list = question.max_points, flag_list + ["clamped_high"]
        return cls(
            question_id=question.question_id,
            answer_text=answer_text,
            raw_score=raw,
            max_points=question.max_points,
            normalized_score=QUESTION_SCALE * raw / question.max_points,
            grader_id=grader_id,
            grader_rationale=rationale,
            flags=tuple(flag_list),
        )


@dataclass
class ExamReport:
    exam_id: str
    total_score: float
    per_question: list[GradedAnswer]
    breakdowns: dict
    config_fingerprint: str = ""
    model_id: str = ""
    flagged: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "exam_id": self.exam_id,
            "model_id": self.model_id,
            "total_score": self.total_score,
            "config_fingerprint": self.config_fingerprint,
            "flagged": self.flagged,
            "breakdowns": self.breakdowns,
            "per_question": [
                {
                    "question_id": g.question_id,
                    "answer_text": g.answer_text,
                    "raw_score": g.raw_score,
                    "max_points": g.max_points,
                    "normalized_score": g.normalized_score,
                    "grader_id": g.grader_id,
                    "grader_rationale": g.grader_rationale,
                    "flags": list(g.flags),
                }
                for g in self.per_question
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> "ExamReport":
        def infer_max(g: dict) -> float:
            if "max_points" in g:
                return g["max_points"]
            if g["normalized_score"]:
                return QUESTION_SCALE * g["raw_score"] / g["normalized_score"]
            return max(g["raw_score"], 1.0)

        per_question = [
            GradedAnswer(
                question_id=g["question_id"],
                answer_text=g.get("answer_text", ""),
                raw_score=g["raw_score"],
                max_points=infer_max(g),
                normalized_score=g["normalized_score"],
                grader_id=g.get("grader_id", ""),
                grader_rationale=g.get("grader_rationale", ""),
                flags=tuple(g.get("flags", ())),
            )
            for g in data.get("per_question", [])
        ]
        return cls(
            exam_id=data["exam_id"],
            total_score=data["total_score"],
            per_question=per_question,
            breakdowns=data.get("breakdowns", {}),
            config_fingerprint=data.get("config_fingerprint", ""),
            model_id=data.get("model_id", ""),
            flagged=list(data.get("flagged", ())),
        )


# -- exam file IO ------------------------------------------------------------


def load_exam(path: str) -> list[ExamQuestion]:
    """Exam file: {exam_id, language, questions: [...]}; difficulty labels
    are canonicalized (the "difficult" alias maps to Medium)."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    exam_id = data["exam_id"]
    language = data.get("language", "en")
    questions = []
    seen = set()
    for q in data["questions"]:
        difficulty, aliased = parse_difficulty(q["difficulty"])
        qid = q["question_id"]
        if qid in seen:
            raise ValueError(f"duplicate question_id {qid!r} in exam {exam_id!r}")
        seen.add(qid)
        questions.append(
            ExamQuestion(
                exam_id=exam_id,
                question_id=qid,
                text=q["text"],
                max_points=float(q["max_points"]),
                difficulty=difficulty,
                language=q.get("language", language),
                attachments=tuple(q.get("attachments", ())),
                topic=q.get("topic") or data.get("topic"),
            )
        )
    return questions


# -- answering ---------------------------------------------------------------


@dataclass
class AnswerRecord:
    question_id: str
    answer_text: str = ""
    error: str = ""
    config_fingerprint: str = ""
    provenance: list[str] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return bool(self.error)


def _load_answer_records(path: str) -> dict[str, AnswerRecord]:
    records: dict[str, AnswerRecord] = {}
    if not os.path.exists(path):
        return records
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            records[rec["question_id"]] = AnswerRecord(
                question_id=rec["question_id"],
                answer_text=rec.get("answer_text", ""),
                error=rec.get("error", ""),
                config_fingerprint=rec.get("config_fingerprint", ""),
                provenance=list(rec.get("provenance", ())),
            )
    return records


def _answer_one(engine, question: ExamQuestion) -> AnswerRecord:
    try:
        answer = engine.answer(question.text)
        return AnswerRecord(
            question_id=question.question_id,
            answer_text=answer.answer_text,
            config_fingerprint=getattr(engine, "config_fingerprint", ""),
            provenance=list(answer.provenance),
        )
    except Exception as exc:
        return AnswerRecord(
            question_id=question.question_id,
            error=f"{type(exc).__name__}: {exc}",
            config_fingerprint=getattr(engine, "config_fingerprint", ""),
        )


def run_exam(
    exam: Sequence[ExamQuestion],
    engine,
    answers_path: str,
    force: bool = False,
    workers: int = 4,
) -> list[AnswerRecord]:
    """Answer every question through the engine, persisting each answer
    (with config fingerprint) before any grading happens.

    Reruns are idempotent: already-answered questions are skipped unless
    forced. Per-question failures are recorded and the run continues.
    Questions fan out over ``workers`` threads (the endpoint admission
    limit still caps in-flight requests); results and the persisted file
    keep exam order.
    """
    existing = {} if force else _load_answer_records(answers_path)
    pending = [q for q in exam if force or (existing.get(q.question_id) is None or existing[q.question_id].failed)]
    answered: dict[str, AnswerRecord] = {}
    if pending:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            for record in pool.map(lambda q: _answer_one(engine, q), pending):
                answered[record.question_id] = record
    results: list[AnswerRecord] = []
    new_records: list[AnswerRecord] = []
    for question in exam:
        record = answered.get(question.question_id)
        if record is None:
            results.append(existing[question.question_id])
            continue
        results.append(record)
        new_records.append(record)
    if new_records or force:
        mode = "w" if force else "a"
        with open(answers_path, mode, encoding="utf-8") as fh:
            for record in results if force else new_records:
                fh.write(
                    json.dumps(
                        {
                            "question_id": record.question_id,
                            "answer_text": record.answer_text,
                            "error": record.error,
                            "config_fingerprint": record.config_fingerprint,
                            "provenance": record.provenance,
                        },
                        sort_keys=True,
                        ensure_ascii=False,
                    )
                    + "\n"
                )
    return results


# -- score parsing -----------------------------------------------------------

_NUMBER = r"\d+(?:[.,]\d+)?"
_SCORE_PREFIX_RE = re.compile(rf"score\s*[:=]\s*({_NUMBER})", re.IGNORECASE)
_FRACTION_RE = re.compile(rf"(?<![\d.,/])({_NUMBER})\s*/\s*({_NUMBER})(?![\d.,/])")
_STANDALONE_RE = re.compile(rf"(?<![\w.,/])({_NUMBER})(?![\w/])")


def _to_float(token: str) -> float:
    return float(token.replace(",", "."))


def parse_score(reply: str) -> Optional[tuple[float, str]]:
    """Extract a numeric score from a grader reply.

    Ordered patterns: explicit "Score:"-prefixed number, then an x/y
    fraction (numerator wins), then the last standalone number. Comma
    decimals are accepted. Returns (value, pattern_name) or None.
    """
    m = _SCORE_PREFIX_RE.search(reply)
    if m:
        return _to_float(m.group(1)), "prefix"
    m = _FRACTION_RE.search(reply)
    if m:
        return _to_float(m.group(1)), "fraction"
    matches = _STANDALONE_RE.findall(reply)
    if matches:
        return _to_float(matches[-1]), "standalone"
    return None


class GradeParseError(Exception):
    """Grader output stayed unparseable after the strict reprompt."""

    def __init__(self, message: str, replies: list[str]):
        super().__init__(message)
        self.replies = replies


def grade(
    question: ExamQuestion,
    answer_text: str,
    grader,
    templates: Optional[TemplateSet] = None,
) -> GradedAnswer:
    """Grade one answer with the judge endpoint.

    An unparseable reply triggers exactly one reprompt with a stricter
    format instruction; a second failure raises GradeParseError so the
    caller can exclude and flag the question.
    """
    templates = templates or load_templates()
    slots = {
        "question": question.text,
        "max_points": format(question.max_points, "g"),
        "answer": answer_text,
    }
    replies = []
    flags: list[str] = []
    for template_name in ("grade", "grade_strict"):
        prompt = templates.render(template_name, **slots)
        response = grader.complete(ChatRequest(system="", user_parts=[TextPart(prompt)]))
        replies.append(response.text)
        parsed = parse_score(response.text)
        if parsed is not None:
            value, pattern = parsed
            if template_name == "grade_strict":
                flags.append("reprompted")
            flags.append(f"pattern:{pattern}")
            return GradedAnswer.build(
                question,
                answer_text,
                value,
                grader_id=grader.endpoint.id,
                rationale=response.text,
                flags=flags,
            )
    raise GradeParseError(
        f"grader reply for {question.question_id!r} unparseable after reprompt", replies=replies
    )


def grade_answers(
    exam: Sequence[ExamQuestion],
    answers: Sequence[AnswerRecord],
    grader,
    templates: Optional[TemplateSet] = None,
    workers: int = 4,
) -> tuple[list[GradedAnswer], list[str]]:
    """Grade all answered questions concurrently; returns (graded,
    flagged ids), both in exam order.

    Failed answers and unparseable gradings are skipped here and scored 0
    during aggregation, flagged.
    """
    by_id = {a.question_id: a for a in answers}

    def grade_one(question: ExamQuestion):
        record = by_id.get(question.question_id)
        if record is None or record.failed:
            return question.question_id, None
        try:
            return question.question_id, grade(question, record.answer_text, grader, templates)
        except (GradeParseError, ChatError):
            return question.question_id, None

    graded: list[GradedAnswer] = []
    flagged: list[str] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for question_id, outcome in pool.map(grade_one, exam):
            if outcome is None:
                flagged.append(question_id)
            else:
                graded.append(outcome)
    return graded, flagged


# -- aggregation -------------------------------------------------------------


def aggregate_exam(
    graded: Sequence[GradedAnswer],
    exam: Sequence[ExamQuestion],
    config_fingerprint: str = "",
    model_id: str = "",
) -> ExamReport:
    """Exam total on the 0-60 scale: 60 * sum(raw) / sum(max_points).

    Questions without a graded answer score 0 and are flagged; duplicate
    graded entries are an error. Order-invariant by construction.
    """
    questions = {q.question_id: q for q in exam}
    seen = set()
    for g in graded:
        if g.question_id in seen:
            raise ValueError(f"duplicate graded answer for {g.question_id!r}")
        if g.question_id not in questions:
            raise ValueError(f"graded answer {g.question_id!r} matches no exam question")
        seen.add(g.question_id)
    by_id = {g.question_id: g for g in graded}
    flagged = [q.question_id for q in exam if q.question_id not in by_id]

    total_max = sum(q.max_points for q in exam)
    total_raw = sum(by_id[qid].raw_score for qid in by_id)
    total_score = EXAM_SCALE * total_raw / total_max if total_max else 0.0

    def normalized(question: ExamQuestion) -> float:
        g = by_id.get(question.question_id)
        return g.normalized_score if g else 0.0

    def mean(values: list[float]) -> float:
        return sum(values) / len(values) if values else 0.0

    def group_by(key) -> dict:
        groups: dict[str, list[float]] = {}
        for q in exam:
            groups.setdefault(key(q), []).append(normalized(q))
        return {label: mean(vals) for label, vals in sorted(groups.items())}

    breakdowns = {
        "by_difficulty": group_by(lambda q: q.difficulty.value),
        "by_topic": group_by(lambda q: q.topic_label),
        "by_language": group_by(lambda q: q.language),
    }
    exam_ids = {q.exam_id for q in exam}
    exam_id = exam_ids.pop() if len(exam_ids) == 1 else ",".join(sorted(exam_ids))
    return ExamReport(
        exam_id=exam_id,
        total_score=total_score,
        per_question=[by_id[q.question_id] for q in exam if q.question_id in by_id],
        breakdowns=breakdowns,
        config_fingerprint=config_fingerprint,
        model_id=model_id,
        flagged=flagged,
    )


# -- grader validation -------------------------------------------------------


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation; undefined (error) for zero variance."""
    if len(x) != len(y):
        raise ValueError("pearson needs equal-length sequences")
    if len(x) < 2:
        raise ValueError("pearson needs at least 2 points")
    n = len(x)
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    dx = [xi - mx for xi in x]
    dy = [yi - my for yi in y]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson undefined for zero-variance input")
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    return max(-1.0, min(1.0, sxy / math.sqrt(sxx * syy)))


@dataclass(frozen=True)
class PregradedAnswer:
    """One expert-scored answer from a benchmark release."""

    question: ExamQuestion
    answer_text: str
    expert_score: float


def load_expert_scores(path: str) -> list[PregradedAnswer]:
    """Adapter for the benchmark's expert-score release: JSON list of
    {exam_id, question_id, question, max_points, difficulty, answer,
    expert_score, language?}."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    items = []
    for rec in data:
        difficulty, _ = parse_difficulty(rec.get("difficulty", "medium"))
        question = ExamQuestion(
            exam_id=rec.get("exam_id", "pregraded"),
            question_id=rec["question_id"],
            text=rec["question"],
            max_points=float(rec["max_points"]),
            difficulty=difficulty,
            language=rec.get("language", "en"),
        )
        items.append(
            PregradedAnswer(question=question, answer_text=rec["answer"], expert_score=float(rec["expert_score"]))
        )
    return items


def validate_grader(
    pregraded: Sequence[PregradedAnswer],
    grader,
    templates: Optional[TemplateSet] = None,
    residuals_path: Optional[str] = None,
) -> dict:
    """Score expert-graded answers with the candidate judge and report the
    Pearson correlation plus per-item scatter and residuals."""
    grader_scores = []
    expert_scores = []
    scatter = []
    for item in pregraded:
        graded = grade(item.question, item.answer_text, grader, templates)
        grader_scores.append(graded.raw_score)
        expert_scores.append(item.expert_score)
        scatter.append(
            {
                "question_id": item.question.question_id,
                "expert": item.expert_score,
                "grader": graded.raw_score,
                "residual": graded.raw_score - item.expert_score,
            }
        )
    correlation = pearson(expert_scores, grader_scores)
    if residuals_path:
        with open(residuals_path, "w", encoding="utf-8") as fh:
            for row in scatter:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return {"pearson": correlation, "scatter": scatter, "count": len(scatter)}


# -- run comparison ----------------------------------------------------------


@dataclass
class DeltaRow:
    label: str
    baseline: float
    treatment: float

    @property
    def delta(self) -> float:
        return self.treatment - self.baseline


@dataclass
class DeltaReport:
    by_model: list[DeltaRow]
    by_topic: list[DeltaRow]
    by_difficulty: list[DeltaRow]
    by_language: list[DeltaRow]

    def sections(self) -> list[tuple[str, list[DeltaRow]]]:
        return [
            ("Per model (exam scale 0-60)", self.by_model),
            ("Per topic (exam scale 0-60)", self.by_topic),
            ("Per difficulty (question scale 0-100)", self.by_difficulty),
            ("Per language (question scale 0-100)", self.by_language),
        ]

    def to_json(self) -> dict:
        def rows(items: list[DeltaRow]) -> list[dict]:
            return [
                {"label": r.label, "baseline": r.baseline, "treatment": r.treatment, "delta": r.delta}
                for r in items
            ]

        return {
            "by_model": rows(self.by_model),
            "by_topic": rows(self.by_topic),
            "by_difficulty": rows(self.by_difficulty),
            "by_language": rows(self.by_language),
        }


def _mean(values: list[float]) -> float:
    return sum(values) / len(values) if values else 0.0


def _paired_rows(base_groups: dict, treat_groups: dict, average_label: str = "Average") -> list[DeltaRow]:
    labels = sorted(base_groups)
    rows = [DeltaRow(label, _mean(base_groups[label]), _mean(treat_groups[label])) for label in labels]
    if len(rows) > 1:
        rows.append(
            DeltaRow(
                average_label,
                _mean([r.baseline for r in rows]),
                _mean([r.treatment for r in rows]),
            )
        )
    return rows


def compare_runs(baseline: Sequence[ExamReport], treatment: Sequence[ExamReport]) -> DeltaReport:
    """Pair runs by (model, exam) and compute per-model, per-topic,
    per-difficulty and per-language averages with treatment - baseline
    deltas. Grand averages are the mean of the column entries above them.
    """
    def keyset(reports: Sequence[ExamReport]) -> dict:
        table = {}
        for report in reports:
            key = (report.model_id, report.exam_id)
            if key in table:
                raise ValueError(f"duplicate report for {key}")
            table[key] = report
        return table

    base = keyset(baseline)
    treat = keyset(treatment)
    if set(base) != set(treat):
        missing = sorted(set(base) ^ set(treat))
        raise ValueError(f"baseline and treatment cover different runs: {missing}")

    by_model_b: dict[str, list[float]] = {}
    by_model_t: dict[str, list[float]] = {}
    by_topic_b: dict[str, list[float]] = {}
    by_topic_t: dict[str, list[float]] = {}
    by_diff_b: dict[str, list[float]] = {}
    by_diff_t: dict[str, list[float]] = {}
    by_lang_b: dict[str, list[float]] = {}
    by_lang_t: dict[str, list[float]] = {}

    for key in sorted(base):
        b, t = base[key], treat[key]
        model = b.model_id or "model"
        by_model_b.setdefault(model, []).append(b.total_score)
        by_model_t.setdefault(model, []).append(t.total_score)
        topic = (b.breakdowns.get("by_topic") or {b.exam_id: b.total_score})
        for label in topic:
            by_topic_b.setdefault(label, []).append(b.total_score)
            by_topic_t.setdefault(label, []).append(t.total_score)
        for label, value in (b.breakdowns.get("by_difficulty") or {}).items():
            by_diff_b.setdefault(label, []).append(value)
        for label, value in (t.breakdowns.get("by_difficulty") or {}).items():
            by_diff_t.setdefault(label, []).append(value)
        for label, value in (b.breakdowns.get("by_language") or {}).items():
            by_lang_b.setdefault(label, []).append(value)
        for label, value in (t.breakdowns.get("by_language") or {}).items():
            by_lang_t.setdefault(label, []).append(value)

    difficulty_order = {"easy": 0, "medium": 1, "hard": 2}
    rows_diff = _paired_rows(by_diff_b, by_diff_t)
    rows_diff.sort(key=lambda r: difficulty_order.get(r.label, 99) if r.label != "Average" else 100)
    return DeltaReport(
        by_model=_paired_rows(by_model_b, by_model_t),
        by_topic=_paired_rows(by_topic_b, by_topic_t),
        by_difficulty=rows_diff,
        by_language=_paired_rows(by_lang_b, by_lang_t),
    )


def render_delta_report(report: DeltaReport) -> str:
    """Aligned plain-text tables, two decimals, one section per grouping."""
    lines = []
    for title, rows in report.sections():
        if not rows:
            continue
        label_width = max(len(r.label) for r in rows)
        label_width = max(label_width, len("Group"))
        lines.append(title)
        header = f"{'Group':<{label_width}}  {'Baseline':>9}  {'Treatment':>9}  {'Delta':>7}"
        lines.append(header)
        lines.append("-" * len(header))
        for r in rows:
            lines.append(
                f"{r.label:<{label_width}}  {r.baseline:>9.2f}  {r.treatment:>9.2f}  {r.delta:>+7.2f}"
            )
        lines.append("")
    return "\n".join(lines)


def save_reports(reports: Sequence[ExamReport], path: str) -> None:
    payload = {"generated_at": time.strftime("%Y-%m-%dT%H:%M:%S"), "reports": [r.to_json() for r in reports]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def load_reports(path: str) -> list[ExamReport]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = data.get("reports", [])
    return [ExamReport.from_json(rec) for rec in data]
