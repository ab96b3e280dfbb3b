import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lectern.evalharness import (
    Difficulty,
    ExamQuestion,
    ExamReport,
    GradeParseError,
    GradedAnswer,
    aggregate_exam,
    compare_runs,
    grade,
    grade_answers,
    load_exam,
    load_expert_scores,
    load_reports,
    parse_difficulty,
    parse_score,
    pearson,
    render_delta_report,
    run_exam,
    save_reports,
    validate_grader,
)
from lectern.stubs import ScriptedGenerator, SequenceGenerator, make_stub_generator


def question(qid="q1", max_points=6.0, difficulty=Difficulty.MEDIUM, language="en", exam_id="HCI-EN", topic=None):
    return ExamQuestion(
        exam_id=exam_id,
        question_id=qid,
        text=f"Question {qid}?",
        max_points=max_points,
        difficulty=difficulty,
        language=language,
        topic=topic,
    )


class FakeEngine:
    """Engine double answering from a table; raises for ids in ``failing``."""

    def __init__(self, table=None, failing=()):
        self.table = table or {}
        self.failing = set(failing)
        self.calls = []
        self.config_fingerprint = "cfgfp"

    def answer(self, text):
        self.calls.append(text)
        for qid, reply in self.table.items():
            if qid in text:
                if qid in self.failing:
                    raise RuntimeError("generator down")
                from lectern.rag import AnswerResult, Mode

                return AnswerResult(answer_text=reply, provenance=[], timing_ms=0.1, mode=Mode.VANILLA)
        raise AssertionError(f"unexpected question {text!r}")


# -- run_exam -------------------------------------------------------------------


def test_run_exam_persists_answers(tmp_path):
    exam = [question(f"q{i}") for i in range(1, 4)]
    engine = FakeEngine({f"q{i}": f"answer {i}" for i in range(1, 4)})
    path = tmp_path / "answers.ndjson"
    records = run_exam(exam, engine, str(path))
    assert [r.answer_text for r in records] == ["answer 1", "answer 2", "answer 3"]
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 3
    assert json.loads(lines[0])["config_fingerprint"] == "cfgfp"


def test_run_exam_idempotent_rerun(tmp_path):
    exam = [question(f"q{i}") for i in range(1, 4)]
    engine = FakeEngine({f"q{i}": f"answer {i}" for i in range(1, 4)})
    path = tmp_path / "answers.ndjson"
    run_exam(exam, engine, str(path))
    assert len(engine.calls) == 3
    rerun_engine = FakeEngine({})
    records = run_exam(exam, rerun_engine, str(path))
    assert rerun_engine.calls == []  # zero new generator calls
    assert len(records) == 3


def test_run_exam_force_reanswers(tmp_path):
    exam = [question("q1")]
    path = tmp_path / "answers.ndjson"
    run_exam(exam, FakeEngine({"q1": "old"}), str(path))
    records = run_exam(exam, FakeEngine({"q1": "new"}), str(path), force=True)
    assert records[0].answer_text == "new"


def test_run_exam_partial_failure_continues(tmp_path):
    exam = [question(f"q{i}") for i in range(1, 4)]
    engine = FakeEngine({f"q{i}": f"a{i}" for i in range(1, 4)}, failing={"q2"})
    records = run_exam(exam, engine, str(tmp_path / "answers.ndjson"))
    failures = [r for r in records if r.failed]
    assert len(failures) == 1
    assert failures[0].question_id == "q2"
    assert sum(1 for r in records if not r.failed) == 2


# -- grading ---------------------------------------------------------------------


def test_grade_prefix_score():
    graded = grade(question(max_points=6), "an answer", make_stub_generator("fixed:Score: 3.0"))
    assert graded.raw_score == 3.0
    assert graded.normalized_score == 50.0


def test_grade_clamps_above_max():
    graded = grade(question(max_points=6), "an answer", make_stub_generator("fixed:7"))
    assert graded.raw_score == 6.0
    assert "clamped_high" in graded.flags


def test_grade_fraction():
    graded = grade(question(max_points=5), "an answer", make_stub_generator("fixed:I would give this 2.5/5 overall."))
    assert graded.raw_score == 2.5
    assert graded.normalized_score == 50.0


def test_grade_prompt_contains_sections():
    generator = make_stub_generator("fixed:Score: 1")
    q = question(max_points=4)
    grade(q, "the student answer text", generator)
    prompt = generator.calls[0].user_text()
    assert q.text in prompt
    assert "MAXIMUM POINTS: 4" in prompt
    assert "the student answer text" in prompt


def test_grade_reprompts_once_with_strict_format():
    generator = SequenceGenerator(["no numbers here at all", "Score: 2"])
    graded = grade(question(max_points=4), "ans", generator)
    assert graded.raw_score == 2.0
    assert "reprompted" in graded.flags
    assert len(generator.calls) == 2
    assert "ONLY one line" in generator.calls[1].user_text()


def test_grade_unparseable_after_reprompt_raises():
    generator = SequenceGenerator(["nothing", "still nothing"])
    with pytest.raises(GradeParseError):
        grade(question(), "ans", generator)


def test_grade_answers_flags_failures(tmp_path):
    exam = [question("q1"), question("q2")]
    from lectern.evalharness import AnswerRecord

    answers = [AnswerRecord(question_id="q1", answer_text="fine"), AnswerRecord(question_id="q2", error="boom")]
    graded, flagged = grade_answers(exam, answers, make_stub_generator("fixed:Score: 1"))
    assert [g.question_id for g in graded] == ["q1"]
    assert flagged == ["q2"]


# -- score parsing fixture suite ----------------------------------------------------

PARSE_FIXTURES = [
    ("Score: 3.0", 3.0),
    ("score: 4", 4.0),
    ("Score= 2.5", 2.5),
    ("SCORE:5", 5.0),
    ("Score: 3,5", 3.5),  # German decimal comma
    ("The final verdict.\nScore: 0", 0.0),
    ("2.5/5", 2.5),
    ("I would award 7/10 here.", 7.0),
    ("Grade 3,0/6,0 given partial credit.", 3.0),
    ("The answer deserves 4 points.", 4.0),
    ("Ich vergebe 2,5 Punkte.", 2.5),
    ("First 2 parts are wrong, the rest earns 3", 3.0),
    ("Full marks: 10", 10.0),
    ("0", 0.0),
    ("0,5", 0.5),
    ("Given the rubric I assign a six... i.e. 6", 6.0),
    ("Partial: around 1.75 of the available credit", 1.75),
    ("Score: 12 because the answer is complete", 12.0),
    ("Between 3 and 4, settling on 4", 4.0),
    ("   Score :\t8  ", 8.0),
    ("no digits anywhere", None),
    ("great effort!!", None),
    ("", None),
    ("v2.1.3 is the version string", None),  # dotted version, not a score
]


@pytest.mark.parametrize("reply,expected", PARSE_FIXTURES)
def test_parse_score_fixture(reply, expected):
    got = parse_score(reply)
    if expected is None:
        assert got is None
    else:
        assert got is not None
        assert got[0] == pytest.approx(expected)


def test_parse_prefers_prefix_over_other_numbers():
    value, pattern = parse_score("Out of 10 points I award Score: 7")
    assert value == 7.0
    assert pattern == "prefix"


def test_parse_fraction_before_standalone():
    value, pattern = parse_score("earns 3/6 though 5 parts were attempted")
    assert value == 3.0
    assert pattern == "fraction"


# -- aggregation -----------------------------------------------------------------


def graded_for(q, raw, grader_id="judge"):
    return GradedAnswer.build(q, f"answer for {q.question_id}", raw, grader_id, "rationale")


def test_aggregate_perfect_exam():
    exam = [question("q1", 10), question("q2", 20)]
    graded = [graded_for(exam[0], 10), graded_for(exam[1], 20)]
    assert aggregate_exam(graded, exam).total_score == 60.0


def test_aggregate_all_zero():
    exam = [question("q1", 10), question("q2", 20)]
    graded = [graded_for(exam[0], 0), graded_for(exam[1], 0)]
    assert aggregate_exam(graded, exam).total_score == 0.0


def test_aggregate_hand_computed():
    exam = [question("q1", 10), question("q2", 20)]
    graded = [graded_for(exam[0], 5), graded_for(exam[1], 10)]
    assert aggregate_exam(graded, exam).total_score == pytest.approx(30.0)


def test_aggregate_missing_scores_zero_and_flagged():
    exam = [question("q1", 10), question("q2", 10)]
    report = aggregate_exam([graded_for(exam[0], 10)], exam)
    assert report.total_score == pytest.approx(30.0)
    assert report.flagged == ["q2"]


def test_aggregate_duplicate_rejected():
    exam = [question("q1", 10)]
    g = graded_for(exam[0], 5)
    with pytest.raises(ValueError, match="duplicate"):
        aggregate_exam([g, g], exam)


def test_aggregate_order_invariant():
    exam = [question(f"q{i}", 5 + i) for i in range(1, 6)]
    graded = [graded_for(q, i) for i, q in enumerate(exam)]
    forward = aggregate_exam(graded, exam)
    backward = aggregate_exam(list(reversed(graded)), exam)
    assert forward.total_score == backward.total_score
    assert forward.breakdowns == backward.breakdowns


def test_aggregate_breakdowns():
    exam = [
        question("q1", 10, Difficulty.EASY, language="en"),
        question("q2", 10, Difficulty.EASY, language="de"),
        question("q3", 10, Difficulty.HARD, language="en"),
    ]
    graded = [graded_for(exam[0], 10), graded_for(exam[1], 5), graded_for(exam[2], 0)]
    report = aggregate_exam(graded, exam)
    assert report.breakdowns["by_difficulty"] == {"easy": 75.0, "hard": 0.0}
    assert report.breakdowns["by_language"] == {"en": 50.0, "de": 50.0}


def test_normalization_order_preserving():
    exam = [question(f"q{i}", 8) for i in range(1, 6)]
    raws = [1.0, 7.5, 3.0, 8.0, 0.0]
    graded = [graded_for(q, r) for q, r in zip(exam, raws)]
    by_raw = sorted(graded, key=lambda g: g.raw_score)
    by_norm = sorted(graded, key=lambda g: g.normalized_score)
    assert [g.question_id for g in by_raw] == [g.question_id for g in by_norm]


def test_difficulty_alias_canonicalized():
    difficulty, aliased = parse_difficulty("difficult")
    assert difficulty is Difficulty.MEDIUM
    assert aliased
    assert parse_difficulty("Easy") == (Difficulty.EASY, False)
    with pytest.raises(ValueError):
        parse_difficulty("brutal")


def test_load_exam_file(tmp_path):
    payload = {
        "exam_id": "HCI-EN",
        "language": "en",
        "topic": "HCI",
        "questions": [
            {"question_id": "q1", "text": "Define usability.", "max_points": 6, "difficulty": "easy"},
            {"question_id": "q2", "text": "Contrast UX.", "max_points": 10, "difficulty": "difficult"},
        ],
    }
    path = tmp_path / "exam.json"
    path.write_text(json.dumps(payload))
    exam = load_exam(str(path))
    assert [q.difficulty for q in exam] == [Difficulty.EASY, Difficulty.MEDIUM]
    assert exam[0].topic_label == "HCI"


# -- pearson ----------------------------------------------------------------------


def test_pearson_identity():
    assert pearson([1, 2, 3, 4], [1, 2, 3, 4]) == pytest.approx(1.0)


def test_pearson_anti_identity():
    assert pearson([1, 2, 3, 4], [-1, -2, -3, -4]) == pytest.approx(-1.0)


def test_pearson_hand_computed():
    assert pearson([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(0.6, abs=1e-12)


def test_pearson_zero_variance_errors():
    with pytest.raises(ValueError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1, 2], [1])
    with pytest.raises(ValueError):
        pearson([1], [1])


@settings(max_examples=60, deadline=None)
@given(
    xs=st.lists(st.floats(min_value=-100, max_value=100), min_size=3, max_size=20),
    ys=st.lists(st.floats(min_value=-100, max_value=100), min_size=3, max_size=20),
    shift=st.floats(min_value=-50, max_value=50),
    scale=st.floats(min_value=0.01, max_value=100),
)
def test_pearson_properties(xs, ys, shift, scale):
    n = min(len(xs), len(ys))
    xs, ys = xs[:n], ys[:n]
    if max(xs) - min(xs) < 1e-6 or max(ys) - min(ys) < 1e-6:
        return
    base = pearson(xs, ys)
    assert base == pytest.approx(float(np.corrcoef(xs, ys)[0, 1]), abs=1e-9)
    assert pearson(ys, xs) == pytest.approx(base, abs=1e-12)
    assert pearson([x * scale + shift for x in xs], ys) == pytest.approx(base, abs=1e-12)


# -- validate_grader -----------------------------------------------------------------


def make_pregraded(scores):
    from lectern.evalharness import PregradedAnswer

    items = []
    for i, s in enumerate(scores):
        q = question(f"q{i}", max_points=10)
        items.append(PregradedAnswer(question=q, answer_text=f"answer {i} scoring {s}", expert_score=s))
    return items


def test_validate_grader_replay_reaches_one():
    pregraded = make_pregraded([2, 5, 7, 9])

    def replay(req):
        text = req.user_text()
        for item in pregraded:
            if item.answer_text in text:
                return f"Score: {item.expert_score}"
        raise AssertionError("unknown item")

    grader = SequenceGenerator([replay] * 4)
    outcome = validate_grader(pregraded, grader)
    assert outcome["pearson"] == pytest.approx(1.0)
    assert len(outcome["scatter"]) == 4


def test_validate_grader_constant_score_degenerate():
    pregraded = make_pregraded([2, 5, 7, 9])
    with pytest.raises(ValueError, match="zero-variance"):
        validate_grader(pregraded, make_stub_generator("fixed:Score: 5"))


def test_validate_grader_writes_residuals(tmp_path):
    pregraded = make_pregraded([1, 2, 3])
    grader = SequenceGenerator(["Score: 1", "Score: 3", "Score: 3"])
    path = tmp_path / "residuals.ndjson"
    outcome = validate_grader(pregraded, grader, residuals_path=str(path))
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert [r["residual"] for r in rows] == [0.0, 1.0, 0.0]
    assert outcome["count"] == 3


def test_load_expert_scores(tmp_path):
    payload = [
        {"question_id": "q1", "question": "Q?", "max_points": 10, "difficulty": "easy",
         "answer": "A1", "expert_score": 7.5},
    ]
    path = tmp_path / "expert.json"
    path.write_text(json.dumps(payload))
    items = load_expert_scores(str(path))
    assert items[0].expert_score == 7.5
    assert items[0].question.difficulty is Difficulty.EASY


# -- compare_runs ----------------------------------------------------------------------


def report_with(model_id, exam_id, total, difficulty_means=None, language_means=None, topic=None):
    return ExamReport(
        exam_id=exam_id,
        total_score=total,
        per_question=[],
        breakdowns={
            "by_difficulty": difficulty_means or {},
            "by_topic": {topic or exam_id: 0.0},
            "by_language": language_means or {},
        },
        model_id=model_id,
    )


def test_identical_runs_zero_deltas():
    base = [report_with("m1", "HCI", 41.91, {"easy": 70.0})]
    delta = compare_runs(base, base)
    for section in (delta.by_model, delta.by_topic, delta.by_difficulty):
        for row in section:
            assert row.delta == 0.0


def test_mismatched_exam_sets_error():
    base = [report_with("m1", "HCI", 40.0)]
    treat = [report_with("m1", "DBS", 42.0)]
    with pytest.raises(ValueError, match="different runs"):
        compare_runs(base, treat)


def test_difficulty_row_from_reference_values():
    base = [report_with("m1", "HCI", 40.0, {"easy": 71.71, "medium": 66.83, "hard": 56.72})]
    treat = [report_with("m1", "HCI", 42.0, {"easy": 73.63, "medium": 72.16, "hard": 67.51})]
    delta = compare_runs(base, treat)
    easy = next(r for r in delta.by_difficulty if r.label == "easy")
    assert easy.baseline == pytest.approx(71.71)
    assert easy.treatment == pytest.approx(73.63)
    assert easy.delta == pytest.approx(1.92)


def test_model_average_from_reference_values():
    cells = {"Qwen2.5": (45.27, 47.36), "LLaMA 3.3": (43.10, 44.01), "Qwen2-VL": (38.05, 40.87), "LLaMA 3.1": (31.17, 31.97)}
    base = [report_with(m, "ALL", b) for m, (b, _) in cells.items()]
    treat = [report_with(m, "ALL", t) for m, (_, t) in cells.items()]
    delta = compare_runs(base, treat)
    average = next(r for r in delta.by_model if r.label == "Average")
    assert round(average.baseline, 2) == 39.40
    assert round(average.treatment, 2) == 41.05


def test_render_delta_tables_aligned():
    base = [report_with("m1", "HCI", 41.91, {"easy": 70.0, "hard": 50.0})]
    treat = [report_with("m1", "HCI", 48.02, {"easy": 72.0, "hard": 60.79})]
    text = render_delta_report(compare_runs(base, treat))
    assert "Per model" in text
    assert "41.91" in text and "48.02" in text and "+6.11" in text
    # column alignment: all data rows in a section share the delta column position
    lines = [l for l in text.splitlines() if l.startswith("m1")]
    assert lines


def test_reports_round_trip(tmp_path):
    exam = [question("q1", 10), question("q2", 20)]
    graded = [graded_for(exam[0], 5), graded_for(exam[1], 10)]
    report = aggregate_exam(graded, exam, config_fingerprint="fp", model_id="m1")
    path = tmp_path / "reports.json"
    save_reports([report], str(path))
    loaded = load_reports(str(path))
    assert loaded[0].total_score == report.total_score
    assert loaded[0].model_id == "m1"
    assert loaded[0].per_question[0].normalized_score == 50.0
