import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from lectern.checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from lectern.cli import main


@pytest.fixture
def runner():
    return CliRunner()


def write_config(tmp_path, store="chunks.ndjson", index="index.ndjson", generator_behavior="first-context",
                 grader_behavior="fixed:Score: 3", k=4, mode="text"):
    config = tmp_path / "lectern.toml"
    config.write_text(
        f"""
[rag]
mode = "{mode}"
k = {k}
max_chunk_tokens = 300
material_kind = "slides"

[embedder]
id = "stub-embedder"
type = "stub"
dim = 256

[generator]
id = "stub-generator"
type = "stub"
behavior = "{generator_behavior}"

[grader]
id = "stub-grader"
type = "stub"
behavior = "{grader_behavior}"

[paths]
chunk_store = "{tmp_path / store}"
index = "{tmp_path / index}"
""".strip()
    )
    return str(config)


def write_deck(tmp_path, n_pages=6):
    deck = tmp_path / "deck.ndjson"
    rows = []
    for page in range(1, n_pages + 1):
        rows.append({"deck_id": "HCI-01", "page_number": page,
                     "text": f"Slide {page} explains concept number {page} in depth"})
    deck.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return str(deck)


def test_cpt_schedule_prints_lr(runner):
    result = runner.invoke(main, ["cpt", "schedule", "--max-lr", "2e-5", "--warmup", "5",
                                  "--steps", "100", "--at", "5"])
    assert result.exit_code == 0, result.output
    assert float(result.output.strip()) == 2e-5


def test_cpt_schedule_at_zero(runner):
    result = runner.invoke(main, ["cpt", "schedule", "--max-lr", "2e-5", "--warmup", "5",
                                  "--steps", "100", "--at", "0"])
    assert float(result.output.strip()) == 0.0


def test_cpt_mix_writes_plan_and_manifest(runner, tmp_path):
    out = tmp_path / "mix.json"
    trainer = tmp_path / "trainer.json"
    result = runner.invoke(main, ["cpt", "mix", "--domain-tokens", "300000", "--ratio", "0.333333",
                                  "--block", "2048", "--seed", "7", "--out", str(out),
                                  "--trainer-config", str(trainer)])
    assert result.exit_code == 0, result.output
    plan = json.loads(out.read_text())
    assert plan["replay_tokens"] == round(300000 * 0.333333 / (1 - 0.333333))
    assert (tmp_path / "mix.json.manifest.json").exists()
    assert json.loads(trainer.read_text())["batch_size"] == 32


def test_cpt_split_deterministic(runner, tmp_path):
    config = write_config(tmp_path)
    deck = write_deck(tmp_path, n_pages=20)
    store = tmp_path / "chunks.ndjson"
    runner.invoke(main, ["--config", config, "ingest", "--deck", deck, "--course", "HCI:en",
                         "--out", str(store)])
    for _ in range(2):
        result = runner.invoke(main, ["cpt", "split", "--chunks", str(store), "--seed", "3",
                                      "--out-train", str(tmp_path / "train.ndjson"),
                                      "--out-validation", str(tmp_path / "val.ndjson")])
        assert result.exit_code == 0, result.output
    train_lines = (tmp_path / "train.ndjson").read_text().splitlines()
    val_lines = (tmp_path / "val.ndjson").read_text().splitlines()
    assert len(train_lines) == 18
    assert len(val_lines) == 2


def test_cpt_stop_check(runner, tmp_path):
    log = tmp_path / "ppl.ndjson"
    curve = [12, 5, 3.2, 3.05, 3.04, 3.05, 3.06, 3.06]
    log.write_text("\n".join(json.dumps({"step": 10 * i, "domain_ppl": v, "replay_ppl": 8.0})
                             for i, v in enumerate(curve)) + "\n")
    result = runner.invoke(main, ["cpt", "stop-check", "--log", str(log), "--patience", "2"])
    assert result.exit_code == 0, result.output
    decision = json.loads(result.output)
    assert decision["stop"] is True
    assert decision["best_step"] == 40
    assert decision["stop_step"] == 60


def test_merge_residual_round_trip(runner, tmp_path):
    rng = np.random.default_rng(0)
    base = Checkpoint(tensors={"w": rng.normal(size=(20, 10)).astype(np.float32)},
                      dtypes={"w": "f32"}, meta={"source_id": "base"})
    instruct = Checkpoint(tensors={"w": (base.tensors["w"] + rng.normal(scale=0.02, size=(20, 10))).astype(np.float32)},
                          dtypes={"w": "f32"}, meta={"source_id": "instruct"})
    save_checkpoint(base, str(tmp_path / "base.ntc"))
    save_checkpoint(instruct, str(tmp_path / "instruct.ntc"))
    compute = runner.invoke(main, ["merge", "residual", "compute", "-i", str(tmp_path / "instruct.ntc"),
                                   "-b", str(tmp_path / "base.ntc"), "-o", str(tmp_path / "ir.ntc")])
    assert compute.exit_code == 0, compute.output
    apply_ = runner.invoke(main, ["merge", "residual", "apply", "-b", str(tmp_path / "base.ntc"),
                                  "-r", str(tmp_path / "ir.ntc"), "-o", str(tmp_path / "out.ntc")])
    assert apply_.exit_code == 0, apply_.output
    restored = load_checkpoint(str(tmp_path / "out.ntc"))
    err = np.abs(restored.tensors["w"] - instruct.tensors["w"]).max()
    assert err / np.abs(instruct.tensors["w"]).max() <= 1e-6


def test_merge_convert_round_trip(runner, tmp_path):
    ckpt = Checkpoint(tensors={"w": np.arange(6, dtype=np.float32).reshape(2, 3)},
                      dtypes={"w": "f32"}, meta={"source_id": "x"})
    save_checkpoint(ckpt, str(tmp_path / "a.ntc"))
    out = runner.invoke(main, ["merge", "convert", "--input", str(tmp_path / "a.ntc"),
                               "--output", str(tmp_path / "a.st"), "--to", "interchange"])
    assert out.exit_code == 0, out.output
    back = runner.invoke(main, ["merge", "convert", "--input", str(tmp_path / "a.st"),
                                "--output", str(tmp_path / "b.ntc"), "--to", "container"])
    assert back.exit_code == 0, back.output
    assert np.array_equal(load_checkpoint(str(tmp_path / "b.ntc")).tensors["w"], ckpt.tensors["w"])


def test_ingest_index_ask_pipeline(runner, tmp_path):
    config = write_config(tmp_path)
    deck = write_deck(tmp_path)
    store = tmp_path / "chunks.ndjson"
    index_path = tmp_path / "index.ndjson"
    ingest = runner.invoke(main, ["--config", config, "ingest", "--deck", deck, "--course", "HCI:en",
                                  "--out", str(store)])
    assert ingest.exit_code == 0, ingest.output
    assert (tmp_path / "chunks.ndjson.manifest.json").exists()
    index = runner.invoke(main, ["--config", config, "index", "--chunks", str(store), "--out", str(index_path)])
    assert index.exit_code == 0, index.output
    ask = runner.invoke(main, ["--config", config, "ask", "--question",
                               "Which slide explains concept number 3?", "--show-sources"])
    assert ask.exit_code == 0, ask.output
    assert "concept number 3" in ask.output


def test_ingest_transcript_with_sidecar(runner, tmp_path):
    config = write_config(tmp_path)
    transcript = tmp_path / "lecture.txt"
    transcript.write_text(" ".join(f"Sentence number {i} talks about topic {i}." for i in range(40)))
    sidecar = tmp_path / "lecture.meta.json"
    sidecar.write_text(json.dumps({"course_id": "NLP", "language": "en", "kind": "transcript"}))
    store = tmp_path / "tchunks.ndjson"
    result = runner.invoke(main, ["--config", config, "ingest", "--transcript", str(transcript),
                                  "--sidecar", str(sidecar), "--max-tokens", "50", "--out", str(store)])
    assert result.exit_code == 0, result.output
    lines = store.read_text().splitlines()
    assert len(lines) > 1
    first = json.loads(lines[0])
    assert first["kind"] == "transcript_window"
    assert first["material_ref"].startswith("NLP/en/transcript/")


def test_ingest_dry_run_writes_nothing(runner, tmp_path):
    config = write_config(tmp_path)
    deck = write_deck(tmp_path)
    store = tmp_path / "dry.ndjson"
    result = runner.invoke(main, ["--config", config, "ingest", "--deck", deck, "--course", "HCI:en",
                                  "--out", str(store), "--dry-run"])
    assert result.exit_code == 0
    assert not store.exists()
    assert not (tmp_path / "dry.ndjson.manifest.json").exists()


def test_store_lock_blocks_concurrent_mutation(runner, tmp_path):
    config = write_config(tmp_path)
    deck = write_deck(tmp_path)
    store = tmp_path / "locked.ndjson"
    lock = tmp_path / "locked.ndjson.lock"
    lock.write_text("12345")
    result = runner.invoke(main, ["--config", config, "ingest", "--deck", deck, "--course", "HCI:en",
                                  "--out", str(store)])
    assert result.exit_code == 1
    assert "locked" in result.output or not store.exists()


def test_usage_error_exit_code_2(runner):
    result = runner.invoke(main, ["ingest", "--nonsense-flag"])
    assert result.exit_code == 2


def test_operational_error_exit_code_1_with_json(runner, tmp_path):
    config = write_config(tmp_path)
    result = runner.invoke(main, ["--config", config, "ask", "--question", "q"])
    assert result.exit_code == 1
    payload = json.loads(result.output.strip().splitlines()[-1])
    assert "error" in payload


def test_polish_command_with_stub(runner, tmp_path):
    config = write_config(tmp_path, generator_behavior="prefix:POLISHED ")
    transcript = tmp_path / "raw.txt"
    transcript.write_text("First sentence here. Second sentence here. Third one. Fourth one. Fifth one. Sixth one.")
    out = tmp_path / "polished.txt"
    result = runner.invoke(main, ["--config", config, "polish", "--transcript", str(transcript),
                                  "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert out.exists()
    assert "POLISHED" in out.read_text()
    assert (tmp_path / "polished.txt.raw.txt").exists()


def write_exam(tmp_path):
    exam = {
        "exam_id": "HCI-EN",
        "language": "en",
        "topic": "HCI",
        "questions": [
            {"question_id": "q1", "text": "Explain concept number 1.", "max_points": 6, "difficulty": "easy"},
            {"question_id": "q2", "text": "Explain concept number 2.", "max_points": 6, "difficulty": "difficult"},
            {"question_id": "q3", "text": "Explain concept number 3.", "max_points": 6, "difficulty": "hard"},
        ],
    }
    path = tmp_path / "exam.json"
    path.write_text(json.dumps(exam))
    return str(path)


def test_eval_run_grade_report_pipeline(runner, tmp_path):
    config = write_config(tmp_path)
    deck = write_deck(tmp_path)
    store = tmp_path / "chunks.ndjson"
    index_path = tmp_path / "index.ndjson"
    runner.invoke(main, ["--config", config, "ingest", "--deck", deck, "--course", "HCI:en", "--out", str(store)])
    runner.invoke(main, ["--config", config, "index", "--chunks", str(store), "--out", str(index_path)])
    exam = write_exam(tmp_path)
    answers = tmp_path / "answers.ndjson"
    run = runner.invoke(main, ["--config", config, "eval", "run", "--exam", exam, "--answers", str(answers)])
    assert run.exit_code == 0, run.output
    assert len(answers.read_text().splitlines()) == 3

    # idempotent rerun adds nothing
    rerun = runner.invoke(main, ["--config", config, "eval", "run", "--exam", exam, "--answers", str(answers)])
    assert rerun.exit_code == 0
    assert len(answers.read_text().splitlines()) == 3

    report_path = tmp_path / "report.json"
    graded = runner.invoke(main, ["--config", config, "eval", "grade", "--exam", exam,
                                  "--answers", str(answers), "--out", str(report_path), "--model-id", "stub"])
    assert graded.exit_code == 0, graded.output
    report = json.loads(report_path.read_text())["reports"][0]
    assert report["total_score"] == pytest.approx(30.0)  # Score: 3 of 6 everywhere

    delta = runner.invoke(main, ["--config", config, "eval", "report", "--baseline", str(report_path),
                                 "--treatment", str(report_path)])
    assert delta.exit_code == 0, delta.output
    assert "+0.00" in delta.output


def test_eval_validate_grader_cli(runner, tmp_path):
    config = write_config(tmp_path, grader_behavior="echo")
    expert = tmp_path / "expert.json"
    # echo grader: reply repeats the prompt, whose answer text ends with the
    # expert score, so the last standalone number parses to it
    rows = [
        {"question_id": f"q{i}", "question": "Q?", "max_points": 10, "difficulty": "easy",
         "answer": f"answer scoring {score}", "expert_score": score}
        for i, score in enumerate([2.0, 5.0, 9.0])
    ]
    expert.write_text(json.dumps(rows))
    result = runner.invoke(main, ["--config", config, "eval", "validate-grader", "--expert-scores", str(expert)])
    assert result.exit_code == 0, result.output
    assert json.loads(result.output)["pearson"] == pytest.approx(1.0)


def test_rerunnable_ingest_byte_identical(runner, tmp_path):
    config = write_config(tmp_path)
    deck = write_deck(tmp_path)
    store = tmp_path / "chunks.ndjson"
    runner.invoke(main, ["--config", config, "ingest", "--deck", deck, "--course", "HCI:en", "--out", str(store)])
    first = store.read_bytes()
    runner.invoke(main, ["--config", config, "ingest", "--deck", deck, "--course", "HCI:en", "--out", str(store)])
    assert store.read_bytes() == first
