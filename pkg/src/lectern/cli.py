"""Operator CLI for the full pipeline.

Exit codes: 0 success, 1 operational failure (machine-readable JSON on
stderr), 2 usage error. Mutating commands write one run manifest next to
their primary output, take explicit seeds, and support --dry-run.
"""

from __future__ import annotations

import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import click

from . import checkpoints, cpt, evalharness
from .config import load_config, make_embedder, make_generator
from .corpus import (
    CourseMaterial,
    Language,
    MaterialKind,
    build_polish_jobs,
    chunk_store_version,
    load_deck_manifest,
    load_transcript_sidecar,
    read_chunk_store,
    run_polish,
    segment_transcript,
    slide_to_chunk,
    write_chunk_store,
    PolishAborted,
)
from .index import build_index, load_index, save_index
from .manifest import write_manifest
from .rag import Mode, RagEngine
from .sentences import split_sentences
from .templates import load_templates


class OperationalError(Exception):
    """Failure that should exit 1 with structured stderr."""


def _fail(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    sys.exit(1)


@contextmanager
def _store_lock(store_path: str):
    """Advisory lock file preventing concurrent mutation of one store."""
    lock_path = f"{store_path}.lock"
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OperationalError(f"store {store_path} is locked by another process ({lock_path})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        try:
            os.remove(lock_path)
        except FileNotFoundError:
            pass


def _run(action):
    try:
        action()
    except OperationalError as exc:
        _fail("operational", str(exc))
    except (FileNotFoundError, PermissionError) as exc:
        _fail("io", str(exc))
    except PolishAborted as exc:
        _fail("polish_aborted", f"{exc}; resume_index={exc.resume_index}")
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _fail(type(exc).__name__, str(exc))


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              envvar="LECTERN_CONFIG", help="Path to the run configuration file.")
@click.pass_context
def main(ctx, config_path):
    """Course-material assistant pipeline."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path


def _config(ctx):
    return load_config(ctx.obj.get("config_path"))


# -- ingest -------------------------------------------------------------------


@main.command()
@click.option("--deck", "decks", multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="Deck manifest (NDJSON). Repeatable.")
@click.option("--course", "deck_courses", multiple=True,
              help="course_id:language for each --deck, e.g. HCI:en.")
@click.option("--transcript", "transcripts", multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="Transcript text file. Repeatable; needs a matching --sidecar.")
@click.option("--sidecar", "sidecars", multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="Metadata JSON {course_id, language, kind} for each --transcript.")
@click.option("--max-tokens", default=300, show_default=True)
@click.option("--overlap", default=0.1, show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--dry-run", is_flag=True)
@click.pass_context
def ingest(ctx, decks, deck_courses, transcripts, sidecars, max_tokens, overlap, out, dry_run):
    """Chunk deck manifests and transcripts into a chunk store."""

    def action():
        cfg = _config(ctx)
        if len(decks) != len(deck_courses):
            raise click.UsageError("each --deck needs a matching --course course_id:language")
        if len(transcripts) != len(sidecars):
            raise click.UsageError("each --transcript needs a matching --sidecar")
        chunks = []
        for deck_path, course_spec in zip(decks, deck_courses):
            course_id, _, language = course_spec.partition(":")
            material = CourseMaterial(
                course_id=course_id,
                language=Language(language or "en"),
                kind=MaterialKind.SLIDE_DECK,
                source_path=deck_path,
            )
            for page in load_deck_manifest(deck_path):
                chunks.append(slide_to_chunk(page, material))
        for transcript_path, sidecar_path in zip(transcripts, sidecars):
            meta = load_transcript_sidecar(sidecar_path)
            material = CourseMaterial(
                course_id=meta["course_id"],
                language=Language(meta["language"]),
                kind=MaterialKind(meta["kind"]),
                source_path=transcript_path,
            )
            text = Path(transcript_path).read_text(encoding="utf-8")
            chunks.extend(segment_transcript(text, max_tokens, overlap, material=material))
        if dry_run:
            click.echo(f"dry-run: would write {len(chunks)} chunks to {out}")
            return
        with _store_lock(out):
            write_chunk_store(chunks, out)
        write_manifest("ingest", [out], config_fingerprint=cfg.fingerprint(),
                       extra={"chunks": len(chunks), "max_tokens": max_tokens, "overlap": overlap})
        click.echo(f"wrote {len(chunks)} chunks to {out}")

    _run(action)


# -- polish -------------------------------------------------------------------


@main.command()
@click.option("--transcript", "transcript_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--state", "state_path", type=click.Path(dir_okay=False), default=None,
              help="Cursor file for resuming an aborted run (default <out>.state.json).")
@click.option("--dry-run", is_flag=True)
@click.pass_context
def polish(ctx, transcript_path, out, state_path, dry_run):
    """Polish a raw transcript window by window through the generator."""

    def action():
        cfg = _config(ctx)
        raw = Path(transcript_path).read_text(encoding="utf-8")
        sentences = split_sentences(raw)
        templates = load_templates(cfg.rag.template_version, root=cfg.template_root or None)
        jobs = build_polish_jobs(sentences, templates)
        if dry_run:
            click.echo(f"dry-run: {len(jobs)} polish jobs for {len(sentences)} sentences")
            return
        state_file = Path(state_path or f"{out}.state.json")
        completed = []
        if state_file.exists():
            completed = json.loads(state_file.read_text(encoding="utf-8")).get("completed", [])
        generator = make_generator(cfg.generator, log_path=cfg.run_log or None)
        try:
            result = run_polish(jobs, generator, completed=completed)
        except PolishAborted as exc:
            state_file.write_text(
                json.dumps({"completed": exc.completed, "resume_index": exc.resume_index}, ensure_ascii=False),
                encoding="utf-8",
            )
            raise
        Path(out).write_text(result.text, encoding="utf-8")
        raw_copy = Path(f"{out}.raw.txt")
        raw_copy.write_text(raw, encoding="utf-8")
        if state_file.exists():
            state_file.unlink()
        write_manifest("polish", [out], config_fingerprint=cfg.fingerprint(),
                       template_version=templates.version, endpoint_ids=[cfg.generator.id],
                       extra={"jobs": len(jobs)})
        click.echo(f"polished {len(jobs)} windows to {out}")

    _run(action)


# -- index --------------------------------------------------------------------


@main.command(name="index")
@click.option("--chunks", "chunks_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--dry-run", is_flag=True)
@click.pass_context
def index_cmd(ctx, chunks_path, out, dry_run):
    """Embed a chunk store into a persistent vector index."""

    def action():
        cfg = _config(ctx)
        chunks = read_chunk_store(chunks_path)
        if dry_run:
            click.echo(f"dry-run: would embed {len(chunks)} chunks with {cfg.embedder.id}")
            return
        provider = make_embedder(cfg.embedder)
        vector_index = build_index(chunks, provider, store_version=chunk_store_version(chunks_path))
        save_index(vector_index, out)
        write_manifest("index", [out], config_fingerprint=cfg.fingerprint(),
                       endpoint_ids=[cfg.embedder.id],
                       extra={"records": len(vector_index.records), "fingerprint": vector_index.fingerprint})
        click.echo(f"indexed {len(vector_index.records)} chunks -> {out} (fingerprint {vector_index.fingerprint})")

    _run(action)


def _build_engine(cfg, mode=None, k=None):
    chunks = read_chunk_store(cfg.chunk_store)
    vector_index = load_index(cfg.index_path)
    embedder = make_embedder(cfg.embedder)
    generator = make_generator(cfg.generator, log_path=cfg.run_log or None)
    rag_cfg = cfg.rag
    if mode is not None or k is not None:
        from dataclasses import replace

        rag_cfg = replace(cfg.rag, mode=mode or cfg.rag.mode, k=k or cfg.rag.k)
    templates = load_templates(rag_cfg.template_version, root=cfg.template_root or None)
    return RagEngine(
        rag_cfg, vector_index, chunks, embedder, generator,
        templates=templates, run_log_path=cfg.run_log or None,
        config_fingerprint=cfg.fingerprint(),
    )


# -- ask ----------------------------------------------------------------------


@main.command()
@click.option("--question", required=True)
@click.option("--mode", "mode_name", default=None, help="vanilla | text | multimodal")
@click.option("--k", type=int, default=None)
@click.option("--show-sources", is_flag=True)
@click.pass_context
def ask(ctx, question, mode_name, k, show_sources):
    """One-shot question against the configured corpus."""

    def action():
        cfg = _config(ctx)
        mode = Mode.parse(mode_name) if mode_name else None
        engine = _build_engine(cfg, mode=mode, k=k)
        result = engine.answer(question)
        click.echo(result.answer_text)
        if show_sources:
            for entry in engine.sources(result):
                location = f"p.{entry['page_number']}" if "page_number" in entry else entry["kind"]
                click.echo(f"  [{entry['score']:.4f}] {entry['chunk_id']} ({location})")

    _run(action)


# -- eval ---------------------------------------------------------------------


@main.group()
def eval():
    """Exam evaluation: answer, grade, report, validate the grader."""


@eval.command(name="run")
@click.option("--exam", "exam_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--answers", "answers_path", required=True, type=click.Path(dir_okay=False))
@click.option("--mode", "mode_name", default=None)
@click.option("--k", type=int, default=None)
@click.option("--force", is_flag=True, help="Re-answer questions already present in the answers file.")
@click.option("--workers", default=4, show_default=True, type=int)
@click.option("--dry-run", is_flag=True)
@click.pass_context
def eval_run(ctx, exam_path, answers_path, mode_name, k, force, workers, dry_run):
    """Run every exam question through the assistant and persist answers."""

    def action():
        cfg = _config(ctx)
        exam = evalharness.load_exam(exam_path)
        if dry_run:
            click.echo(f"dry-run: would answer {len(exam)} questions")
            return
        mode = Mode.parse(mode_name) if mode_name else None
        engine = _build_engine(cfg, mode=mode, k=k)
        records = evalharness.run_exam(exam, engine, answers_path, force=force, workers=workers)
        failures = [r.question_id for r in records if r.failed]
        write_manifest("eval run", [answers_path], config_fingerprint=cfg.fingerprint(),
                       template_version=engine.templates.version, endpoint_ids=[cfg.generator.id],
                       extra={"questions": len(exam), "failures": failures})
        click.echo(f"answered {len(records) - len(failures)}/{len(exam)} questions"
                   + (f", failures: {failures}" if failures else ""))

    _run(action)


@eval.command(name="grade")
@click.option("--exam", "exam_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--answers", "answers_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "report_path", required=True, type=click.Path(dir_okay=False))
@click.option("--model-id", default="", help="Model label recorded in the report.")
@click.option("--workers", default=4, show_default=True, type=int)
@click.option("--dry-run", is_flag=True)
@click.pass_context
def eval_grade(ctx, exam_path, answers_path, report_path, model_id, workers, dry_run):
    """Grade persisted answers with the judge endpoint and write a report."""

    def action():
        cfg = _config(ctx)
        exam = evalharness.load_exam(exam_path)
        answers = list(evalharness._load_answer_records(answers_path).values())
        if dry_run:
            click.echo(f"dry-run: would grade {len(answers)} answers against {len(exam)} questions")
            return
        templates = load_templates(cfg.rag.template_version, root=cfg.template_root or None)
        grader = make_generator(cfg.grader, log_path=cfg.run_log or None)
        graded, flagged = evalharness.grade_answers(exam, answers, grader, templates, workers=workers)
        report = evalharness.aggregate_exam(
            graded, exam, config_fingerprint=cfg.fingerprint(),
            model_id=model_id or cfg.generator.id,
        )
        report.flagged = sorted(set(report.flagged) | set(flagged))
        evalharness.save_reports([report], report_path)
        write_manifest("eval grade", [report_path], config_fingerprint=cfg.fingerprint(),
                       template_version=templates.version, endpoint_ids=[cfg.grader.id],
                       extra={"graded": len(graded), "flagged": report.flagged})
        click.echo(f"total {report.total_score:.2f}/60, {len(graded)} graded, {len(report.flagged)} flagged")

    _run(action)


@eval.command(name="report")
@click.option("--baseline", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--treatment", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--json-out", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def eval_report(ctx, baseline, treatment, json_out):
    """Delta tables between a baseline and a treatment run."""

    def action():
        base = evalharness.load_reports(baseline)
        treat = evalharness.load_reports(treatment)
        delta = evalharness.compare_runs(base, treat)
        click.echo(evalharness.render_delta_report(delta))
        if json_out:
            with open(json_out, "w", encoding="utf-8") as fh:
                json.dump(delta.to_json(), fh, indent=2, sort_keys=True)
                fh.write("\n")

    _run(action)


@eval.command(name="validate-grader")
@click.option("--expert-scores", "expert_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--residuals", "residuals_path", type=click.Path(dir_okay=False), default=None)
@click.pass_context
def eval_validate_grader(ctx, expert_path, residuals_path):
    """Pearson correlation of the judge against expert scores."""

    def action():
        cfg = _config(ctx)
        pregraded = evalharness.load_expert_scores(expert_path)
        templates = load_templates(cfg.rag.template_version, root=cfg.template_root or None)
        grader = make_generator(cfg.grader, log_path=cfg.run_log or None)
        outcome = evalharness.validate_grader(pregraded, grader, templates, residuals_path=residuals_path)
        click.echo(json.dumps({"pearson": outcome["pearson"], "count": outcome["count"]}))

    _run(action)


# -- merge (instruction residuals) ---------------------------------------------


@main.group()
def merge():
    """Checkpoint weight arithmetic."""


@merge.group()
def residual():
    """Instruction-residual compute / apply."""


@residual.command(name="compute")
@click.option("-i", "--instruct", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-b", "--base", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", required=True, type=click.Path(dir_okay=False))
@click.option("--dry-run", is_flag=True)
def residual_compute(instruct, base, out, dry_run):
    """Residual = instruct - base, saved as a checkpoint container."""

    def action():
        instruct_ckpt = checkpoints.load_checkpoint(instruct)
        base_ckpt = checkpoints.load_checkpoint(base)
        if dry_run:
            click.echo(f"dry-run: {len(instruct_ckpt.tensors)} tensors aligned")
            return
        ir = cpt.compute_residual(instruct_ckpt, base_ckpt)
        checkpoints.save_checkpoint(ir.as_checkpoint(), out)
        write_manifest("merge residual compute", [out],
                       extra={"tensors": len(ir.tensors), "instruct": instruct, "base": base})
        click.echo(f"residual over {len(ir.tensors)} tensors -> {out}")

    _run(action)


@residual.command(name="apply")
@click.option("-b", "--base-cpt", "base_cpt_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-r", "--residual", "residual_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", required=True, type=click.Path(dir_okay=False))
@click.option("--dry-run", is_flag=True)
def residual_apply(base_cpt_path, residual_path, out, dry_run):
    """Restored = base_cpt + residual."""

    def action():
        base_cpt = checkpoints.load_checkpoint(base_cpt_path)
        ir = checkpoints.Residual.from_checkpoint(checkpoints.load_checkpoint(residual_path))
        if dry_run:
            click.echo(f"dry-run: {len(base_cpt.tensors)} tensors aligned")
            return
        restored = cpt.apply_residual(base_cpt, ir)
        checkpoints.save_checkpoint(restored, out)
        write_manifest("merge residual apply", [out],
                       extra={"tensors": len(restored.tensors), "base_cpt": base_cpt_path, "residual": residual_path})
        click.echo(f"restored checkpoint -> {out}")

    _run(action)


@merge.command(name="convert")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--output", "output_path", required=True, type=click.Path(dir_okay=False))
@click.option("--to", "direction", type=click.Choice(["interchange", "container"]), required=True)
@click.option("--dry-run", is_flag=True)
def merge_convert(input_path, output_path, direction, dry_run):
    """Convert between the container and the named-tensor interchange format."""

    def action():
        if direction == "interchange":
            ckpt = checkpoints.load_checkpoint(input_path)
            if dry_run:
                click.echo(f"dry-run: {len(ckpt.tensors)} tensors readable")
                return
            checkpoints.export_interchange(ckpt, output_path)
        else:
            ckpt = checkpoints.import_interchange(input_path)
            if dry_run:
                click.echo(f"dry-run: {len(ckpt.tensors)} tensors readable")
                return
            checkpoints.save_checkpoint(ckpt, output_path)
        write_manifest("merge convert", [output_path], extra={"direction": direction, "input": input_path})
        click.echo(f"converted {input_path} -> {output_path} ({direction})")

    _run(action)


# -- cpt ------------------------------------------------------------------------


@main.group(name="cpt")
def cpt_group():
    """Continual-pre-training support: mix, split, schedule, stop-check."""


@cpt_group.command(name="mix")
@click.option("--domain-tokens", required=True, type=int)
@click.option("--ratio", required=True, type=float)
@click.option("--block", "block_tokens", default=2048, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--trainer-config", "trainer_config_path", type=click.Path(dir_okay=False), default=None,
              help="Also emit the external trainer config JSON.")
@click.option("--dry-run", is_flag=True)
def cpt_mix(domain_tokens, ratio, block_tokens, seed, out, trainer_config_path, dry_run):
    """Replay-mix plan: sizes the replay corpus and interleaves blocks."""

    def action():
        plan = cpt.plan_replay_mix(domain_tokens, ratio, block_tokens, seed)
        if dry_run:
            click.echo(f"dry-run: replay_tokens={plan.replay_tokens}, blocks={len(plan.schedule)}")
            return
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(plan.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        outputs = [out]
        if trainer_config_path:
            cpt.write_trainer_config(trainer_config_path, cpt.TrainerConfig(), mix=plan)
            outputs.append(trainer_config_path)
        write_manifest("cpt mix", outputs, extra={"replay_tokens": plan.replay_tokens, "seed": seed})
        click.echo(f"replay_tokens={plan.replay_tokens} ({len(plan.schedule)} blocks) -> {out}")

    _run(action)


@cpt_group.command(name="split")
@click.option("--chunks", "chunks_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--fraction", default=0.1, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out-train", required=True, type=click.Path(dir_okay=False))
@click.option("--out-validation", required=True, type=click.Path(dir_okay=False))
@click.option("--dry-run", is_flag=True)
def cpt_split(chunks_path, fraction, seed, out_train, out_validation, dry_run):
    """Deterministic train/validation split of a chunk store."""

    def action():
        chunks = read_chunk_store(chunks_path)
        train, validation = cpt.split_train_validation(chunks, validation_fraction=fraction, seed=seed)
        if dry_run:
            click.echo(f"dry-run: {len(train)} train / {len(validation)} validation")
            return
        write_chunk_store(train, out_train)
        write_chunk_store(validation, out_validation)
        write_manifest("cpt split", [out_train, out_validation],
                       extra={"train": len(train), "validation": len(validation), "seed": seed})
        click.echo(f"{len(train)} train / {len(validation)} validation")

    _run(action)


@cpt_group.command(name="schedule")
@click.option("--max-lr", default=2e-5, show_default=True, type=float)
@click.option("--min-lr", default=0.0, show_default=True, type=float)
@click.option("--warmup", default=5, show_default=True, type=int)
@click.option("--steps", "total_steps", required=True, type=int)
@click.option("--at", "at_step", required=True, type=int)
def cpt_schedule(max_lr, min_lr, warmup, total_steps, at_step):
    """Learning rate at one step of the cosine schedule."""

    def action():
        schedule = cpt.LrSchedule(total_steps=total_steps, max_lr=max_lr, warmup_steps=warmup, min_lr=min_lr)
        click.echo(repr(cpt.lr_at(schedule, at_step)))

    _run(action)


@cpt_group.command(name="stop-check")
@click.option("--log", "log_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--patience", default=2, show_default=True, type=int)
@click.option("--threshold", default=1e-3, show_default=True, type=float)
def cpt_stop_check(log_path, patience, threshold):
    """Early-stopping decision from a perplexity log."""

    def action():
        rows = cpt.read_perplexity_log(log_path)
        if not rows:
            raise OperationalError(f"perplexity log {log_path} is empty")
        decision = cpt.early_stop([r["domain_ppl"] for r in rows], patience=patience, rel_threshold=threshold)
        payload = {
            "stop": decision.stop,
            "best_step": rows[decision.best_step]["step"],
            "stop_step": rows[decision.stop_step]["step"] if decision.stop_step is not None else None,
            "evaluations": len(rows),
        }
        click.echo(json.dumps(payload, sort_keys=True))

    _run(action)


# -- serve -----------------------------------------------------------------------


@main.command()
@click.option("--host", default=None)
@click.option("--port", default=None, type=int)
@click.pass_context
def serve(ctx, host, port):
    """Run the HTTP service over the configured corpus."""

    def action():
        import uvicorn

        from .service import create_app

        cfg = _config(ctx)
        app = create_app(cfg)
        uvicorn.run(app, host=host or cfg.host, port=port or cfg.port, log_level="info")

    _run(action)


if __name__ == "__main__":
    main()
