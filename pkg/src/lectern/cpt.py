"""Continual-pre-training support math.

Instruction-residual checkpoint arithmetic, replay-ratio corpus mixing,
train/validation splitting, the cosine learning-rate schedule with linear
warm-up, perplexity, and the early-stopping rule on validation domain
perplexity. Gradient training itself is delegated to an external trainer;
this module emits its config and consumes its perplexity logs.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .checkpoints import Checkpoint, Residual


class TensorMismatchError(ValueError):
    """Operand checkpoints disagree in names, shapes or dtypes."""


def _check_aligned(left: Checkpoint, right: Checkpoint, op: str) -> None:
    left_names = set(left.tensors)
    right_names = set(right.tensors)
    if left_names != right_names:
        diff = sorted(left_names ^ right_names)
        raise TensorMismatchError(f"{op}: tensor name sets differ, symmetric difference {diff}")
    for name in sorted(left_names):
        a, b = left.tensors[name], right.tensors[name]
        if a.shape != b.shape:
            raise TensorMismatchError(f"{op}: tensor {name!r} shape mismatch {a.shape} vs {b.shape}")
        if left.dtypes[name] != right.dtypes[name]:
            raise TensorMismatchError(
                f"{op}: tensor {name!r} dtype mismatch {left.dtypes[name]} vs {right.dtypes[name]}"
            )


def compute_residual(instruct: Checkpoint, base: Checkpoint) -> Residual:
    """Instruction residual: elementwise instruct - base per tensor."""
    _check_aligned(instruct, base, "compute_residual")
    tensors = {}
    for name in instruct.tensors:
        a = instruct.tensors[name].astype(np.float64)
        b = base.tensors[name].astype(np.float64)
        tensors[name] = (a - b).astype(instruct.tensors[name].dtype)
    return Residual(
        tensors=tensors,
        dtypes=dict(instruct.dtypes),
        provenance={"instruct_id": instruct.source_id, "base_id": base.source_id},
    )


def apply_residual(base_cpt: Checkpoint, ir: Residual) -> Checkpoint:
    """Restore instruction following: base_cpt + residual, accumulated in
    float64 and stored back in the source dtype."""
    residual_ckpt = Checkpoint(tensors=dict(ir.tensors), dtypes=dict(ir.dtypes), meta={"source_id": "residual"})
    _check_aligned(base_cpt, residual_ckpt, "apply_residual")
    tensors = {}
    for name in base_cpt.tensors:
        acc = base_cpt.tensors[name].astype(np.float64) + ir.tensors[name].astype(np.float64)
        tensors[name] = acc.astype(base_cpt.tensors[name].dtype)
    meta = {
        "source_id": f"{base_cpt.source_id}+ir",
        "base_cpt_id": base_cpt.source_id,
        "instruct_id": ir.provenance.get("instruct_id", ""),
        "base_id": ir.provenance.get("base_id", ""),
    }
    return Checkpoint(tensors=tensors, dtypes=dict(base_cpt.dtypes), meta=meta)


# -- replay mixing ------------------------------------------------------------


@dataclass
class MixPlan:
    domain_tokens: int
    replay_tokens: int
    replay_ratio: float
    block_tokens: int
    seed: int
    schedule: list[str] = field(default_factory=list)  # "domain" / "replay" tags

    def to_json(self) -> dict:
        return {
            "domain_tokens": self.domain_tokens,
            "replay_tokens": self.replay_tokens,
            "replay_ratio": self.replay_ratio,
            "block_tokens": self.block_tokens,
            "seed": self.seed,
            "schedule": self.schedule,
        }


def plan_replay_mix(domain_tokens: int, replay_ratio: float, block_tokens: int, seed: int) -> MixPlan:
    """Size the replay corpus and lay out an interleaved block schedule.

    replay_tokens = round(domain * ratio / (1 - ratio)), so the replay
    share of all training tokens equals the ratio. Blocks are shuffled
    with the given seed, then repaired so no three consecutive blocks are
    all replay (keeps domain text flowing through every window).
    """
    if domain_tokens <= 0:
        raise ValueError("domain_tokens must be > 0")
    if not 0 <= replay_ratio < 1:
        raise ValueError("replay_ratio must be in [0, 1)")
    if block_tokens <= 0:
        raise ValueError("block_tokens must be > 0")
    replay_tokens = int(round(domain_tokens * replay_ratio / (1.0 - replay_ratio)))
    n_domain = math.ceil(domain_tokens / block_tokens)
    n_replay = math.ceil(replay_tokens / block_tokens) if replay_tokens else 0
    if n_replay > 2 * (n_domain + 1):
        raise ValueError(
            f"cannot avoid 3 consecutive replay blocks with {n_replay} replay vs {n_domain} domain blocks"
        )
    return MixPlan(
        domain_tokens=domain_tokens,
        replay_tokens=replay_tokens,
        replay_ratio=replay_ratio,
        block_tokens=block_tokens,
        seed=seed,
        schedule=_interleave(n_domain, n_replay, random.Random(seed)),
    )


def _interleave(n_domain: int, n_replay: int, rng: random.Random) -> list[str]:
    """Scatter replay blocks into the gaps around domain blocks, at most
    two per gap, so a replay run can never reach length three."""
    gaps = n_domain + 1
    base, remainder = divmod(n_replay, gaps)  # base <= 2 by the feasibility check
    gap_loads = [base] * gaps
    for gap in rng.sample(range(gaps), remainder):
        gap_loads[gap] += 1
    schedule: list[str] = []
    for idx in range(n_domain):
        schedule.extend(["replay"] * gap_loads[idx])
        schedule.append("domain")
    schedule.extend(["replay"] * gap_loads[n_domain])
    return schedule


# -- train/validation split ----------------------------------------------------


def split_train_validation(chunks: Sequence, validation_fraction: float = 0.1, seed: int = 0) -> tuple[list, list]:
    """Deterministic seeded shuffle split; validation gets
    round(fraction * n) items, at least one. Disjoint and covering."""
    n = len(chunks)
    if n < 2:
        raise ValueError("need at least 2 chunks to split")
    if not 0 < validation_fraction < 1:
        raise ValueError("validation_fraction must be in (0, 1)")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_validation = max(1, int(math.floor(validation_fraction * n + 0.5)))
    n_validation = min(n_validation, n - 1)
    validation_idx = set(order[:n_validation])
    train = [chunks[i] for i in range(n) if i not in validation_idx]
    validation = [chunks[i] for i in range(n) if i in validation_idx]
    return train, validation


# -- learning-rate schedule ----------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    total_steps: int
    max_lr: float = 2e-5
    warmup_steps: int = 5
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.min_lr < self.max_lr:
            raise ValueError("need 0 <= min_lr < max_lr")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warm-up from 0 to max_lr, then cosine decay to min_lr."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.max_lr * step / schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.min_lr + 0.5 * (schedule.max_lr - schedule.min_lr) * (1.0 + math.cos(math.pi * progress))


# -- perplexity and early stopping ----------------------------------------------


def perplexity(token_nlls: Sequence[float]) -> float:
    """exp(mean negative log-likelihood per token)."""
    if len(token_nlls) == 0:
        raise ValueError("perplexity needs at least one token loss")
    values = [float(v) for v in token_nlls]
    if any(not math.isfinite(v) for v in values):
        raise ValueError("perplexity needs finite token losses")
    return math.exp(math.fsum(values) / len(values))


@dataclass
class EarlyStopDecision:
    stop: bool
    best_step: int
    stop_step: Optional[int] = None


def early_stop(
    domain_ppl: Sequence[float],
    patience: int = 2,
    rel_threshold: float = 1e-3,
) -> EarlyStopDecision:
    """Stop once validation domain perplexity ceases to improve.

    An evaluation improves when it beats the best seen value by more than
    ``rel_threshold`` relative. After ``patience`` consecutive
    non-improving evaluations the decision is to stop, reporting the step
    of the best value. Steps are indices into the evaluation sequence.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    best_value = math.inf
    best_step = 0
    streak = 0
    for step, value in enumerate(domain_ppl):
        if value < best_value * (1.0 - rel_threshold):
            best_value = float(value)
            best_step = step
            streak = 0
        else:
            streak += 1
            if streak >= patience:
                return EarlyStopDecision(stop=True, best_step=best_step, stop_step=step)
    return EarlyStopDecision(stop=False, best_step=best_step)


def read_perplexity_log(path: str) -> list[dict]:
    """Perplexity log: newline-delimited JSON {step, domain_ppl, replay_ppl}."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    rows.sort(key=lambda r: r["step"])
    return rows


# -- trainer configuration -------------------------------------------------------


@dataclass(frozen=True)
class TrainerConfig:
    """Hyperparameters handed to the external training stack."""

    batch_size: int = 32
    max_seq_len: int = 2048
    weight_decay: float = 0.1
    max_epochs: int = 15
    validation_fraction: float = 0.1
    lr_max: float = 2e-5
    lr_min: float = 0.0
    warmup_steps: int = 5

    def to_json(self, mix: Optional[MixPlan] = None) -> dict:
        payload = {
            "batch_size": self.batch_size,
            "max_seq_len": self.max_seq_len,
            "weight_decay": self.weight_decay,
            "max_epochs": self.max_epochs,
            "train_validation_split": [1.0 - self.validation_fraction, self.validation_fraction],
            "lr_schedule": {
                "kind": "cosine_with_warmup",
                "max_lr": self.lr_max,
                "min_lr": self.lr_min,
                "warmup_steps": self.warmup_steps,
            },
        }
        if mix is not None:
            payload["replay_mix"] = mix.to_json()
        return payload


def write_trainer_config(path: str, config: TrainerConfig, mix: Optional[MixPlan] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_json(mix), fh, indent=2, sort_keys=True)
        fh.write("\n")
