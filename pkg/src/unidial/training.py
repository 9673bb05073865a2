"""Adam with linear warmup/decay, resumable single-process training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .batching import DEFAULT_LIMITS, DEFAULT_TOKEN_BUDGET, Batch, group_by_length, pack, padding_ratio
from .corpus import DialogueSample
from .model import (ModelConfig, ModelParameters, backward, forward, init_params, load_checkpoint,
                    nll_loss, save_checkpoint)
from .tokenizer import Vocabulary

logger = logging.getLogger(__name__)


@dataclass
class Schedule:
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 2000

    def __post_init__(self):
        if self.warmup_steps < 0 or self.total_steps <= 0:
            raise ValueError("warmup_steps must be >= 0 and total_steps > 0")
        if self.warmup_steps >= self.total_steps:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) must be < total_steps ({self.total_steps})")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")


def lr_at(step: int, sched: Schedule) -> float:
    """Linear 0 -> peak over the warmup, then linear peak -> 0 at total_steps."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < sched.warmup_steps:
        return sched.peak_lr * step / sched.warmup_steps
    if step >= sched.total_steps:
        return 0.0
    return sched.peak_lr * (sched.total_steps - step) / (sched.total_steps - sched.warmup_steps)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    schedule: Schedule = field(default_factory=Schedule)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: Optional[float] = 1.0
    skipped: int = 0

    @classmethod
    def for_params(cls, params: ModelParameters, **kw) -> "OptimizerState":
        return cls(m={k: np.zeros_like(v) for k, v in params.tensors.items()},
                   v={k: np.zeros_like(v) for k, v in params.tensors.items()}, **kw)

    def hyper(self) -> dict:
        return dict(step=self.step, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                    grad_clip=self.grad_clip, skipped=self.skipped, schedule=asdict(self.schedule))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def adam_step(params: ModelParameters, grads: dict[str, np.ndarray], state: OptimizerState,
              lr: Optional[float] = None) -> bool:
    """Update ``params`` in place; returns False when the step was skipped for non-finite grads.

    ``lr`` overrides the schedule for this step.
    """
    for k, p in params.tensors.items():
        if k not in grads or grads[k].shape != p.shape:
            got = None if k not in grads else grads[k].shape
            raise ValueError(f"gradient shape mismatch for {k}: expected {p.shape}, got {got}")
    norm = global_norm(grads)
    state.step += 1
    if not math.isfinite(norm):
        state.skipped += 1
        logger.warning("non-finite gradients at step %d; update skipped", state.step)
        return False
    if lr is None:
        lr = lr_at(state.step, state.schedule)
    clip = 1.0
    if state.grad_clip is not None and norm > state.grad_clip:
        clip = state.grad_clip / norm
    b1, b2, t = state.beta1, state.beta2, state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.tensors.items():
        g = grads[k] * clip if clip != 1.0 else grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    params.version += 1
    return True


@dataclass
class TrainRunConfig:
    token_budget: int = DEFAULT_TOKEN_BUDGET
    steps: Optional[int] = 2000
    total_tokens: Optional[int] = None
    eval_interval: int = 100
    checkpoint_interval: int = 500
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    limits: tuple = DEFAULT_LIMITS
    peak_lr: float = 1e-3
    warmup_steps: int = 100
    grad_clip: Optional[float] = 1.0

    def __post_init__(self):
        self.limits = tuple(self.limits)
        for name in ("token_budget", "eval_interval", "checkpoint_interval"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.steps is None and self.total_tokens is None:
            raise ValueError("one of steps or total_tokens is required")
        if self.steps is not None and self.steps <= 0:
            raise ValueError("steps must be positive")
        if self.total_tokens is not None and self.total_tokens < self.token_budget:
            raise ValueError("total_tokens must cover at least one batch")

    @property
    def n_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return self.total_tokens // self.token_budget

    def schedule(self) -> Schedule:
        return Schedule(self.peak_lr, self.warmup_steps, self.n_steps)


@dataclass
class TrainResult:
    params: ModelParameters
    state: OptimizerState
    metrics: list[dict]
    checkpoint: Optional[str] = None


METRIC_FIELDS = ("step", "lr", "loss", "tokens_per_s", "pad_ratio")


def batch_order(n_batches: int, step: int, seed: int) -> int:
    """Batch index used at (0-based) ``step``: a fresh permutation each epoch."""
    epoch, k = divmod(step, n_batches)
    perm = np.random.default_rng([seed, epoch]).permutation(n_batches)
    return int(perm[k])


def make_batches(samples: Sequence[DialogueSample], vocab: Vocabulary, run: TrainRunConfig) -> list[Batch]:
    packed = []
    for s in samples:
        try:
            packed.append(pack(s, vocab, run.limits))
        except ValueError as exc:
            logger.debug("skipping sample: %s", exc)
    if not packed:
        raise ValueError("empty corpus: no sample could be packed")
    return group_by_length(packed, run.token_budget)


def evaluate(batches: Sequence[Batch], params: ModelParameters) -> float:
    """Token-weighted mean NLL over all batches."""
    total, count = 0.0, 0
    for b in batches:
        loss, _ = nll_loss(forward(b, params), b)
        total += loss * b.n_targets
        count += b.n_targets
    return total / count


def checkpoint_path(directory, step: int) -> str:
    return os.path.join(directory, f"step_{step:07d}.ckpt")


def save_training_state(path, params: ModelParameters, state: OptimizerState, run: TrainRunConfig):
    extra = {f"adam.m.{k}": v for k, v in state.m.items()}
    extra.update({f"adam.v.{k}": v for k, v in state.v.items()})
    save_checkpoint(path, params, {"optimizer": state.hyper(), "run": asdict(run)}, extra)


def load_training_state(path):
    params, header, extra = load_checkpoint(path)
    opt = dict(header["optimizer"])
    sched = Schedule(**opt.pop("schedule"))
    state = OptimizerState(
        m={k: extra[f"adam.m.{k}"] for k in params.tensors},
        v={k: extra[f"adam.v.{k}"] for k in params.tensors},
        schedule=sched, **opt,
    )
    return params, state, header


def train(run: TrainRunConfig, corpus: Sequence[DialogueSample], vocab: Vocabulary, config: ModelConfig,
          resume_from: Optional[str] = None, metrics_path: Optional[str] = None,
          batches: Optional[list[Batch]] = None) -> TrainResult:
    """Minimize response NLL over length-grouped batches.

    Step ``s`` always draws the same batch (per-epoch permutation seeded by
    ``run.seed``), so a run resumed from a step-k checkpoint continues the
    unbroken run's trajectory.
    """
    if not corpus and batches is None:
        raise ValueError("empty corpus")
    if run.checkpoint_dir:
        os.makedirs(run.checkpoint_dir, exist_ok=True)
        if not os.access(run.checkpoint_dir, os.W_OK):
            raise PermissionError(f"checkpoint directory {run.checkpoint_dir} is not writable")
    if batches is None:
        batches = make_batches(corpus, vocab, run)
    if config.vocab_size < len(vocab):
        raise ValueError(f"model vocab_size {config.vocab_size} is smaller than the vocabulary ({len(vocab)})")

    if resume_from:
        params, state, _ = load_training_state(resume_from)
        logger.info("resumed from %s at step %d", resume_from, state.step)
    else:
        params = init_params(config, run.seed)
        state = OptimizerState.for_params(params, schedule=run.schedule(), grad_clip=run.grad_clip)

    metrics: list[dict] = []
    writer = None
    fh = None
    if metrics_path:
        fresh = not (resume_from and os.path.exists(metrics_path))
        fh = open(metrics_path, "w" if fresh else "a", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if fresh:
            writer.writeheader()
    last_ckpt = None
    try:
        while state.step < run.n_steps:
            step = state.step
            batch = batches[batch_order(len(batches), step, run.seed)]
            t0 = time.perf_counter()
            trace = forward(batch, params)
            loss, _ = nll_loss(trace, batch)
            grads = backward(trace, batch, params)
            adam_step(params, grads, state)
            dt = time.perf_counter() - t0
            row = {"step": state.step, "lr": lr_at(state.step, state.schedule), "loss": loss,
                   "tokens_per_s": (batch.token_ids.size - batch.pad_count) / max(dt, 1e-9),
                   "pad_ratio": batch.pad_ratio}
            metrics.append(row)
            if writer:
                writer.writerow(row)
            if state.step % run.eval_interval == 0 or state.step == run.n_steps:
                logger.info("step %d lr %.3g loss %.4f", state.step, row["lr"], loss)
            if run.checkpoint_dir and (state.step % run.checkpoint_interval == 0 or state.step == run.n_steps):
                last_ckpt = checkpoint_path(run.checkpoint_dir, state.step)
                save_training_state(last_ckpt, params, state, run)
    finally:
        if fh:
            fh.close()
    return TrainResult(params, state, metrics, last_ckpt)


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
