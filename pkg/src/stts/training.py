"""Training loop, Adam, metrics CSV and the k-sweep evaluation."""

from __future__ import annotations

import csv
import math
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .baselines import foreground_retention
from .model import STTSModel, forward, score_only
from .synthetic import Dataset

log = logging.getLogger(__name__)

METRICS_SCHEMA = "# schema=stts-train-metrics/1"
METRICS_COLUMNS = ["step", "task_loss", "sim_loss", "total", "retained_ratio", "wallclock"]
EVAL_SCHEMA = "# schema=stts-eval/1"
EVAL_COLUMNS = ["mode", "k", "accuracy", "foreground_retention"]


class TrainingError(RuntimeError):
    pass


class Adam:
    def __init__(self, params: dict[str, nx.Tensor], lrs: dict[str, float],
                 betas=(0.9, 0.999), eps: float = 1e-8, clip: float | None = 1.0):
        self.params = params
        self.lrs = lrs
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items() if k in lrs}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items() if k in lrs}

    def step(self, grads: dict[str, np.ndarray]) -> float:
        """Apply one update; returns the pre-clip global gradient norm."""
        names = [k for k in self.lrs if k in grads]
        norm = float(np.sqrt(sum(float((grads[k] ** 2).sum()) for k in names)))
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / norm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in names:
            g = grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = self.lrs[k] * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p = self.params[k]
            p.data = (p.data - update).astype(p.data.dtype, copy=False)
        return norm


def learning_rates(model: STTSModel) -> dict[str, float]:
    cfg = model.cfg
    rates = {}
    for name, p in model.params.items():
        if not p.requires_grad:
            continue
        if name.startswith("scorer."):
            rates[name] = cfg.scorer_lr
        elif cfg.train_encoder:
            rates[name] = cfg.lr
    return rates


@dataclass
class StepMetrics:
    step: int
    task_loss: float
    sim_loss: float
    total: float
    retained_ratio: float
    wallclock: float

    def row(self) -> list[str]:
        return [str(self.step), repr(self.task_loss), repr(self.sim_loss), repr(self.total),
                repr(self.retained_ratio), f"{self.wallclock:.6f}"]


def scorer_only(cfg) -> bool:
    """Aux-only training with a frozen encoder never needs layers past l."""
    return cfg.aux_loss and not cfg.task_loss and not cfg.train_encoder


def train_step(model: STTSModel, opt: Adam, frames, labels, seeds,
               warmup: bool = False) -> tuple[float, float, float, float]:
    """One optimiser step; ``warmup`` fits the scorer to L_sim alone."""
    cfg = model.cfg
    if not (cfg.task_loss or cfg.aux_loss):
        raise TrainingError("both loss terms are disabled")
    with nx.GradientTape() as tape:
        if warmup or scorer_only(cfg):
            out = score_only(model, frames)
            loss, task_t, sim_t, kept = out.sim_loss, None, out.sim_loss, 1.0
        else:
            out = forward(model, frames, labels, seeds=seeds)
            loss, task_t, sim_t, kept = out.loss, out.task_loss, out.sim_loss, out.retained_ratio
    total = loss.item()
    if not np.isfinite(total):
        raise TrainingError(f"non-finite loss {total}")
    grads = nx.backward(tape, loss)
    named = {t.name: g for t, g in grads.items() if t.name is not None}
    if warmup:
        named = {k: g for k, g in named.items() if k.startswith("scorer.")}
    opt.step(named)
    # warmup and aux-only steps never evaluate the task loss
    task = task_t.item() if task_t is not None else math.nan
    sim = sim_t.item() if sim_t is not None else 0.0
    return task, sim, total, kept


def train(model: STTSModel, data: Dataset, steps: int | None = None, metrics_path=None,
          progress_every: int = 0) -> list[StepMetrics]:
    """Scorer-only warmup (``cfg.aux_warmup`` steps), then ``steps`` joint steps on shuffled minibatches.

    Deterministic for a fixed config seed (wall-clock column aside).
    """
    cfg = model.cfg
    steps = cfg.steps if steps is None else steps
    warmup_steps = cfg.aux_warmup if cfg.aux_loss else 0  # warmup fits L_sim, so it needs the aux loss
    total_steps = steps + warmup_steps if steps else 0
    if len(data) == 0 and steps:
        raise TrainingError("dataset is empty")
    if data.spec.frames != cfg.frames or data.spec.frame_size != cfg.frame_size \
            or data.spec.patch_size != cfg.patch_size:
        raise TrainingError("dataset geometry does not match the config")
    opt = Adam(model.params, learning_rates(model))
    warm = Adam(model.params, {k: v for k, v in learning_rates(model).items() if k.startswith("scorer.")})
    rng = np.random.default_rng([cfg.seed, 7])
    order = np.empty(0, dtype=np.int64)
    history = []
    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        fh.write(METRICS_SCHEMA + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
    start = time.perf_counter()
    try:
        for step in range(total_steps):
            warmup = step < warmup_steps
            if order.size < cfg.batch_size:
                order = np.concatenate([order, rng.permutation(len(data))])
            idx, order = order[: cfg.batch_size], order[cfg.batch_size:]
            seeds = rng.integers(0, 2**31 - 1, size=idx.size)
            try:
                task, sim, total, kept = train_step(model, warm if warmup else opt, data.frames[idx],
                                                    data.labels[idx], seeds, warmup)
            except nx.NonFiniteError as exc:
                raise TrainingError(f"step {step}: {exc}") from exc
            m = StepMetrics(step, task, sim, total, kept, time.perf_counter() - start)
            history.append(m)
            if writer is not None:
                writer.writerow(m.row())
            if progress_every and (step + 1) % progress_every == 0:
                log.info("step %d task=%.4f sim=%.4f total=%.4f", step + 1, task, sim, total)
    finally:
        if fh is not None:
            fh.close()
    return history


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


@dataclass
class EvalRow:
    mode: str
    k: float
    accuracy: float
    foreground_retention: float


def predict(model: STTSModel, data: Dataset, mode: str, k: float, protect_first: bool | None = None,
            seed: int = 0, batch_size: int = 64):
    """Predictions and per-video retention masks under one pruning setting."""
    preds, masks = [], []
    for lo in range(0, len(data), batch_size):
        hi = min(lo + batch_size, len(data))
        seeds = seed * 1_000_003 + np.arange(lo, hi)
        out = forward(model, data.frames[lo:hi], None, mode=mode, k=k, protect_first=protect_first, seeds=seeds)
        preds.append(out.predictions)
        masks.extend(r.mask for r in out.retention)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64), masks


def evaluate(model: STTSModel, data: Dataset, modes, ks, protect_first: bool | None = None,
             seed: int = 0) -> list[EvalRow]:
    rows = []
    for mode in modes:
        for k in ks:
            preds, masks = predict(model, data, mode, k, protect_first, seed)
            acc = float((preds == data.labels).mean()) if len(data) else float("nan")
            fg = float(np.mean([foreground_retention(m, f) for m, f in zip(masks, data.foreground)])) \
                if len(data) else float("nan")
            rows.append(EvalRow(mode, float(k), acc, fg))
    return rows


def write_eval_csv(path, rows: list[EvalRow]) -> None:
    with open(Path(path), "w", newline="") as fh:
        fh.write(EVAL_SCHEMA + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for r in rows:
            w.writerow([r.mode, repr(r.k), repr(r.accuracy), repr(r.foreground_retention)])
