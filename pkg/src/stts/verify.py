"""Self-check suites: packed-path equivalence, gradients, FFD quality, budgets.

Each suite takes the implementation under test as arguments so a
deliberately broken double can be swapped in as a negative control.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .config import PipelineConfig
from .encoder import block_index, encode_packed, init_encoder_params, run_layers
from .model import STTSModel, forward
from .numerics import Tensor
from .packing import optimal_bins, pack, plan_packing, select_retention, token_budget

SUITES = ("equivalence", "gradient", "ffd", "budget")


@dataclass
class Check:
    name: str
    ok: bool
    detail: str = ""


@dataclass
class SuiteReport:
    suite: str
    checks: list[Check] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.ok]

    def add(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append(Check(name, bool(ok), detail))

    def lines(self) -> list[str]:
        out = [f"[{'PASS' if c.ok else 'FAIL'}] {self.suite}: {c.name}" + (f" ({c.detail})" if c.detail else "")
               for c in self.checks]
        out.append(f"{self.suite}: {len(self.checks) - len(self.failures)}/{len(self.checks)} checks passed"
                   f" in {self.seconds:.1f}s")
        return out


def _random_keep(rng, frames: int, grid: int, w: int) -> np.ndarray:
    """Random block-aligned retention mask; frame 0 kept, empty frames allowed."""
    m = (grid // w) ** 2
    blocks = rng.random((frames, m)) < rng.uniform(0.0, 1.0)
    blocks[0] = True
    return blocks[:, block_index(grid, w)]


# --------------------------------------------------------------------------
# equivalence
# --------------------------------------------------------------------------


def reference_post_layers(tokens: np.ndarray, keep: np.ndarray, params, cfg: PipelineConfig) -> list[np.ndarray]:
    """Post-pruning layers run frame by frame on retained tokens only, no masks."""
    out = []
    for f in range(tokens.shape[0]):
        kept = tokens[f][keep[f]]
        if kept.shape[0] == 0:
            out.append(kept)
            continue
        y = run_layers(Tensor(kept[None]), params, range(cfg.layer + 2, cfg.layers), cfg.heads)
        out.append(y.data[0])
    return out


def suite_equivalence(instances: int = 500, seed: int = 0, tol: float = 1e-10,
                      pack_fn: Callable = pack, cfg: PipelineConfig | None = None) -> SuiteReport:
    rep = SuiteReport("equivalence")
    start = time.perf_counter()
    cfg = cfg or PipelineConfig(precision="float64")
    rng = np.random.default_rng(seed)
    worst, bad = 0.0, []
    for i in range(instances):
        params = {k: Tensor(v) for k, v in init_encoder_params(cfg, rng).items()}
        # larger weights than the training init so attention is far from uniform
        for k, v in params.items():
            if k.endswith(".w") and ".attn." in k:
                v.data *= 20.0
        tokens = rng.normal(size=(cfg.frames, cfg.num_patches, cfg.dim))
        keep = _random_keep(rng, cfg.frames, cfg.grid, cfg.pool_width)
        packed = encode_packed(pack_fn(Tensor(tokens), keep), params, cfg)
        got = _unpack_rows(packed)
        ref = reference_post_layers(tokens, keep, params, cfg)
        err = 0.0
        for f in range(cfg.frames):
            if got[f].shape != ref[f].shape:
                err = math.inf
                break
            if ref[f].size:
                err = max(err, float(np.abs(got[f] - ref[f]).max()))
        worst = max(worst, err)
        if not err <= tol:
            bad.append(i)
    rep.add(f"{instances} random (mask, weights) instances within {tol:g}", not bad,
            f"max abs diff {worst:.3g}" + (f", failing instances {bad[:5]}" if bad else ""))
    rep.seconds = time.perf_counter() - start
    return rep


def _unpack_rows(packed) -> list[np.ndarray]:
    data = packed.data.data
    return [data[b, o:o + c] for b, o, c in zip(packed.assign, packed.offset, packed.counts)]


# --------------------------------------------------------------------------
# gradient
# --------------------------------------------------------------------------

# 2 frames of 4x4 patches pooled into 4 blocks; D kept tiny so differences stay cheap
GRADIENT_CONFIG = dict(frame_size=8, patch_size=2, frames=2, dim=4, heads=2, layers=3, layer=0,
                       pool_width=2, prune_ratio=30.0, precision="float64", init_scale=0.3)


def suite_gradient(instances: int = 20, seed: int = 0, tol: float = 1e-4, eps: float = 1e-5,
                   forward_fn: Callable = forward) -> SuiteReport:
    """Full-pipeline scorer gradients (task + similarity loss) against central differences."""
    rep = SuiteReport("gradient")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    for i in range(instances):
        cfg = PipelineConfig(**GRADIENT_CONFIG, seed=int(rng.integers(2**31)))
        model = STTSModel(cfg)
        frames = rng.random((2, cfg.frames, cfg.frame_size, cfg.frame_size))
        labels = rng.integers(cfg.num_classes, size=2)
        names = [k for k in model.params if k.startswith("scorer.")]

        with nx.GradientTape() as tape:
            out = forward_fn(model, frames, labels)
        grads = nx.backward(tape, out.loss)
        # pruning decisions are piecewise constant: freeze them for the probe
        keep = [r.mask.copy() for r in out.retention]

        def loss() -> float:
            o = forward_fn(model, frames, labels)
            if any((r.mask != k).any() for r, k in zip(o.retention, keep)):
                raise nx.ContractError("retention changed under perturbation")
            return o.loss.item()

        numeric = nx.finite_diff_grad(loss, [model.params[n] for n in names], eps)
        analytic = [grads.get(model.params[n], np.zeros_like(num)) for n, num in zip(names, numeric)]
        # relative to the largest gradient entry: exact zeros (e.g. the key bias,
        # by softmax shift invariance) would otherwise divide difference noise by 0
        scale = max(max(float(np.abs(a).max()), float(np.abs(n).max())) for a, n in zip(analytic, numeric))
        err = max(float(np.abs(a - n).max()) for a, n in zip(analytic, numeric)) / max(scale, 1e-300)
        rep.add(f"instance {i}: scorer gradients vs central differences", err < tol, f"max rel err {err:.2e}")
    rep.seconds = time.perf_counter() - start
    return rep


# --------------------------------------------------------------------------
# ffd
# --------------------------------------------------------------------------


def suite_ffd(instances: int = 2000, seed: int = 0, max_frames: int = 10,
              plan_fn: Callable = plan_packing) -> SuiteReport:
    rep = SuiteReport("ffd")
    start = time.perf_counter()
    assign, offset, load, _ = plan_fn([9, 5, 4, 3], 9)
    rep.add("[9,5,4,3] with capacity 9 uses 3 bins", load.size == 3, f"got {load.size}")
    rng = np.random.default_rng(seed)
    lower = upper = probes_ok = True
    detail = ""
    for _ in range(instances):
        t = int(rng.integers(1, max_frames + 1))
        cap = int(rng.choice([4, 9, 16, 36]))
        counts = rng.integers(0, cap + 1, size=t)
        _, _, load, probes = plan_fn(counts, cap)
        opt = optimal_bins(counts, cap)
        used = int(load.size)
        if used < opt or used < -(-int(counts.sum()) // cap):
            lower = False
            detail = f"counts={counts.tolist()} cap={cap} ffd={used} opt={opt}"
        if 9 * used > 11 * opt + 6:
            upper = False
            detail = f"counts={counts.tolist()} cap={cap} ffd={used} opt={opt}"
        if probes > t * t:
            probes_ok = False
    rep.add(f"T' >= OPT on {instances} random instances", lower, detail if not lower else "")
    rep.add("T' <= (11 OPT + 6) / 9", upper, detail if not upper else "")
    rep.add("bin probes <= T^2", probes_ok)
    rep.seconds = time.perf_counter() - start
    return rep


# --------------------------------------------------------------------------
# budget
# --------------------------------------------------------------------------


def suite_budget(maps: int = 100, seed: int = 0, select_fn: Callable = select_retention,
                 frames: int = 8, grid: int = 6, w: int = 3) -> SuiteReport:
    rep = SuiteReport("budget")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    n, m = grid * grid, (grid // w) ** 2
    block = w * w
    for k in range(0, 100, 10):
        ok, detail = True, ""
        for _ in range(maps):
            scores = rng.random((frames, m))
            r = select_fn(scores, k, w, grid, True)
            budget = token_budget(frames, n, k)
            mask = np.asarray(r.mask)
            count = int(mask.sum())
            if budget < n:
                # frame 0 alone exceeds the budget: keep exactly frame 0 and report the cap
                good = count == n and bool(getattr(r, "capped", False))
            else:
                good = budget - block < count <= budget
            if not good or not mask[0].all():
                ok = False
                detail = f"retained {count}, budget {budget}, frame 0 kept={bool(mask[0].all())}"
                break
        rep.add(f"k={k}: retained within one block of the budget, frame 0 intact", ok, detail)
    rep.seconds = time.perf_counter() - start
    return rep


def run_suite(name: str, seed: int = 0, **kwargs) -> SuiteReport:
    fn = {"equivalence": suite_equivalence, "gradient": suite_gradient,
          "ffd": suite_ffd, "budget": suite_budget}.get(name)
    if fn is None:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)} or all")
    return fn(seed=seed, **kwargs)
