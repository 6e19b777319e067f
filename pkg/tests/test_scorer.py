import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stts import numerics as nx
from stts.config import PipelineConfig
from stts.encoder import spatial_pool
from stts.model import STTSModel, forward
from stts.numerics import Tensor
from stts.scorer import (
    SCORE_FLOOR,
    expand_and_bias,
    init_scorer_params,
    pooler_forward,
    score,
    score_frames,
    temporal_concat,
)
from stts.verify import GRADIENT_CONFIG

from conftest import rel_err

CFG = PipelineConfig(precision="float64")


def scorer_params(cfg=CFG, seed=0):
    return {k: Tensor(v) for k, v in init_scorer_params(cfg, np.random.default_rng(seed)).items()}


def _gelu(v):
    return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))


# --- pooler ---------------------------------------------------------------


def test_zero_residual_pooler_is_plain_mean(rng):
    p = scorer_params()
    p["scorer.pool.attn.o.w"].data[:] = 0
    x = rng.normal(size=(3, 36, 32))
    assert np.array_equal(pooler_forward(Tensor(x), p, CFG).data, spatial_pool(Tensor(x), 3).data)


def test_identical_frames_identical_pooled_rows(rng):
    f = rng.normal(size=(36, 32))
    out = pooler_forward(Tensor(np.stack([f, f, f])), scorer_params(), CFG).data
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_pooler_matches_loop_oracle(rng):
    p = scorer_params(seed=4)
    x = rng.normal(size=(2, 36, 32))
    got = pooler_forward(Tensor(x), p, CFG).data
    g = {k: v.data for k, v in p.items()}
    heads, dk = CFG.heads, CFG.dim // CFG.heads
    for t in range(2):
        pooled = np.array([[x[t, (br * 3 + r) * 6 + bc * 3 + c] for r in range(3) for c in range(3)]
                           for br in range(2) for bc in range(2)]).mean(axis=1)
        mu = pooled.mean(axis=1, keepdims=True)
        var = ((pooled - mu) ** 2).mean(axis=1, keepdims=True)
        h = (pooled - mu) / np.sqrt(var + 1e-5) * g["scorer.pool.ln.g"] + g["scorer.pool.ln.b"]
        q, k, v = (h @ g[f"scorer.pool.attn.{n}.w"] + g[f"scorer.pool.attn.{n}.b"] for n in "qkv")
        att = np.zeros((4, 32))
        for hd in range(heads):
            sl = slice(hd * dk, (hd + 1) * dk)
            for i in range(4):
                z = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dk) for j in range(4)])
                e = np.exp(z - z.max())
                att[i, sl] = (e / e.sum()) @ v[:, sl]
        ref = pooled + att @ g["scorer.pool.attn.o.w"] + g["scorer.pool.attn.o.b"]
        np.testing.assert_allclose(got[t], ref, atol=1e-12)


# --- temporal concat ------------------------------------------------------


def test_temporal_concat_examples(rng):
    one = temporal_concat(Tensor(rng.normal(size=(1, 1, 4, 3)))).data
    assert one.shape == (1, 1, 4, 6) and np.all(one[..., 3:] == 0)
    f = rng.normal(size=(4, 3))
    same = temporal_concat(Tensor(np.stack([f, f])[None])).data[0]
    assert np.array_equal(same[1, :, :3], same[1, :, 3:])
    x = rng.normal(size=(1, 3, 4, 3))
    out = temporal_concat(Tensor(x)).data[0]
    assert np.array_equal(out[2, :, 3:], out[1, :, :3])
    assert np.all(out[0, :, 3:] == 0)


# --- MLP head -------------------------------------------------------------


def test_zero_final_layer_gives_half():
    p = scorer_params()
    p["scorer.mlp2.w"].data[:] = 0
    p["scorer.mlp2.b"].data[:] = 0
    s = score(Tensor(np.random.default_rng(0).normal(size=(1, 3, 4, 64))), p).data
    assert np.all(s == 0.5)


def test_final_bias_monotone(rng):
    p = scorer_params()
    x = Tensor(rng.normal(size=(1, 3, 4, 64)))
    before = score(x, p).data
    p["scorer.mlp2.b"].data += 0.1
    assert np.all(score(x, p).data > before)


def test_mlp_matches_straight_line(rng):
    cfg = PipelineConfig(dim=8, heads=2, precision="float64")
    p = scorer_params(cfg, 2)
    g = {k: v.data for k, v in p.items()}
    x = rng.normal(size=(2, 4, 16))
    got = score(Tensor(x[None]), p).data[0]
    for t in range(2):
        for m in range(4):
            h = [_gelu(sum(x[t, m, i] * g["scorer.mlp0.w"][i, j] for i in range(16)) + g["scorer.mlp0.b"][j])
                 for j in range(8)]
            h = [_gelu(sum(h[i] * g["scorer.mlp1.w"][i, j] for i in range(8)) + g["scorer.mlp1.b"][j])
                 for j in range(4)]
            z = sum(h[i] * g["scorer.mlp2.w"][i, 0] for i in range(4)) + g["scorer.mlp2.b"][0]
            ref = min(max(1 / (1 + math.exp(-z)), SCORE_FLOOR), 1.0)
            assert got[t, m] == pytest.approx(ref, abs=1e-13)


# --- expansion and bias ---------------------------------------------------


def test_unit_scores_give_zero_bias():
    sm = expand_and_bias(Tensor(np.ones((2, 4))), 3, 36)
    assert np.all(sm.bias.data == 0)


def test_one_half_score_block():
    s = np.ones((1, 4))
    s[0, 2] = 0.5
    bias = expand_and_bias(Tensor(s), 3, 36).bias.data[0]
    assert np.count_nonzero(bias) == 9
    np.testing.assert_allclose(bias[bias != 0], math.log(0.5))
    assert math.log(0.5) == pytest.approx(-0.6931, abs=1e-4)


def test_floor_score_suppresses_attention():
    s = np.ones((1, 4))
    s[0, 1] = SCORE_FLOOR
    bias = expand_and_bias(Tensor(s), 3, 36).bias.data[0]
    assert bias.min() == pytest.approx(-13.8155, abs=1e-4)
    p = nx.softmax_biased(Tensor(np.zeros((1, 36))), Tensor(bias[None])).data[0]
    low = bias < -1
    assert p[low].max() < 1e-5 * (1 / 36)


@given(st.integers(0, 2**32 - 1), st.sampled_from([(6, 3), (6, 2), (4, 2), (8, 4)]))
def test_expansion_is_block_constant(seed, geom):
    grid, w = geom
    m = (grid // w) ** 2
    s = np.random.default_rng(seed).uniform(SCORE_FLOOR, 1, size=(3, m))
    exp = expand_and_bias(Tensor(s), w, grid * grid).expanded.data
    for t in range(3):
        for n in range(grid * grid):
            r, c = divmod(n, grid)
            assert exp[t, n] == s[t, (r // w) * (grid // w) + c // w]


@given(st.permutations(range(5)))
def test_frame_permutation_equivariance(perm):
    perm = np.array(perm)
    r = np.random.default_rng(0)
    p = scorer_params()
    x = r.normal(size=(5, 36, 32))
    pooled = pooler_forward(Tensor(x), p, CFG).data
    np.testing.assert_allclose(pooler_forward(Tensor(x[perm]), p, CFG).data, pooled[perm], atol=1e-12)
    concat = temporal_concat(Tensor(pooled[None])).data
    # re-wired concat: each row keeps its own (current, previous) pair, rows permuted
    s = score(Tensor(concat), p).data[0]
    np.testing.assert_allclose(score(Tensor(concat[:, perm]), p).data[0], s[perm], atol=1e-13)


def test_score_frames_range_and_shapes(rng):
    sm = score_frames(Tensor(rng.normal(size=(6, 36, 32))), scorer_params(), CFG, videos=2)
    assert sm.pooled.shape == (2, 3, 4) and sm.expanded.shape == (2, 3, 36)
    assert np.all((sm.pooled.data >= SCORE_FLOOR) & (sm.pooled.data <= 1))
    assert np.all(np.isfinite(sm.bias.data)) and np.all(sm.bias.data <= 0)


def test_task_gradient_reaches_scorer_without_pruning():
    """k = 0: the scorer influences L_task only through the attention bias."""
    cfg = PipelineConfig(**{**GRADIENT_CONFIG, "prune_ratio": 0.0, "aux_loss": False})
    model = STTSModel(cfg)
    frames = np.random.default_rng(3).random((2, 2, 8, 8))
    labels = np.array([1, 3])
    with nx.GradientTape() as tape:
        out = forward(model, frames, labels)
    assert out.retained_ratio == 1.0 and out.sim_loss is None
    grads = nx.backward(tape, out.loss)
    names = [k for k in model.params if k.startswith("scorer.mlp")]
    analytic = [grads[model.params[n]] for n in names]
    assert max(float(np.abs(a).max()) for a in analytic) > 1e-8
    numeric = nx.finite_diff_grad(lambda: forward(model, frames, labels).loss.item(),
                                  [model.params[n] for n in names], 1e-5)
    assert max(rel_err(a, n) for a, n in zip(analytic, numeric)) < 1e-4
