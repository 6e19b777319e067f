import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stts import numerics as nx
from stts.aux_loss import SimilarityMap, neighbor_cosine, similarity_loss, total_loss
from stts.numerics import Tensor

from conftest import rel_err


def test_identical_frames():
    f = np.random.default_rng(0).normal(size=(4, 8))
    sim = neighbor_cosine(Tensor(np.stack([f, f, f])))
    np.testing.assert_allclose(sim.sims.data, 1.0, atol=1e-14)
    np.testing.assert_allclose(sim.targets, 0.0, atol=1e-14)


def test_orthogonal_features():
    a = np.zeros((2, 1, 4))
    a[0, 0, 0] = 1
    a[1, 0, 1] = 2
    sim = neighbor_cosine(Tensor(a))
    assert sim.sims.data[1, 0] == 0 and sim.targets[1, 0] == 1


def test_cosine_matches_loop(rng):
    x = rng.normal(size=(3, 4, 8))
    got = neighbor_cosine(Tensor(x)).sims.data
    for t in range(1, 3):
        for i in range(4):
            a, b = x[t - 1, i], x[t, i]
            dot = sum(p * q for p, q in zip(a, b))
            ref = dot / (math.sqrt(sum(v * v for v in a)) * math.sqrt(sum(v * v for v in b)))
            assert abs(got[t, i] - ref) < 1e-12
    assert np.all(got[0] == 1)


def test_negative_similarity_saturates_target():
    x = np.array([[[1.0, 0]], [[-1.0, 0]]])
    sim = neighbor_cosine(Tensor(x))
    assert sim.sims.data[1, 0] == pytest.approx(-1) and sim.targets[1, 0] == 1.0


def test_zero_norm_guard():
    sim = neighbor_cosine(Tensor(np.zeros((2, 3, 4))))
    assert np.all(np.isfinite(sim.sims.data))


@given(st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_scale_invariance(c, seed):
    x = np.random.default_rng(seed).normal(size=(3, 4, 6))
    a = neighbor_cosine(Tensor(x)).sims.data
    b = neighbor_cosine(Tensor(x * c)).sims.data
    np.testing.assert_allclose(a, b, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_sims_bounded(seed):
    x = np.random.default_rng(seed).normal(size=(4, 4, 5))
    s = neighbor_cosine(Tensor(x)).sims.data
    assert np.all(np.abs(s) <= 1 + 1e-9)


def _simmap(targets):
    return SimilarityMap(sims=Tensor(1 - targets), targets=targets)


def test_loss_examples():
    t = np.array([[0.0, 0.0], [0.3, 0.0]])
    per, mean = similarity_loss(Tensor(t), _simmap(t))
    assert mean.item() == 0
    s = np.array([[0.9, 0.9], [0.5, 0.0]])
    per, mean = similarity_loss(Tensor(s), _simmap(np.zeros((2, 2))))
    assert per[1, 0] == 0.25 and np.all(per[0] == 0)


def test_loss_matches_loop_with_scale_factor(rng):
    t_frames, w, n = 5, 3, 36
    m = n // (w * w)
    s = rng.random((t_frames, m))
    tg = rng.random((t_frames, m))
    _, mean = similarity_loss(Tensor(s), _simmap(tg))
    acc = 0.0
    for t in range(1, t_frames):
        for i in range(m):
            acc += (s[t, i] - tg[t, i]) ** 2
    assert abs(mean.item() - w * w / (t_frames * n) * acc) < 1e-12


def test_loss_gradient(rng):
    s = Tensor(rng.random((2, 4, 4)), requires_grad=True)
    sim = _simmap(rng.random((2, 4, 4)))
    with nx.GradientTape() as tape:
        _, loss = similarity_loss(s, sim)
    g = nx.backward(tape, loss)[s]
    (fd,) = nx.finite_diff_grad(lambda: similarity_loss(s, sim)[1].item(), [s], 1e-6)
    assert rel_err(g, fd) < 1e-6
    assert np.all(g[:, 0] == 0)


def test_loss_shape_mismatch():
    with pytest.raises(nx.ShapeError):
        similarity_loss(Tensor(np.zeros((2, 3))), _simmap(np.zeros((2, 4))))


def test_total_loss_examples():
    assert total_loss(Tensor(0.7), Tensor(0.0)).item() == 0.7
    assert total_loss(Tensor(0.0), Tensor(0.2)).item() == 0.2
    assert total_loss(Tensor(0.3), Tensor(0.2)).item() == pytest.approx(0.5, abs=1e-15)
    assert total_loss(None, Tensor(0.2)).item() == 0.2


def test_total_loss_rejects_non_finite():
    with pytest.raises(nx.NonFiniteError):
        total_loss(Tensor(0.1), np.array(float("nan")))
