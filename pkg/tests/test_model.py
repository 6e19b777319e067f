import csv

import numpy as np
import pytest

from stts import numerics as nx
from stts.config import ConfigError, PipelineConfig
from stts.model import STTSModel, forward, score_only, stem_names
from stts.synthetic import SyntheticVideoSpec, generate_dataset
from stts.training import (
    METRICS_COLUMNS,
    METRICS_SCHEMA,
    Adam,
    TrainingError,
    evaluate,
    learning_rates,
    train,
    write_eval_csv,
)

SMALL = dict(layers=4, layer=1, dim=16, heads=2, batch_size=4, steps=3, aux_warmup=2)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SyntheticVideoSpec(), 24, 0)


def small(**kw):
    return PipelineConfig(**{**SMALL, **kw})


# --- config ---------------------------------------------------------------


@pytest.mark.parametrize("bad", [dict(layer=3, layers=4), dict(pool_width=4), dict(prune_ratio=101),
                                 dict(mode="topk"), dict(dim=30, heads=4), dict(precision="half"),
                                 dict(batch_size=0), dict(lr=0.0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        PipelineConfig(**bad)


def test_config_dict_round_trip():
    cfg = small(seed=4)
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"nope": 1})


# --- task head ------------------------------------------------------------


@pytest.mark.parametrize("mixer", [False, True])
def test_head_invariant_to_bin_layout(data, mixer):
    cfg = PipelineConfig(head_mixer=mixer, init_scale=0.2)
    model = STTSModel(cfg)
    frames = data.frames[:3]
    for mode in ("stts", "random"):
        a = forward(model, frames, mode=mode, k=60, layout="packed")
        b = forward(model, frames, mode=mode, k=60, layout="masked")
        assert a.packed.num_bins < b.packed.num_bins
        assert np.abs(a.logits.data - b.logits.data).max() < 1e-10


def test_empty_video_logits_equal_head_bias(data):
    model = STTSModel(PipelineConfig())
    model.params["head.b"].data[:] = [0.1, 0.2, 0.3, 0.4]
    out = forward(model, data.frames[:2], mode="random", k=100, protect_first=False)
    assert out.packed.num_bins == 0
    assert np.array_equal(out.logits.data, np.tile([0.1, 0.2, 0.3, 0.4], (2, 1)))


def test_forward_shapes_and_losses(data):
    model = STTSModel(PipelineConfig())
    out = forward(model, data.frames[:2], data.labels[:2])
    assert out.logits.shape == (2, 4)
    assert out.loss.item() == pytest.approx(out.task_loss.item() + out.sim_loss.item(), abs=1e-14)
    assert out.retained_ratio == pytest.approx(0.5, abs=9 / 288)


def test_stem_is_frozen():
    cfg = PipelineConfig()
    model = STTSModel(cfg)
    stem = stem_names(cfg)
    assert "layer3.attn.q.w" in stem and "layer4.attn.q.w" not in stem and "pos" in stem
    assert all(not model.params[k].requires_grad for k in stem)
    assert not set(learning_rates(model)) & stem
    unfrozen = STTSModel(cfg.replace(freeze_stem=False))
    assert all(p.requires_grad for p in unfrozen.params.values())


def test_scorer_input_is_detached(data):
    """L_sim alone produces no encoder gradient, even with an unfrozen stem."""
    model = STTSModel(PipelineConfig(task_loss=False, freeze_stem=False))
    with nx.GradientTape() as tape:
        out = forward(model, data.frames[:2])
    grads = nx.backward(tape, out.loss)
    assert grads and all(t.name.startswith("scorer.") for t in grads)


def test_score_only_matches_forward(data):
    model = STTSModel(PipelineConfig())
    a = score_only(model, data.frames[:3])
    b = forward(model, data.frames[:3])
    np.testing.assert_allclose(a.scores.pooled.data, b.scores.pooled.data, atol=1e-14)
    assert a.sim_loss.item() == pytest.approx(b.sim_loss.item(), abs=1e-14)


def test_checkpoint_round_trip(tmp_path):
    model = STTSModel(PipelineConfig(head_mixer=True))
    model.save(tmp_path / "ck")
    back = STTSModel.load(tmp_path / "ck")
    assert back.cfg == model.cfg
    assert all(np.array_equal(back.params[k].data, v.data) for k, v in model.params.items())


# --- training -------------------------------------------------------------


def test_adam_first_step_and_clipping():
    p = {"a": nx.Tensor(np.zeros(2), requires_grad=True)}
    opt = Adam(p, {"a": 0.1}, clip=None)
    opt.step({"a": np.array([2.0, -3.0])})
    np.testing.assert_allclose(p["a"].data, [-0.1, 0.1], atol=1e-7)
    p = {"a": nx.Tensor(np.zeros(1), requires_grad=True)}
    opt = Adam(p, {"a": 1.0}, clip=1.0)
    assert opt.step({"a": np.array([10.0])}) == 10.0
    np.testing.assert_allclose(opt.m["a"], [0.1])


def test_train_zero_steps_keeps_init(data, tmp_path):
    model = STTSModel(small())
    init = {k: v.copy() for k, v in model.arrays().items()}
    history = train(model, data, steps=0, metrics_path=tmp_path / "m.csv")
    assert history == []
    assert all(np.array_equal(model.params[k].data, v) for k, v in init.items())
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines == [METRICS_SCHEMA, ",".join(METRICS_COLUMNS)]


def test_mode_none_retained_ratio_constant(data, tmp_path):
    model = STTSModel(small(mode="none", prune_ratio=0.0, aux_warmup=0))
    train(model, data, metrics_path=tmp_path / "m.csv")
    rows = list(csv.DictReader((tmp_path / "m.csv").read_text().splitlines()[1:]))
    assert len(rows) == 3 and all(float(r["retained_ratio"]) == 1.0 for r in rows)


def test_warmup_rows_and_trainable_sets(data):
    model = STTSModel(small())
    before = model.arrays()
    before = {k: v.copy() for k, v in before.items()}
    hist = train(model, data, steps=1)
    assert len(hist) == 3
    assert np.isnan(hist[0].task_loss) and np.isnan(hist[1].task_loss) and np.isfinite(hist[2].task_loss)
    changed = {k for k in before if not np.array_equal(before[k], model.params[k].data)}
    assert any(k.startswith("scorer.") for k in changed) and "head.w" in changed
    assert not changed & stem_names(model.cfg)


def test_training_is_deterministic(data, tmp_path):
    outs = []
    for i in range(2):
        model = STTSModel(small(seed=5))
        train(model, data, metrics_path=tmp_path / f"m{i}.csv")
        rows = [r.split(",")[:-1] for r in (tmp_path / f"m{i}.csv").read_text().splitlines()]
        outs.append((rows, model.arrays()))
    assert outs[0][0] == outs[1][0]
    assert all(np.array_equal(outs[0][1][k], outs[1][1][k]) for k in outs[0][1])


def test_non_finite_loss_aborts(data):
    model = STTSModel(small(aux_warmup=0))
    model.params["head.w"].data[:] = np.nan
    with pytest.raises(TrainingError, match="step 0"):
        train(model, data, steps=1)


def test_geometry_mismatch(data):
    with pytest.raises(TrainingError, match="geometry"):
        train(STTSModel(small(frames=4)), data, steps=1)


# --- evaluation -----------------------------------------------------------


def test_k_zero_rows_identical_across_modes(data, tmp_path):
    model = STTSModel(PipelineConfig())
    rows = evaluate(model, data, ["stts", "heuristic", "random", "none"], [0])
    assert len({(r.accuracy, r.foreground_retention) for r in rows}) == 1
    assert rows[0].foreground_retention == 1.0
    write_eval_csv(tmp_path / "e.csv", rows)
    assert (tmp_path / "e.csv").read_text().startswith("# schema=stts-eval/1\nmode,k,accuracy,foreground_retention\n")


def test_text_only_floor_is_label_prior():
    """With every token pruned the prediction is a constant, so accuracy is that class's share."""
    spec = SyntheticVideoSpec()
    data = generate_dataset(spec, 400, 11)
    model = STTSModel(PipelineConfig())
    (row,) = evaluate(model, data, ["random"], [100], protect_first=False)
    assert row.foreground_retention == 0.0
    pred = int(np.argmax(model.params["head.b"].data))
    assert row.accuracy == pytest.approx(np.mean(data.labels == pred))
    assert abs(row.accuracy - 0.25) < 0.06


def test_warmup_skipped_without_aux_loss(data):
    hist = train(STTSModel(small(aux_loss=False)), data, steps=2)
    assert len(hist) == 2 and all(np.isfinite(h.task_loss) and h.sim_loss == 0.0 for h in hist)
