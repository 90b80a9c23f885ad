import math

import numpy as np
import pytest

from sobbo.autodiff import Tape
from sobbo.losses import LossConfig, reconstruction_loss
from sobbo.paths import QuadratureSpec
from sobbo.problems import ProblemSpec, generate_dataset
from sobbo.training import (
    DEFAULT_BALANCE_WEIGHT,
    METHODS,
    AdamState,
    DivergenceError,
    TrainConfig,
    TrainingError,
    adam_step,
    checkpoint_path,
    config_diff,
    read_trace,
    train,
    train_dgi,
    train_etd,
    variant_loss_config,
    write_trace,
)

# Adam on p0 = (1, -0.5), lr 0.1, three fixed gradients; worked through by hand
# (step 1 moves each coordinate by lr * sign(g); step 2 m^ = .028/.19, v^ = 4.996e-5/.001999).
ADAM_GRADS = [(0.2, -1.0), (0.1, -1.0), (-0.3, 0.5)]
ADAM_TABLE = [
    (0.9000000049999997, -0.4000000009999999),
    (0.8067820470153656, -0.3000000020000005),
    (0.8149797264210347, -0.24843466201699244),
]


def _unit_cube_spec(name, fn, d=3):
    z, o = np.zeros(d), np.ones(d)
    return ProblemSpec(name, d, d, z, o, z, o, "closed_form", fn=fn, layout="theta_x")


AFFINE_W = np.array([0.5, -1.0, 0.3, 0.8, -0.2, 1.2])
AFFINE = _unit_cube_spec("affine", lambda z: z @ AFFINE_W)
_A = np.random.default_rng(0).normal(size=(6, 6))
QUAD_A = (_A + _A.T) / 4
QUAD_FORM = _unit_cube_spec("quadratic_form", lambda z: 0.5 * ((z @ QUAD_A) * z).sum(axis=1))


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset("zakharov", 64, 0.5, seed=0)


def small_cfg(method="ETD", **kw):
    base = dict(method=method, hidden=(8, 8), steps=30, eval_every=10, batch_size=8)
    if method.startswith("DGI-") and "loss_cfg" not in kw:
        kw["loss_cfg"] = variant_loss_config(method, quadrature=QuadratureSpec(16))
        kw["loss_cfg"] = LossConfig(kw["loss_cfg"].balance_weight, min(kw["loss_cfg"].num_paths, 2), 4, QuadratureSpec(16), 4)
    base.update(kw)
    return TrainConfig(**base)


def test_adam_matches_hand_table():
    params = [np.array([1.0, -0.5])]
    state = AdamState.zeros_like(params)
    for g, row in zip(ADAM_GRADS, ADAM_TABLE):
        params, state = adam_step(params, [np.array(g)], state, 0.1)
        np.testing.assert_allclose(params[0], row, rtol=0, atol=1e-15)
    assert state.t == 3


def test_adam_zero_gradient_keeps_parameters():
    p = [np.array([[1.0, 2.0]]), np.array([3.0])]
    state = AdamState.zeros_like(p)
    out = p
    for _ in range(5):
        out, state = adam_step(out, [np.zeros((1, 2)), np.zeros(1)], state, 0.1)
    for a, b in zip(out, p):
        np.testing.assert_array_equal(a, b)


def test_adam_constant_gradient_step_tends_to_lr():
    p = [np.zeros(3)]
    state = AdamState.zeros_like(p)
    g = [np.array([0.01, -5.0, 300.0])]
    for _ in range(2000):
        prev = p[0]
        p, state = adam_step(p, g, state, 1e-3)
    np.testing.assert_allclose(np.abs(p[0] - prev), 1e-3, rtol=1e-5)


def test_adam_rejects_bad_input():
    p = [np.zeros(2)]
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(3)], AdamState.zeros_like(p), 0.1)
    with pytest.raises(FloatingPointError):
        adam_step(p, [np.array([np.nan, 0.0])], AdamState.zeros_like(p), 0.1)


def test_noiseless_affine_target_is_fit_by_etd():
    ds = generate_dataset(AFFINE, 512, math.inf, seed=0)
    design = np.c_[ds.zeta, np.ones(512)]
    coef, *_ = np.linalg.lstsq(design, ds.y, rcond=None)
    assert np.mean((design @ coef - ds.y) ** 2) < 1e-20  # the target is realisable
    cfg = TrainConfig("ETD", learning_rate=5e-3, batch_size=512, steps=2000, hidden=(64,))
    res = train_etd(ds, cfg)
    assert np.mean((res.model(ds.zeta)[:, 0] - ds.y) ** 2) <= 1e-4


def test_dgi_naive_fits_noiseless_quadratic_form():
    ds = generate_dataset(QUAD_FORM, 512, math.inf, seed=0)
    lc = LossConfig(0.0, 0, 10, QuadratureSpec(32))
    cfg = TrainConfig("DGI-naive", learning_rate=3e-3, batch_size=32, steps=2000, hidden=(64,), loss_cfg=lc)
    res = train_dgi(ds, cfg)
    sub = np.random.default_rng(1).choice(512, 16, replace=False)
    pairs = np.array([(i, j) for i in range(16) for j in range(16) if i != j])
    loss = reconstruction_loss(res.model.on(Tape()), ds.zeta[sub], ds.y[sub], pairs, QuadratureSpec(512))
    assert float(loss.value) <= 1e-3


@pytest.mark.parametrize("method", ["ETD", "DGI-full", "DGI-path1"])
def test_fixed_seed_is_deterministic(small_data, method):
    cfg = small_cfg(method)
    ev = lambda m: (float(m.params[0].sum()), 0.0)
    a = train(small_data, cfg, evaluator=ev)
    b = train(small_data, cfg, evaluator=ev)
    assert [r.cos_sim for r in a.trace] == [r.cos_sim for r in b.trace]
    np.testing.assert_array_equal(np.array([r.loss for r in a.trace]), np.array([r.loss for r in b.trace]))
    for p, q in zip(a.model.params, b.model.params):
        np.testing.assert_array_equal(p, q)


def test_zero_steps_returns_initial_model(small_data, tmp_path):
    cfg = small_cfg(steps=0)
    res = train(small_data, cfg, checkpoint_dir=tmp_path)
    from sobbo.models import init_model

    init = init_model(cfg.model_spec(6))
    for p, q in zip(res.model.params, init.params):
        np.testing.assert_array_equal(p, q)
    assert [r.step for r in res.trace] == [0]
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ckpt_000000.npz"]


def test_trace_rows_follow_eval_schedule(small_data, tmp_path):
    res = train(small_data, small_cfg(steps=25, eval_every=10), checkpoint_dir=tmp_path)
    assert [r.step for r in res.trace] == [0, 10, 20, 25]
    assert math.isnan(res.trace[0].loss) and all(math.isfinite(r.loss) for r in res.trace[1:])
    assert res.checkpoints == [checkpoint_path(tmp_path, s) for s in (0, 10, 20, 25)]
    write_trace(res.trace, tmp_path / "t.csv")
    back = read_trace(tmp_path / "t.csv")
    assert [r.step for r in back] == [0, 10, 20, 25]
    assert back[1].loss == res.trace[1].loss


@pytest.mark.parametrize("method", ["ETD", "DGI-full"])
def test_resume_reproduces_uninterrupted_run(small_data, tmp_path, method):
    cfg = small_cfg(method)
    ev = lambda m: (float(np.sum(m.params[-1])), float(np.sum(m.params[0])))
    full = train(small_data, cfg, evaluator=ev, checkpoint_dir=tmp_path / "a")
    resumed = train(small_data, cfg, evaluator=ev, checkpoint_dir=tmp_path / "b", resume_from=checkpoint_path(tmp_path / "a", 10))
    assert [(r.step, r.cos_sim, r.norm_dist) for r in resumed.trace] == [(r.step, r.cos_sim, r.norm_dist) for r in full.trace]
    for p, q in zip(full.model.params, resumed.model.params):
        np.testing.assert_array_equal(p, q)
    assert (tmp_path / "a" / "ckpt_000030.npz").read_bytes() == (tmp_path / "b" / "ckpt_000030.npz").read_bytes()


def test_resume_rejects_other_config(small_data, tmp_path):
    train(small_data, small_cfg(), checkpoint_dir=tmp_path)
    with pytest.raises(ValueError):
        train(small_data, small_cfg(learning_rate=1e-2), resume_from=checkpoint_path(tmp_path, 10))


def test_training_does_not_mutate_dataset(small_data):
    before = (small_data.theta.copy(), small_data.x.copy(), small_data.y.copy())
    train(small_data, small_cfg("DGI-full"))
    for a, b in zip(before, (small_data.theta, small_data.x, small_data.y)):
        np.testing.assert_array_equal(a, b)


def test_variants_differ_from_full_only_in_documented_fields():
    full = TrainConfig("DGI-full")
    expected = {
        "DGI-naive": {"loss_cfg.balance_weight": 0.0, "loss_cfg.num_paths": 0},
        "DGI-path1": {"loss_cfg.balance_weight": 0.0, "loss_cfg.num_paths": 1},
        "DGI-path64": {"loss_cfg.balance_weight": 0.0},
        "DGI-path1/bal": {"loss_cfg.num_paths": 1},
    }
    for method, fields in expected.items():
        diff = config_diff(full, TrainConfig(method))
        assert diff.pop("method") == ("DGI-full", method)
        assert {k: v[1] for k, v in diff.items()} == fields
    assert full.loss_cfg.balance_weight == DEFAULT_BALANCE_WEIGHT and full.loss_cfg.num_paths == 64


def test_variant_validation():
    with pytest.raises(ValueError):
        variant_loss_config("DGI-full", balance_weight=0.0)
    with pytest.raises(ValueError):
        variant_loss_config("DGI-custom")
    assert variant_loss_config("DGI-custom", balance_weight=3.0, num_paths=4).num_paths == 4
    with pytest.raises(ValueError):
        TrainConfig("SGD")
    with pytest.raises(ValueError):
        train_etd(generate_dataset("linear", 8, math.inf, 0), TrainConfig("DGI-full"))
    assert set(METHODS) >= {"ETD", "DGI-naive", "DGI-path1", "DGI-path64", "DGI-path1/bal", "DGI-full"}


def test_config_round_trip():
    cfg = TrainConfig("DGI-path1/bal", hidden=(4, 5), seed=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_divergence_guard(small_data, monkeypatch):
    import sobbo.training as tr

    real = tr._batch_loss
    calls = []

    def blowing_up(*args):
        calls.append(1)
        loss = real(*args)
        return loss * (1e7 if len(calls) >= 5 else 1.0)

    monkeypatch.setattr(tr, "_batch_loss", blowing_up)
    with pytest.raises(DivergenceError) as info:
        train(small_data, small_cfg())
    assert info.value.step == 5 and len(info.value.batch) == 8


def test_non_finite_loss_reports_step_and_batch(small_data):
    y = small_data.y.copy()
    y[:] = 1e300
    bad = small_data.__class__(small_data.theta, small_data.x, y)
    with pytest.raises(TrainingError) as info:
        train(bad, small_cfg())
    assert info.value.step == 1
    assert "batch indices" in str(info.value)
