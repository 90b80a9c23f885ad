import numpy as np
import pytest

from sobbo import autodiff as ad
from sobbo.autodiff import Tape
from sobbo.models import (
    MlpSpec,
    eval_field,
    eval_surrogate,
    init_model,
    input_jacobian,
    input_jacobian_entry,
    load_checkpoint,
    load_model,
    save_model,
)

from conftest import central_diff


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(input_dim=0, hidden=(4,), output_dim=1),
        dict(input_dim=3, hidden=(), output_dim=1),
        dict(input_dim=3, hidden=(0,), output_dim=1),
        dict(input_dim=3, hidden=(4,), output_dim=2),
        dict(input_dim=3, hidden=(4,), output_dim=1, activation="gelu"),
    ],
)
def test_invalid_specs_rejected(kwargs):
    with pytest.raises(ValueError):
        MlpSpec(**kwargs)


def test_init_is_seeded_and_bounded():
    a = init_model(MlpSpec(6, (50, 20), 6, seed=3))
    b = init_model(MlpSpec(6, (50, 20), 6, seed=3))
    for p, q in zip(a.params, b.params):
        np.testing.assert_array_equal(p, q)
    assert np.all(np.abs(a.params[0]) <= np.sqrt(1 / 6))
    assert np.all(np.abs(a.params[2]) <= np.sqrt(1 / 50))
    assert a.n_params == 6 * 50 + 50 + 50 * 20 + 20 + 20 * 6 + 6


def test_taped_forward_matches_numpy_forward(rng):
    model = init_model(MlpSpec(4, (8, 8), 1, seed=0))
    Z = rng.normal(size=(5, 4))
    tape = Tape()
    out = model.on(tape)(tape.const(Z))
    np.testing.assert_allclose(out.value, model(Z), rtol=0, atol=0)


def test_output_shapes():
    g = init_model(MlpSpec(3, (4,), 1))
    h = init_model(MlpSpec(3, (4,), 3))
    assert eval_surrogate(g, np.zeros(3)).shape == ()
    assert eval_surrogate(g, np.zeros((7, 3))).shape == (7,)
    assert eval_field(h, np.zeros(3)).shape == (3,)
    assert eval_field(h, np.zeros((7, 3))).shape == (7, 3)
    with pytest.raises(ValueError):
        eval_field(g, np.zeros(3))
    with pytest.raises(ValueError):
        eval_surrogate(g, np.zeros(4))
    with pytest.raises(ValueError):
        eval_surrogate(g, np.array([np.nan, 0.0, 0.0]))


def test_input_jacobian_against_differences(rng):
    h = init_model(MlpSpec(3, (6, 6), 3, seed=1))
    Z = rng.normal(size=(2, 3))
    tape = Tape()
    J = input_jacobian(h.on(tape), tape.leaf(Z)).value
    for k in range(2):
        for j in range(3):
            fd = central_diff(lambda z: h(z[None])[0, j], Z[k])
            np.testing.assert_allclose(J[k, j], fd, rtol=1e-6, atol=1e-9)


def test_jacobian_entry_parameter_gradient_against_differences(rng):
    # d/dW0 of dh^j/dzeta^i, second order through the tape
    h = init_model(MlpSpec(3, (5,), 3, seed=2))
    zeta = rng.normal(size=3)
    tape = Tape()
    net = h.on(tape)
    e = input_jacobian_entry(net, zeta, 0, 2)
    (gW,) = ad.grad(e, [net.params[0]])

    def entry(W):
        m = h.copy()
        m.params[0] = W
        return float(input_jacobian_entry(m, zeta, 0, 2).value)

    np.testing.assert_allclose(gW, central_diff(entry, h.params[0]), rtol=1e-5, atol=1e-8)


def test_jacobian_entry_index_errors():
    h = init_model(MlpSpec(3, (5,), 3))
    with pytest.raises(IndexError):
        input_jacobian_entry(h, np.zeros(3), 3, 0)


def test_checkpoint_round_trip(tmp_path):
    model = init_model(MlpSpec(4, (7, 3), 4, seed=9))
    path = tmp_path / "m.npz"
    save_model(model, path, extra={"step": 5}, arrays={"m_0": np.ones(2)})
    loaded, extra, arrays = load_checkpoint(path)
    assert loaded.spec == model.spec
    for p, q in zip(model.params, loaded.params):
        np.testing.assert_array_equal(p, q)
    assert extra == {"step": 5}
    np.testing.assert_array_equal(arrays["m_0"], np.ones(2))


def test_checkpoint_bytes_are_reproducible(tmp_path):
    model = init_model(MlpSpec(2, (3,), 1))
    save_model(model, tmp_path / "a.npz")
    save_model(model, tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()


def test_foreign_file_rejected(tmp_path):
    np.savez(tmp_path / "x.npz", meta=np.array('{"format": "other", "version": 1}'))
    with pytest.raises(ValueError):
        load_model(tmp_path / "x.npz")
