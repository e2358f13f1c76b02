import io

import numpy as np
import pytest

from geodesic_diffusion import (
    AdamState,
    ConfigError,
    CorruptFile,
    ExponentialVE,
    LengthMismatch,
    MlpDenoiser,
    adam_step,
    load_checkpoint,
    save_checkpoint,
    time_features,
)

ARCHITECTURES = {
    "plain": dict(n=4, n_cond=0, hidden=(6, 5, 7)),
    "identity": dict(n=4, n_cond=1, hidden=(6, 5, 7), activation="identity"),
    "conditional": dict(n=4, n_cond=2, hidden=(6, 5, 7), schedule=ExponentialVE()),
    "uncentred": dict(n=4, n_cond=1, hidden=(6, 5, 7), schedule=ExponentialVE(), centre_on_condition=False),
    "linear_skip": dict(n=4, n_cond=1, hidden=(6, 5, 7), schedule=ExponentialVE(), linear_skip=True),
}


def _batch(model, rng, batch=5):
    x = rng.standard_normal((batch, model.n))
    cond = rng.standard_normal((batch, model.n_cond, model.n)) if model.n_cond else None
    t = rng.uniform(0.05, 0.95, batch)
    target = rng.standard_normal((batch, model.n))
    return x, cond, t, target


def _loss(model, x, cond, t, target):
    d = model.predict(x, cond, t) - target
    return float(np.mean(d * d))


def max_relative_gradient_error(model, x, cond, t, target, h=1e-5):
    """Largest |analytic - central difference| / max(|analytic|, |fd|) over all parameters.

    Components smaller than 1e-4 of the largest gradient component are
    measured against that floor instead: the central difference itself
    carries an absolute error near 1e-12 there.
    """
    _, grads = model.loss_and_grads(x, cond, t, target)
    worst = 0.0
    scale = max(float(np.max(np.abs(g))) for g in grads.values())
    for name, p in model.params.items():
        fd = np.empty_like(p)
        flat = p.reshape(-1)
        out = fd.reshape(-1)
        for i in range(flat.size):
            step = h * max(1.0, abs(flat[i]))
            old = flat[i]
            flat[i] = old + step
            up = _loss(model, x, cond, t, target)
            flat[i] = old - step
            down = _loss(model, x, cond, t, target)
            flat[i] = old
            out[i] = (up - down) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(grads[name]), np.abs(fd)), 1e-4 * scale)
        worst = max(worst, float(np.max(np.abs(grads[name] - fd) / denom)))
    return worst


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_gradient_check_at_init_and_after_training(arch, rng):
    model = MlpDenoiser(**ARCHITECTURES[arch], seed=3)
    batch = _batch(model, rng)
    assert max_relative_gradient_error(model, *batch) <= 1e-4
    state = AdamState()
    params = model.params
    for _ in range(100):
        _, grads = model.loss_and_grads(*batch)
        params, state = adam_step(params, grads, state, lr=1e-2)
        model.params = params
    assert max_relative_gradient_error(model, *batch) <= 1e-4


def test_single_linear_layer_gradient_closed_form(rng):
    model = MlpDenoiser(3, 0, hidden=(), time_dim=0, activation="identity", seed=1)
    x = rng.standard_normal((7, 3))
    y = rng.standard_normal((7, 3))
    loss, grads = model.loss_and_grads(x, None, 0.5, y)
    resid = x @ model.params["W0"] + model.params["b0"] - y
    np.testing.assert_allclose(grads["W0"], 2 * x.T @ resid / resid.size, rtol=1e-13)
    np.testing.assert_allclose(grads["b0"], 2 * resid.sum(axis=0) / resid.size, rtol=1e-13)
    assert loss == pytest.approx(np.mean(resid**2), rel=1e-14)


def test_gradient_zero_at_perfect_predictor(rng):
    model = MlpDenoiser(**ARCHITECTURES["conditional"], seed=0)
    x, cond, t, _ = _batch(model, rng)
    loss, grads = model.loss_and_grads(x, cond, t, model.predict(x, cond, t))
    assert loss == 0.0
    assert all(np.max(np.abs(g)) <= 1e-10 for g in grads.values())


def test_zero_init_output_is_the_skip_predictor(rng):
    sched = ExponentialVE()
    model = MlpDenoiser(4, 1, (8, 8, 8), schedule=sched, sigma_data=0.4, zero_init_output=True)
    x, cond, t, _ = _batch(model, rng)
    a, s, _, _ = sched.coefficients(t)
    v = (0.4 * a) ** 2 + s * s
    expected = (s / v)[:, None] * (x - a[:, None] * cond[:, 0])
    np.testing.assert_allclose(model.predict(x, cond, t), expected, rtol=1e-14)


def test_parameter_count_and_architecture():
    model = MlpDenoiser(256, 1, (256, 256, 256))
    inputs = 256 * 2 + 16
    expected = inputs * 256 + 256 + 2 * (256 * 256 + 256) + 256 * 256 + 256
    assert model.parameter_count == expected
    assert model.architecture()["hidden"] == [256, 256, 256]


def test_forward_is_total_on_large_finite_inputs():
    model = MlpDenoiser(4, 0, (8, 8, 8))
    out = model.predict(np.full((2, 4), 1e6), None, 0.3)
    assert np.all(np.isfinite(out))


def test_shape_errors():
    model = MlpDenoiser(4, 1, (8,))
    with pytest.raises(LengthMismatch):
        model.predict(np.zeros((2, 3)), np.zeros((2, 1, 3)), 0.5)
    with pytest.raises(LengthMismatch):
        model.predict(np.zeros((2, 4)), None, 0.5)
    with pytest.raises(ConfigError):
        MlpDenoiser(4, activation="relu")


def test_time_features():
    f = time_features(np.array([0.0, 0.5]))
    assert f.shape == (2, 16)
    np.testing.assert_array_equal(f[0, :8], 0.0)
    np.testing.assert_array_equal(f[0, 8:], 1.0)
    assert f[1, 0] == pytest.approx(np.sin(0.5))
    assert f[1, 7] == pytest.approx(np.sin(100.0))
    with pytest.raises(ConfigError):
        time_features(0.1, 5)


# --------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_keeps_params_and_decays_moments():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState({"w": np.array([0.5, 0.5])}, {"w": np.array([0.25, 0.25])}, 3)
    new, st = adam_step(p, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(new["w"], p["w"])
    _, st = adam_step(p, {"w": np.zeros(2)}, state)
    np.testing.assert_allclose(st.m["w"], 0.9 * 0.5)
    np.testing.assert_allclose(st.v["w"], 0.999 * 0.25)
    assert st.step == 4


def test_adam_first_step_is_lr_times_sign():
    g = np.array([3.0, -0.02, 1e-3])
    new, _ = adam_step({"w": np.zeros(3)}, {"w": g}, AdamState(), lr=1e-3)
    np.testing.assert_allclose(new["w"], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(np.abs(new["w"]), 1e-3, rtol=1e-4)


def test_adam_second_identical_step_not_larger():
    g = {"w": np.array([0.7, -1.3])}
    p0 = {"w": np.zeros(2)}
    p1, s1 = adam_step(p0, g, AdamState())
    p2, _ = adam_step(p1, g, s1)
    first = np.abs(p1["w"] - p0["w"])
    second = np.abs(p2["w"] - p1["w"])
    assert np.all(second <= first + 1e-12)


def test_adam_does_not_mutate_inputs():
    p = {"w": np.ones(3)}
    g = {"w": np.ones(3)}
    adam_step(p, g, AdamState())
    np.testing.assert_array_equal(p["w"], 1.0)


def test_adam_shape_mismatch():
    with pytest.raises(LengthMismatch):
        adam_step({"w": np.ones(3)}, {"w": np.ones(2)}, AdamState())


def test_zero_learning_rate_is_a_no_op(rng):
    model = MlpDenoiser(**ARCHITECTURES["plain"])
    batch = _batch(model, rng)
    _, grads = model.loss_and_grads(*batch)
    new, _ = adam_step(model.params, grads, AdamState(), lr=0.0)
    for k in new:
        np.testing.assert_array_equal(new[k], model.params[k])


# --------------------------------------------------------------------------
# checkpoints


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_checkpoint_round_trip(arch, rng):
    model = MlpDenoiser(**ARCHITECTURES[arch], seed=5)
    batch = _batch(model, rng)
    _, grads = model.loss_and_grads(*batch)
    params, state = adam_step(model.params, grads, AdamState())
    model.params = params
    buf = io.BytesIO()
    save_checkpoint(buf, model, state, {"note": "x", "iteration": 1})
    buf.seek(0)
    again, st2, extra = load_checkpoint(buf)
    assert extra == {"note": "x", "iteration": 1}
    assert st2.step == 1
    for k in model.params:
        np.testing.assert_array_equal(again.params[k], model.params[k])
        np.testing.assert_array_equal(st2.m[k], state.m[k])
        np.testing.assert_array_equal(st2.v[k], state.v[k])
    x, cond, t, _ = batch
    np.testing.assert_array_equal(again.predict(x, cond, t), model.predict(x, cond, t))
    assert again.architecture() == model.architecture()


def test_checkpoint_without_optimizer(tmp_path):
    model = MlpDenoiser(3, 0, (4,))
    save_checkpoint(tmp_path / "m.gdm", model)
    again, state, extra = load_checkpoint(tmp_path / "m.gdm")
    assert state is None and extra == {}


def test_corrupt_checkpoints(tmp_path):
    (tmp_path / "bad.gdm").write_bytes(b"nope")
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "bad.gdm")
    buf = io.BytesIO()
    save_checkpoint(buf, MlpDenoiser(3, 0, (4,)))
    (tmp_path / "long.gdm").write_bytes(buf.getvalue() + b"\0")
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "long.gdm")
