import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, stats

from geodesic_diffusion import (
    BoundaryConditions,
    ConditionalGaussianOracle,
    ConditionalGaussianTask,
    ConfigError,
    ExponentialVE,
    GaussianTarget,
    LengthMismatch,
    SamplerConfig,
    ToyImageTask,
    analytic_oracle,
    exact_flow,
    load_image_dataset,
    make_gaussian_dataset,
    make_mixture_dataset,
    make_schedule,
    make_toy_images,
    sample,
    save_image_dataset,
)

GEO = make_schedule(BoundaryConditions(1.0, 0.002, 0.5, 40.0))


def numerical_eps(x, t, mu, var, sched, h=1e-4):
    """-sigma d/dx log p_t(x) with p_t by adaptive quadrature over x0 and a central difference."""
    a, s, _, _ = (float(v) for v in sched.coefficients(t))

    def log_p(y):
        f = lambda x0: stats.norm.pdf(y, a * x0, s) * stats.norm.pdf(x0, mu, math.sqrt(var))
        lo, hi = mu - 12 * math.sqrt(var), mu + 12 * math.sqrt(var)
        pts = [min(max(y / a, lo), hi)] if a > 0 else None
        return math.log(integrate.quad(f, lo, hi, points=pts, epsabs=0, epsrel=1e-13, limit=400)[0])

    return -s * (log_p(x + h) - log_p(x - h)) / (2 * h)


@pytest.mark.parametrize("sched", [ExponentialVE(), GEO], ids=lambda s: s.kind)
@pytest.mark.parametrize("t,x", [(0.3, 0.2), (0.6, -1.5), (0.9, 10.0)])
def test_oracle_matches_numerical_score(sched, t, x):
    mu, var = 0.4, 0.3
    orc = analytic_oracle(GaussianTarget((mu,), (var,)), sched)
    ref = numerical_eps(x, t, mu, var, sched)
    assert float(orc.predict(np.array([[x]]), None, t)[0, 0]) == pytest.approx(ref, rel=1e-6)


@given(t=st.floats(0, 1), x=st.floats(-5, 5))
def test_oracle_examples(t, x):
    sched = ExponentialVE()
    tg = GaussianTarget((0.7, -0.2), (0.5, 2.0))
    orc = analytic_oracle(tg, sched)
    a, s, _, _ = sched.coefficients(t)
    assert np.all(orc.predict(a * np.array([tg.mean]), None, t) == 0.0)
    iso = analytic_oracle(GaussianTarget((0.0, 0.0), (1.0, 1.0)), sched)
    xs = np.array([[x, -x]])
    np.testing.assert_allclose(iso.predict(xs, None, t), s * xs / (a * a + s * s), rtol=1e-14)


def test_exact_flow_preserves_marginal_quantile():
    sched = ExponentialVE()
    tg = GaussianTarget((0.3,), (0.2,))
    x = np.array([[1.7]])
    y = exact_flow(exact_flow(x, 0.8, 0.1, tg, sched), 0.1, 0.8, tg, sched)
    np.testing.assert_allclose(y, x, rtol=1e-13)


def test_conditional_oracle_is_posterior_oracle(rng):
    task = ConditionalGaussianTask((0.1, -0.3), (0.25, 1.0), 0.2)
    sched = ExponentialVE()
    orc = ConditionalGaussianOracle(task, sched)
    c = rng.standard_normal((5, 2))
    post = GaussianTarget(np.zeros(2), task.posterior_var())
    x = rng.standard_normal((5, 2))
    for i in range(5):
        m = task.posterior_mean(c[i])[0]
        ref = analytic_oracle(GaussianTarget(m, task.posterior_var()), sched).predict(x[i:i + 1], None, 0.4)
        np.testing.assert_allclose(orc.predict(x[i:i + 1], c[i:i + 1, None], 0.4), ref, rtol=1e-14)
    with pytest.raises(LengthMismatch):
        orc.predict(x, None, 0.4)
    assert post.n == 2


def test_posterior_matches_regression(rng):
    task = ConditionalGaussianTask((0.5,), (0.25,), 0.3)
    d = task.sample(200000, rng)
    c, x0 = d.cond[:, 0, 0], d.x0[:, 0]
    slope, intercept = np.polyfit(c, x0, 1)
    assert slope == pytest.approx(task.shrinkage()[0], abs=0.01)
    resid = x0 - task.posterior_mean(c)[:, 0]
    assert resid.var() == pytest.approx(task.posterior_var()[0], rel=0.02)


def test_pipeline_closure_on_geodesic_schedule():
    # the sampler is affine in its starting noise, so three probe inputs give
    # the pushed-forward mean and variance without Monte-Carlo error
    tg = GaussianTarget((0.5, -1.0), (0.3, 2.0))
    orc = analytic_oracle(tg, GEO)
    probe = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    start = exact_flow(np.zeros(2), 1.0, 0.0, tg, GEO)
    errors = []
    for N in (512, 2048):
        out = sample(SamplerConfig(N, GEO), orc, noise=probe, batch=3, n=2)
        gain = np.array([out[1, 0] - out[0, 0], out[2, 1] - out[0, 1]])
        errors.append(np.concatenate([out[0] - start, gain**2 / np.array(tg.var) - 1]))
    np.testing.assert_allclose(errors[0] / errors[1], 4.0, rtol=0.05)
    assert np.max(np.abs(errors[1])) < 0.05


def test_target_validation():
    with pytest.raises(LengthMismatch):
        GaussianTarget((0.0,), (1.0, 1.0))
    with pytest.raises(ConfigError):
        GaussianTarget((0.0,), (0.0,))
    with pytest.raises(ConfigError):
        ConditionalGaussianTask((0.0,), (1.0,), 0.0)
    with pytest.raises(ConfigError):
        ToyImageTask(mode="video")


def test_datasets_are_reproducible():
    tg = GaussianTarget((0.0,), (1.0,))
    np.testing.assert_array_equal(make_gaussian_dataset(tg, 10, 3).x0, make_gaussian_dataset(tg, 10, 3).x0)
    np.testing.assert_array_equal(make_mixture_dataset(10, 3).x0, make_mixture_dataset(10, 3).x0)
    assert not np.array_equal(make_mixture_dataset(10, 3).x0, make_mixture_dataset(10, 4).x0)
    a = make_toy_images(ToyImageTask(train=5, val=2, test=2, seed=1))
    b = make_toy_images(ToyImageTask(train=5, val=2, test=2, seed=1))
    for k in a:
        np.testing.assert_array_equal(a[k].x0, b[k].x0)
        np.testing.assert_array_equal(a[k].cond, b[k].cond)


def test_toy_images_range_and_zero_noise():
    split = make_toy_images(ToyImageTask(noise_std=0.0, train=20, val=1, test=1))["train"]
    np.testing.assert_array_equal(split.cond[:, 0], split.x0)
    assert split.shape == (16, 16) and split.x0.min() >= -1 and split.x0.max() <= 1
    noisy = make_toy_images(ToyImageTask(noise_std=0.4, train=20, val=1, test=1))["train"]
    assert noisy.cond.min() >= -1 and noisy.cond.max() <= 1


def test_triple_mode_neighbours_correlate():
    split = make_toy_images(ToyImageTask(mode="triple", noise_std=0.0, train=200, val=1, test=1))["train"]
    assert split.n_cond == 2
    for j in range(2):
        r = [np.corrcoef(split.x0[i], split.cond[i, j])[0, 1] for i in range(len(split))
             if split.x0[i].std() > 0 and split.cond[i, j].std() > 0]
        assert np.median(r) > 0.5


def test_image_dataset_round_trip(tmp_path):
    split = make_toy_images(ToyImageTask(train=4, val=1, test=1))["train"]
    save_image_dataset(split, tmp_path / "d", {"seed": 0})
    back = load_image_dataset(tmp_path / "d")
    assert back.shape == split.shape and back.n_cond == 1
    np.testing.assert_allclose(back.x0, split.x0, atol=1 / 255 + 1e-12)
    np.testing.assert_allclose(back.cond, split.cond, atol=1 / 255 + 1e-12)
