import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from geodesic_diffusion import (
    ORACLE_STEPS,
    BoundaryConditions,
    ConditionalGaussianOracle,
    ConditionalGaussianTask,
    ConfigError,
    ExponentialVE,
    GaussianTarget,
    LengthMismatch,
    LinearSigma,
    MissingCondition,
    SamplerConfig,
    analytic_oracle,
    euler_step,
    exact_flow,
    fine_step_oracle,
    gts_init,
    make_schedule,
    make_time_grid,
    run_manifest,
    sample,
    write_vectors_csv,
)
from geodesic_diffusion.sampler import rms

VE = ExponentialVE()
GEO = make_schedule(BoundaryConditions(1.0, 0.002, 0.5, 40.0))
TARGET = GaussianTarget((0.25, -0.5), (0.25, 1.0))


class Zero:
    def predict(self, x, cond, t):
        return np.zeros_like(x)


class Counting:
    def __init__(self, inner):
        self.inner, self.times = inner, []

    def predict(self, x, cond, t):
        self.times.append(t)
        return self.inner.predict(x, cond, t)


def plateau_task(n=4):
    task = ConditionalGaussianTask((0.0,) * n, (0.25,) * n, 0.1)
    return task, task.sample(2000, np.random.default_rng(0)), ConditionalGaussianOracle(task, VE)


def test_grid_examples():
    grid = make_time_grid(SamplerConfig(6, VE, 3.0))
    assert grid.knots[0] == pytest.approx(math.log(1500) / math.log(40000), rel=1e-12)
    np.testing.assert_allclose(np.diff(grid.knots), -grid.knots[0] / 6, rtol=1e-12)
    assert make_time_grid(SamplerConfig(1, VE, 3.0)).knots.tolist() == [grid.knots[0], 0.0]
    assert make_time_grid(SamplerConfig(4, VE)).start == 1.0


@given(steps=st.integers(1, 300), ratio=st.floats(0.003, 79.0))
def test_grid_validity_and_truncation_consistency(steps, ratio):
    for sched in (VE, GEO):
        knots = make_time_grid(SamplerConfig(steps, sched, ratio)).knots
        assert len(knots) == steps + 1
        assert np.all(np.diff(knots) < 0) and knots[-1] == 0.0
        a, s, _, _ = sched.coefficients(knots[0])
        assert s / a == pytest.approx(ratio, rel=1e-10)


def test_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(0, VE)
    with pytest.raises(ConfigError):
        SamplerConfig(2.5, VE)
    with pytest.raises(ConfigError):
        SamplerConfig(3, VE, -1.0)
    from geodesic_diffusion import OutOfRange

    with pytest.raises(OutOfRange):
        make_time_grid(SamplerConfig(3, VE, 1000.0))


def test_gts_init_examples(rng):
    c = rng.standard_normal((3, 5))
    noise = rng.standard_normal((3, 5))
    t3 = make_time_grid(SamplerConfig(1, VE, 3.0)).start
    np.testing.assert_allclose(gts_init(c, t3, noise, VE), c + 3 * noise, rtol=1e-12)
    np.testing.assert_array_equal(gts_init(c, 0.5, np.zeros_like(c), VE), c)
    np.testing.assert_allclose(gts_init(np.zeros_like(c), t3, noise, VE), 3 * noise, rtol=1e-12)
    a, _, _, _ = GEO.coefficients(0.7)
    np.testing.assert_allclose(gts_init(c, 0.7, np.zeros_like(c), GEO), a * c, rtol=1e-15)
    with pytest.raises(LengthMismatch):
        gts_init(c[:, :4], 0.5, noise, VE)


def test_zero_predictor_step_is_identity_on_ve(rng):
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(euler_step(x, 0.8, 0.3, Zero(), None, VE), x)
    with pytest.raises(ConfigError):
        euler_step(x, 0.3, 0.8, Zero(), None, VE)


class SigmaIsT:
    """sigma(t) = t, alpha = 1; only the coefficient interface is used by the step."""

    def coefficients(self, t):
        t = np.asarray(t, dtype=np.float64)
        return np.ones_like(t), t, np.zeros_like(t), np.ones_like(t)


class XOverT:
    def predict(self, x, cond, t):
        return x / t


@given(t=st.floats(1e-3, 1.0))
def test_linear_schedule_step_to_zero_is_exact(t):
    x = np.array([[0.3, -2.0, 7.5]])
    np.testing.assert_allclose(euler_step(x, t, 0.0, XOverT(), None, SigmaIsT()), 0.0, atol=1e-15)


@pytest.mark.parametrize("t", [0.2, 0.5, 0.9])
def test_single_step_error_is_second_order(t, rng):
    orc = analytic_oracle(TARGET, VE)
    xt = exact_flow(TARGET.sample(200, rng), 0.0, t, TARGET, VE)
    errs = [rms(euler_step(xt, t, t - h, orc, None, VE) - exact_flow(xt, t, t - h, TARGET, VE))
            for h in (0.01, 0.005)]
    assert 3.5 <= errs[0] / errs[1] <= 4.5


def test_denoiser_never_called_at_zero():
    task, data, oracle = plateau_task()
    spy = Counting(oracle)
    sample(SamplerConfig(5, VE, 3.0), spy, data.cond[:3])
    assert len(spy.times) == 5 and min(spy.times) > 0


def test_sampling_is_deterministic():
    orc = analytic_oracle(TARGET, VE)
    a = sample(SamplerConfig(20, VE, seed=9), orc, batch=50, n=2)
    b = sample(SamplerConfig(20, VE, seed=9), orc, batch=50, n=2)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, sample(SamplerConfig(20, VE, seed=10), orc, batch=50, n=2))


def test_missing_condition_and_unconditional_shape():
    with pytest.raises(MissingCondition):
        sample(SamplerConfig(6, VE, 3.0), Zero(), None, batch=2, n=3)
    with pytest.raises(ConfigError):
        sample(SamplerConfig(6, VE), Zero())


def test_trajectory_and_unconditional_start():
    orc = analytic_oracle(TARGET, VE)
    noise = np.random.default_rng(0).standard_normal((4, 2))
    x, path = sample(SamplerConfig(3, VE), orc, noise=noise, batch=4, n=2, return_trajectory=True)
    assert path.shape == (4, 4, 2)
    np.testing.assert_allclose(path[0], 80.0 * noise, rtol=1e-14)
    np.testing.assert_array_equal(path[-1], x)


def test_several_conditions_are_averaged(rng):
    c = rng.standard_normal((2, 3, 4))
    noise = rng.standard_normal((2, 4))
    _, path = sample(SamplerConfig(1, VE, 3.0), Zero(), c, noise=noise, return_trajectory=True)
    np.testing.assert_allclose(path[0], c.mean(axis=1) + 3 * noise, rtol=1e-12)


def test_fine_step_oracle_is_the_1024_step_sampler():
    task, data, oracle = plateau_task()
    cfg = SamplerConfig(6, VE, 3.0, seed=4)
    np.testing.assert_array_equal(fine_step_oracle(cfg, oracle, data.cond[:50]),
                                  sample(cfg.with_steps(ORACLE_STEPS), oracle, data.cond[:50]))


def test_refinement_differences_shrink():
    task, data, oracle = plateau_task(16)
    cfg = SamplerConfig(8, VE, 3.0, seed=3)
    x = [sample(cfg.with_steps(N), oracle, data.cond) for N in (512, 1024, 2048)]
    d1, d2 = rms(x[0] - x[1]), rms(x[1] - x[2])
    assert d2 < d1
    assert d1 / d2 == pytest.approx(2.0, rel=0.05)


@pytest.mark.xfail(strict=True, reason="first-order error with sigma spanning 4.6 decades: 512 vs 1024 differ by ~1.4e-3")
def test_512_vs_1024_within_1e3():
    task, data, oracle = plateau_task(16)
    cfg = SamplerConfig(8, VE, 3.0, seed=3)
    assert rms(sample(cfg.with_steps(512), oracle, data.cond) - sample(cfg.with_steps(1024), oracle, data.cond)) <= 1e-3


@pytest.mark.xfail(strict=True, reason="6-step Euler on a uniform grid differs from 64 steps by ~16% of the data std")
def test_six_vs_sixty_four_steps_within_five_percent():
    task, data, oracle = plateau_task()
    cfg = SamplerConfig(6, VE, 3.0, seed=1)
    gap = rms(sample(cfg, oracle, data.cond) - sample(cfg.with_steps(64), oracle, data.cond))
    assert gap <= 0.05 * math.sqrt(0.25)


def test_variance_bias_is_first_order():
    # the sampler is affine in the starting noise, so the pushed-forward
    # variance is read off exactly from three probe inputs
    orc = analytic_oracle(TARGET, VE)
    probe = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    rel, shift = [], []
    for N in (1024, 4096):
        out = sample(SamplerConfig(N, VE), orc, noise=probe, batch=3, n=2)
        # the start sigma(1) eps omits alpha(1) mu; the exact flow of that start is the reference
        shift.append(out[0] - exact_flow(np.zeros(2), 1.0, 0.0, TARGET, VE))
        gain = np.array([out[1, 0] - out[0, 0], out[2, 1] - out[0, 1]])
        rel.append(gain**2 / np.array(TARGET.var) - 1)
    assert np.all(np.array(rel) < 0)
    np.testing.assert_allclose(rel[0] / rel[1], 4.0, rtol=0.05)
    np.testing.assert_allclose(shift[0] / shift[1], 4.0, rtol=0.05)


def test_manifest_and_csv(tmp_path):
    m = run_manifest(SamplerConfig(2, VE, 3.0, seed=5), note=1)
    assert m["schedule_kind"] == "exponential_ve" and len(m["knots"]) == 3 and m["note"] == 1
    x = np.array([[1 / 3, -2.0], [1e-300, 5.0]])
    write_vectors_csv(x, tmp_path / "s.csv")
    back = np.loadtxt(tmp_path / "s.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(back, x)
