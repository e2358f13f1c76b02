"""Fisher-Rao geometry of isotropic Gaussian paths.

A path t -> N(alpha_t x0, sigma_t^2 I) has Fisher-Rao speed

    v(t) = sqrt(A^2 alpha'^2 + 2n sigma'^2) / sigma,   A = ||x0||,

length l = int v dt and kinetic energy E = 1/2 int v^2 dt, with E >= l^2/2
and equality exactly for constant-speed paths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson

from .errors import EndpointMismatch, InvalidSigma, ConfigError
from .schedules import Schedule, SchedulePoint, _bisect_ratio

__all__ = [
    "PathDiagnostics",
    "DEFAULT_QUADRATURE",
    "fisher_information",
    "path_speed",
    "speed_profile",
    "path_length",
    "path_energy",
    "length_and_energy",
    "momentum_alpha",
    "diagnose_path",
    "compare_energies",
]

DEFAULT_QUADRATURE = 4096
CONSTANT_SPEED_CV = 1e-6


def fisher_information(sigma: float, n: int) -> tuple[float, float]:
    """Diagonal scales of the Fisher information of N(mu, sigma^2 I_n) in (mu, sigma).

    Returns ``(1/sigma^2, 2n/sigma^2)``: the first multiplies the identity on
    the mean block, the second is the scalar sigma entry.
    """
    if not sigma > 0:
        raise InvalidSigma(f"sigma must be > 0, got {sigma}")
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    inv = 1.0 / (sigma * sigma)
    return inv, 2 * n * inv


def _speed(alpha_dot, sigma, sigma_dot, A, n):
    return np.sqrt(A * A * alpha_dot**2 + 2 * n * sigma_dot**2) / sigma


def path_speed(point: SchedulePoint, A: float, n: int) -> float:
    return float(_speed(point.dalpha, point.sigma, point.dsigma, A, n))


def momentum_alpha(point: SchedulePoint, A: float) -> float:
    """Conjugate momentum p_alpha = (A^2 / sigma^2) dalpha/dt."""
    return A * A * point.dalpha / point.sigma**2


def _metric(schedule, A, n):
    if n is None:
        n = getattr(schedule, "n", 1)
    if A is None:
        A = getattr(schedule, "A", None)
        if A is None or n != getattr(schedule, "n", n):
            A = math.sqrt(n)
    if not A > 0 or n < 1:
        raise ConfigError(f"need A > 0 and n >= 1, got A={A}, n={n}")
    return float(A), int(n)


def speed_profile(schedule: Schedule, t, A=None, n=None):
    A, n = _metric(schedule, A, n)
    _, s, da, ds = schedule.coefficients(t)
    return _speed(da, s, ds, A, n)


def _quadrature_variable(schedule):
    r0, r1 = (float(v) for v in schedule.noise_ratio(np.array([0.0, 1.0])))
    if r0 > 0 and math.isfinite(r1) and r1 > r0 * (1 + 1e-12):
        return "log_ratio"
    return "t"


def length_and_energy(schedule: Schedule, A=None, n=None, quadrature_points: int = DEFAULT_QUADRATURE,
                      variable: str = "auto") -> tuple[float, float]:
    """Composite Simpson estimates of (length, energy).

    ``variable="t"`` integrates on a uniform grid in t. ``"log_ratio"``
    integrates on a uniform grid in s = log(rho(t)/rho0) / log(rho1/rho0)
    where rho = sigma/alpha, i.e. substitutes t = t(s). Hand-crafted paths
    spread their speed over boundary layers of width ~1e-4 in t, which a
    uniform t-grid cannot resolve; in s the same integrands are smooth.
    ``"auto"`` picks ``log_ratio`` whenever the noise ratio is positive and
    increasing between the endpoints.
    """
    if quadrature_points < 16:
        raise ConfigError(f"quadrature_points must be >= 16, got {quadrature_points}")
    m = int(quadrature_points)
    m += m % 2
    A, n = _metric(schedule, A, n)
    if variable == "auto":
        variable = _quadrature_variable(schedule)
    if variable == "t":
        t = np.linspace(0.0, 1.0, m + 1)
        _, s, da, ds = schedule.coefficients(t)
        v = _speed(da, s, ds, A, n)
        return float(simpson(v, x=t)), float(0.5 * simpson(v * v, x=t))
    if variable != "log_ratio":
        raise ConfigError(f"unknown quadrature variable {variable!r}")

    r0, r1 = (float(v) for v in schedule.noise_ratio(np.array([0.0, 1.0])))
    span = math.log(r1 / r0)
    s_grid = np.linspace(0.0, 1.0, m + 1)
    t = np.empty_like(s_grid)
    t[0], t[-1] = 0.0, 1.0
    t[1:-1] = _bisect_ratio(schedule, r0 * np.exp(span * s_grid[1:-1]))
    a, sig, da, ds = schedule.coefficients(t)
    dlog_ratio = ds / sig - da / a
    dt_ds = span / dlog_ratio
    v = _speed(da, sig, ds, A, n)
    return float(simpson(v * dt_ds, x=s_grid)), float(0.5 * simpson(v * v * dt_ds, x=s_grid))


def path_length(schedule, A=None, n=None, quadrature_points: int = DEFAULT_QUADRATURE, variable="auto") -> float:
    return length_and_energy(schedule, A, n, quadrature_points, variable)[0]


def path_energy(schedule, A=None, n=None, quadrature_points: int = DEFAULT_QUADRATURE, variable="auto") -> float:
    return length_and_energy(schedule, A, n, quadrature_points, variable)[1]


@dataclass
class PathDiagnostics:
    kind: str
    length: float
    energy: float
    speeds: np.ndarray = field(repr=False)
    momentum_samples: np.ndarray = field(repr=False)
    speed_cv: float
    momentum_spread: float

    @property
    def energy_over_half_length_sq(self):
        if self.length == 0:
            return math.nan
        return self.energy / (0.5 * self.length**2)

    @property
    def energy_margin(self):
        """(E - l^2/2) / E; zero for constant-speed paths."""
        if self.energy == 0:
            return 0.0
        return (self.energy - 0.5 * self.length**2) / self.energy

    @property
    def is_constant_speed(self):
        return self.speed_cv <= CONSTANT_SPEED_CV

    def to_json(self) -> dict:
        ratio = self.energy_over_half_length_sq
        return {
            "kind": self.kind,
            "length": self.length,
            "energy": self.energy,
            "energy_over_half_length_sq": None if math.isnan(ratio) else ratio,
            "speed_cv": self.speed_cv,
            "momentum_spread": self.momentum_spread,
        }


def _momentum_spread(p):
    scale = float(np.max(np.abs(p)))
    spread = float(np.max(p) - np.min(p))
    if scale <= 1e-12:
        return spread
    return spread / scale


def diagnose_path(schedule: Schedule, A=None, n=None, samples: int = 100,
                  quadrature_points: int = DEFAULT_QUADRATURE) -> PathDiagnostics:
    """Speed, momentum, length and energy diagnostics of ``schedule``.

    ``speeds`` and ``momentum_samples`` are (samples, 2) arrays of (t, value)
    on a uniform grid. ``momentum_spread`` is (max - min) / max|p| unless
    |p| <= 1e-12 everywhere, in which case it is the absolute spread.
    """
    if samples < 16:
        raise ConfigError(f"samples must be >= 16, got {samples}")
    A, n = _metric(schedule, A, n)
    t = np.linspace(0.0, 1.0, int(samples))
    _, s, da, ds = schedule.coefficients(t)
    if np.any(s <= 0):
        raise InvalidSigma(f"{schedule.kind}: sigma reaches 0 on [0, 1]; the path has infinite length")
    v = _speed(da, s, ds, A, n)
    p = A * A * da / s**2
    mean_v = float(np.mean(v))
    cv = float(np.std(v) / mean_v) if mean_v > 0 else 0.0
    length, energy = length_and_energy(schedule, A, n, quadrature_points)
    return PathDiagnostics(
        kind=schedule.kind,
        length=length,
        energy=energy,
        speeds=np.column_stack([t, v]),
        momentum_samples=np.column_stack([t, p]),
        speed_cv=cv,
        momentum_spread=_momentum_spread(p),
    )


def _check_same_endpoints(a: Schedule, b: Schedule, rtol=1e-9):
    ea, eb = a.endpoints(), b.endpoints()
    for (x, y) in zip(np.ravel(ea), np.ravel(eb)):
        if not math.isclose(x, y, rel_tol=rtol, abs_tol=0.0):
            raise EndpointMismatch(
                f"{a.kind} endpoints {ea} differ from {b.kind} endpoints {eb}; "
                "lengths and energies are only comparable between matched endpoints"
            )


def compare_energies(schedules, A=None, n=None, quadrature_points: int = DEFAULT_QUADRATURE,
                     samples: int = 100) -> list[PathDiagnostics]:
    """Diagnose several paths after checking that they share both endpoints."""
    schedules = list(schedules)
    for other in schedules[1:]:
        _check_same_endpoints(schedules[0], other)
    if A is None or n is None:
        A, n = _metric(schedules[0], A, n)
    return [diagnose_path(s, A, n, samples, quadrature_points) for s in schedules]
