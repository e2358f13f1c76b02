"""Noise schedules (alpha_t, sigma_t) on t in [0, 1].

The central object is the closed-form Fisher-Rao geodesic between two
isotropic Gaussians,

    sigma(t) = A r sech(theta0 - delta t)
    alpha(t) = alpha0 - r sqrt(2n) [tanh(theta0) - tanh(theta0 - delta t)]

together with its degenerate limit (alpha constant, sigma exponential in t)
and a handful of hand-crafted baselines used for comparison.

Every schedule exposes ``coefficients(t)``, vectorised over ``t``, returning
``(alpha, sigma, dalpha, dsigma)`` as float64 arrays. All evaluation is done
in 64-bit floating point.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict

import numpy as np

from .errors import DegenerateAlpha, InvalidBoundary, OutOfRange, ConfigError

__all__ = [
    "BoundaryConditions",
    "GeodesicParams",
    "SchedulePoint",
    "Schedule",
    "GeodesicSchedule",
    "ExponentialVE",
    "LinearBeta",
    "CosineAlpha",
    "LinearSigma",
    "MatchedBaseline",
    "DEGENERACY_RTOL",
    "solve_geodesic_params",
    "eval_geodesic",
    "eval_exponential_ve",
    "eval_baseline",
    "snr",
    "invert_noise_ratio",
    "schedule_table",
    "write_schedule_csv",
    "make_schedule",
    "schedule_from_dict",
]

DEGENERACY_RTOL = 1e-8
BISECTION_MAX_ITER = 200


@dataclass(frozen=True)
class BoundaryConditions:
    """Endpoint Gaussians of a diffusion path: (alpha0, sigma0) at t=0, (alpha1, sigma1) at t=1."""

    alpha0: float
    sigma0: float
    alpha1: float
    sigma1: float

    def __post_init__(self):
        a0, s0, a1, s1 = self.alpha0, self.sigma0, self.alpha1, self.sigma1
        if not all(math.isfinite(v) for v in (a0, s0, a1, s1)):
            raise InvalidBoundary(f"non-finite boundary value in {self}")
        if not s0 > 0:
            raise InvalidBoundary(f"sigma0 must be > 0, got {s0}")
        if not s1 > s0:
            raise InvalidBoundary(f"sigma1 must exceed sigma0, got sigma0={s0}, sigma1={s1}")
        if not (a0 > 0 and a1 > 0):
            raise InvalidBoundary(f"alpha0 and alpha1 must be > 0, got {a0}, {a1}")
        if a1 > a0:
            raise InvalidBoundary(f"alpha1 must not exceed alpha0, got alpha0={a0}, alpha1={a1}")
        # sigma1 > sigma0 and alpha1 <= alpha0 already imply SNR(1) < SNR(0)

    @property
    def ratio0(self):
        return self.sigma0 / self.alpha0

    @property
    def ratio1(self):
        return self.sigma1 / self.alpha1


@dataclass(frozen=True)
class GeodesicParams:
    A: float
    n: int
    r: float
    theta0: float
    delta: float

    @property
    def scale(self):
        """Peak standard deviation A*r reached at theta0 - delta t = 0."""
        return self.A * self.r


@dataclass(frozen=True)
class SchedulePoint:
    t: float
    alpha: float
    sigma: float
    dalpha: float
    dsigma: float

    @property
    def snr(self):
        return snr(self)


def _as_time(t):
    arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise OutOfRange(f"t must lie in [0, 1], got {t!r}")
    return arr


class Schedule:
    """Base class. Subclasses implement ``_coefficients`` on a validated float64 array."""

    kind = "abstract"

    def coefficients(self, t):
        arr = _as_time(t)
        return self._coefficients(arr)

    def _coefficients(self, t):
        raise NotImplementedError

    def point(self, t) -> SchedulePoint:
        a, s, da, ds = self.coefficients(float(t))
        return SchedulePoint(float(t), float(a), float(s), float(da), float(ds))

    def alpha(self, t):
        return self.coefficients(t)[0]

    def sigma(self, t):
        return self.coefficients(t)[1]

    def noise_ratio(self, t):
        a, s, _, _ = self.coefficients(t)
        return s / a

    def endpoints(self):
        """((alpha0, sigma0), (alpha1, sigma1)) evaluated from the schedule itself."""
        a, s, _, _ = self.coefficients(np.array([0.0, 1.0]))
        return (float(a[0]), float(s[0])), (float(a[1]), float(s[1]))

    def to_dict(self) -> dict:
        raise NotImplementedError

    def __repr__(self):
        fields = ", ".join(f"{k}={v!r}" for k, v in self.to_dict().items() if k != "kind")
        return f"{type(self).__name__}({fields})"


# --------------------------------------------------------------------------
# geodesic


def solve_geodesic_params(bc: BoundaryConditions, A=None, n: int = 1) -> GeodesicParams:
    """Solve for (r, theta0, delta) so the closed-form geodesic meets ``bc``.

    Parameters
    ----------
    bc : BoundaryConditions
    A : float, optional
        Euclidean norm of the data anchor. Defaults to ``sqrt(n)``.
    n : int
        Data dimension.

    Raises
    ------
    DegenerateAlpha
        If ``|alpha0 - alpha1| <= 1e-8 * alpha0``.
    InvalidBoundary
        If the endpoints cannot be joined by a geodesic along which sigma
        increases monotonically (the geodesic would have to pass its peak
        A*r before t=1).

    Notes
    -----
    With ``d = A |alpha0 - alpha1| / sqrt(2n)`` and
    ``S = sigma1^2 - sigma0^2`` the endpoint equations reduce to
    ``sqrt(l^2 - sigma0^2) - sqrt(l^2 - sigma1^2) = d`` for the peak
    ``l = A r``, whose solution is

        l^2 = ((S + d^2) / (2d))^2 + sigma0^2.

    The angles are taken through ``asinh`` rather than ``arcosh`` so that
    an endpoint sitting at the peak does not lose half its digits.
    """
    if n < 1 or int(n) != n:
        raise ConfigError(f"n must be a positive integer, got {n!r}")
    n = int(n)
    if A is None:
        A = math.sqrt(n)
    A = float(A)
    if not (A > 0 and math.isfinite(A)):
        raise ConfigError(f"A must be positive, got {A!r}")
    gap = bc.alpha0 - bc.alpha1
    if abs(gap) <= DEGENERACY_RTOL * bc.alpha0:
        raise DegenerateAlpha(
            f"alpha0={bc.alpha0} and alpha1={bc.alpha1} coincide within "
            f"{DEGENERACY_RTOL:g} relative; use the exponential_ve schedule"
        )
    s0, s1 = bc.sigma0, bc.sigma1
    d = A * gap / math.sqrt(2 * n)
    S = (s1 - s0) * (s1 + s0)
    p0 = 0.5 * (S / d + d)  # sqrt(l^2 - sigma0^2)
    p1 = 0.5 * (S - d * d) / d  # sqrt(l^2 - sigma1^2), signed
    if p1 < 0:
        raise InvalidBoundary(
            "sigma would peak before t=1: need A^2 (alpha0-alpha1)^2 / (2n) <= "
            f"sigma1^2 - sigma0^2, got {d * d:.6g} > {S:.6g}"
        )
    peak = math.hypot(p0, s0)
    r = peak / A
    theta0 = math.asinh(p0 / s0)
    theta1 = math.asinh(p1 / s1)
    delta = theta0 - theta1
    if not (peak >= s0 and peak >= s1) or not delta > 0:
        raise InvalidBoundary(f"solved parameters are invalid (A*r={peak}, delta={delta})")
    return GeodesicParams(A=A, n=n, r=r, theta0=theta0, delta=delta)


def _geodesic_coefficients(params: GeodesicParams, alpha0: float, sigma0: float, t):
    peak = params.scale
    rs = params.r * math.sqrt(2 * params.n)
    u = params.theta0 - params.delta * t
    cosh_u = np.cosh(u)
    sigma = peak / cosh_u
    # tanh(a) - tanh(b) = sinh(a - b) / (cosh a cosh b), with cosh(theta0) = peak / sigma0
    alpha = alpha0 - rs * np.sinh(params.delta * t) * (sigma0 / peak) / cosh_u
    dsigma = sigma * params.delta * np.tanh(u)
    dalpha = -rs * params.delta / cosh_u**2
    return alpha, sigma, dalpha, dsigma


def eval_geodesic(params: GeodesicParams, bc: BoundaryConditions, t) -> SchedulePoint:
    t = float(_as_time(t))
    a, s, da, ds = _geodesic_coefficients(params, bc.alpha0, bc.sigma0, np.float64(t))
    return SchedulePoint(t, float(a), float(s), float(da), float(ds))


class GeodesicSchedule(Schedule):
    """Fisher-Rao geodesic between the Gaussians described by ``bc``."""

    kind = "geodesic"

    def __init__(self, bc: BoundaryConditions, A=None, n: int = 1):
        self.bc = bc
        self.params = solve_geodesic_params(bc, A, n)

    @property
    def A(self):
        return self.params.A

    @property
    def n(self):
        return self.params.n

    def _coefficients(self, t):
        return _geodesic_coefficients(self.params, self.bc.alpha0, self.bc.sigma0, t)

    def to_dict(self):
        return {"kind": self.kind, **asdict(self.bc), "A": self.A, "n": self.n}


# --------------------------------------------------------------------------
# exponential (degenerate geodesic, alpha constant)


class ExponentialVE(Schedule):
    """sigma(t) = sigma0 (sigma1/sigma0)^t with alpha held at ``alpha``."""

    kind = "exponential_ve"

    def __init__(self, sigma0: float = 0.002, sigma1: float = 80.0, alpha: float = 1.0):
        if not (sigma0 > 0 and sigma1 > sigma0 and math.isfinite(sigma1)):
            raise InvalidBoundary(f"need 0 < sigma0 < sigma1, got sigma0={sigma0}, sigma1={sigma1}")
        if not alpha > 0:
            raise InvalidBoundary(f"alpha must be > 0, got {alpha}")
        self.sigma0 = float(sigma0)
        self.sigma1 = float(sigma1)
        self.alpha_const = float(alpha)
        self.log_ratio = math.log(self.sigma1 / self.sigma0)

    def _coefficients(self, t):
        sigma = self.sigma0 * np.exp(self.log_ratio * t)
        alpha = np.full_like(sigma, self.alpha_const)
        return alpha, sigma, np.zeros_like(sigma), sigma * self.log_ratio

    def to_dict(self):
        return {"kind": self.kind, "sigma0": self.sigma0, "sigma1": self.sigma1, "alpha": self.alpha_const}


def eval_exponential_ve(sigma0: float, sigma1: float, t) -> SchedulePoint:
    return ExponentialVE(sigma0, sigma1).point(t)


# --------------------------------------------------------------------------
# baselines


class LinearBeta(Schedule):
    """Variance-preserving schedule with beta(t) linear on [0, 1].

    The defaults are the 1000-step DDPM range 1e-4..2e-2 rescaled to
    continuous time. sigma(0) = 0, so dsigma/dt is infinite at t = 0.
    """

    kind = "linear_beta"

    def __init__(self, beta_min: float = 0.1, beta_max: float = 20.0):
        if not (0 <= beta_min < beta_max):
            raise ConfigError(f"need 0 <= beta_min < beta_max, got {beta_min}, {beta_max}")
        self.beta_min = float(beta_min)
        self.beta_max = float(beta_max)

    def _integral(self, t):
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t

    def _coefficients(self, t):
        B = self._integral(t)
        beta = self.beta_min + (self.beta_max - self.beta_min) * t
        alpha = np.exp(-0.5 * B)
        sigma = np.sqrt(-np.expm1(-B))
        dalpha = -0.5 * beta * alpha
        with np.errstate(divide="ignore", invalid="ignore"):
            dsigma = np.where(sigma > 0, 0.5 * beta * alpha**2 / sigma, np.inf)
        return alpha, sigma, dalpha, dsigma

    def noise_ratio(self, t):
        B = self._integral(_as_time(t))
        return np.sqrt(np.expm1(B))

    def to_dict(self):
        return {"kind": self.kind, "beta_min": self.beta_min, "beta_max": self.beta_max}


class CosineAlpha(Schedule):
    """alpha(t) = cos((t+s)/(1+s) pi/2) / cos(s/(1+s) pi/2), sigma = sqrt(1 - alpha^2)."""

    kind = "cosine_alpha"

    def __init__(self, offset: float = 0.008):
        if not offset >= 0:
            raise ConfigError(f"offset must be >= 0, got {offset}")
        self.offset = float(offset)
        self._norm = math.cos(self.offset / (1 + self.offset) * math.pi / 2)

    def _coefficients(self, t):
        s = self.offset
        phi = (t + s) / (1 + s) * (math.pi / 2)
        dphi = (math.pi / 2) / (1 + s)
        alpha = np.clip(np.cos(phi) / self._norm, 0.0, 1.0)
        dalpha = -np.sin(phi) * dphi / self._norm
        sigma = np.sqrt(np.maximum(1.0 - alpha**2, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            dsigma = np.where(sigma > 0, -alpha * dalpha / sigma, np.inf)
        return alpha, sigma, dalpha, dsigma

    def to_dict(self):
        return {"kind": self.kind, "offset": self.offset}


class LinearSigma(Schedule):
    """Straight line in (alpha, sigma) between the endpoints of ``bc``."""

    kind = "linear_sigma"

    def __init__(self, bc: BoundaryConditions):
        self.bc = bc

    def _coefficients(self, t):
        bc = self.bc
        da = bc.alpha1 - bc.alpha0
        ds = bc.sigma1 - bc.sigma0
        alpha = bc.alpha0 + da * t
        sigma = bc.sigma0 + ds * t
        return alpha, sigma, np.full_like(alpha, da), np.full_like(sigma, ds)

    def to_dict(self):
        return {"kind": self.kind, **asdict(self.bc)}


class MatchedBaseline(Schedule):
    """A baseline re-expressed with the endpoints of a constant-alpha path.

    A schedule (alpha_b, sigma_b) defines the same denoising problem as
    alpha = const, sigma = const * sigma_b/alpha_b. This class takes the
    window [tau0, tau1] of ``base`` whose noise ratio runs from
    sigma0/alpha to sigma1/alpha, maps it affinely onto [0, 1], and holds
    alpha fixed. The result shares both endpoints with
    ``ExponentialVE(sigma0, sigma1, alpha)`` so lengths and energies can be
    compared directly.
    """

    def __init__(self, base: Schedule, sigma0: float = 0.002, sigma1: float = 80.0, alpha: float = 1.0):
        if isinstance(base, MatchedBaseline):
            raise ConfigError("cannot nest matched baselines")
        if not (0 < sigma0 < sigma1):
            raise InvalidBoundary(f"need 0 < sigma0 < sigma1, got {sigma0}, {sigma1}")
        self.base = base
        self.sigma0 = float(sigma0)
        self.sigma1 = float(sigma1)
        self.alpha_const = float(alpha)
        self.tau0 = invert_noise_ratio(base, self.sigma0 / self.alpha_const)
        self.tau1 = invert_noise_ratio(base, self.sigma1 / self.alpha_const)
        self.kind = f"{base.kind}_matched"

    def _coefficients(self, t):
        span = self.tau1 - self.tau0
        tau = self.tau0 + span * t
        tau = np.clip(tau, self.tau0, self.tau1)
        a, s, da, ds = self.base._coefficients(tau)
        ratio = s / a
        dratio = (ds * a - s * da) / a**2
        alpha = np.full_like(ratio, self.alpha_const)
        return alpha, self.alpha_const * ratio, np.zeros_like(ratio), self.alpha_const * dratio * span

    def to_dict(self):
        return {
            "kind": "matched",
            "base": self.base.to_dict(),
            "sigma0": self.sigma0,
            "sigma1": self.sigma1,
            "alpha": self.alpha_const,
        }


_BASELINES = {"linear_beta": LinearBeta, "cosine_alpha": CosineAlpha}


def eval_baseline(kind, t) -> SchedulePoint:
    """Evaluate a baseline schedule; ``kind`` is a Schedule or a baseline tag."""
    if isinstance(kind, str):
        try:
            kind = _BASELINES[kind]()
        except KeyError:
            raise ConfigError(f"unknown baseline {kind!r}; choose from {sorted(_BASELINES)}") from None
    return kind.point(t)


# --------------------------------------------------------------------------
# helpers


def snr(point: SchedulePoint) -> float:
    """alpha^2 / sigma^2 (infinite where sigma = 0)."""
    if point.sigma == 0:
        return math.inf
    return (point.alpha / point.sigma) ** 2


def invert_noise_ratio(kind: Schedule, ratio: float) -> float:
    """Find t with sigma(t)/alpha(t) = ratio by bisection on the monotone ratio."""
    ratio = float(ratio)
    lo_ratio, hi_ratio = (float(v) for v in kind.noise_ratio(np.array([0.0, 1.0])))
    tol = 1e-12 * max(abs(hi_ratio), 1e-300)
    if ratio == lo_ratio or abs(ratio - lo_ratio) <= 1e-12 * max(abs(lo_ratio), 1e-300):
        return 0.0
    if ratio == hi_ratio or abs(ratio - hi_ratio) <= tol:
        return 1.0
    if not (lo_ratio < ratio < hi_ratio):
        raise OutOfRange(f"noise ratio {ratio} outside attainable span [{lo_ratio}, {hi_ratio}]")
    return float(_bisect_ratio(kind, np.array([ratio]))[0])


def _bisect_ratio(kind: Schedule, targets):
    """Vectorised bisection; ``targets`` must lie inside the attainable span."""
    lo = np.zeros_like(targets)
    hi = np.ones_like(targets)
    for _ in range(BISECTION_MAX_ITER):
        mid = 0.5 * (lo + hi)
        below = kind.noise_ratio(mid) < targets
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= np.spacing(hi)):
            break
    return 0.5 * (lo + hi)


def schedule_table(kind: Schedule, grid_size: int) -> list[SchedulePoint]:
    """SchedulePoints on a uniform grid of ``grid_size`` points covering [0, 1]."""
    if grid_size < 2:
        raise ConfigError(f"grid_size must be >= 2, got {grid_size}")
    t = np.linspace(0.0, 1.0, int(grid_size))
    a, s, da, ds = kind.coefficients(t)
    return [SchedulePoint(*map(float, row)) for row in zip(t, a, s, da, ds)]


def write_schedule_csv(table, path_or_file):
    """Write rows ``t,alpha,sigma,dalpha,dsigma,snr`` with 17 significant digits."""
    fmt = "{:.17g}".format

    def _write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "alpha", "sigma", "dalpha", "dsigma", "snr"])
        for p in table:
            w.writerow([fmt(p.t), fmt(p.alpha), fmt(p.sigma), fmt(p.dalpha), fmt(p.dsigma), fmt(snr(p))])

    if hasattr(path_or_file, "write"):
        _write(path_or_file)
    else:
        with open(path_or_file, "w", newline="") as fh:
            _write(fh)


def make_schedule(bc: BoundaryConditions, A=None, n: int = 1) -> Schedule:
    """Geodesic for ``bc``, routed to ExponentialVE when alpha0 == alpha1."""
    if abs(bc.alpha0 - bc.alpha1) <= DEGENERACY_RTOL * bc.alpha0:
        return ExponentialVE(bc.sigma0, bc.sigma1, alpha=bc.alpha0)
    return GeodesicSchedule(bc, A, n)


def schedule_from_dict(d: dict) -> Schedule:
    """Inverse of ``Schedule.to_dict``."""
    d = dict(d)
    kind = d.pop("kind")
    if kind == "geodesic":
        A = d.pop("A", None)
        n = int(d.pop("n", 1))
        return GeodesicSchedule(BoundaryConditions(**d), A, n)
    if kind == "exponential_ve":
        return ExponentialVE(**d)
    if kind == "linear_beta":
        return LinearBeta(**d)
    if kind == "cosine_alpha":
        return CosineAlpha(**d)
    if kind == "linear_sigma":
        return LinearSigma(BoundaryConditions(**d))
    if kind == "matched":
        base = schedule_from_dict(d.pop("base"))
        return MatchedBaseline(base, **d)
    raise ConfigError(f"unknown schedule kind {kind!r}")
