"""Deterministic Euler sampler with truncated (GTS) initialisation.

Starting from x_{t_N} = alpha(t_N) c + sigma(t_N) eps, each step applies

    x <- x + (t_{k-1} - t_k) [ (a'/a) x + (s' - (a'/a) s) eps_theta(x, c, t_k) ]

with every coefficient evaluated at t_k from the schedule's analytic
derivatives. The denoiser is never called at t = 0.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, LengthMismatch, MissingCondition, NumericalError
from .schedules import Schedule, invert_noise_ratio

__all__ = [
    "FULL",
    "SamplerConfig",
    "TimeGrid",
    "make_time_grid",
    "gts_init",
    "euler_step",
    "sample",
    "fine_step_oracle",
    "write_vectors_csv",
    "run_manifest",
    "ORACLE_STEPS",
]

FULL = "full"
ORACLE_STEPS = 1024


@dataclass(frozen=True)
class SamplerConfig:
    steps: int
    schedule: Schedule
    truncation_ratio: float | str = FULL
    seed: int = 0

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.steps!r}")
        if self.truncation_ratio != FULL and not float(self.truncation_ratio) > 0:
            raise ConfigError(f"truncation_ratio must be positive or 'full', got {self.truncation_ratio!r}")

    @property
    def truncated(self):
        return self.truncation_ratio != FULL

    def with_steps(self, steps):
        return SamplerConfig(steps, self.schedule, self.truncation_ratio, self.seed)

    def to_dict(self):
        return {
            "steps": self.steps,
            "truncation_ratio": self.truncation_ratio,
            "seed": self.seed,
            "schedule": self.schedule.to_dict(),
        }


@dataclass(frozen=True)
class TimeGrid:
    knots: np.ndarray  # t_N > ... > t_0 = 0

    @property
    def steps(self):
        return len(self.knots) - 1

    @property
    def start(self):
        return float(self.knots[0])


def start_time(config: SamplerConfig) -> float:
    if not config.truncated:
        return 1.0
    return invert_noise_ratio(config.schedule, float(config.truncation_ratio))


def make_time_grid(config: SamplerConfig) -> TimeGrid:
    """N + 1 uniformly spaced knots from t_N down to exactly 0."""
    t_start = start_time(config)
    if not t_start > 0:
        raise ConfigError("truncation ratio maps to t_N = 0; nothing to integrate")
    knots = np.linspace(t_start, 0.0, config.steps + 1)
    knots[0], knots[-1] = t_start, 0.0
    return TimeGrid(knots)


def _cond_image(condition, n):
    """Collapse (batch, k, n) conditions to the (batch, n) image used for initialisation."""
    c = np.asarray(condition, dtype=np.float64)
    if c.ndim == 1:
        c = c[None, :]
    if c.ndim == 3:
        c = c.mean(axis=1)
    if n is not None and c.shape[-1] != n:
        raise LengthMismatch(f"condition length {c.shape[-1]} != {n}")
    return c


def gts_init(condition, t_start: float, noise, schedule: Schedule):
    """x_{t_N} = alpha(t_N) c + sigma(t_N) noise; several conditions are averaged into c."""
    noise = np.asarray(noise, dtype=np.float64)
    c = _cond_image(condition, noise.shape[-1])
    if c.shape != np.atleast_2d(noise).shape:
        raise LengthMismatch(f"condition shape {c.shape} != noise shape {noise.shape}")
    a, s, _, _ = schedule.coefficients(t_start)
    return (a * c + s * noise).reshape(noise.shape)


def euler_step(x, t_k: float, t_prev: float, denoiser, condition, schedule: Schedule):
    if not t_prev < t_k:
        raise ConfigError(f"steps must go backwards in time, got {t_k} -> {t_prev}")
    a, s, da, ds = (float(v) for v in schedule.coefficients(t_k))
    eps_hat = denoiser.predict(x, condition, t_k)
    drift = da / a
    out = x + (t_prev - t_k) * (drift * x + (ds - drift * s) * eps_hat)
    if not np.all(np.isfinite(out)):
        raise NumericalError(f"non-finite state after step {t_k:.6g} -> {t_prev:.6g}")
    return out


def sample(config: SamplerConfig, denoiser, condition=None, batch: int | None = None, n: int | None = None,
           noise=None, return_trajectory: bool = False):
    """Draw samples by Euler integration down the uniform time grid.

    ``condition`` is (batch, k, n) or (batch, n). Without a condition the
    sampler starts from sigma(1) eps at t = 1 and needs ``batch`` and ``n``.
    The starting noise comes from ``np.random.default_rng(config.seed)``
    unless ``noise`` is given.
    """
    grid = make_time_grid(config)
    cond = None
    if condition is not None:
        cond = np.asarray(condition, dtype=np.float64)
        if cond.ndim == 1:
            cond = cond[None, None, :]
        elif cond.ndim == 2:
            cond = cond[:, None, :]
        batch, n = cond.shape[0], cond.shape[2]
    elif config.truncated:
        raise MissingCondition("truncated sampling starts from a noised condition; none was given")
    elif batch is None or n is None:
        raise ConfigError("unconditional sampling needs batch and n")
    if noise is None:
        noise = np.random.default_rng(config.seed).standard_normal((batch, n))
    noise = np.asarray(noise, dtype=np.float64).reshape(batch, n)
    if cond is not None:
        x = gts_init(cond, grid.start, noise, config.schedule)
    else:
        _, s1, _, _ = config.schedule.coefficients(grid.start)
        x = float(s1) * noise
    path = [x] if return_trajectory else None
    for k in range(grid.steps):
        x = euler_step(x, grid.knots[k], grid.knots[k + 1], denoiser, cond, config.schedule)
        if path is not None:
            path.append(x)
    if return_trajectory:
        return x, np.stack(path)
    return x


def fine_step_oracle(config: SamplerConfig, denoiser, condition=None, **kwargs):
    """Reference solution: the same sampler run with 1024 steps."""
    return sample(config.with_steps(ORACLE_STEPS), denoiser, condition, **kwargs)


def write_vectors_csv(x, path):
    x = np.atleast_2d(x)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(x.shape[1])])
        for row in x:
            w.writerow([f"{v:.17g}" for v in row])


def run_manifest(config: SamplerConfig, **extra) -> dict:
    grid = make_time_grid(config)
    return {
        **config.to_dict(),
        "schedule_kind": config.schedule.kind,
        "knots": [float(k) for k in grid.knots],
        **extra,
    }


def dump_json(obj, path):
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o).__name__)

    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=default)
        fh.write("\n")


def rms(x):
    return math.sqrt(float(np.mean(np.square(x))))
