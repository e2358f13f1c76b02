"""Forward perturbation, the epsilon-prediction objective and the training loop."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple, Protocol

import numpy as np

from .errors import ConfigError, LengthMismatch, NonFiniteLoss, OutOfRange
from .mlp import AdamState, MlpDenoiser, adam_step
from .schedules import ExponentialVE, Schedule, invert_noise_ratio

__all__ = [
    "Denoiser",
    "Sample",
    "Dataset",
    "TrainingConfig",
    "TrainResult",
    "perturb",
    "loss",
    "train",
    "write_loss_csv",
    "read_loss_csv",
    "iterations_to_threshold",
    "smooth",
    "noise_level_loss",
    "NoiseLevelProbe",
]


class Denoiser(Protocol):
    """Anything that predicts the injected noise.

    ``predict(x, cond, t)`` takes ``x`` of shape (batch, n), ``cond`` of
    shape (batch, k, n) or None, and scalar or (batch,) times; it returns
    an array shaped like ``x`` and must be deterministic.
    """

    def predict(self, x, cond, t): ...


class Sample(NamedTuple):
    x0: np.ndarray
    condition: np.ndarray  # (k, n), k may be 0


@dataclass
class Dataset:
    """Targets ``x0`` (count, n) with ``cond`` (count, k, n) conditioning vectors.

    Images are stored row-major flattened; ``shape`` records (height, width).
    """

    x0: np.ndarray
    cond: np.ndarray | None = None
    shape: tuple | None = None

    def __post_init__(self):
        self.x0 = np.atleast_2d(np.asarray(self.x0, dtype=np.float64))
        if self.cond is None:
            self.cond = np.zeros((len(self.x0), 0, self.n))
        self.cond = np.asarray(self.cond, dtype=np.float64)
        if self.cond.ndim == 2:
            self.cond = self.cond[:, None, :]
        if self.cond.shape[0] != len(self.x0) or self.cond.shape[2] != self.n:
            raise LengthMismatch(f"conditions {self.cond.shape} do not match targets {self.x0.shape}")
        if self.shape is not None:
            self.shape = tuple(int(s) for s in self.shape)
            if int(np.prod(self.shape)) != self.n:
                raise LengthMismatch(f"image shape {self.shape} does not hold {self.n} values")

    def __len__(self):
        return len(self.x0)

    def __getitem__(self, i) -> Sample:
        return Sample(self.x0[i], self.cond[i])

    @property
    def n(self):
        return self.x0.shape[1]

    @property
    def n_cond(self):
        return self.cond.shape[1]

    def cond_or_none(self, idx=slice(None)):
        return self.cond[idx] if self.n_cond else None


def perturb(x0, t, kind: Schedule, noise):
    """x_t = alpha(t) x0 + sigma(t) noise, broadcasting a per-row t over batches."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise LengthMismatch(f"x0 shape {x0.shape} != noise shape {noise.shape}")
    a, s, _, _ = kind.coefficients(t)
    if np.ndim(a) and x0.ndim > 1:
        a = a.reshape(-1, *([1] * (x0.ndim - 1)))
        s = s.reshape(-1, *([1] * (x0.ndim - 1)))
    return a * x0 + s * noise


def loss(denoiser, x0, cond, t, noise, kind: Schedule, reduction: str = "mean") -> float:
    """Monte-Carlo estimate of E ||eps - eps_theta(alpha x0 + sigma eps, c, t)||^2.

    ``reduction="mean"`` averages over batch and components (the training
    objective); ``"sum"`` sums components and averages over the batch.
    """
    x0 = np.atleast_2d(x0)
    noise = np.atleast_2d(noise)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x0),))
    if np.any(t < 0) or np.any(t > 1):
        raise OutOfRange("t draws must lie in [0, 1]")
    x_t = perturb(x0, t, kind, noise)
    diff = noise - denoiser.predict(x_t, cond, t)
    if reduction == "mean":
        return float(np.mean(diff * diff))
    if reduction == "sum":
        return float(np.mean(np.sum(diff * diff, axis=1)))
    raise ConfigError(f"unknown reduction {reduction!r}")


def noise_level_loss(denoiser, data: Dataset, kind: Schedule, ratios, noise) -> float:
    """Objective averaged over fixed noise-to-signal ratios instead of t ~ U[0, 1].

    Each ratio is mapped to its time under ``kind``, so two schedules with
    the same endpoints are scored on the same noise levels and the same
    draws ``noise[j]`` (shape (len(ratios), len(data), n)).
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (len(ratios), len(data), data.n):
        raise LengthMismatch(f"noise must have shape {(len(ratios), len(data), data.n)}, got {noise.shape}")
    total = 0.0
    for r, e in zip(ratios, noise):
        t = invert_noise_ratio(kind, float(r))
        total += loss(denoiser, data.x0, data.cond_or_none(), np.full(len(data), t), e, kind)
    return total / len(ratios)


class NoiseLevelProbe:
    """Training callback recording ``noise_level_loss`` every ``every`` iterations."""

    def __init__(self, data: Dataset, kind: Schedule, ratios, noise, every: int = 100):
        self.data, self.kind, self.ratios, self.noise = data, kind, ratios, noise
        self.every = int(every)
        self.iterations: list[int] = []
        self.values: list[float] = []

    def __call__(self, iteration, value, model):
        if (iteration + 1) % self.every == 0:
            self.iterations.append(iteration + 1)
            self.values.append(noise_level_loss(model, self.data, self.kind, self.ratios, self.noise))

    def first_below(self, threshold: float):
        """Iteration count at which the probe first reads <= threshold, else None."""
        for it, v in zip(self.iterations, self.values):
            if v <= threshold:
                return it
        return None


@dataclass
class TrainingConfig:
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iterations: int = 5000
    seed: int = 0
    schedule: Schedule = field(default_factory=ExponentialVE)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigError("Adam moments must satisfy 0 <= beta < 1, eps > 0")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")


@dataclass
class TrainResult:
    model: MlpDenoiser
    losses: np.ndarray
    optimizer: AdamState
    rng_state: dict
    iteration: int


def train(model: MlpDenoiser, data: Dataset, config: TrainingConfig, resume: TrainResult | None = None,
          callback=None) -> TrainResult:
    """Run the training loop: per row draw t ~ U[0,1], (x0, c) and eps ~ N(0, I), then take one Adam step.

    The loop is bit-reproducible for a fixed seed. Passing the result of a
    previous call as ``resume`` continues from its parameters, optimizer
    moments and random stream, so that two consecutive runs of k and m
    iterations reproduce one run of k + m.
    """
    if len(data) == 0:
        raise ConfigError("dataset is empty")
    if data.n != model.n or data.n_cond != model.n_cond:
        raise LengthMismatch(
            f"dataset (n={data.n}, k={data.n_cond}) does not match model (n={model.n}, k={model.n_cond})"
        )
    rng = np.random.Generator(np.random.PCG64(config.seed))
    model = model.copy()
    state = AdamState()
    start = 0
    if resume is not None:
        model = resume.model.copy()
        state = resume.optimizer
        rng.bit_generator.state = resume.rng_state
        start = resume.iteration
    params = model.params
    kind = config.schedule
    losses = np.empty(config.iterations)
    for i in range(config.iterations):
        idx = rng.integers(0, len(data), size=config.batch_size)
        t = rng.uniform(0.0, 1.0, size=config.batch_size)
        eps = rng.standard_normal((config.batch_size, data.n))
        x_t = perturb(data.x0[idx], t, kind, eps)
        value, grads = model.loss_and_grads(x_t, data.cond_or_none(idx), t, eps)
        if not np.isfinite(value):
            raise NonFiniteLoss(start + i, value)
        losses[i] = value
        params, state = adam_step(params, grads, state, config.lr, config.beta1, config.beta2, config.eps)
        model.params = params
        if callback is not None:
            callback(start + i, value, model)
    return TrainResult(model, losses, state, rng.bit_generator.state, start + config.iterations)


def write_loss_csv(losses, path, start: int = 0):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "loss"])
        for i, v in enumerate(losses, start):
            w.writerow([i, f"{v:.17g}"])


def read_loss_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["loss"]) for r in rows])


def smooth(values, window: int):
    """Trailing moving average; entry i averages values[max(0, i-window+1) : i+1]."""
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    hi = np.arange(1, len(values) + 1)
    lo = np.maximum(hi - window, 0)
    return (c[hi] - c[lo]) / (hi - lo)


def iterations_to_threshold(values, threshold: float, window: int = 100):
    """First iteration whose ``window``-smoothed value is <= threshold, else None."""
    sm = smooth(values, window)
    hits = np.nonzero(sm[window - 1:] <= threshold)[0]
    return int(hits[0] + window - 1) if len(hits) else None
