"""Analytic Gaussian oracles and synthetic datasets.

For x0 ~ N(mu, diag(var)) the noisy marginal is
N(alpha mu, alpha^2 var + sigma^2), so the Bayes-optimal noise predictor is

    eps*(x, t) = sigma (x - alpha mu) / (alpha^2 var + sigma^2),

and the probability-flow map between two times is the affine map keeping
(x - alpha mu) / sqrt(alpha^2 var + sigma^2) fixed.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, asdict

import numpy as np

from .engine import Dataset
from .errors import ConfigError, LengthMismatch
from .schedules import Schedule

__all__ = [
    "GaussianTarget",
    "GaussianOracle",
    "ConditionalGaussianTask",
    "ConditionalGaussianOracle",
    "ToyImageTask",
    "analytic_oracle",
    "exact_flow",
    "make_gaussian_dataset",
    "make_mixture_dataset",
    "make_toy_images",
    "save_image_dataset",
    "load_image_dataset",
]


@dataclass(frozen=True)
class GaussianTarget:
    mean: tuple
    var: tuple

    def __post_init__(self):
        mean = tuple(float(m) for m in np.ravel(self.mean))
        var = tuple(float(v) for v in np.ravel(self.var))
        if len(mean) != len(var):
            raise LengthMismatch("mean and variance lengths differ")
        if not all(v > 0 for v in var):
            raise ConfigError("all variances must be > 0")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def n(self):
        return len(self.mean)

    def arrays(self):
        return np.array(self.mean), np.array(self.var)

    def sample(self, count, rng):
        mu, var = self.arrays()
        return mu + np.sqrt(var) * rng.standard_normal((count, self.n))


class GaussianOracle:
    """Exact eps* for Gaussian data under ``schedule``; conditions are ignored."""

    def __init__(self, target: GaussianTarget, schedule: Schedule):
        self.target = target
        self.schedule = schedule
        self._mu, self._var = target.arrays()

    def _mean(self, cond, batch):
        return np.broadcast_to(self._mu, (batch, self.target.n))

    def _var_of(self, cond, batch):
        return self._var

    def predict(self, x, cond=None, t=0.0):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(x),))
        a, s, _, _ = self.schedule.coefficients(t)
        a, s = a[:, None], s[:, None]
        mean = self._mean(cond, len(x))
        return s * (x - a * mean) / (a * a * self._var_of(cond, len(x)) + s * s)

    __call__ = predict


def analytic_oracle(target: GaussianTarget, schedule: Schedule) -> GaussianOracle:
    return GaussianOracle(target, schedule)


def exact_flow(x, t_from, t_to, target: GaussianTarget, schedule: Schedule, cond_mean=None, var=None):
    """Transport ``x`` along the exact probability-flow ODE from t_from to t_to."""
    mu, v = target.arrays()
    if cond_mean is not None:
        mu = cond_mean
    if var is not None:
        v = var
    a0, s0, _, _ = schedule.coefficients(t_from)
    a1, s1, _, _ = schedule.coefficients(t_to)
    z = (x - a0 * mu) / np.sqrt(a0 * a0 * v + s0 * s0)
    return a1 * mu + np.sqrt(a1 * a1 * v + s1 * s1) * z


@dataclass(frozen=True)
class ConditionalGaussianTask:
    """x0 ~ N(mean, diag(var)); the condition is c = x0 + noise_std * eta.

    The posterior p(x0 | c) is Gaussian, so the conditional noise predictor
    is available in closed form. This is the analytic stand-in for the
    conditional denoising task.
    """

    mean: tuple
    var: tuple
    noise_std: float

    def __post_init__(self):
        GaussianTarget(self.mean, self.var)
        object.__setattr__(self, "mean", tuple(float(m) for m in np.ravel(self.mean)))
        object.__setattr__(self, "var", tuple(float(v) for v in np.ravel(self.var)))
        if not self.noise_std > 0:
            raise ConfigError("noise_std must be > 0")

    @property
    def n(self):
        return len(self.mean)

    @property
    def prior(self):
        return GaussianTarget(self.mean, self.var)

    def shrinkage(self):
        var = np.array(self.var)
        return var / (var + self.noise_std**2)

    def posterior_var(self):
        return np.array(self.var) * self.noise_std**2 / (np.array(self.var) + self.noise_std**2)

    def posterior_mean(self, cond):
        cond = np.asarray(cond, dtype=np.float64).reshape(-1, self.n)
        mu = np.array(self.mean)
        return mu + self.shrinkage() * (cond - mu)

    def sample(self, count, rng) -> Dataset:
        x0 = self.prior.sample(count, rng)
        c = x0 + self.noise_std * rng.standard_normal(x0.shape)
        return Dataset(x0, c[:, None, :])


class ConditionalGaussianOracle(GaussianOracle):
    def __init__(self, task: ConditionalGaussianTask, schedule: Schedule):
        super().__init__(task.prior, schedule)
        self.task = task
        self._post_var = task.posterior_var()

    def _mean(self, cond, batch):
        if cond is None:
            raise LengthMismatch("conditional oracle needs a condition")
        return self.task.posterior_mean(cond)

    def _var_of(self, cond, batch):
        return self._post_var


# --------------------------------------------------------------------------
# datasets


def make_gaussian_dataset(target: GaussianTarget, count: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    return Dataset(target.sample(count, rng))


def make_mixture_dataset(count: int, seed: int, centers=((-1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)),
                         std: float = 0.15) -> Dataset:
    """Equal-weight 2-D (or len(center)-D) Gaussian mixture."""
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=np.float64)
    which = rng.integers(0, len(centers), size=count)
    return Dataset(centers[which] + std * rng.standard_normal((count, centers.shape[1])))


@dataclass(frozen=True)
class ToyImageTask:
    """Random rectangles and discs on a ``side`` x ``side`` canvas in [-1, 1].

    ``mode="denoise"`` pairs each clean image with a copy corrupted by
    additive Gaussian noise of std ``noise_std`` (clipped to [-1, 1]).
    ``mode="triple"`` renders three adjacent slices of a slowly varying
    scene and uses the outer two as conditions for the middle one.
    """

    side: int = 16
    mode: str = "denoise"
    noise_std: float = 0.2
    max_shapes: int = 3
    train: int = 2000
    val: int = 100
    test: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("denoise", "triple"):
            raise ConfigError(f"unknown toy-image mode {self.mode!r}")
        if self.side < 8:
            raise ConfigError("side must be >= 8")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


def _render(side, shapes, offset):
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    img = np.full((side, side), -1.0)
    for kind, cy, cx, a, b, level, dy, dx, dr in shapes:
        cy_s, cx_s = cy + dy * offset, cx + dx * offset
        if kind == 0:
            mask = (np.abs(yy - cy_s) <= a) & (np.abs(xx - cx_s) <= b)
        else:
            mask = (yy - cy_s) ** 2 + (xx - cx_s) ** 2 <= (a + dr * offset) ** 2
        img[mask] = level
    return img


def _random_scene(rng, side, max_shapes):
    shapes = []
    for _ in range(int(rng.integers(1, max_shapes + 1))):
        kind = int(rng.integers(0, 2))
        cy, cx = rng.uniform(2, side - 2, size=2)
        a, b = rng.uniform(side / 10, side / 4, size=2)
        level = rng.uniform(-0.6, 1.0)
        dy, dx = rng.uniform(-0.7, 0.7, size=2)
        dr = rng.uniform(-0.5, 0.5)
        shapes.append((kind, cy, cx, a, b, level, dy, dx, dr))
    return shapes


def _make_split(task: ToyImageTask, count: int, rng) -> Dataset:
    n = task.side * task.side
    x0 = np.empty((count, n))
    k = 1 if task.mode == "denoise" else 2
    cond = np.empty((count, k, n))
    for i in range(count):
        shapes = _random_scene(rng, task.side, task.max_shapes)
        if task.mode == "denoise":
            clean = _render(task.side, shapes, 0.0).ravel()
            x0[i] = clean
            cond[i, 0] = np.clip(clean + task.noise_std * rng.standard_normal(n), -1.0, 1.0)
        else:
            x0[i] = _render(task.side, shapes, 0.0).ravel()
            cond[i, 0] = _render(task.side, shapes, -1.0).ravel()
            cond[i, 1] = _render(task.side, shapes, 1.0).ravel()
            if task.noise_std > 0:
                cond[i] = np.clip(cond[i] + task.noise_std * rng.standard_normal((2, n)), -1.0, 1.0)
    return Dataset(x0, cond, (task.side, task.side))


def make_toy_images(task: ToyImageTask) -> dict:
    """Return {"train", "val", "test"} Datasets; each split has its own child seed."""
    seeds = np.random.SeedSequence(task.seed).spawn(3)
    return {
        name: _make_split(task, count, np.random.default_rng(s))
        for name, count, s in zip(("train", "val", "test"), (task.train, task.val, task.test), seeds)
    }


def save_image_dataset(data: Dataset, directory, extra: dict | None = None):
    """Write clean/ and cond{j}/ greymaps plus index.json."""
    from .pgm import write_pgm

    if data.shape is None:
        raise ConfigError("dataset has no image shape")
    os.makedirs(directory, exist_ok=True)
    files = []
    for i in range(len(data)):
        entry = {"clean": f"clean/{i:05d}.pgm", "cond": []}
        write_pgm(os.path.join(directory, entry["clean"]), data.x0[i].reshape(data.shape))
        for j in range(data.n_cond):
            name = f"cond{j}/{i:05d}.pgm"
            write_pgm(os.path.join(directory, name), data.cond[i, j].reshape(data.shape))
            entry["cond"].append(name)
        files.append(entry)
    index = {"shape": list(data.shape), "count": len(data), "n_cond": data.n_cond, "files": files}
    if extra:
        index["recipe"] = extra
    with open(os.path.join(directory, "index.json"), "w") as fh:
        json.dump(index, fh, indent=2)


def load_image_dataset(directory) -> Dataset:
    from .pgm import read_pgm

    with open(os.path.join(directory, "index.json")) as fh:
        index = json.load(fh)
    shape = tuple(index["shape"])
    x0 = np.stack([read_pgm(os.path.join(directory, f["clean"])).ravel() for f in index["files"]])
    cond = np.stack([
        np.stack([read_pgm(os.path.join(directory, c)).ravel() for c in f["cond"]])
        if f["cond"] else np.zeros((0, x0.shape[1]))
        for f in index["files"]
    ])
    return Dataset(x0, cond, shape)


def task_to_dict(task) -> dict:
    return asdict(task)
