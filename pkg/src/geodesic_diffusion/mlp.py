"""Small feed-forward noise predictor with hand-written backprop and Adam."""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, CorruptFile, LengthMismatch
from .schedules import Schedule, schedule_from_dict

__all__ = [
    "MlpDenoiser",
    "AdamState",
    "adam_step",
    "time_features",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"GDMK1"


def time_features(t, dim: int = 16):
    """sin/cos features of t at ``dim // 2`` geometrically spaced frequencies in [1, 200]."""
    if dim % 2:
        raise ConfigError(f"time embedding dimension must be even, got {dim}")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = np.geomspace(1.0, 200.0, dim // 2)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _silu(z):
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free logistic
    return z * sig, sig


def _silu_grad(z, sig):
    return sig * (1.0 + z * (1.0 - sig))


class MlpDenoiser:
    """eps_theta(x_t, c, t) built around an MLP F on [c_in x_t, c_1, ..., c_k, emb(t)].

    F is a stack of dense layers with SiLU between them plus, when
    ``linear_skip`` is set, a zero-initialised linear map straight from the
    input features to the output. Without a schedule the prediction is F itself. With a schedule attached,
    and writing v = alpha^2 sigma_data^2 + sigma^2,

        eps_theta = (sigma / v) x_t + (alpha sigma_data / sqrt(v)) F,   c_in = 1 / sqrt(v),

    so the skip term is already the exact noise predictor for data of
    standard deviation ``sigma_data`` and F only learns a unit-scale
    residual. With conditions and ``centre_on_condition`` the skip acts on
    x_t - alpha c_mean instead, i.e. the data are taken to be spread around
    the mean condition rather than around zero. ``zero_init_output`` starts
    the last layer at zero so that an untrained model is exactly the skip
    predictor. ``activation`` is ``"silu"`` (default) or ``"identity"``.
    """

    def __init__(self, n: int, n_cond: int = 0, hidden=(256, 256, 256), time_dim: int = 16,
                 activation: str = "silu", schedule: Schedule | None = None, sigma_data: float = 0.5,
                 linear_skip: bool = False, centre_on_condition: bool = True,
                 zero_init_output: bool = False, seed: int = 0, params: dict | None = None):
        if activation not in ("silu", "identity"):
            raise ConfigError(f"unknown activation {activation!r}")
        self.n = int(n)
        self.n_cond = int(n_cond)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_dim = int(time_dim)
        self.activation = activation
        self.schedule = schedule
        self.sigma_data = float(sigma_data)
        self.linear_skip = bool(linear_skip)
        self.centre_on_condition = bool(centre_on_condition)
        self.seed = int(seed)
        widths = [self.input_dim, *self.hidden, self.n]
        self.shapes = [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for i, (fan_in, fan_out) in enumerate(self.shapes):
                params[f"W{i}"] = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))
                if zero_init_output and i == len(self.shapes) - 1:
                    params[f"W{i}"][:] = 0.0
                params[f"b{i}"] = np.zeros(fan_out)
            if self.linear_skip:
                params["Wskip"] = np.zeros((self.input_dim, self.n))
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        for i, shape in enumerate(self.shapes):
            if self.params[f"W{i}"].shape != shape or self.params[f"b{i}"].shape != (shape[1],):
                raise LengthMismatch(f"layer {i}: parameter shapes do not match architecture {shape}")
        if self.linear_skip and self.params["Wskip"].shape != (self.input_dim, self.n):
            raise LengthMismatch("linear skip weights do not match architecture")

    @property
    def input_dim(self):
        return self.n * (1 + self.n_cond) + self.time_dim

    @property
    def num_layers(self):
        return len(self.shapes)

    @property
    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def architecture(self) -> dict:
        return {
            "n": self.n,
            "n_cond": self.n_cond,
            "hidden": list(self.hidden),
            "time_dim": self.time_dim,
            "activation": self.activation,
            "schedule": None if self.schedule is None else self.schedule.to_dict(),
            "sigma_data": self.sigma_data,
            "linear_skip": self.linear_skip,
            "centre_on_condition": self.centre_on_condition,
            "seed": self.seed,
        }

    def copy(self):
        return MlpDenoiser(**{**self._init_kwargs(), "params": {k: v.copy() for k, v in self.params.items()}})

    def _init_kwargs(self):
        return dict(n=self.n, n_cond=self.n_cond, hidden=self.hidden, time_dim=self.time_dim,
                    activation=self.activation, schedule=self.schedule, sigma_data=self.sigma_data,
                    linear_skip=self.linear_skip, centre_on_condition=self.centre_on_condition,
                    seed=self.seed)

    def _preconditioning(self, t):
        a, s, _, _ = self.schedule.coefficients(t)
        v = (a * self.sigma_data) ** 2 + s * s
        return 1.0 / np.sqrt(v), s / v, a * self.sigma_data / np.sqrt(v)

    def _centre(self, cond, t, batch):
        """alpha(t) times the mean condition, or 0 when the skip is not centred."""
        if not (self.n_cond and self.centre_on_condition):
            return 0.0
        a, _, _, _ = self.schedule.coefficients(t)
        c = np.asarray(cond, dtype=np.float64).reshape(batch, self.n_cond, self.n).mean(axis=1)
        return a[:, None] * c

    def _inputs(self, x, cond, t, c_in=None):
        batch = x.shape[0]
        if c_in is not None:
            x = x * c_in[:, None]
        parts = [x]
        if self.n_cond:
            if cond is None:
                raise LengthMismatch(f"denoiser expects {self.n_cond} condition vector(s), got none")
            cond = np.asarray(cond, dtype=np.float64).reshape(batch, self.n_cond, self.n)
            parts.append(cond.reshape(batch, -1))
        if self.time_dim:
            parts.append(time_features(t, self.time_dim))
        return np.concatenate(parts, axis=1)

    def forward(self, x, cond=None, t=0.0):
        """Return (prediction, cache) for a batch."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.n:
            raise LengthMismatch(f"expected x of length {self.n}, got {x.shape[1]}")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
        pre = None if self.schedule is None else self._preconditioning(t)
        h = self._inputs(x, cond, t, None if pre is None else pre[0])
        inputs = h
        cache = [h]
        last = self.num_layers - 1
        for i in range(self.num_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i == last or self.activation == "identity":
                h = z
                cache.append((z, None))
            else:
                h, sig = _silu(z)
                cache.append((z, sig))
        if self.linear_skip:
            h = h + inputs @ self.params["Wskip"]
        if pre is not None:
            _, skip, c_out = pre
            h = skip[:, None] * (x - self._centre(cond, t, x.shape[0])) + c_out[:, None] * h
            cache.append(c_out)
        return h, cache

    def predict(self, x, cond=None, t=0.0):
        out, _ = self.forward(x, cond, t)
        return out

    __call__ = predict

    def backward(self, cache, grad_out) -> dict:
        """Reverse-mode accumulation of dL/dparams given dL/d(prediction)."""
        grads = {}
        g = grad_out
        if self.schedule is not None:
            g = g * cache[-1][:, None]
        if self.linear_skip:
            grads["Wskip"] = cache[0].T @ g
        last = self.num_layers - 1
        for i in range(last, -1, -1):
            z, sig = cache[i + 1]
            if i != last and self.activation != "identity":
                g = g * _silu_grad(z, sig)
            h_in = cache[0] if i == 0 else _activated(cache[i], self.activation)
            grads[f"W{i}"] = h_in.T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            if i:
                g = g @ self.params[f"W{i}"].T
        return grads

    def loss_and_grads(self, x_t, cond, t, target):
        """Mean squared error over batch and components, with its parameter gradients."""
        pred, cache = self.forward(x_t, cond, t)
        diff = pred - target
        loss = float(np.mean(diff * diff))
        grads = self.backward(cache, 2.0 * diff / diff.size)
        return loss, grads


def _activated(entry, activation):
    z, sig = entry
    if sig is None or activation == "identity":
        return z
    return z * sig


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 2e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are not mutated."""
    step = state.step + 1
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 - beta2**step
    new_params, m_new, v_new = {}, {}, {}
    for k in sorted(params):
        g = grads[k]
        if g.shape != params[k].shape:
            raise LengthMismatch(f"gradient {k} has shape {g.shape}, parameter has {params[k].shape}")
        m = beta1 * state.m.get(k, 0.0) + (1.0 - beta1) * g
        v = beta2 * state.v.get(k, 0.0) + (1.0 - beta2) * (g * g)
        new_params[k] = params[k] - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        m_new[k], v_new[k] = m, v
    return new_params, AdamState(m_new, v_new, step)


# --------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   b"GDMK1"
#   u32 metadata length, metadata JSON (utf-8)
#   u32 tensor count, then per tensor: u16 name length, name, u8 ndim, u64 dims...
#   all tensors' float64 data concatenated in table order


def save_checkpoint(path_or_file, model: MlpDenoiser, state: AdamState | None = None, extra: dict | None = None):
    tensors = [(k, model.params[k]) for k in _param_order(model)]
    if state is not None:
        for k in _param_order(model):
            if k in state.m:
                tensors.append((f"adam.m.{k}", np.asarray(state.m[k])))
                tensors.append((f"adam.v.{k}", np.asarray(state.v[k])))
    meta = {"architecture": model.architecture(), "adam_step": None if state is None else state.step}
    if extra:
        meta["extra"] = extra
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    blob = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    for _, arr in tensors:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    data = buf.getvalue()
    if hasattr(path_or_file, "write"):
        path_or_file.write(data)
    else:
        with open(path_or_file, "wb") as fh:
            fh.write(data)


def load_checkpoint(path_or_file):
    """Return ``(model, adam_state_or_None, extra_dict)``."""
    if hasattr(path_or_file, "read"):
        data = path_or_file.read()
    else:
        with open(path_or_file, "rb") as fh:
            data = fh.read()
    if data[:5] != CHECKPOINT_MAGIC:
        raise CorruptFile("not a GDMK1 checkpoint")
    pos = 5
    (mlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos:pos + mlen])
    pos += mlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    table = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        table.append((name, shape))
    tensors = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise CorruptFile("trailing bytes in checkpoint")
    arch = dict(meta["architecture"])
    sched = arch.pop("schedule")
    arch["schedule"] = None if sched is None else schedule_from_dict(sched)
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    model = MlpDenoiser(**arch, params=params)
    state = None
    if meta.get("adam_step") is not None:
        state = AdamState(
            m={k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")},
            v={k[len("adam.v."):]: v for k, v in tensors.items() if k.startswith("adam.v.")},
            step=int(meta["adam_step"]),
        )
    return model, state, meta.get("extra", {})


def _param_order(model):
    names = [f"{p}{i}" for i in range(model.num_layers) for p in ("W", "b")]
    return names + (["Wskip"] if model.linear_skip else [])
