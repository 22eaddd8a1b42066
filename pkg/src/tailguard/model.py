"""Numpy forecasters with analytic gradients, optimizers and checkpoints.

Both models take a batch of inputs ``(B, L)`` and predict ``(B, T)``. With
``last_value_head`` on, the final input value is subtracted before the map
and added back afterwards (NLinear-style instance normalization).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import NonFiniteError, ShapeError

CHECKPOINT_FORMAT = "tailguard-checkpoint"
CHECKPOINT_VERSION = 1

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return x * ndtr(x)


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


class Forecaster:
    """Common plumbing: named parameters, the last-value head and losses."""

    kind = "base"
    params: dict[str, np.ndarray]
    last_value_head: bool

    def _center(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.last_value_head:
            last = x[:, -1:]
            return x - last, last
        return x, np.zeros((x.shape[0], 1))

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Predict for a single input ``(L,)`` or a batch ``(B, L)``."""
        x = np.asarray(x, dtype=np.float64)
        out = self._forward_batch(np.atleast_2d(x))[0]
        return out[0] if x.ndim == 1 else out

    def per_sample_loss(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        pred = self._forward_batch(np.atleast_2d(x))[0]
        return np.mean((pred - y) ** 2, axis=1)

    def gradient(self, x: np.ndarray, y: np.ndarray, scale=None) -> tuple[dict[str, np.ndarray], np.ndarray]:
        """Gradient of ``mean_i(scale_i * loss_i)`` and the unscaled per-sample losses."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        if x.shape[0] != y.shape[0]:
            raise ShapeError(f"batch sizes differ: inputs {x.shape[0]}, targets {y.shape[0]}")
        n = x.shape[0]
        if scale is None:
            scale = np.ones(n)
        scale = np.asarray(scale, dtype=np.float64)
        if scale.shape != (n,):
            raise ShapeError(f"scale has shape {scale.shape}, expected ({n},)")
        pred, cache = self._forward_batch(x)
        resid = pred - y
        losses = np.mean(resid**2, axis=1)
        dpred = (2.0 / (n * y.shape[1])) * scale[:, None] * resid
        return self._backward(dpred, cache), losses

    def copy(self) -> "Forecaster":
        clone = object.__new__(type(self))
        clone.__dict__.update(self.__dict__)
        clone.params = {k: v.copy() for k, v in self.params.items()}
        return clone

    def config(self) -> dict:
        raise NotImplementedError


class LinearForecaster(Forecaster):
    kind = "linear"

    def __init__(self, lookback: int, horizon: int, last_value_head: bool = True, seed: int = 0):
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(lookback)
        self.lookback, self.horizon = lookback, horizon
        self.last_value_head = last_value_head
        self.params = {
            "W": rng.uniform(-bound, bound, size=(horizon, lookback)),
            "b": np.zeros(horizon),
        }

    def _forward_batch(self, x):
        xc, last = self._center(x)
        return xc @ self.params["W"].T + self.params["b"] + last, xc

    def _backward(self, dpred, xc):
        return {"W": dpred.T @ xc, "b": dpred.sum(axis=0)}

    def config(self):
        return {"kind": self.kind, "lookback": self.lookback, "horizon": self.horizon,
                "last_value_head": self.last_value_head}


class MlpForecaster(Forecaster):
    kind = "mlp"

    def __init__(self, lookback: int, horizon: int, hidden: int = 128,
                 last_value_head: bool = True, seed: int = 0):
        if hidden < 1:
            raise ValueError("hidden size must be >= 1")
        rng = np.random.default_rng(seed)
        self.lookback, self.horizon, self.hidden = lookback, horizon, hidden
        self.last_value_head = last_value_head
        b1 = 1.0 / math.sqrt(lookback)
        b2 = 1.0 / math.sqrt(hidden)
        self.params = {
            "W1": rng.uniform(-b1, b1, size=(hidden, lookback)),
            "b1": np.zeros(hidden),
            "W2": rng.uniform(-b2, b2, size=(horizon, hidden)),
            "b2": np.zeros(horizon),
        }

    def _forward_batch(self, x):
        xc, last = self._center(x)
        pre = xc @ self.params["W1"].T + self.params["b1"]
        h = gelu(pre)
        out = h @ self.params["W2"].T + self.params["b2"] + last
        return out, (xc, pre, h)

    def _backward(self, dpred, cache):
        xc, pre, h = cache
        dh = dpred @ self.params["W2"]
        dpre = dh * gelu_grad(pre)
        return {
            "W1": dpre.T @ xc,
            "b1": dpre.sum(axis=0),
            "W2": dpred.T @ h,
            "b2": dpred.sum(axis=0),
        }

    def config(self):
        return {"kind": self.kind, "lookback": self.lookback, "horizon": self.horizon,
                "hidden": self.hidden, "last_value_head": self.last_value_head}


def build_model(kind: str, lookback: int, horizon: int, seed: int = 0, **kwargs) -> Forecaster:
    if kind == "linear":
        return LinearForecaster(lookback, horizon, seed=seed, **kwargs)
    if kind == "mlp":
        return MlpForecaster(lookback, horizon, seed=seed, **kwargs)
    raise ValueError(f"unknown model kind {kind!r}")


@dataclass
class OptimState:
    lr: float = 1e-4
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        # lr == 0 is allowed for frozen (evaluation-only) passes
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            raise ValueError(f"learning rate must be finite and >= 0, got {self.lr}")
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def step(model: Forecaster, grads: dict[str, np.ndarray], opt: OptimState) -> Forecaster:
    """Apply one optimizer update to ``model`` in place and return it."""
    opt.t += 1
    updated = {}
    for name, g in grads.items():
        p = model.params[name]
        if opt.kind == "sgd":
            new = p - opt.lr * g
        else:
            m = opt.m.get(name, np.zeros_like(p))
            v = opt.v.get(name, np.zeros_like(p))
            m = opt.beta1 * m + (1 - opt.beta1) * g
            v = opt.beta2 * v + (1 - opt.beta2) * g * g
            opt.m[name], opt.v[name] = m, v
            m_hat = m / (1 - opt.beta1**opt.t)
            v_hat = v / (1 - opt.beta2**opt.t)
            new = p - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"parameter {name!r} became non-finite after step {opt.t}")
        updated[name] = new
    model.params.update(updated)
    return model


def save_checkpoint(model: Forecaster, path: str | os.PathLike) -> None:
    """Write a versioned JSON checkpoint of named parameter arrays.

    Layout: ``{"format", "version", "model": config, "params": {name:
    {"shape": [...], "data": [flat row-major floats]}}}``.
    """
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model.config(),
        "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in model.params.items()},
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Forecaster:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format/version")
    cfg = dict(doc["model"])
    kind = cfg.pop("kind")
    model = build_model(kind, **cfg)
    for name, entry in doc["params"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != model.params[name].shape:
            raise ShapeError(f"{path}: parameter {name} has shape {arr.shape}")
        model.params[name] = arr
    return model


def forward(model: Forecaster, x: np.ndarray) -> np.ndarray:
    return model.forward(x)


def per_sample_loss(model: Forecaster, window) -> float:
    return float(model.per_sample_loss(window.input, window.target)[0])


def gradient(model: Forecaster, batch, per_sample_scale) -> dict[str, np.ndarray]:
    """Gradient of the scale-weighted mean loss over a list of windows."""
    if len(batch) != len(per_sample_scale):
        raise ShapeError(f"{len(batch)} windows but {len(per_sample_scale)} scales")
    if not batch:
        return {k: np.zeros_like(v) for k, v in model.params.items()}
    x = np.stack([w.input for w in batch])
    y = np.stack([w.target for w in batch])
    return model.gradient(x, y, per_sample_scale)[0]
