"""Gaussian loss-weighted resampling plus InfoBatch and uniform baselines.

The Gaussian sampler keeps the last observed loss of every sample. At each
epoch boundary the losses are z-normalized and pushed through a normal
density centred at the user bias ``mu`` with spread ``sigma``; the result is
the sampling weight for the next epoch. Draws use Vose's alias method.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeError, ZeroWeightError

WEIGHT_FLOOR = 1e-8
SIGMA_X_FLOOR = 1e-12


@dataclass(frozen=True)
class GaussianWeightParams:
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError(f"sigma must be a positive finite number, got {self.sigma}")
        if not math.isfinite(self.mu):
            raise ValueError(f"mu must be finite, got {self.mu}")

    @property
    def peak(self) -> float:
        return 1.0 / (self.sigma * math.sqrt(2.0 * math.pi))


@dataclass(frozen=True)
class LossStats:
    mu_x: float
    sigma_x: float
    n: int

    @classmethod
    def of(cls, losses) -> "LossStats":
        x = np.asarray(losses, dtype=np.float64)
        if x.size == 0:
            raise ValueError("need at least one loss")
        return cls(float(x.mean()), float(x.std()), int(x.size))


@dataclass(frozen=True)
class InfoBatchParams:
    prune_ratio: float = 0.5
    anneal_fraction: float = 0.875
    rescale_kept: bool = True

    def __post_init__(self):
        if not 0.0 <= self.prune_ratio < 1.0:
            raise ValueError(f"prune ratio must lie in [0, 1), got {self.prune_ratio}")
        if not 0.0 < self.anneal_fraction <= 1.0:
            raise ValueError(f"anneal fraction must lie in (0, 1], got {self.anneal_fraction}")


@dataclass
class SamplerState:
    weights: np.ndarray
    running_loss: np.ndarray
    observed: np.ndarray
    epoch: int = 0

    @classmethod
    def fresh(cls, n: int) -> "SamplerState":
        return cls(np.ones(n), np.zeros(n), np.zeros(n, dtype=bool), 0)

    def __len__(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "SamplerState":
        return SamplerState(self.weights.copy(), self.running_loss.copy(), self.observed.copy(), self.epoch)


def gaussian_weights(y: np.ndarray, params: GaussianWeightParams) -> np.ndarray:
    """Normal density of normalized losses ``y`` about ``mu`` with spread ``sigma``."""
    z = (np.asarray(y, dtype=np.float64) - params.mu) / params.sigma
    return params.peak * np.exp(-0.5 * z * z)


def normalized_losses(state: SamplerState) -> np.ndarray:
    y = np.zeros(len(state))
    if not state.observed.any():
        return y
    x = state.running_loss[state.observed]
    stats = LossStats.of(x)
    if stats.sigma_x >= SIGMA_X_FLOOR:
        y[state.observed] = (x - stats.mu_x) / stats.sigma_x
    return y


def update_weights(state: SamplerState, params: GaussianWeightParams) -> SamplerState:
    """Recompute weights from the running losses; returns a new state.

    Unobserved samples sit at ``y = 0``; a (numerically) constant loss table
    puts every sample there, giving exactly uniform weights.
    """
    if not state.observed.any():
        return state.copy()
    if not np.all(np.isfinite(state.running_loss[state.observed])):
        raise NonFiniteError("running loss table contains NaN/Inf")
    w = np.maximum(gaussian_weights(normalized_losses(state), params), WEIGHT_FLOOR)
    return SamplerState(w, state.running_loss.copy(), state.observed.copy(), state.epoch + 1)


def record_losses(state: SamplerState, ids, losses) -> SamplerState:
    """Store the latest loss per id in place (last write wins) and return the state."""
    ids = np.asarray(ids, dtype=np.int64)
    losses = np.asarray(losses, dtype=np.float64)
    if ids.shape != losses.shape:
        raise ShapeError(f"{ids.size} ids but {losses.size} losses")
    if ids.size == 0:
        return state
    if not np.all(np.isfinite(losses)):
        bad = ids[~np.isfinite(losses)]
        raise NonFiniteError(f"non-finite loss for sample ids {bad[:10].tolist()}")
    if ids.min() < 0 or ids.max() >= len(state):
        raise IndexError(f"sample id out of range [0, {len(state)})")
    # numpy fancy assignment keeps the last occurrence of a repeated index
    state.running_loss[ids] = losses
    state.observed[ids] = True
    return state


class AliasTable:
    """Vose's alias method: O(n) construction, O(1) per draw."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise ValueError("weights must be a non-empty 1-D array")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        total = w.sum()
        if total <= 0:
            raise ZeroWeightError("weights sum to zero")
        n = w.size
        scaled = w * (n / total)
        prob = np.ones(n)
        alias = np.arange(n)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s = small.pop()
            g = large[-1]
            prob[s] = scaled[s]
            alias[s] = g
            scaled[g] = (scaled[g] + scaled[s]) - 1.0
            if scaled[g] < 1.0:
                large.pop()
                small.append(g)
        # leftovers are 1 up to rounding
        for i in large + small:
            prob[i] = 1.0
        self.prob = prob
        self.alias = alias

    def __len__(self) -> int:
        return self.prob.size

    def draw(self, n_draws: int, rng: np.random.Generator) -> np.ndarray:
        col = rng.integers(0, len(self), size=n_draws)
        coin = rng.random(n_draws)
        return np.where(coin < self.prob[col], col, self.alias[col])


def draw_epoch_indices(state: SamplerState, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Sample ids with replacement, ``P(i) = w_i / sum(w)``."""
    return AliasTable(state.weights).draw(n_draws, rng)


def uniform_sampler(n: int, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, n, size=n_draws)


def expected_weighted_loss(weights, losses) -> float:
    """Self-normalized weighted mean ``sum(w*x) / sum(w)``."""
    w = np.asarray(weights, dtype=np.float64)
    x = np.asarray(losses, dtype=np.float64)
    if w.shape != x.shape:
        raise ShapeError(f"weights {w.shape} and losses {x.shape} differ")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    total = w.sum()
    if total <= 0:
        raise ZeroWeightError("weights sum to zero")
    return float(np.dot(w, x) / total)


def infobatch_filter(
    state: SamplerState,
    params: InfoBatchParams,
    epoch: int,
    total_epochs: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Randomly prune below-mean samples; returns kept ids and their loss scales.

    Before ``anneal_fraction * total_epochs`` each sample whose running loss
    is below the mean is dropped with probability ``prune_ratio``; survivors
    among them are up-weighted by ``1 / (1 - prune_ratio)`` when
    ``rescale_kept`` is set. Unobserved samples are always kept.
    """
    n = len(state)
    ids = np.arange(n)
    scale = np.ones(n)
    if epoch >= params.anneal_fraction * total_epochs or params.prune_ratio == 0 or not state.observed.any():
        return ids, scale
    mean = state.running_loss[state.observed].mean()
    below = state.observed & (state.running_loss < mean)
    drop = below & (rng.random(n) < params.prune_ratio)
    if params.rescale_kept:
        scale[below] = 1.0 / (1.0 - params.prune_ratio)
    keep = ~drop
    return ids[keep], scale[keep]


def write_weight_snapshot(state: SamplerState, path: str | os.PathLike) -> None:
    """CSV with header ``id,loss,weight``; unobserved losses are left blank."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["id", "loss", "weight"])
        for i in range(len(state)):
            loss = repr(float(state.running_loss[i])) if state.observed[i] else ""
            out.writerow([i, loss, repr(float(state.weights[i]))])
    os.replace(tmp, path)
