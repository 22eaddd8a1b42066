"""Epoch loop, metrics, TMSE early stopping, grid search and acceleration.

One run draws ``N`` ids per epoch from the active sampler (gaussian and
uniform draw with replacement; infobatch iterates a shuffled pruned set),
takes an optimizer step per consecutive chunk of ``batch_size`` ids, writes
the per-sample losses seen on the way into the sampler state and, for the
gaussian sampler, refreshes the weights once at the end of the epoch.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import sampler as smp
from .dataset import (
    SAMPLES_PER_MONTH,
    RawSeries,
    SplitSpec,
    WindowSet,
    apply_scaler,
    fit_scaler,
    load_csv,
    make_windows,
    random_erase_batch,
    split,
)
from .errors import NonFiniteError
from .model import Forecaster, OptimState, build_model, save_checkpoint, step

log = logging.getLogger(__name__)

RUN_SCHEMA = "tailguard-run"
RUN_SCHEMA_VERSION = "1.0"
IMPROVE_TOL = 1e-6
SAMPLERS = ("uniform", "gaussian", "infobatch")


@dataclass
class TrainConfig:
    epochs: int = 100
    patience: int = 20
    batch_size: int = 128
    tau: float = 0.9
    seed: int = 0
    lr: float = 1e-4
    optimizer: str = "adam"
    model: str = "linear"
    hidden: int = 128
    last_value_head: bool = True
    sampler: str = "uniform"
    mu: float = 0.0
    sigma: float = 1.0
    prune_ratio: float = 0.5
    anneal_fraction: float = 0.875
    augment: bool = False
    erase_p: float = 0.5
    erase_frac: tuple[float, float] = (0.05, 0.2)
    full_loss_pass: bool = False

    def __post_init__(self):
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.patience <= self.epochs:
            raise ValueError("patience must lie in [0, epochs]")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"unknown sampler {self.sampler!r}")
        self.erase_frac = tuple(self.erase_frac)
        # validates mu/sigma and prune settings eagerly
        self.gaussian_params()
        self.infobatch_params()

    def gaussian_params(self) -> smp.GaussianWeightParams:
        return smp.GaussianWeightParams(self.mu, self.sigma)

    def infobatch_params(self) -> smp.InfoBatchParams:
        return smp.InfoBatchParams(self.prune_ratio, self.anneal_fraction)

    def label(self) -> str:
        if self.sampler == "gaussian":
            return f"gaussian(mu={self.mu:g},sigma={self.sigma:g})"
        if self.sampler == "infobatch":
            return f"infobatch(s={self.prune_ratio:g})"
        return "uniform"


@dataclass
class ForecastData:
    train: WindowSet
    val: WindowSet
    test: WindowSet
    feature_names: tuple[str, ...] = ()


def prepare_data(
    series: RawSeries,
    lookback: int,
    horizon: int,
    split_spec: SplitSpec | None = None,
    freq: str = "hourly",
) -> ForecastData:
    """Split, standardize with train statistics and window a series."""
    split_spec = split_spec or SplitSpec.by_months()
    tr, va, te = split(series, split_spec, SAMPLES_PER_MONTH[freq], lookback, horizon)
    scaler = fit_scaler(tr)
    tr, va, te = (apply_scaler(s, scaler) for s in (tr, va, te))
    return ForecastData(*(make_windows(s, lookback, horizon) for s in (tr, va, te)), series.feature_names)


def load_data(path, lookback, horizon, split_spec=None, freq="hourly", has_date_column=True) -> ForecastData:
    return prepare_data(load_csv(path, has_date_column), lookback, horizon, split_spec, freq)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    val_mae: float
    test_mse: float
    test_mae: float
    tmse: float
    wall_time: float
    samples_seen: int


@dataclass
class TrainRun:
    config: TrainConfig
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False
    error: str | None = None

    @property
    def test_mse(self) -> list[float]:
        return [r.test_mse for r in self.records]

    @property
    def top5_mmse(self) -> float:
        return top5_mmse(self)

    @property
    def final(self) -> EpochRecord | None:
        """Record of the best-TMSE epoch, i.e. the restored checkpoint."""
        if self.best_epoch is None:
            return None
        return self.records[self.best_epoch - 1]

    def to_json(self) -> dict:
        final = self.final
        return {
            "schema": RUN_SCHEMA,
            "schema_version": RUN_SCHEMA_VERSION,
            "label": self.config.label(),
            "config": asdict(self.config),
            "epochs": [asdict(r) for r in self.records],
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "top5_mmse": self.top5_mmse if self.records else None,
            "final_test_mse": final.test_mse if final else None,
            "final_test_mae": final.test_mae if final else None,
            "error": self.error,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TrainRun":
        check_schema(doc)
        cfg = TrainConfig(**doc["config"])
        return cls(cfg, [EpochRecord(**r) for r in doc["epochs"]], doc["best_epoch"],
                   doc.get("stopped_early", False), doc.get("error"))


def check_schema(doc: dict) -> None:
    if doc.get("schema") != RUN_SCHEMA:
        raise ValueError("not a tailguard run document")
    major = str(doc.get("schema_version", "")).split(".")[0]
    if major != RUN_SCHEMA_VERSION.split(".")[0]:
        raise ValueError(f"unsupported run schema version {doc.get('schema_version')!r}")


def evaluate(model: Forecaster, windows: WindowSet, chunk: int = 4096) -> tuple[float, float]:
    """Unweighted MSE and MAE over every window of a split."""
    n = len(windows)
    if n == 0:
        raise ValueError("cannot evaluate an empty split")
    se = ae = 0.0
    for a in range(0, n, chunk):
        x, y = windows.batch(np.arange(a, min(a + chunk, n)))
        r = model.forward(x) - y
        se += float(np.sum(r * r))
        ae += float(np.sum(np.abs(r)))
    count = n * windows.horizon
    return se / count, ae / count


def per_sample_losses(model: Forecaster, windows: WindowSet, chunk: int = 4096) -> np.ndarray:
    out = np.empty(len(windows))
    for a in range(0, len(windows), chunk):
        ids = np.arange(a, min(a + chunk, len(windows)))
        out[ids] = model.per_sample_loss(*windows.batch(ids))
    return out


def tmse_update(tmse_prev: float | None, vmse: float, tau: float) -> float:
    """Exponentially smoothed validation MSE; the first call returns ``vmse``."""
    if tmse_prev is None:
        return vmse
    return tau * tmse_prev + (1.0 - tau) * vmse


def top5_mmse(run: TrainRun) -> float:
    mses = sorted(r.test_mse for r in run.records)
    if not mses:
        raise ValueError("run has no epochs")
    return float(np.mean(mses[:5]))


def epochs_to_target(run: TrainRun, target_mse: float) -> int | None:
    """First (1-based) epoch whose test MSE is at or below ``target_mse``."""
    if not target_mse > 0:
        raise ValueError("target must be > 0")
    for r in run.records:
        if r.test_mse <= target_mse:
            return r.epoch
    return None


def train_epoch(
    model: Forecaster,
    data: WindowSet,
    state: smp.SamplerState,
    config: TrainConfig,
    opt: OptimState,
    rng: np.random.Generator,
    epoch: int = 0,
) -> tuple[Forecaster, smp.SamplerState, dict]:
    """One pass of ``len(data)`` draws (or the pruned set for infobatch)."""
    n = len(data)
    if len(state) != n:
        raise ValueError(f"sampler state has {len(state)} entries, dataset {n}")
    if config.sampler == "gaussian":
        ids = smp.draw_epoch_indices(state, n, rng)
        scale = np.ones(n)
    elif config.sampler == "infobatch":
        kept, kept_scale = smp.infobatch_filter(state, config.infobatch_params(), epoch, config.epochs, rng)
        order = rng.permutation(kept.size)
        ids, scale = kept[order], kept_scale[order]
    else:
        ids = smp.uniform_sampler(n, n, rng)
        scale = np.ones(n)

    loss_sum = 0.0
    for b, a in enumerate(range(0, ids.size, config.batch_size)):
        bid = ids[a:a + config.batch_size]
        x, y = data.batch(bid)
        if config.augment:
            x = random_erase_batch(x, config.erase_p, config.erase_frac, rng)
        grads, losses = model.gradient(x, y, scale[a:a + config.batch_size])
        if not np.all(np.isfinite(losses)):
            log.error("non-finite loss in epoch %d batch %d (ids %s)", epoch + 1, b, bid[:8].tolist())
            raise NonFiniteError(f"non-finite loss in epoch {epoch + 1}, batch {b}")
        smp.record_losses(state, bid, losses)
        loss_sum += float(losses.sum())
        try:
            step(model, grads, opt)
        except NonFiniteError:
            log.error("non-finite parameters after epoch %d batch %d", epoch + 1, b)
            raise

    if config.full_loss_pass:
        smp.record_losses(state, np.arange(n), per_sample_losses(model, data))
    if config.sampler == "gaussian":
        state = smp.update_weights(state, config.gaussian_params())
    else:
        state.epoch += 1
    return model, state, {"train_loss": loss_sum / max(ids.size, 1), "samples_seen": int(ids.size)}


def write_loss_histogram(losses: np.ndarray, params: smp.GaussianWeightParams, path, bins: int = 50) -> None:
    """Raw vs Gaussian-reweighted loss histogram.

    ``raw_count`` counts samples per bin; ``reweighted_count`` is the
    expected number of draws per bin when ``len(losses)`` ids are drawn
    with the Gaussian weights. Both columns sum to ``len(losses)``.
    """
    state = smp.SamplerState(np.ones(losses.size), losses.astype(np.float64), np.ones(losses.size, bool))
    w = smp.update_weights(state, params).weights
    edges = np.histogram_bin_edges(losses, bins=bins)
    raw, _ = np.histogram(losses, edges)
    rew, _ = np.histogram(losses, edges, weights=w * (losses.size / w.sum()))
    _atomic_csv(path, ["bin_lo", "bin_hi", "raw_count", "reweighted_count"],
                [[edges[i], edges[i + 1], int(raw[i]), float(rew[i])] for i in range(bins)])


def _atomic_csv(path, header, rows) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        out.writerows(rows)
    os.replace(tmp, path)


def atomic_json(path, doc) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2)
    os.replace(tmp, path)


def train(
    data: ForecastData,
    config: TrainConfig,
    out_dir: str | os.PathLike | None = None,
    save_weights: bool = False,
    save_hists: bool = False,
) -> TrainRun:
    """Full training run with TMSE early stopping.

    The best state is the epoch with the lowest TMSE; its test metrics are
    the run's final numbers.
    """
    rng = np.random.default_rng(config.seed)
    model = build_model(config.model, data.train.lookback, data.train.horizon, seed=config.seed,
                        last_value_head=config.last_value_head,
                        **({"hidden": config.hidden} if config.model == "mlp" else {}))
    opt = OptimState(lr=config.lr, kind=config.optimizer)
    state = smp.SamplerState.fresh(len(data.train))
    run = TrainRun(config)
    tmse = None
    best_tmse = math.inf
    best_params = None
    wait = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        model, state, info = train_epoch(model, data.train, state, config, opt, rng, epoch)
        vmse, vmae = evaluate(model, data.val)
        tmse_val, tmae = evaluate(model, data.test)
        tmse = tmse_update(tmse, vmse, config.tau)
        run.records.append(EpochRecord(epoch + 1, info["train_loss"], vmse, vmae, tmse_val, tmae, tmse,
                                       time.perf_counter() - t0, info["samples_seen"]))
        log.info("epoch %d train %.5f val %.5f test %.5f tmse %.5f", epoch + 1,
                 info["train_loss"], vmse, tmse_val, tmse)
        if out_dir is not None and save_weights:
            smp.write_weight_snapshot(state, os.path.join(out_dir, f"weights_epoch_{epoch + 1}.csv"))
        if out_dir is not None and save_hists:
            write_loss_histogram(per_sample_losses(model, data.train), config.gaussian_params(),
                                 os.path.join(out_dir, f"loss_hist_epoch_{epoch + 1}.csv"))
        if tmse < best_tmse - IMPROVE_TOL:
            best_tmse = tmse
            run.best_epoch = epoch + 1
            best_params = model.copy()
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                run.stopped_early = True
                break
    if out_dir is not None:
        if best_params is not None:
            save_checkpoint(best_params, os.path.join(out_dir, "checkpoint.json"))
        atomic_json(os.path.join(out_dir, "run.json"), run.to_json())
    return run


def _max_workers() -> int:
    try:
        return max(1, int(os.environ.get("TAILGUARD_THREADS", "1")))
    except ValueError:
        return 1


def run_many(data: ForecastData, configs: list[TrainConfig], out_dirs=None) -> list[TrainRun]:
    """Train several configurations; failures are recorded on the run, not raised."""
    out_dirs = out_dirs or [None] * len(configs)

    def one(job):
        cfg, out = job
        try:
            return train(data, cfg, out)
        except Exception as exc:  # recorded per run by design
            log.error("run %s failed: %s", cfg.label(), exc)
            return TrainRun(cfg, error=f"{type(exc).__name__}: {exc}")

    workers = _max_workers()
    if workers == 1:
        return [one(j) for j in zip(configs, out_dirs)]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, zip(configs, out_dirs)))


@dataclass
class GridResult:
    mu_grid: list[float]
    sigma_grid: list[float]
    mse: list[list[float | None]]  # [i_sigma][i_mu]
    errors: dict = field(default_factory=dict)

    @property
    def best(self) -> tuple[float, float, float]:
        """``(mu, sigma, mse)`` of the lowest-MSE cell."""
        cells = [(v, self.mu_grid[j], self.sigma_grid[i])
                 for i, row in enumerate(self.mse) for j, v in enumerate(row) if v is not None]
        if not cells:
            raise ValueError("every grid cell failed")
        v, mu, sigma = min(cells)
        return mu, sigma, v

    def to_json(self) -> dict:
        doc = {"mu_grid": self.mu_grid, "sigma_grid": self.sigma_grid, "mse": self.mse,
               "errors": self.errors}
        try:
            doc["best"] = dict(zip(("mu", "sigma", "mse"), self.best))
        except ValueError:
            doc["best"] = None
        return doc


def grid_search(mu_grid, sigma_grid, base: TrainConfig, data: ForecastData) -> GridResult:
    """One gaussian-sampler run per ``(mu, sigma)`` cell, all sharing ``base.seed``."""
    mu_grid, sigma_grid = [float(m) for m in mu_grid], [float(s) for s in sigma_grid]
    if not mu_grid or not sigma_grid:
        raise ValueError("grids must be non-empty")
    if any(s <= 0 for s in sigma_grid):
        raise ValueError("sigma values must be > 0")
    cells = [(i, j) for i in range(len(sigma_grid)) for j in range(len(mu_grid))]
    configs = [replace(base, sampler="gaussian", mu=mu_grid[j], sigma=sigma_grid[i]) for i, j in cells]
    runs = run_many(data, configs)
    mse: list[list[float | None]] = [[None] * len(mu_grid) for _ in sigma_grid]
    errors = {}
    for (i, j), r in zip(cells, runs):
        if r.error is None and r.final is not None:
            mse[i][j] = r.final.test_mse
        else:
            errors[f"mu={mu_grid[j]:g},sigma={sigma_grid[i]:g}"] = r.error
    return GridResult(mu_grid, sigma_grid, mse, errors)
