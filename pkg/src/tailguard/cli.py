"""Command line entry point: ``tailguard <command> [flags]``.

Exit codes: 0 ok, 1 usage, 2 data/IO, 3 numerical.
"""

from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import math
import os
import sys
from dataclasses import replace

import numpy as np

from . import sampler as smp
from .dataset import SplitSpec
from .errors import DataError, NumericalError
from .theory import LossDensity, verify_theorem1
from .trainer import (
    TrainConfig,
    TrainRun,
    atomic_json,
    epochs_to_target,
    grid_search,
    load_data,
    per_sample_losses,
    run_many,
    train,
    write_loss_histogram,
    _atomic_csv,
)

log = logging.getLogger("tailguard")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMPARE_COLUMNS = ["label", "sampler", "final_test_mse", "final_test_mae", "top5_mmse",
                   "best_epoch", "epochs_run", "epochs_to_baseline_best", "error"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"must be a positive finite number, got {text}")
    return v


def _prune_ratio(text: str) -> float:
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"prune ratio must lie in [0, 1), got {text}")
    return v


def _tau(text: str) -> float:
    v = float(text)
    if not 0.0 <= v < 1.0:
        raise argparse.ArgumentTypeError(f"tau must lie in [0, 1), got {text}")
    return v


def _float_list(text: str) -> list[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _split(text: str) -> SplitSpec:
    try:
        return SplitSpec.parse(text)
    except DataError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_data_flags(p):
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--no-date", action="store_true", help="first column is a feature, not a date")
    p.add_argument("--lookback", type=int, default=720)
    p.add_argument("--horizon", type=int, default=96)
    p.add_argument("--split", type=_split, default=SplitSpec.by_months())
    p.add_argument("--freq", choices=("hourly", "15min"), default="hourly")


def _add_train_flags(p, sampler=True):
    p.add_argument("--model", choices=("linear", "mlp"), default="linear")
    if sampler:
        p.add_argument("--sampler", choices=("gaussian", "infobatch", "uniform"), default="uniform")
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--sigma", type=_positive_float, default=1.0)
    p.add_argument("--prune-ratio", type=_prune_ratio, default=0.5)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--patience", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=_positive_float, default=1e-4)
    p.add_argument("--tau", type=_tau, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full-loss-pass", action="store_true")
    p.add_argument("--augment", action="store_true")
    p.add_argument("--save-weights", action="store_true", help="write weights_epoch_<k>.csv every epoch")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tailguard", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one model")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="train several samplers on identical data and seeds")
    _add_data_flags(p)
    _add_train_flags(p, sampler=False)
    p.add_argument("--samplers", default="uniform,gaussian",
                   help="comma list of uniform | gaussian | infobatch[:s]")
    p.add_argument("--out", required=True)

    p = sub.add_parser("grid-search", help="mu/sigma grid of gaussian-sampler runs")
    _add_data_flags(p)
    _add_train_flags(p, sampler=False)
    p.add_argument("--mu-grid", type=_float_list, default=[-1.0, -0.5, 0.0, 0.5, 1.0])
    p.add_argument("--sigma-grid", type=_float_list, default=[0.5, 1.0, 2.0, 4.0])
    p.add_argument("--out", required=True)

    p = sub.add_parser("verify-theory", help="tail report for a loss density")
    p.add_argument("--density", default="pareto:1,1.5",
                   help="pareto:scale,shape | gaussian:mean,std | lognormal:mu,sigma | empirical:<csv>")
    p.add_argument("--lam", type=_float_list, default=[0.01, 0.1, 0.5])
    p.add_argument("--cutoffs", type=_float_list, default=[1e2, 1e3, 1e4])
    p.add_argument("--mu", type=float, default=0.0)
    p.add_argument("--sigma", type=_positive_float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("demo-synth", help="two-cluster classification demo of the weight function")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--sigma-cluster", type=_positive_float, default=0.3)
    p.add_argument("--centers", type=_float_list, default=[-0.5, -0.5, 0.5, 0.5],
                   help="x1,y1,x2,y2 of the two cluster centres")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="plot-ready CSVs from a run/compare/grid directory")
    p.add_argument("run_dir")
    p.add_argument("--out", default=None, help="defaults to the run directory")
    return parser


def _config(args, **over) -> TrainConfig:
    kw = dict(epochs=args.epochs, patience=min(args.patience, args.epochs), batch_size=args.batch_size,
              tau=args.tau, seed=args.seed, lr=args.lr, model=args.model,
              sampler=getattr(args, "sampler", "uniform"), mu=args.mu, sigma=args.sigma,
              prune_ratio=args.prune_ratio, augment=args.augment, full_loss_pass=args.full_loss_pass)
    kw.update(over)
    return TrainConfig(**kw)


def _parse_sampler_list(text: str, base: TrainConfig) -> list[TrainConfig]:
    out = []
    for item in (t.strip() for t in text.split(",")):
        if not item:
            continue
        name, _, arg = item.partition(":")
        if name == "infobatch":
            out.append(replace(base, sampler="infobatch",
                               prune_ratio=float(arg) if arg else base.prune_ratio))
        elif name in ("gaussian", "uniform"):
            out.append(replace(base, sampler=name))
        else:
            raise UsageError(f"unknown sampler {name!r}")
    if len(out) < 2:
        raise UsageError("compare needs at least two samplers")
    return out


def _ensure_out(path: str) -> None:
    os.makedirs(path, exist_ok=True)
    if not os.access(path, os.W_OK):
        raise DataError(f"output directory not writable: {path}")


def _load(args):
    return load_data(args.data, args.lookback, args.horizon, args.split, args.freq,
                     has_date_column=not args.no_date)


def _final_hist(run_dir, data, run: TrainRun) -> None:
    from .model import load_checkpoint

    ckpt = os.path.join(run_dir, "checkpoint.json")
    if not os.path.exists(ckpt) or run.best_epoch is None:
        return
    losses = per_sample_losses(load_checkpoint(ckpt), data.train)
    write_loss_histogram(losses, run.config.gaussian_params(),
                         os.path.join(run_dir, f"loss_hist_epoch_{run.best_epoch}.csv"))


def cmd_train(args) -> int:
    _ensure_out(args.out)
    data = _load(args)
    run = train(data, _config(args), args.out, save_weights=args.save_weights)
    _final_hist(args.out, data, run)
    final = run.final
    print(f"{run.config.label()}: best epoch {run.best_epoch}, test MSE {final.test_mse:.6f}, "
          f"MAE {final.test_mae:.6f}, Top5-MMSE {run.top5_mmse:.6f}")
    return EXIT_OK


def compare_rows(runs: list[TrainRun]) -> list[dict]:
    """Side-by-side summary; the first successful run is the baseline."""
    ok = [r for r in runs if r.error is None and r.records]
    target = min(ok[0].test_mse) if ok else None
    rows = []
    for r in runs:
        fin = r.final
        rows.append({
            "label": r.config.label(),
            "sampler": r.config.sampler,
            "final_test_mse": fin.test_mse if fin else None,
            "final_test_mae": fin.test_mae if fin else None,
            "top5_mmse": r.top5_mmse if r.records else None,
            "best_epoch": r.best_epoch,
            "epochs_run": len(r.records),
            "epochs_to_baseline_best": epochs_to_target(r, target) if (fin and target) else None,
            "error": r.error,
        })
    return rows


def cmd_compare(args) -> int:
    _ensure_out(args.out)
    data = _load(args)
    configs = _parse_sampler_list(args.samplers, _config(args))
    subdirs = [os.path.join(args.out, f"run_{i}") for i in range(len(configs))]
    for sub in subdirs:
        os.makedirs(sub, exist_ok=True)
    runs = run_many(data, configs, subdirs)
    for sub, r in zip(subdirs, runs):
        if r.error is None:
            _final_hist(sub, data, r)
        else:
            atomic_json(os.path.join(sub, "run.json"), r.to_json())
    rows = compare_rows(runs)
    atomic_json(os.path.join(args.out, "compare.json"),
                {"rows": rows, "runs": [f"run_{i}" for i in range(len(runs))]})
    _atomic_csv(os.path.join(args.out, "compare.csv"), COMPARE_COLUMNS,
                [["" if row[c] is None else row[c] for c in COMPARE_COLUMNS] for row in rows])
    for row in rows:
        print(row)
    return EXIT_OK if any(r.error is None for r in runs) else EXIT_NUMERIC


def cmd_grid_search(args) -> int:
    _ensure_out(args.out)
    data = _load(args)
    result = grid_search(args.mu_grid, args.sigma_grid, _config(args, sampler="gaussian"), data)
    atomic_json(os.path.join(args.out, "grid.json"), result.to_json())
    print(json.dumps(result.to_json()["best"]))
    return EXIT_OK


def _density(text: str) -> LossDensity:
    kind, _, rest = text.partition(":")
    if kind == "empirical":
        vals = np.loadtxt(rest, delimiter=",", ndmin=1)
        return LossDensity.empirical(vals.ravel())
    try:
        a, b = (float(v) for v in rest.split(","))
    except ValueError:
        raise UsageError(f"cannot parse density {text!r}") from None
    if kind not in ("pareto", "gaussian", "lognormal"):
        raise UsageError(f"unknown density kind {kind!r}")
    return getattr(LossDensity, kind)(a, b)


def cmd_verify_theory(args) -> int:
    _ensure_out(args.out)
    f = _density(args.density)
    params = smp.GaussianWeightParams(args.mu, args.sigma)
    summary = []
    for lam in args.lam:
        rep = verify_theorem1(f, params, lam, args.cutoffs, seed=args.seed)
        tag = f"{lam:g}"
        rep.write(os.path.join(args.out, f"tail_report_lam_{tag}.json"),
                  os.path.join(args.out, f"moments_lam_{tag}.csv"))
        summary.append(rep.to_json())
        print(f"lambda={tag}: raw {rep.verdict_raw}, weighted {rep.verdict_weighted}, "
              f"Hill raw {rep.hill_raw:.4f} vs weighted {rep.hill_weighted:.4f}, "
              f"bound {'applies' if rep.bound_precondition else 'inapplicable'}")
    atomic_json(os.path.join(args.out, "tail_report.json"), {"density": args.density, "reports": summary})
    return EXIT_OK


def synthetic_demo(n: int = 1000, sigma_cluster: float = 0.3, centers=((-0.5, -0.5), (0.5, 0.5)),
                   seed: int = 0, steps: int = 500, lr: float = 0.1, grid_size: int = 101):
    """Two Gaussian clusters, a logistic classifier and Gaussian loss weights.

    The point loss is ``|p - label|``; the grid carries the contour loss
    ``min(p, 1 - p)``. Both are weighted with statistics of the point losses.
    """
    rng = np.random.default_rng(seed)
    half = n // 2
    counts = (half, n - half)
    xs = np.concatenate([rng.normal(centers[c], sigma_cluster, size=(counts[c], 2)) for c in (0, 1)])
    ys = np.concatenate([np.full(counts[c], c, dtype=float) for c in (0, 1)])
    w = np.zeros(2)
    b = 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(xs @ w + b)))
        err = p - ys
        w -= lr * xs.T @ err / n
        b -= lr * err.mean()
    p = 1.0 / (1.0 + np.exp(-(xs @ w + b)))
    loss = np.abs(p - ys)
    stats = smp.LossStats.of(loss)
    params = smp.GaussianWeightParams()
    y = (loss - stats.mu_x) / stats.sigma_x if stats.sigma_x > 0 else np.zeros_like(loss)
    weight = smp.gaussian_weights(y, params)
    lo, hi = xs.min(axis=0) - 0.5, xs.max(axis=0) + 0.5
    g1, g2 = np.meshgrid(np.linspace(lo[0], hi[0], grid_size), np.linspace(lo[1], hi[1], grid_size))
    grid = np.column_stack([g1.ravel(), g2.ravel()])
    pg = 1.0 / (1.0 + np.exp(-(grid @ w + b)))
    contour = np.minimum(pg, 1.0 - pg)
    gy = (contour - stats.mu_x) / stats.sigma_x if stats.sigma_x > 0 else np.zeros_like(contour)
    return {
        "points": np.column_stack([xs, ys, loss, weight]),
        "grid": np.column_stack([grid, contour, smp.gaussian_weights(gy, params)]),
        "coef": (w, b),
    }


def cmd_demo_synthetic(args) -> int:
    if args.n < 2:
        raise UsageError("--n must be at least 2")
    if len(args.centers) != 4:
        raise UsageError("--centers needs four numbers")
    _ensure_out(args.out)
    c = args.centers
    demo = synthetic_demo(args.n, args.sigma_cluster, ((c[0], c[1]), (c[2], c[3])), args.seed)
    _atomic_csv(os.path.join(args.out, "demo_points.csv"), ["x1", "x2", "class", "loss", "weight"],
                [[r[0], r[1], int(r[2]), r[3], r[4]] for r in demo["points"]])
    _atomic_csv(os.path.join(args.out, "demo_grid.csv"), ["x1", "x2", "contour_loss", "weight"],
                demo["grid"].tolist())
    return EXIT_OK


def _read_run(path) -> TrainRun:
    with open(path) as fh:
        doc = json.load(fh)
    try:
        return TrainRun.from_json(doc)
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_report(args) -> int:
    """Write report_curves.csv, report_loss_hist.csv and report_mu_sigma_surface.csv."""
    src = args.run_dir
    out = args.out or src
    if not os.path.isdir(src):
        raise DataError(f"no such run directory: {src}")
    run_files = sorted(glob.glob(os.path.join(src, "run.json")) + glob.glob(os.path.join(src, "run_*", "run.json")))
    grid_file = os.path.join(src, "grid.json")
    if not run_files and not os.path.exists(grid_file):
        raise DataError(f"{src}: no run.json, run_*/run.json or grid.json found")
    _ensure_out(out)

    curves, hists = [], []
    for path in run_files:
        run = _read_run(path)
        label = run.config.label()
        curves += [[label, r.epoch, r.test_mse] for r in run.records]
        hist_files = glob.glob(os.path.join(os.path.dirname(path), "loss_hist_epoch_*.csv"))
        if hist_files:
            latest = max(hist_files, key=lambda p: int(p.rsplit("_", 1)[1].split(".")[0]))
            with open(latest) as fh:
                rows = list(csv.reader(fh))[1:]
            hists += [[label] + r for r in rows]
    _atomic_csv(os.path.join(out, "report_curves.csv"), ["run", "epoch", "test_mse"], curves)
    _atomic_csv(os.path.join(out, "report_loss_hist.csv"),
                ["run", "bin_lo", "bin_hi", "raw_count", "reweighted_count"], hists)
    surface = []
    if os.path.exists(grid_file):
        with open(grid_file) as fh:
            g = json.load(fh)
        for i, s in enumerate(g["sigma_grid"]):
            for j, m in enumerate(g["mu_grid"]):
                v = g["mse"][i][j]
                surface.append([m, s, "" if v is None else v])
    _atomic_csv(os.path.join(out, "report_mu_sigma_surface.csv"), ["mu", "sigma", "test_mse"], surface)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "compare": cmd_compare,
    "grid-search": cmd_grid_search,
    "verify-theory": cmd_verify_theory,
    "demo-synth": cmd_demo_synthetic,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tailguard: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"tailguard: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"tailguard: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"tailguard: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
