"""CSV ingestion, splits, scaling and channel-independent sliding windows."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError, EmptyError, ParseError, SplitError, WindowError

STD_FLOOR = 1e-12
SAMPLES_PER_MONTH = {"hourly": 30 * 24, "15min": 30 * 24 * 4}


@dataclass(frozen=True)
class RawSeries:
    values: np.ndarray  # (N, M) float64
    feature_names: tuple[str, ...]
    timestamps: tuple[str, ...] | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {v.shape}")
        object.__setattr__(self, "values", v)
        if len(self.feature_names) != v.shape[1]:
            raise DataError("feature_names length does not match column count")
        if self.timestamps is not None and len(self.timestamps) != v.shape[0]:
            raise DataError("timestamps length does not match row count")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def rows(self, start: int, stop: int) -> "RawSeries":
        ts = None if self.timestamps is None else self.timestamps[start:stop]
        return RawSeries(self.values[start:stop], self.feature_names, ts)


def load_csv(path: str | os.PathLike, has_date_column: bool = True) -> RawSeries:
    """Read a header-first CSV into a :class:`RawSeries`.

    Row numbers in :class:`ParseError` count data rows from 1, the header
    excluded. Rows containing NaN or Inf are rejected.
    """
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such data file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyError(f"{path}: file is empty") from None
        offset = 1 if has_date_column else 0
        names = tuple(h.strip() for h in header[offset:])
        if not names:
            raise ParseError(f"{path}: no feature columns in header", row=0)
        stamps: list[str] = []
        rows: list[list[float]] = []
        for r, record in enumerate(reader, start=1):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise ParseError(
                    f"{path}: row {r} has {len(record)} cells, expected {len(header)}", row=r
                )
            parsed = []
            for c, cell in enumerate(record[offset:], start=offset):
                try:
                    x = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: non-numeric cell {cell!r} at row {r}, column {c}", row=r, column=c
                    ) from None
                if not math.isfinite(x):
                    raise ParseError(f"{path}: non-finite value at row {r}, column {c}", row=r, column=c)
                parsed.append(x)
            rows.append(parsed)
            if has_date_column:
                stamps.append(record[0].strip())
    if len(rows) < 2:
        raise EmptyError(f"{path}: need at least 2 data rows, found {len(rows)}")
    return RawSeries(np.array(rows, dtype=np.float64), names, tuple(stamps) if has_date_column else None)


@dataclass(frozen=True)
class SplitSpec:
    mode: str  # "months" or "fraction"
    parts: tuple[float, float, float]

    def __post_init__(self):
        if self.mode == "fraction":
            if any(p < 0 for p in self.parts) or abs(sum(self.parts) - 1.0) > 1e-9:
                raise SplitError(f"split fractions must be non-negative and sum to 1, got {self.parts}")
        elif self.mode == "months":
            if any(p <= 0 or int(p) != p for p in self.parts):
                raise SplitError(f"month counts must be positive integers, got {self.parts}")
        else:
            raise SplitError(f"unknown split mode {self.mode!r}")

    @classmethod
    def by_months(cls, train: int = 12, val: int = 4, test: int = 4) -> "SplitSpec":
        return cls("months", (train, val, test))

    @classmethod
    def by_fraction(cls, train: float = 0.7, val: float = 0.1, test: float = 0.2) -> "SplitSpec":
        return cls("fraction", (train, val, test))

    @classmethod
    def parse(cls, text: str) -> "SplitSpec":
        """Parse ``months:12,4,4`` or ``frac:0.7,0.1,0.2``."""
        try:
            kind, _, rest = text.partition(":")
            nums = tuple(float(p) for p in rest.split(","))
        except ValueError:
            raise SplitError(f"cannot parse split {text!r}") from None
        if len(nums) != 3:
            raise SplitError(f"split needs three parts, got {text!r}")
        if kind == "months":
            return cls.by_months(*(int(n) if n == int(n) else n for n in nums))
        if kind in ("frac", "fraction"):
            return cls.by_fraction(*nums)
        raise SplitError(f"unknown split kind {kind!r}")

    def row_counts(self, n_rows: int, samples_per_month: int) -> tuple[int, int, int]:
        if self.mode == "months":
            return tuple(int(p) * samples_per_month for p in self.parts)
        n_train = int(n_rows * self.parts[0])
        n_test = int(n_rows * self.parts[2])
        return n_train, n_rows - n_train - n_test, n_test


def split(
    series: RawSeries,
    spec: SplitSpec,
    samples_per_month: int = SAMPLES_PER_MONTH["hourly"],
    lookback: int = 0,
    horizon: int = 0,
) -> tuple[RawSeries, RawSeries, RawSeries]:
    """Time-ordered train/val/test partition.

    Val and test are extended backwards by ``lookback`` rows so that their
    first forecast window exists.
    """
    n_train, n_val, n_test = spec.row_counts(series.n_rows, samples_per_month)
    if n_train + n_val + n_test > series.n_rows:
        raise SplitError(
            f"split needs {n_train + n_val + n_test} rows, series has {series.n_rows}"
        )
    bounds = [(0, n_train), (n_train - lookback, n_train + n_val),
              (n_train + n_val - lookback, n_train + n_val + n_test)]
    need = lookback + horizon
    parts = []
    for name, (a, b) in zip(("train", "val", "test"), bounds):
        if a < 0 or b - a < max(need, 1):
            raise SplitError(f"{name} partition has {b - max(a, 0)} rows, needs at least {max(need, 1)}")
        parts.append(series.rows(a, b))
    return tuple(parts)


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, series: RawSeries) -> RawSeries:
        return replace(series, values=(series.values - self.mean) / self.std)

    def inverse(self, series: RawSeries) -> RawSeries:
        return replace(series, values=series.values * self.std + self.mean)


def fit_scaler(train: RawSeries) -> Scaler:
    if train.n_rows == 0:
        raise EmptyError("cannot fit a scaler on an empty split")
    mean = train.values.mean(axis=0)
    std = np.maximum(train.values.std(axis=0), STD_FLOOR)
    return Scaler(mean, std)


def apply_scaler(series: RawSeries, scaler: Scaler) -> RawSeries:
    return scaler.transform(series)


@dataclass(frozen=True)
class SampleWindow:
    id: int
    input: np.ndarray
    target: np.ndarray
    channel: int


@dataclass(frozen=True)
class WindowSet(Sequence[SampleWindow]):
    """All channel-independent windows of one split, materialized lazily.

    Window ``id`` maps to ``channel = id // per_channel`` and start offset
    ``t = id % per_channel``; only the requested batch is ever copied.
    """

    values: np.ndarray
    lookback: int
    horizon: int
    _in_idx: np.ndarray = field(init=False, repr=False)
    _out_idx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_in_idx", np.arange(self.lookback))
        object.__setattr__(self, "_out_idx", np.arange(self.lookback, self.lookback + self.horizon))

    @property
    def per_channel(self) -> int:
        return self.values.shape[0] - self.lookback - self.horizon + 1

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.per_channel * self.n_channels

    def locate(self, ids) -> tuple[np.ndarray, np.ndarray]:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= len(self)):
            raise IndexError("window id out of range")
        return ids // self.per_channel, ids % self.per_channel

    def batch(self, ids) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(inputs (B, L), targets (B, T))`` for the given ids."""
        ch, t = self.locate(ids)
        x = self.values[t[:, None] + self._in_idx, ch[:, None]]
        y = self.values[t[:, None] + self._out_idx, ch[:, None]]
        return x, y

    def __getitem__(self, i) -> SampleWindow:
        if isinstance(i, slice):
            raise TypeError("WindowSet does not support slicing; use batch()")
        if i < 0:
            i += len(self)
        x, y = self.batch([i])
        ch, _ = self.locate([i])
        return SampleWindow(int(i), x[0], y[0], int(ch[0]))

    def __iter__(self) -> Iterator[SampleWindow]:
        for i in range(len(self)):
            yield self[i]


def make_windows(series: RawSeries, lookback: int, horizon: int) -> WindowSet:
    if lookback < 1 or horizon < 1:
        raise WindowError("lookback and horizon must be positive")
    if series.n_rows < lookback + horizon:
        raise WindowError(
            f"series has {series.n_rows} rows, need at least lookback+horizon={lookback + horizon}"
        )
    return WindowSet(np.ascontiguousarray(series.values), lookback, horizon)


def random_erase(
    window: SampleWindow,
    p: float = 0.5,
    frac_range: tuple[float, float] = (0.05, 0.2),
    rng: np.random.Generator | None = None,
) -> SampleWindow:
    """Zero a contiguous stretch of the input with probability ``p``."""
    rng = np.random.default_rng() if rng is None else rng
    x = random_erase_batch(window.input[None, :], p, frac_range, rng)[0]
    return replace(window, input=x)


def random_erase_batch(
    inputs: np.ndarray,
    p: float,
    frac_range: tuple[float, float],
    rng: np.random.Generator,
) -> np.ndarray:
    lo, hi = frac_range
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"erase probability must lie in [0, 1], got {p}")
    if not 0.0 < lo <= hi < 1.0:
        raise ValueError(f"frac_range must satisfy 0 < lo <= hi < 1, got {frac_range}")
    out = np.array(inputs, dtype=np.float64, copy=True)
    n, length = out.shape
    hit = rng.random(n) < p
    u = rng.uniform(lo, hi, size=n)
    span = np.floor(u * length + 0.5).astype(np.int64)
    start = (rng.random(n) * (length - span + 1)).astype(np.int64)
    cols = np.arange(length)
    mask = hit[:, None] & (cols >= start[:, None]) & (cols < (start + span)[:, None])
    out[mask] = 0.0
    return out
