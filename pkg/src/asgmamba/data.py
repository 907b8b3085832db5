"""CSV ingestion, chronological splits, standardised sliding windows,
synthetic signals and the naive last-value baseline."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .io_utils import write_csv

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8
SYNTH_PERIOD = 24
SYNTH_KINDS = ("sine", "sine-plus-noise", "noise", "mixed-channels")


class DataError(ValueError):
    """Malformed input data or a dataset too small to window."""


@dataclass
class RawSeries:
    values: np.ndarray
    variate_names: list[str]
    timestamps: list[str] | None = None
    header: list[str] | None = None

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_vars(self) -> int:
        return self.values.shape[1]


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, has_header: bool | None = None, datetime_first_column: bool | None = None) -> RawSeries:
    """Read a numeric CSV. ``None`` flags are auto-detected.

    A header is assumed when the first row contains a non-numeric cell; a
    datetime column is assumed when the first cell of the first data row is
    non-numeric. Errors name 1-based data-row and column positions.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    if not rows:
        raise DataError(f"{path}: empty file")
    if has_header is None:
        has_header = not all(_is_number(c) for c in rows[0])
    header = [c.strip() for c in rows[0]] if has_header else None
    body = rows[1:] if has_header else rows
    if not body:
        raise DataError(f"{path}: no data rows")
    if datetime_first_column is None:
        cell = body[0][0].strip()
        datetime_first_column = bool(cell) and not _is_number(cell)
    width = len(body[0])
    first = 1 if datetime_first_column else 0
    if width - first < 1:
        raise DataError(f"{path}: no numeric columns")
    values = np.empty((len(body), width - first), dtype=np.float64)
    stamps = [] if datetime_first_column else None
    for i, row in enumerate(body):
        if len(row) != width:
            raise DataError(f"{path}: row {i + 1} has {len(row)} cells, expected {width}")
        if stamps is not None:
            stamps.append(row[0])
        for j in range(first, width):
            try:
                values[i, j - first] = float(row[j])
            except ValueError:
                what = "missing value" if not row[j].strip() else f"non-numeric cell {row[j]!r}"
                raise DataError(f"{path}: {what} at row {i + 1}, column {j + 1}") from None
            if not math.isfinite(values[i, j - first]):
                raise DataError(f"{path}: missing or non-finite value at row {i + 1}, column {j + 1}")
    if header is not None and len(header) != width:
        raise DataError(f"{path}: header has {len(header)} cells, rows have {width}")
    names = header[first:] if header is not None else [f"v{k}" for k in range(width - first)]
    log.info("loaded %s: %d rows x %d variates", path, values.shape[0], values.shape[1])
    return RawSeries(values, names, stamps, header)


def save_csv(path, series: RawSeries) -> None:
    header = series.header or series.variate_names
    rows = []
    for i in range(series.length):
        vals = [repr(float(v)) for v in series.values[i]]
        rows.append(([series.timestamps[i]] if series.timestamps else []) + vals)
    write_csv(path, header, rows)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitRanges:
    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def as_dict(self) -> dict[str, tuple[int, int]]:
        return {"train": self.train, "val": self.val, "test": self.test}


def chronological_split(length: int, ratios=(0.7, 0.1, 0.2), canonical_ett: bool = False,
                        steps_per_hour: int = 1) -> SplitRanges:
    """Contiguous train/val/test ranges, half-open.

    The canonical ETT layout uses 12/4/4 months of 30 days.
    """
    if canonical_ett:
        month = 30 * 24 * steps_per_hour
        a, b, c = 12 * month, 16 * month, 20 * month
        if length < c:
            raise DataError(f"series of length {length} is shorter than the ETT protocol ({c})")
        return SplitRanges((0, a), (a, b), (b, c))
    r_train, r_val, r_test = (float(r) for r in ratios)
    if min(r_train, r_val, r_test) <= 0 or r_train + r_val + r_test > 1 + 1e-12:
        raise DataError(f"split ratios must be positive and sum to at most 1, got {ratios}")
    n_train = math.floor(length * r_train + 1e-9)
    n_val = math.floor(length * r_val + 1e-9)
    n_test = math.floor(length * r_test + 1e-9)
    return SplitRanges((0, n_train), (n_train, n_train + n_val), (n_train + n_val, n_train + n_val + n_test))


# ---------------------------------------------------------------- windows

@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray
    source: str = "train"

    @classmethod
    def fit(cls, values: np.ndarray, source: str = "train") -> "Scaler":
        return cls(values.mean(axis=0), np.maximum(values.std(axis=0), STD_FLOOR), source)

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64),
                   d.get("source", "train"))


@dataclass
class WindowedDataset:
    split: str
    inputs: np.ndarray
    targets: np.ndarray
    scaler: Scaler
    start_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    range: tuple[int, int] = (0, 0)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def n_vars(self) -> int:
        return self.inputs.shape[2]


def num_windows(split_length: int, look_back: int, horizon: int) -> int:
    return max(split_length - look_back - horizon + 1, 0)


def make_windows(series: RawSeries | np.ndarray, ranges: SplitRanges, look_back: int, horizon: int,
                 stride: int = 1) -> dict[str, WindowedDataset]:
    """Standardised (input, target) windows per split, never crossing a boundary.

    Statistics come from the train range only and are applied to every split.
    """
    values = series.values if isinstance(series, RawSeries) else np.asarray(series, dtype=np.float64)
    if look_back < 1 or horizon < 1:
        raise DataError("look-back and horizon must be >= 1")
    t0, t1 = ranges.train
    if num_windows(t1 - t0, look_back, horizon) == 0:
        raise DataError(f"train split of length {t1 - t0} holds no window of {look_back}+{horizon}")
    scaler = Scaler.fit(values[t0:t1])
    scaled = scaler.transform(values)
    out = {}
    for split, (a, b) in ranges.as_dict().items():
        n = num_windows(b - a, look_back, horizon)
        if n == 0:
            log.warning("%s split [%d, %d) is too short for L=%d, T=%d", split, a, b, look_back, horizon)
        starts = np.arange(a, a + n, stride, dtype=np.int64)
        xi = starts[:, None] + np.arange(look_back)
        yi = starts[:, None] + look_back + np.arange(horizon)
        m = values.shape[1]
        out[split] = WindowedDataset(
            split,
            scaled[xi] if n else np.zeros((0, look_back, m)),
            scaled[yi] if n else np.zeros((0, horizon, m)),
            scaler, starts, (a, b),
        )
    return out


# ---------------------------------------------------------------- synthetic

def synth_generate(kind: str, length: int, n_vars: int = 1, snr_db: float = 0.0, seed: int = 0,
                   period: int = SYNTH_PERIOD) -> RawSeries:
    """Deterministic synthetic series.

    Sine channels have unit amplitude (power 1/2) and a per-channel phase
    offset. Noise is white Gaussian with variance ``0.5 * 10**(-snr_db/10)``,
    i.e. it sits ``snr_db`` below a unit sine. ``mixed-channels`` makes the
    first ceil(M/2) channels pure sines and the rest noise of matched variance.
    """
    if kind not in SYNTH_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}; valid: {', '.join(SYNTH_KINDS)}")
    if length < 1 or n_vars < 1:
        raise DataError("length and channel count must be >= 1")
    if kind in ("sine-plus-noise", "noise") and not math.isfinite(snr_db):
        raise DataError("snr_db must be finite for noisy kinds")
    if kind == "mixed-channels" and n_vars < 2:
        raise DataError("mixed-channels needs at least 2 channels")
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)[:, None]
    phase = np.arange(n_vars)[None, :] * (2 * np.pi / max(n_vars, 1)) / 4
    sine = np.sin(2 * np.pi * t / period + phase)
    if kind == "sine":
        values = sine
    elif kind == "mixed-channels":
        n_sine = math.ceil(n_vars / 2)
        values = np.empty((length, n_vars))
        values[:, :n_sine] = sine[:, :n_sine]
        values[:, n_sine:] = rng.normal(0.0, math.sqrt(0.5), (length, n_vars - n_sine))
    else:
        sigma = math.sqrt(0.5 * 10 ** (-snr_db / 10))
        noise = rng.normal(0.0, sigma, (length, n_vars))
        values = noise if kind == "noise" else sine + noise
    return RawSeries(values, [f"v{k}" for k in range(n_vars)])


def naive_forecast(window: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the last observed row ``horizon`` times; works on (..., L, M)."""
    window = np.asarray(window)
    last = window[..., -1:, :]
    return np.repeat(last, horizon, axis=-2)
