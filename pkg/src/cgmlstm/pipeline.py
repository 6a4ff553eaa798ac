"""CGM file ingestion, gap repair, sub-dataset selection and windowing.

A :class:`GlucoseSeries` lives on a 5-minute grid; missing readings are
``NaN``.  The preprocessing chain is::

    ingest_csv -> repair_singletons -> split_on_gaps -> partition_by_length
               -> make_windows / split_dataset -> chrono_split
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import FitError, InputError

STEP_SECONDS = 300
SNAP_TOLERANCE = 60
VALID_RANGE = (1.0, 1000.0)
OUTLIER_JUMP = 50.0
MIN_SUBSET_LEN = 1500
MISSING = float("nan")

_NA_TOKENS = {"", "na", "nan", "null", "none"}


@dataclass
class GlucoseSeries:
    """Samples on a 5-minute grid starting at ``start_time`` (UTC epoch seconds)."""

    subject_id: str
    start_time: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        present = self.values[~np.isnan(self.values)]
        if present.size and (present.min() < VALID_RANGE[0] or present.max() > VALID_RANGE[1]):
            raise InputError(f"{self.subject_id}: values outside {VALID_RANGE} mg/dl")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    def timestamps(self) -> list[str]:
        t0 = datetime.fromtimestamp(self.start_time, tz=timezone.utc)
        return [_iso(t0 + timedelta(seconds=STEP_SECONDS * i)) for i in range(len(self))]


@dataclass
class SubDataset:
    """A contiguous, gap-free run of a parent series."""

    subject_id: str
    offset: int
    values: np.ndarray
    start_time: float = 0.0
    label: Optional[str] = None  # overrides the derived name, e.g. a file stem

    def __len__(self) -> int:
        return len(self.values)

    @property
    def name(self) -> str:
        return self.label or f"{self.subject_id}_{self.offset:06d}"

    def as_series(self) -> GlucoseSeries:
        return GlucoseSeries(self.name, self.start_time, self.values)


@dataclass
class Pool:
    """Short sub-datasets merged for pre-training; windows never cross segments."""

    segments: list[SubDataset] = field(default_factory=list)

    def __len__(self) -> int:
        return sum(len(s) for s in self.segments)

    @property
    def values(self) -> np.ndarray:
        if not self.segments:
            return np.empty(0)
        return np.concatenate([s.values for s in self.segments])

    @property
    def boundaries(self) -> np.ndarray:
        """Start offset of every segment inside :attr:`values`."""
        return np.cumsum([0] + [len(s) for s in self.segments[:-1]])


def _iso(dt: datetime) -> str:
    return dt.strftime("%Y-%m-%dT%H:%M:%S")


def _parse_time(text: str) -> float:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _read_rows(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            rows = [(reader.line_num, row) for row in reader if row and any(c.strip() for c in row)]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if header is None:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in header]
    if header[:2] != ["timestamp", "glucose_mgdl"]:
        raise InputError(f"{path}: header must start with 'timestamp,glucose_mgdl', got {','.join(header)}")
    return header, rows


def _to_grid(path, subject_id: str, rows: list[tuple[int, float, float]]) -> GlucoseSeries:
    if not rows:
        raise InputError(f"{path}: no data rows")
    rows = sorted(rows, key=lambda r: r[1])
    t0 = rows[0][1]
    slots: dict[int, float] = {}
    for line, t, v in rows:
        offset = t - t0
        idx = int(round(offset / STEP_SECONDS))
        if abs(offset - idx * STEP_SECONDS) > SNAP_TOLERANCE:
            raise InputError(f"{path}:{line}: timestamp is more than {SNAP_TOLERANCE}s off the 5-minute grid")
        if idx in slots:
            raise InputError(f"{path}:{line}: duplicate reading for grid slot {idx}")
        slots[idx] = v
    values = np.full(max(slots) + 1, MISSING)
    for idx, v in slots.items():
        values[idx] = v
    return GlucoseSeries(subject_id, t0, values)


def _parse_rows(path, rows):
    parsed = []
    for line, row in rows:
        try:
            t = _parse_time(row[0])
            raw = row[1].strip() if len(row) > 1 else ""
            v = MISSING if raw.lower() in _NA_TOKENS else float(raw)
        except (ValueError, IndexError) as exc:
            raise InputError(f"{path}:{line}: unparseable row {','.join(row)!r} ({exc})") from exc
        if not math.isnan(v) and not (VALID_RANGE[0] <= v <= VALID_RANGE[1]):
            v = MISSING
        parsed.append((line, t, v))
    return parsed


def ingest_csv(path, subject_id: Optional[str] = None) -> GlucoseSeries:
    """Read a ``timestamp,glucose_mgdl`` file onto the 5-minute grid.

    Timestamps may be ISO-8601 (naive means UTC) or epoch seconds.  Empty
    grid slots and readings outside 1..1000 mg/dl become missing.
    """
    path = Path(path)
    _, rows = _read_rows(path)
    return _to_grid(path, subject_id or path.stem, _parse_rows(path, rows))


def ingest_pool_csv(path) -> Pool:
    """Read a merged pre-train pool; the ``segment_id`` column separates sources."""
    path = Path(path)
    header, rows = _read_rows(path)
    if "segment_id" not in header:
        raise InputError(f"{path}: pool file needs a segment_id column")
    col = header.index("segment_id")
    groups: dict[str, list] = {}
    for line, row in rows:
        if len(row) <= col:
            raise InputError(f"{path}:{line}: missing segment_id")
        groups.setdefault(row[col].strip(), []).append((line, row))
    pool = Pool()
    for seg_id, seg_rows in groups.items():
        s = _to_grid(path, seg_id, _parse_rows(path, seg_rows))
        if s.missing.any():
            raise InputError(f"{path}: pool segment {seg_id} has gaps")
        pool.segments.append(SubDataset(seg_id, 0, s.values, s.start_time, seg_id))
    return pool


def _fmt(v: float) -> str:
    return format(float(v), ".10g")


def write_csv(series: Union[GlucoseSeries, SubDataset], path) -> None:
    """Write present samples only; gaps are implied by the missing grid slots."""
    s = series.as_series() if isinstance(series, SubDataset) else series
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("timestamp,glucose_mgdl\n")
        for ts, v in zip(s.timestamps(), s.values):
            if not math.isnan(v):
                fh.write(f"{ts},{_fmt(v)}\n")


def write_pool_csv(pool: Pool, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("timestamp,glucose_mgdl,segment_id\n")
        for seg in pool.segments:
            for ts, v in zip(seg.as_series().timestamps(), seg.values):
                fh.write(f"{ts},{_fmt(v)},{seg.name}\n")


def repair_singletons(s: GlucoseSeries) -> GlucoseSeries:
    """Fill isolated missing slots and flatten isolated spikes.

    A single missing slot between two readings becomes their mean.  A reading
    more than 50 mg/dl away from both neighbours is an outlier; it is
    replaced by the neighbours' mean when both neighbours are normal and that
    mean is itself normal (the neighbours differ by at most 100 mg/dl).
    Outliers are flagged on the interpolated input in one pass, which makes
    the repair idempotent.  Runs of two or more missing slots are kept.
    """
    v = s.values.copy()
    n = len(v)
    if n < 3:
        return replace(s, values=v)
    miss = np.isnan(v)
    single = np.zeros(n, dtype=bool)
    single[1:-1] = miss[1:-1] & ~miss[:-2] & ~miss[2:]
    idx = np.flatnonzero(single)
    v[idx] = 0.5 * (v[idx - 1] + v[idx + 1])

    p, x, q = v[:-2], v[1:-1], v[2:]
    with np.errstate(invalid="ignore"):
        outlier = np.zeros(n, dtype=bool)
        outlier[1:-1] = (np.abs(x - p) > OUTLIER_JUMP) & (np.abs(x - q) > OUTLIER_JUMP)
        fixable = np.zeros(n, dtype=bool)
        fixable[1:-1] = outlier[1:-1] & ~outlier[:-2] & ~outlier[2:] & (np.abs(q - p) <= 2 * OUTLIER_JUMP)
    idx = np.flatnonzero(fixable)
    v[idx] = 0.5 * (v[idx - 1] + v[idx + 1])
    return replace(s, values=v)


def split_on_gaps(s: GlucoseSeries) -> list[SubDataset]:
    """Maximal runs of present samples, in order."""
    present = ~np.isnan(s.values)
    edges = np.diff(np.concatenate([[0], present.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    return [SubDataset(s.subject_id, int(a), s.values[a:b].copy(), s.start_time + STEP_SECONDS * int(a))
            for a, b in zip(starts, stops)]


def partition_by_length(subs: Sequence[SubDataset], min_len: int = MIN_SUBSET_LEN
                        ) -> tuple[list[SubDataset], Pool]:
    """Keep sub-datasets with at least ``min_len`` samples; pool the rest."""
    kept = [s for s in subs if len(s) >= min_len]
    pool = Pool([s for s in subs if len(s) < min_len])
    return kept, pool


@dataclass(frozen=True)
class Scaler:
    """Min-max transform onto [0, 1] (test data may fall outside)."""

    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise FitError(f"scaler needs max > min, got min={self.min}, max={self.max}")

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.min) / (self.max - self.min)

    def invert(self, y):
        return np.asarray(y, dtype=np.float64) * (self.max - self.min) + self.min


def fit_scaler(samples) -> Scaler:
    x = np.asarray(samples, dtype=np.float64).ravel()
    x = x[~np.isnan(x)]
    if x.size < 2 or x.min() == x.max():
        raise FitError("cannot fit a scaler to fewer than two distinct values")
    return Scaler(float(x.min()), float(x.max()))


def apply_scaler(scaler: Scaler, x):
    return scaler.apply(x)


def invert_scaler(scaler: Scaler, y):
    return scaler.invert(y)


@dataclass
class WindowSet:
    """Input windows of ``L`` samples with the sample ``k`` steps after each window.

    ``start`` indexes the first input sample inside ``source`` (the unscaled
    mg/dl values the windows were cut from); ``segment`` identifies the pool
    segment for merged sources.
    """

    L: int
    k: int
    inputs: np.ndarray
    targets: np.ndarray
    scaler: Optional[Scaler]
    start: np.ndarray
    segment: np.ndarray
    source: np.ndarray
    name: str = ""

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def target_index(self) -> np.ndarray:
        return self.start + self.L - 1 + self.k

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, inputs=self.inputs[idx], targets=self.targets[idx],
                       start=self.start[idx], segment=self.segment[idx])

    def raw_inputs(self) -> np.ndarray:
        return self.source[self.start[:, None] + np.arange(self.L)]

    def raw_targets(self) -> np.ndarray:
        return self.source[self.target_index]

    def rescaled(self, scaler: Optional[Scaler]) -> "WindowSet":
        raw_x, raw_y = self.raw_inputs(), self.raw_targets()
        if scaler is not None:
            raw_x, raw_y = scaler.apply(raw_x), scaler.apply(raw_y)
        return replace(self, inputs=raw_x, targets=raw_y, scaler=scaler)


def horizon_steps(ph_minutes: int) -> int:
    if ph_minutes <= 0 or ph_minutes % 5:
        raise InputError(f"prediction horizon must be a positive multiple of 5 minutes, got {ph_minutes}")
    return ph_minutes // 5


def make_windows(data: Union[SubDataset, Pool], L: int, k: int, scaler: Optional[Scaler] = None
                 ) -> WindowSet:
    """Every window of ``L`` samples whose target lies ``k`` steps past its end."""
    segments = data.segments if isinstance(data, Pool) else [data]
    starts, segs, offset = [], [], 0
    for j, seg in enumerate(segments):
        n = len(seg) - L - k + 1
        if n > 0:
            starts.append(offset + np.arange(n))
            segs.append(np.full(n, j))
        offset += len(seg)
    if not starts:
        lens = [len(s) for s in segments]
        raise InputError(f"no segment is long enough for L={L}, k={k} (lengths {lens})")
    source = np.concatenate([np.asarray(s.values, dtype=np.float64) for s in segments])
    if np.isnan(source).any():
        raise InputError("cannot window data containing missing samples")
    name = "pool" if isinstance(data, Pool) else data.name
    empty = np.empty((0,))
    ws = WindowSet(L, k, empty, empty, None, np.concatenate(starts), np.concatenate(segs), source, name)
    return ws.rescaled(scaler)


def _n_train(N: int, train_frac: float) -> int:
    return int(Fraction(str(train_frac)) * N)


def chrono_split(ws: WindowSet, train_frac: float = 0.67) -> tuple[WindowSet, WindowSet]:
    """Chronological split: the first ``floor(train_frac * N)`` windows train.

    Test windows whose inputs reach back into samples used by training
    (inputs or targets) are dropped, so the test inputs start strictly after
    the last training sample of their segment.
    """
    N = len(ws)
    if N < 3:
        raise InputError(f"need at least 3 windows to split, got {N}")
    n_train = _n_train(N, train_frac)
    train = ws.subset(np.arange(n_train))
    rest = np.arange(n_train, N)
    if n_train:
        last_seg = ws.segment[n_train - 1]
        last_target = ws.target_index[n_train - 1]
        leak = (ws.segment[rest] == last_seg) & (ws.start[rest] <= last_target)
        rest = rest[~leak]
    return train, ws.subset(rest)


def split_dataset(data: Union[SubDataset, Pool], L: int, k: int, train_frac: float = 0.67,
                  scaler: Optional[Scaler] = None) -> tuple[WindowSet, WindowSet]:
    """Window, split chronologically and scale with a scaler fitted on the train part.

    When ``scaler`` is given it is used as-is instead of being fitted.
    """
    raw = make_windows(data, L, k)
    train, test = chrono_split(raw, train_frac)
    if scaler is None:
        scaler = fit_scaler(np.concatenate([train.raw_inputs().ravel(), train.raw_targets()]))
    return train.rescaled(scaler), test.rescaled(scaler)
