"""Long-format observation tables, the synthetic generator, and windowing."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoding import Triplet, VariableVocabulary
from .errors import DataError
from .fileio import atomic_open
from .seeding import stream

log = logging.getLogger(__name__)

CSV_HEADER = ("timestamp", "location", "variable", "value")
SIM_LOCATION = "sim"
SIM_ORIGIN = "2000-01-01T00:00"


@dataclass
class LongTable:
    """Observation records ``(timestamp, location, variable, value)``.

    Timestamps are integer hour indices; ``origin`` is the ISO time of hour 0
    when known. Records are kept sorted by (timestamp, location, variable).
    """

    timestamp: np.ndarray
    location: np.ndarray
    variable: np.ndarray
    value: np.ndarray
    origin: str | None = None

    def __post_init__(self):
        self.timestamp = np.asarray(self.timestamp, dtype=np.int64)
        self.location = np.asarray(self.location, dtype=str)
        self.variable = np.asarray(self.variable, dtype=str)
        self.value = np.asarray(self.value, dtype=np.float64)
        n = len(self.timestamp)
        if not (len(self.location) == len(self.variable) == len(self.value) == n):
            raise DataError("LongTable columns must have equal length")
        if n and not np.all(np.isfinite(self.value)):
            raise DataError("LongTable values must be finite")
        if n:
            order = np.lexsort((self.variable, self.location, self.timestamp))
            if not np.array_equal(order, np.arange(n)):
                self.timestamp = self.timestamp[order]
                self.location = self.location[order]
                self.variable = self.variable[order]
                self.value = self.value[order]

    def __len__(self) -> int:
        return len(self.timestamp)

    @classmethod
    def empty(cls) -> LongTable:
        return cls(np.zeros(0, np.int64), np.zeros(0, str), np.zeros(0, str), np.zeros(0))

    def subset(self, keep: np.ndarray) -> LongTable:
        return LongTable(self.timestamp[keep], self.location[keep], self.variable[keep], self.value[keep], self.origin)

    def pairs(self) -> list[tuple[str, str]]:
        """Distinct (location, variable) series, sorted."""
        if not len(self):
            return []
        return sorted(set(zip(self.location.tolist(), self.variable.tolist())))

    def time_range(self) -> tuple[int, int]:
        """Half-open hour range covering all records."""
        if not len(self):
            return (0, 0)
        return int(self.timestamp.min()), int(self.timestamp.max()) + 1

    def records(self):
        return zip(self.timestamp.tolist(), self.location.tolist(), self.variable.tolist(), self.value.tolist())


# -- synthetic process -------------------------------------------------------


@dataclass
class SimulationSpec:
    n_series: int = 16
    n_steps: int = 40_000
    intercept: float = 2.0
    ar_coeff: float = 0.4
    p1: float = 0.005
    p2: float = 0.0005
    p3: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if self.n_series != 16:
            raise ValueError("the temporal-effect vector has exactly 16 components; n_series must be 16")
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")


def simulate_covariance(rng: np.random.Generator, n: int = 16) -> np.ndarray:
    """Sigma = U U^T with U_ij ~ Uniform(-1, 1)."""
    u = rng.uniform(-1.0, 1.0, size=(n, n))
    return covariance_from_factor(u)


def covariance_from_factor(u: np.ndarray) -> np.ndarray:
    return u @ u.T


def temporal_effects(t: np.ndarray, p1: float, p2: float, p3: float) -> np.ndarray:
    """The 16 deterministic temporal components, shape (len(t), 16)."""
    t = np.asarray(t, dtype=np.float64)
    s1, s2, c2 = np.sin(p1 * t), np.sin(p2 * t), np.cos(p2 * t)
    cols = [
        10 * s1, c2, p3 * t, -p3 * t + 10 * s1,
        5 * s2, 12 * c2, 7 * s2, 8 * c2,
        2 * s2, 3 * c2, 12 * s2, 18 * c2,
        4 * s2, 15 * c2, 11 * s2, 10 * c2,
    ]
    return np.stack(cols, axis=-1)


def simulate_array(spec: SimulationSpec, *, noise: bool = True, temporal: bool = True) -> np.ndarray:
    """Run the AR(1) recursion; returns shape (n_steps, 16).

    ``noise`` and ``temporal`` switch off the spatial noise and the
    deterministic effects (used to check the fixed point).
    """
    n, T = spec.n_series, spec.n_steps
    x = temporal_effects(np.arange(T), spec.p1, spec.p2, spec.p3) if temporal else np.zeros((T, n))
    if noise:
        sigma = simulate_covariance(stream(spec.seed, "sim.covariance"), n)
        chol = np.linalg.cholesky(sigma + 1e-8 * np.eye(n))
        s = stream(spec.seed, "sim.noise").standard_normal((T, n)) @ chol.T
    else:
        s = np.zeros((T, n))
    y = np.empty((T, n))
    y[0] = spec.intercept + x[0] + s[0]
    for t in range(1, T):
        y[t] = spec.intercept + spec.ar_coeff * y[t - 1] + x[t] + s[t]
    return y


def sim_variable_names(n: int = 16) -> list[str]:
    return [f"y{i:02d}" for i in range(n)]


def simulate_series(spec: SimulationSpec, *, noise: bool = True, temporal: bool = True) -> LongTable:
    y = simulate_array(spec, noise=noise, temporal=temporal)
    T, n = y.shape
    names = np.array(sim_variable_names(n))
    return LongTable(
        timestamp=np.repeat(np.arange(T), n),
        location=np.full(T * n, SIM_LOCATION),
        variable=np.tile(names, T),
        value=y.reshape(-1),
        origin=SIM_ORIGIN,
    )


def sparsify(table: LongTable, rate: float, seed: int | np.random.Generator) -> LongTable:
    """Delete exactly round(rate * N) records uniformly without replacement."""
    rng = seed if isinstance(seed, np.random.Generator) else stream(seed, "sparsify")
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"sparsity rate must be in [0, 1), got {rate}")
    n = len(table)
    n_drop = int(round(rate * n))
    if n_drop == 0:
        return table.subset(np.ones(n, dtype=bool))
    keep = np.ones(n, dtype=bool)
    keep[rng.choice(n, size=n_drop, replace=False)] = False
    return table.subset(keep)


# -- CSV ---------------------------------------------------------------------


@dataclass
class IngestReport:
    rows: int = 0
    skipped: int = 0
    duplicates: int = 0
    skipped_rows: list[int] = field(default_factory=list)


def _parse_hour(text: str, row: int) -> datetime:
    text = text.strip()
    try:
        ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    except ValueError:
        raise DataError(f"row {row}: unparseable timestamp {text!r}") from None
    if ts.tzinfo is not None:
        ts = ts.astimezone(timezone.utc).replace(tzinfo=None)
    if ts.minute or ts.second or ts.microsecond:
        raise DataError(f"row {row}: timestamp {text!r} is not on an hour boundary")
    return ts


def ingest_csv(path: str | Path, header: Sequence[str] = CSV_HEADER) -> tuple[LongTable, IngestReport]:
    """Parse a long-format CSV into a LongTable.

    Rows with an empty or non-numeric value are skipped and counted. A
    repeated (timestamp, location, variable) keeps the last row.
    """
    report = IngestReport()
    latest: dict[tuple[datetime, str, str], float] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [c.strip() for c in first] != list(header):
            raise DataError(f"row 1: header must be {','.join(header)!r}, got {first!r}")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"row {row_no}: expected {len(header)} fields, got {len(row)}")
            report.rows += 1
            ts_text, loc, var, val_text = row
            ts = _parse_hour(ts_text, row_no)
            try:
                val = float(val_text)
            except ValueError:
                val = float("nan")
            if not np.isfinite(val):
                report.skipped += 1
                report.skipped_rows.append(row_no)
                continue
            key = (ts, loc.strip(), var.strip())
            if key in latest:
                report.duplicates += 1
                log.warning("row %d: duplicate record for %s; keeping the last one", row_no, key)
            latest[key] = val
    if not latest:
        return LongTable.empty(), report
    t0 = min(k[0] for k in latest)
    keys = list(latest)
    hours = [int((k[0] - t0).total_seconds() // 3600) for k in keys]
    table = LongTable(
        timestamp=hours,
        location=[k[1] for k in keys],
        variable=[k[2] for k in keys],
        value=[latest[k] for k in keys],
        origin=t0.strftime("%Y-%m-%dT%H:%M"),
    )
    return table, report


def iso_hours(table: LongTable) -> np.ndarray:
    origin = np.datetime64(table.origin or SIM_ORIGIN, "m")
    return (origin + table.timestamp.astype("timedelta64[h]")).astype("datetime64[m]").astype(str)


def write_csv(table: LongTable, path: str | Path) -> None:
    """Write the table in the ingest schema (ISO hour timestamps)."""
    stamps = iso_hours(table)
    with atomic_open(path) as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        fh.writelines(
            f"{ts},{loc},{var},{val!r}\n"
            for ts, loc, var, val in zip(stamps.tolist(), table.location.tolist(), table.variable.tolist(), table.value.tolist())
        )


# -- windowing ---------------------------------------------------------------


@dataclass
class SampleWindow:
    """Canonicalised triplets (sorted by t then f) plus the target row."""

    t: np.ndarray
    f: np.ndarray
    v: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    anchor: int
    location: int | None = None

    @property
    def triplets(self) -> list[Triplet]:
        return [Triplet(float(a), int(b), float(c)) for a, b, c in zip(self.t, self.f, self.v)]

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class WindowDiagnostics:
    candidates: int = 0
    built: int = 0
    empty: int = 0
    truncated: int = 0


def canonicalize(triplets: Sequence[Triplet], n_max: int) -> list[Triplet]:
    """Sort by (t, f), drop duplicate (t, f) keeping the first occurrence,
    and keep the ``n_max`` most recent."""
    seen: set[tuple[float, int]] = set()
    unique = []
    for tr in triplets:
        key = (tr.t, tr.f)
        if key not in seen:
            seen.add(key)
            unique.append(tr)
    unique.sort(key=lambda tr: (tr.t, tr.f))
    return unique[-n_max:] if n_max else []


def dense_grid(table: LongTable, vocab: VariableVocabulary, t0: int, t1: int) -> tuple[np.ndarray, list[str | None]]:
    """Observation grid of shape (groups, t1 - t0, |vocab|), NaN where absent.

    Mode A has a single group; mode B has one group per location.
    """
    groups: list[str | None] = [None] if vocab.mode == "A" else list(vocab.locations)
    grid = np.full((len(groups), t1 - t0, len(vocab)), np.nan)
    if not len(table):
        return grid, groups
    sel = (table.timestamp >= t0) & (table.timestamp < t1)
    ts, locs, vars_, vals = table.timestamp[sel], table.location[sel], table.variable[sel], table.value[sel]
    if vocab.mode == "A":
        keys = np.char.add(np.char.add(locs, "."), vars_)
        g = np.zeros(len(ts), dtype=np.int64)
    else:
        keys = vars_
        g = np.array([vocab.location_index(x) for x in locs.tolist()], dtype=np.int64)
    lookup = {n: i for i, n in enumerate(vocab.names)}
    try:
        f = np.array([lookup[k] for k in keys.tolist()], dtype=np.int64)
    except KeyError as exc:
        raise DataError(f"series {exc.args[0]!r} is not in the model vocabulary") from None
    grid[g, ts - t0, f] = vals
    return grid, groups


def build_windows(
    table: LongTable,
    vocab: VariableVocabulary,
    lookback: int,
    horizon: int,
    n_max: int,
    split: tuple[int, int],
    target_table: LongTable | None = None,
) -> tuple[list[SampleWindow], WindowDiagnostics]:
    """All windows whose inputs [a-L, a) and target a+h-1 lie inside ``split``.

    ``target_table`` supplies targets when they should come from a different
    (e.g. unsparsified) table than the inputs.
    """
    if lookback <= 0 or horizon <= 0:
        raise ValueError(f"lookback and horizon must be positive, got L={lookback}, h={horizon}")
    start, end = split
    diag = WindowDiagnostics()
    if end - start < lookback + horizon:
        return [], diag
    grid, groups = dense_grid(table, vocab, start, end)
    tgrid = grid if target_table is None else dense_grid(target_table, vocab, start, end)[0]
    windows: list[SampleWindow] = []
    for a in range(lookback, end - start - horizon + 1):
        for gi, _ in enumerate(groups):
            diag.candidates += 1
            block = grid[gi, a - lookback:a]
            rows, cols = np.nonzero(~np.isnan(block))
            if rows.size == 0:
                diag.empty += 1
                continue
            if rows.size > n_max:
                diag.truncated += 1
                rows, cols = rows[-n_max:], cols[-n_max:]
            target_row = tgrid[gi, a + horizon - 1]
            present = ~np.isnan(target_row)
            windows.append(
                SampleWindow(
                    t=rows.astype(np.float64),
                    f=cols.astype(np.int64),
                    v=block[rows, cols],
                    targets=np.where(present, target_row, 0.0),
                    target_mask=present,
                    anchor=start + a,
                    location=None if vocab.mode == "A" else gi,
                )
            )
            diag.built += 1
    return windows, diag


def window_from_triplets(
    triplets: Sequence[Triplet],
    targets,
    target_mask,
    anchor: int,
    n_max: int,
    location: int | None = None,
) -> SampleWindow:
    """Build a window from raw (possibly unordered) triplets."""
    canon = canonicalize(triplets, n_max)
    return SampleWindow(
        t=np.array([tr.t for tr in canon], dtype=np.float64),
        f=np.array([tr.f for tr in canon], dtype=np.int64),
        v=np.array([tr.v for tr in canon], dtype=np.float64),
        targets=np.asarray(targets, dtype=np.float64),
        target_mask=np.asarray(target_mask, dtype=bool),
        anchor=anchor,
        location=location,
    )


@dataclass
class Split:
    """Half-open hour ranges for train / validation / test."""

    train: tuple[int, int]
    val: tuple[int, int]
    test: tuple[int, int]

    def to_dict(self) -> dict:
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test)}


def make_split(time_range: tuple[int, int], test_start: int, val_fraction: float = 0.1) -> Split:
    """Training range [t0, test_start) with its last ``val_fraction`` held out."""
    t0, t1 = time_range
    if not t0 < test_start < t1:
        raise DataError(f"test start {test_start} must lie strictly inside [{t0}, {t1})")
    n_val = int(round(val_fraction * (test_start - t0)))
    v0 = test_start - n_val
    return Split(train=(t0, v0), val=(v0, test_start), test=(test_start, t1))


def split_by_fraction(time_range: tuple[int, int], test_fraction: float, val_fraction: float = 0.1) -> Split:
    t0, t1 = time_range
    test_start = t1 - int(round(test_fraction * (t1 - t0)))
    return make_split(time_range, test_start, val_fraction)


def training_records(table: LongTable, vocab: VariableVocabulary, span: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """(vocab index, value) of every record inside ``span``."""
    sel = (table.timestamp >= span[0]) & (table.timestamp < span[1])
    keys = (
        np.char.add(np.char.add(table.location[sel], "."), table.variable[sel])
        if vocab.mode == "A"
        else table.variable[sel]
    )
    lookup = {n: i for i, n in enumerate(vocab.names)}
    idx = np.array([lookup.get(k, -1) for k in keys.tolist()], dtype=np.int64)
    known = idx >= 0
    return idx[known], table.value[sel][known]
