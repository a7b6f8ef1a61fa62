"""Minute-cadence data pipeline: ingestion, gap repair, target derivation,
chronological splitting, and leakage-free min-max normalization.

Input files are CSV with an ISO-8601 UTC timestamp column followed by the
ten physical channels.  A small key-value schema file declares the channel
roster, units, and the sentinel values that mark missing cells (OMNI-style
fill values).  Ingestion enforces a strict 1-minute cadence; gaps are cells,
not missing rows.

Derived supervised rows are one-step-ahead: the features are the ten raw
channels at minute t, the targets are derived quantities at minute t+1.
The rate targets use the backward-looking difference over the preceding
minute assigned to the later timestamp, so the value stored at t+1 is
(B(t+1) - B(t)) / dt, which is exactly what the physics residual compares
consecutive predictions against.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .physics import TargetLayout, TARGET_FIELDS, CompositeLossConfig, \
    clock_angle, newell_coupling

__all__ = [
    "CHANNELS",
    "DataError",
    "DataSchema",
    "default_schema",
    "load_schema",
    "write_schema",
    "RawSeries",
    "ingest_csv",
    "write_csv",
    "gap_fractions",
    "interpolate_gaps",
    "SupervisedSet",
    "derive_targets",
    "concat_supervised",
    "SplitSpec",
    "split",
    "MinMaxScaler",
    "fit_scaler",
    "DataBundle",
    "prepare_supervised",
    "save_supervised",
    "load_supervised",
]

logger = logging.getLogger(__name__)

#: Canonical channel roster: ground field (local magnetic frame), IMF (GSM),
#: plasma parameters.  Order is the feature-column order.
CHANNELS = ("b_n", "b_e", "bz_geo", "bx_imf", "by_imf", "bz_imf",
            "temp", "rho", "v", "p")

CHANNEL_UNITS = {
    "b_n": "nT", "b_e": "nT", "bz_geo": "nT",
    "bx_imf": "nT", "by_imf": "nT", "bz_imf": "nT",
    "temp": "K", "rho": "n/cm^3", "v": "km/s", "p": "nPa",
}

SCHEMA_VERSION = 1


class DataError(ValueError):
    """Malformed input data or schema."""


@dataclass(frozen=True)
class DataSchema:
    """Column/sentinel declaration for the minute-cadence CSV format."""

    version: int = SCHEMA_VERSION
    time_column: str = "timestamp"
    channels: tuple[str, ...] = CHANNELS
    sentinels: dict[str, float] = field(default_factory=dict)
    units: dict[str, str] = field(default_factory=lambda: dict(CHANNEL_UNITS))

    def __post_init__(self) -> None:
        if self.version != SCHEMA_VERSION:
            raise DataError(f"unsupported schema version {self.version}")
        if set(self.channels) != set(CHANNELS):
            raise DataError(
                f"schema must declare exactly the channels {sorted(CHANNELS)}")
        for ch in self.sentinels:
            if ch not in self.channels:
                raise DataError(f"sentinel declared for unknown channel {ch!r}")


def default_schema(sentinel: float = 999999.0) -> DataSchema:
    """Schema with one shared sentinel fill value for every channel."""
    return DataSchema(sentinels={ch: sentinel for ch in CHANNELS})


def load_schema(path) -> DataSchema:
    """Parse a ``key = value`` schema file.

    Recognized keys: ``schema_version``, ``time_column``, ``channels``
    (comma-separated), ``sentinel.<channel>``, ``unit.<channel>``.  Unknown
    keys are rejected.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"schema file not found: {path}")
    version = SCHEMA_VERSION
    time_column = "timestamp"
    channels: tuple[str, ...] = CHANNELS
    sentinels: dict[str, float] = {}
    units: dict[str, str] = {}
    for ln, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{ln}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "schema_version":
            version = int(value)
        elif key == "time_column":
            time_column = value
        elif key == "channels":
            channels = tuple(c.strip() for c in value.split(","))
        elif key.startswith("sentinel."):
            sentinels[key[len("sentinel."):]] = float(value)
        elif key.startswith("unit."):
            units[key[len("unit."):]] = value
        else:
            raise DataError(f"{path}:{ln}: unknown schema key {key!r}")
    return DataSchema(version=version, time_column=time_column,
                      channels=channels, sentinels=sentinels,
                      units=units or dict(CHANNEL_UNITS))


def write_schema(schema: DataSchema, path) -> None:
    path = Path(path)
    lines = [f"schema_version = {schema.version}",
             f"time_column = {schema.time_column}",
             "channels = " + ", ".join(schema.channels)]
    for ch in schema.channels:
        if ch in schema.units:
            lines.append(f"unit.{ch} = {schema.units[ch]}")
    for ch in schema.channels:
        if ch in schema.sentinels:
            lines.append(f"sentinel.{ch} = {schema.sentinels[ch]!r}")
    path.write_text("\n".join(lines) + "\n")


@dataclass
class RawSeries:
    """Minute-cadence multichannel record with per-cell gap flags.

    ``values`` is (N, 10) float64 in ``CHANNELS`` order; gapped cells hold
    NaN and are flagged True in ``gaps``.  Timestamps are strictly
    increasing at exact 1-minute cadence.
    """

    timestamps: np.ndarray  # datetime64[m], shape (N,)
    values: np.ndarray      # (N, 10)
    gaps: np.ndarray        # (N, 10) bool

    def __post_init__(self) -> None:
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[m]")
        self.values = np.asarray(self.values, dtype=float)
        self.gaps = np.asarray(self.gaps, dtype=bool)
        n = self.timestamps.shape[0]
        if self.values.shape != (n, len(CHANNELS)) or self.gaps.shape != (n, len(CHANNELS)):
            raise DataError("values/gaps must have shape (n_minutes, 10)")
        if n > 1:
            steps = np.diff(self.timestamps).astype("timedelta64[m]").astype(int)
            if np.any(steps != 1):
                raise DataError("timestamps must advance by exactly 1 minute")
        if not np.all(np.isfinite(self.values[~self.gaps])):
            raise DataError("non-gap cells must be finite")

    def __len__(self) -> int:
        return int(self.timestamps.shape[0])

    def channel(self, name: str) -> np.ndarray:
        return self.values[:, CHANNELS.index(name)]


def ingest_csv(path, schema: DataSchema) -> RawSeries:
    """Parse a minute-cadence CSV into a RawSeries.

    Cells that are empty, non-finite, or equal to the channel's declared
    sentinel become gaps.  Non-monotone or duplicate timestamps and cadence
    breaks are hard errors with the offending line number.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    expected_header = [schema.time_column, *schema.channels]
    sentinel = np.full(len(schema.channels), np.nan)
    for i, ch in enumerate(schema.channels):
        if ch in schema.sentinels:
            sentinel[i] = schema.sentinels[ch]
    # Map file column order to canonical order.
    col_order = [schema.channels.index(ch) for ch in CHANNELS]

    times: list[np.datetime64] = []
    rows: list[list[float]] = []
    gap_rows: list[list[bool]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if [h.strip() for h in header] != expected_header:
            unknown = set(h.strip() for h in header) - set(expected_header)
            if unknown:
                raise DataError(f"{path}: unknown column(s) {sorted(unknown)}")
            raise DataError(f"{path}: header must be {expected_header}")
        for ln, row in enumerate(reader, start=2):
            if len(row) != len(expected_header):
                raise DataError(f"{path}:{ln}: expected {len(expected_header)} "
                                f"fields, got {len(row)}")
            try:
                ts = np.datetime64(row[0].strip(), "m")
            except ValueError:
                raise DataError(f"{path}:{ln}: bad timestamp {row[0]!r}") from None
            if times:
                delta = (ts - times[-1]).astype(int)
                if delta == 0:
                    raise DataError(f"{path}:{ln}: duplicate timestamp {row[0]}")
                if delta < 0:
                    raise DataError(f"{path}:{ln}: timestamps not increasing")
                if delta != 1:
                    raise DataError(f"{path}:{ln}: cadence violation "
                                    f"({delta} minute step)")
            vals = np.empty(len(schema.channels))
            gaps = np.zeros(len(schema.channels), dtype=bool)
            for i, cell in enumerate(row[1:]):
                cell = cell.strip()
                if not cell:
                    vals[i], gaps[i] = np.nan, True
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}:{ln}: malformed value {cell!r} "
                                    f"in column {schema.channels[i]!r}") from None
                if not np.isfinite(v) or (np.isfinite(sentinel[i]) and v == sentinel[i]):
                    vals[i], gaps[i] = np.nan, True
                else:
                    vals[i] = v
            times.append(ts)
            rows.append(vals[col_order].tolist())
            gap_rows.append(gaps[col_order].tolist())
    if not times:
        raise DataError(f"{path}: no data rows")
    return RawSeries(np.array(times, dtype="datetime64[m]"),
                     np.array(rows, dtype=float),
                     np.array(gap_rows, dtype=bool))


def write_csv(series: RawSeries, path, schema: DataSchema | None = None) -> None:
    """Write a RawSeries in the same CSV format ingestion reads.

    Gapped cells are written as the channel's sentinel when one is declared,
    else as empty cells.  Floats use shortest round-trip formatting so a
    rewrite of the same series is byte-identical.
    """
    schema = schema or default_schema()
    path = Path(path)
    col_order = [CHANNELS.index(ch) for ch in schema.channels]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([schema.time_column, *schema.channels])
        for t, vals, gaps in zip(series.timestamps, series.values, series.gaps):
            row = [str(t)]
            for i in col_order:
                ch = CHANNELS[i]
                if gaps[i]:
                    row.append(repr(schema.sentinels[ch])
                               if ch in schema.sentinels else "")
                else:
                    row.append(repr(float(vals[i])))
            writer.writerow(row)


def gap_fractions(series: RawSeries) -> dict[str, float]:
    """Fraction of missing cells per channel, plus ``"overall"``."""
    out = {ch: float(series.gaps[:, i].mean()) for i, ch in enumerate(CHANNELS)}
    out["overall"] = float(series.gaps.mean())
    return out


def interpolate_gaps(series: RawSeries) -> RawSeries:
    """Fill every gap by linear interpolation between present neighbors.

    Rows are first trimmed so that each channel's first and last retained
    sample is present (leading/trailing gaps cannot be interpolated).  A
    channel with no present samples at all is an error.  Idempotent: a
    gap-free series is returned unchanged (up to copying).
    """
    present = ~series.gaps
    for i, ch in enumerate(CHANNELS):
        if not present[:, i].any():
            raise DataError(f"channel {ch!r} has no present samples")
    fracs = gap_fractions(series)
    logger.info("gap fractions before interpolation: %s",
                {k: round(v, 4) for k, v in fracs.items()})

    first = max(int(np.argmax(present[:, i])) for i in range(len(CHANNELS)))
    last = min(len(series) - 1 - int(np.argmax(present[::-1, i]))
               for i in range(len(CHANNELS)))
    if first > last:
        raise DataError("no rows remain after trimming leading/trailing gaps")
    values = series.values[first:last + 1].copy()
    gaps = series.gaps[first:last + 1]
    idx = np.arange(values.shape[0], dtype=float)
    for i in range(len(CHANNELS)):
        missing = gaps[:, i]
        if missing.any():
            values[missing, i] = np.interp(idx[missing], idx[~missing],
                                           values[~missing, i])
    return RawSeries(series.timestamps[first:last + 1].copy(), values,
                     np.zeros_like(gaps))


@dataclass
class SupervisedSet:
    """Feature/target matrices with contiguity segmentation.

    ``segments`` is a list of half-open row ranges; rows within a range are
    consecutive minutes, so finite differences across adjacent rows are
    valid only inside a segment.  ``timestamps`` (optional) carries the
    target-row times for downstream trace outputs.
    """

    features: np.ndarray  # (N, 10)
    targets: np.ndarray   # (N, 7)
    segments: list[tuple[int, int]]
    timestamps: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=float)
        self.targets = np.asarray(self.targets, dtype=float)
        n = self.features.shape[0]
        if self.targets.shape[0] != n:
            raise DataError("features/targets row counts differ")
        self.segments = [(int(s), int(e)) for s, e in self.segments]
        covered = 0
        for s, e in self.segments:
            if s != covered or e <= s:
                raise DataError("segments must partition the rows in order")
            covered = e
        if covered != n:
            raise DataError("segments must cover all rows")
        if self.timestamps is not None:
            self.timestamps = np.asarray(self.timestamps, dtype="datetime64[m]")
            if self.timestamps.shape[0] != n:
                raise DataError("timestamps length mismatch")

    @property
    def n_rows(self) -> int:
        return int(self.features.shape[0])

    def slice(self, start: int, stop: int) -> "SupervisedSet":
        """Row slice with segment structure intersected against [start, stop)."""
        segs = []
        for s, e in self.segments:
            s2, e2 = max(s, start), min(e, stop)
            if s2 < e2:
                segs.append((s2 - start, e2 - start))
        return SupervisedSet(
            self.features[start:stop], self.targets[start:stop], segs,
            None if self.timestamps is None else self.timestamps[start:stop])

    def blocks(self, of: np.ndarray | None = None) -> list[np.ndarray]:
        """The given matrix (default: targets) cut into per-segment blocks."""
        mat = self.targets if of is None else of
        return [mat[s:e] for s, e in self.segments]


def derive_targets(series: RawSeries,
                   layout: TargetLayout | None = None) -> SupervisedSet:
    """Build the one-step-ahead supervised set from a gap-free series.

    For every consecutive minute pair (t, t+1): features are the ten raw
    channels at t; targets at t+1 are the horizontal rate magnitude
    sqrt(dB_N^2 + dB_E^2)/dt, the B_N and B_E levels, the coupling value of
    (V, Bz_imf, clock angle), the speed, the IMF B_Z, and the clock angle.
    The coupling and rate columns are definitionally consistent with the
    physics residuals (both vanish on true targets).
    """
    layout = layout or TargetLayout()
    if series.gaps.any():
        raise DataError("derive_targets requires a gap-free series "
                        "(run interpolate_gaps first)")
    n = len(series)
    if n < 2:
        raise DataError("need at least 2 consecutive minutes to derive targets")
    b_n = series.channel("b_n")
    b_e = series.channel("b_e")
    by = series.channel("by_imf")
    bz = series.channel("bz_imf")
    v = series.channel("v")

    dbn = np.diff(b_n)          # per-minute backward difference at t+1
    dbe = np.diff(b_e)
    dbh = np.sqrt(dbn ** 2 + dbe ** 2)
    theta = clock_angle(by, bz)
    dphi = newell_coupling(v, bz, theta)

    y = np.empty((n - 1, 7))
    y[:, layout.dbh_dt] = dbh
    y[:, layout.b_n] = b_n[1:]
    y[:, layout.b_e] = b_e[1:]
    y[:, layout.dphi_dt] = dphi[1:]
    y[:, layout.v] = v[1:]
    y[:, layout.bz_imf] = bz[1:]
    y[:, layout.theta] = theta[1:]
    return SupervisedSet(series.values[:-1].copy(), y, [(0, n - 1)],
                         series.timestamps[1:].copy())


def concat_supervised(parts: Sequence[SupervisedSet]) -> SupervisedSet:
    """Concatenate sets; each part's segments stay separate segments."""
    if not parts:
        raise DataError("nothing to concatenate")
    segs = []
    offset = 0
    for p in parts:
        segs.extend((s + offset, e + offset) for s, e in p.segments)
        offset += p.n_rows
    ts = None
    if all(p.timestamps is not None for p in parts):
        ts = np.concatenate([p.timestamps for p in parts])
    return SupervisedSet(np.concatenate([p.features for p in parts]),
                         np.concatenate([p.targets for p in parts]), segs, ts)


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split: train fraction of the total, then validation as
    a fraction of the training block, remainder is the test block."""

    train_fraction: float = 0.8
    val_fraction: float = 0.2
    chronological: bool = True

    def __post_init__(self) -> None:
        if not (0 < self.train_fraction < 1 and 0 < self.val_fraction < 1):
            raise ValueError("fractions must lie in (0, 1)")
        if not self.chronological:
            raise ValueError("only chronological splitting is supported "
                             "(shuffled splits leak future data)")


def split(data: SupervisedSet,
          spec: SplitSpec | None = None) -> tuple[SupervisedSet, SupervisedSet, SupervisedSet]:
    """Partition rows chronologically into (train, validation, test).

    With the default fractions this is 64/16/20 percent of the total; the
    validation block sits between train and test so no part sees rows from
    a later part.
    """
    spec = spec or SplitSpec()
    n = data.n_rows
    if n < 10:
        raise DataError(f"too few rows to split: {n}")
    n_train_total = int(np.floor(spec.train_fraction * n))
    n_val = int(np.floor(spec.val_fraction * n_train_total))
    a = n_train_total - n_val
    b = n_train_total
    if a < 1 or n_val < 1 or n - b < 1:
        raise DataError("split produced an empty part")
    return data.slice(0, a), data.slice(a, b), data.slice(b, n)


@dataclass(frozen=True)
class MinMaxScaler:
    """Per-column min-max normalization fitted on training rows only.

    Constant columns map to 0 under ``transform`` and back to their minimum
    under ``inverse`` (documented degenerate-range convention).
    """

    x_min: np.ndarray
    x_max: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "x_min", np.asarray(self.x_min, dtype=float))
        object.__setattr__(self, "x_max", np.asarray(self.x_max, dtype=float))
        if self.x_min.shape != self.x_max.shape or self.x_min.ndim != 1:
            raise ValueError("x_min/x_max must be 1-D and aligned")
        if np.any(self.x_max < self.x_min):
            raise ValueError("x_max must be >= x_min")

    @property
    def ranges(self) -> np.ndarray:
        return self.x_max - self.x_min

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r = self.ranges
        safe = np.where(r == 0.0, 1.0, r)
        out = (x - self.x_min) / safe
        if np.any(r == 0.0):
            out = np.where(r == 0.0, 0.0, out)
        return out

    def inverse(self, x_norm: np.ndarray) -> np.ndarray:
        return np.asarray(x_norm, dtype=float) * self.ranges + self.x_min


def fit_scaler(rows: np.ndarray) -> MinMaxScaler:
    """Column-wise min/max over the given (training) rows."""
    rows = np.asarray(rows, dtype=float)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ValueError("need a nonempty 2-D array to fit")
    return MinMaxScaler(rows.min(axis=0), rows.max(axis=0))


@dataclass
class DataBundle:
    """Normalized train/val/test sets plus the scalers fitted on train rows."""

    train: SupervisedSet
    val: SupervisedSet
    test: SupervisedSet
    feature_scaler: MinMaxScaler
    target_scaler: MinMaxScaler
    layout: TargetLayout = field(default_factory=TargetLayout)
    dt_minutes: float = 1.0

    def loss_config(self, lam: float, physical_units: bool = True) -> CompositeLossConfig:
        """Composite-loss config bound to this bundle's layout and scaling.

        With ``physical_units`` the physics residuals are evaluated after
        lifting normalized predictions back to physical units, where the
        coupling relation is dimensionally meaningful; they are then
        nondimensionalized by characteristic magnitudes of the training
        targets (squared rate range for the horizontal-field term, coupling
        range for the reconnection term) so that a weighting in [0, 1] can
        actually balance them against the normalized data term.
        """
        if physical_units:
            ranges = self.target_scaler.ranges
            dbh_range = float(ranges[self.layout.dbh_dt]) or 1.0
            dphi_range = float(ranges[self.layout.dphi_dt]) or 1.0
            return CompositeLossConfig(
                lam=lam, layout=self.layout, dt_minutes=self.dt_minutes,
                target_scale=ranges,
                target_offset=self.target_scaler.x_min,
                r1_scale=dbh_range ** 2, r2_scale=dphi_range)
        return CompositeLossConfig(lam=lam, layout=self.layout,
                                   dt_minutes=self.dt_minutes)


def _normalized(part: SupervisedSet, fs: MinMaxScaler, ts: MinMaxScaler) -> SupervisedSet:
    return SupervisedSet(fs.transform(part.features), ts.transform(part.targets),
                         list(part.segments), part.timestamps)


def prepare_supervised(data: RawSeries | SupervisedSet,
                       spec: SplitSpec | None = None,
                       layout: TargetLayout | None = None) -> DataBundle:
    """Full preparation: derive (if raw), split, fit scalers on train, normalize.

    Scaler parameters are a pure function of the training rows; validation
    and test rows are transformed with the train-fitted bounds and may fall
    outside [0, 1].
    """
    layout = layout or TargetLayout()
    sup = derive_targets(data, layout) if isinstance(data, RawSeries) else data
    train, val, test = split(sup, spec)
    fs = fit_scaler(train.features)
    ts = fit_scaler(train.targets)
    return DataBundle(_normalized(train, fs, ts), _normalized(val, fs, ts),
                      _normalized(test, fs, ts), fs, ts, layout)


def save_supervised(data: SupervisedSet, prefix) -> dict[str, Path]:
    """Persist a SupervisedSet as a features/targets CSV pair plus a
    segment-boundary index file.  Returns the written paths."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    paths = {"features": prefix.with_name(prefix.name + "_features.csv"),
             "targets": prefix.with_name(prefix.name + "_targets.csv"),
             "segments": prefix.with_name(prefix.name + "_segments.csv")}
    ts = data.timestamps
    with open(paths["features"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *CHANNELS])
        for i in range(data.n_rows):
            stamp = str(ts[i]) if ts is not None else str(i)
            w.writerow([stamp] + [repr(float(x)) for x in data.features[i]])
    names = TargetLayout().names_by_column()
    with open(paths["targets"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *names])
        for i in range(data.n_rows):
            stamp = str(ts[i]) if ts is not None else str(i)
            w.writerow([stamp] + [repr(float(x)) for x in data.targets[i]])
    with open(paths["segments"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["start", "stop"])
        for s, e in data.segments:
            w.writerow([s, e])
    return paths


def load_supervised(prefix) -> SupervisedSet:
    """Inverse of :func:`save_supervised`."""
    prefix = Path(prefix)
    def _read(path, n_cols):
        rows, stamps = [], []
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            next(r)
            for row in r:
                stamps.append(row[0])
                rows.append([float(x) for x in row[1:1 + n_cols]])
        return stamps, np.array(rows, dtype=float)
    stamps, features = _read(prefix.with_name(prefix.name + "_features.csv"),
                             len(CHANNELS))
    _, targets = _read(prefix.with_name(prefix.name + "_targets.csv"), 7)
    segments = []
    with open(prefix.with_name(prefix.name + "_segments.csv"), newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            segments.append((int(row[0]), int(row[1])))
    try:
        ts = np.array(stamps, dtype="datetime64[m]")
    except ValueError:
        ts = None
    return SupervisedSet(features, targets, segments, ts)
