"""Parsing of per-participant epoch CSV files.

Each file holds one row per fixed-length epoch with a timestamp, the
epoch-averaged acceleration magnitude in milli-gravity units and the
predicted activity label. Gaps in the time grid (non-wear, dropped
rows) split a series into contiguous segments; differences are never
taken across a segment boundary.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass
from datetime import datetime
from enum import Enum

import numpy as np

from .errors import CorruptFile, EmptySelection, NoData, ValidationError

log = logging.getLogger(__name__)

DEFAULT_EPOCH_LENGTH = 5.0
DEFAULT_CORRUPT_THRESHOLD = 0.5


class Activity(str, Enum):
    SLEEP = "sleep"
    SEDENTARY = "sedentary"
    LIGHT = "light"
    MODERATE = "moderate"
    WALKING = "walking"

    @classmethod
    def parse(cls, value) -> "Activity":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        # upstream classifiers write e.g. "moderate-vigorous"
        aliases = {"moderate-vigorous": "moderate", "mvpa": "moderate", "walk": "walking"}
        return cls(aliases.get(key, key))


ACTIVITIES = tuple(Activity)


@dataclass(frozen=True)
class ColumnMap:
    """Where to find each field in the CSV.

    Each entry is either a header name or a zero-based column position.
    ``activity`` may instead be ``None`` when ``activity_columns`` names
    one probability/indicator column per activity; the label is then the
    column with the largest value.
    """

    time: str | int = "time"
    force: str | int = "acc"
    activity: str | int | None = "activity"
    activity_columns: dict[str, str | int] | None = None


@dataclass
class EpochSeries:
    participant_id: str
    t: np.ndarray
    force: np.ndarray
    activity: np.ndarray
    epoch_length: float = DEFAULT_EPOCH_LENGTH
    n_skipped: int = 0
    n_rows: int = 0

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.force = np.asarray(self.force, dtype=float)
        self.activity = np.asarray([Activity.parse(a).value for a in self.activity], dtype=object)
        if not (len(self.t) == len(self.force) == len(self.activity)):
            raise ValidationError("t, force and activity must have equal length")
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0):
            raise ValidationError("epoch times must be strictly increasing")
        if not np.all(np.isfinite(self.force)) or np.any(self.force < 0):
            raise ValidationError("force values must be finite and non-negative")
        if self.epoch_length <= 0:
            raise ValidationError("epoch_length must be positive")

    def __len__(self):
        return len(self.t)

    @property
    def adjacent(self) -> np.ndarray:
        """Boolean mask of length n-1: epoch k+1 directly follows epoch k."""
        if len(self.t) < 2:
            return np.zeros(0, dtype=bool)
        tol = 1e-6 * self.epoch_length
        return np.abs(np.diff(self.t) - self.epoch_length) <= tol

    @property
    def segments(self) -> list[slice]:
        starts = np.concatenate([[0], np.flatnonzero(~self.adjacent) + 1])
        stops = np.concatenate([starts[1:], [len(self.t)]])
        return [slice(int(a), int(b)) for a, b in zip(starts, stops) if b > a]

    def counts(self) -> dict[str, int]:
        return {a.value: int(np.sum(self.activity == a.value)) for a in ACTIVITIES}


def _open_text(source):
    if isinstance(source, (str, os.PathLike)):
        return open(source, "r", encoding="utf-8", newline=""), True
    if isinstance(source, (bytes, bytearray)):
        return io.StringIO(bytes(source).decode("utf-8")), False
    if isinstance(source, io.TextIOBase):
        return source, False
    return io.TextIOWrapper(source, encoding="utf-8", newline=""), "detach"


def _column_index(header, key):
    if isinstance(key, int):
        if key >= len(header):
            raise ValidationError(f"column position {key} out of range")
        return key
    try:
        return header.index(key)
    except ValueError:
        raise ValidationError(f"column {key!r} not in header {header}") from None


def _parse_time(raw: str) -> float:
    raw = raw.strip()
    try:
        return float(raw)
    except ValueError:
        pass
    # biobank style: "2014-05-07 13:29:50.000+0100 [Europe/London]"
    raw = raw.split(" [", 1)[0]
    if len(raw) > 5 and raw[-5] in "+-" and raw[-4:].isdigit():
        raw = raw[:-2] + ":" + raw[-2:]
    return datetime.fromisoformat(raw).timestamp()


def parse_epoch_file(
    source,
    epoch_length: float = DEFAULT_EPOCH_LENGTH,
    *,
    participant_id: str | None = None,
    columns: ColumnMap | None = None,
    corrupt_threshold: float = DEFAULT_CORRUPT_THRESHOLD,
) -> EpochSeries:
    """Parse an epoch CSV into an :class:`EpochSeries`.

    Rows whose time, force or activity cannot be parsed, and rows that
    do not advance in time, are skipped and counted. Times are made
    relative to the first valid row.

    Raises
    ------
    NoData
        The file has no data rows.
    CorruptFile
        The fraction of skipped rows exceeds ``corrupt_threshold``.
    """
    columns = columns or ColumnMap()
    if participant_id is None:
        participant_id = (
            os.path.basename(os.fspath(source)).split(".")[0]
            if isinstance(source, (str, os.PathLike)) else "unknown"
        )
    fh, owned = _open_text(source)
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise NoData(f"{participant_id}: empty file")
        header = [h.strip() for h in header]
        i_time = _column_index(header, columns.time)
        i_force = _column_index(header, columns.force)
        if columns.activity_columns:
            act_idx = {Activity.parse(k).value: _column_index(header, v)
                       for k, v in columns.activity_columns.items()}
            i_act = None
        else:
            i_act = _column_index(header, columns.activity)

        times, forces, acts = [], [], []
        n_rows = n_skipped = 0
        last_t = -math.inf
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            n_rows += 1
            try:
                t = _parse_time(row[i_time])
                f = float(row[i_force])
                if not math.isfinite(f) or f < 0 or not math.isfinite(t):
                    raise ValueError
                if i_act is not None:
                    a = Activity.parse(row[i_act]).value
                else:
                    a = max(act_idx, key=lambda k: float(row[act_idx[k]]))
            except (ValueError, IndexError):
                n_skipped += 1
                continue
            if t <= last_t:
                n_skipped += 1
                continue
            last_t = t
            times.append(t)
            forces.append(f)
            acts.append(a)
    finally:
        if owned == "detach":
            fh.detach()
        elif owned:
            fh.close()

    if n_rows == 0:
        raise NoData(f"{participant_id}: no data rows")
    if n_skipped / n_rows > corrupt_threshold:
        raise CorruptFile(
            f"{participant_id}: {n_skipped}/{n_rows} rows skipped "
            f"(threshold {corrupt_threshold})"
        )
    if n_skipped:
        log.debug("%s: skipped %d of %d rows", participant_id, n_skipped, n_rows)
    t = np.asarray(times, dtype=float)
    if len(t):
        t = t - t[0]
    return EpochSeries(participant_id, t, forces, acts, epoch_length,
                       n_skipped=n_skipped, n_rows=n_rows)


def write_epoch_file(series: EpochSeries, dest, columns: ColumnMap | None = None) -> None:
    """Write ``series`` in the format read by :func:`parse_epoch_file`.

    Floats are written with ``repr`` so a parse of the output is
    bit-identical to the input.
    """
    columns = columns or ColumnMap()
    names = [c if isinstance(c, str) else f"col{c}"
             for c in (columns.time, columns.force, columns.activity or "activity")]
    owned = isinstance(dest, (str, os.PathLike))
    fh = open(dest, "w", encoding="utf-8", newline="") if owned else dest
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for t, f, a in zip(series.t, series.force, series.activity):
            w.writerow([repr(float(t)), repr(float(f)), a])
    finally:
        if owned:
            fh.close()


def filter_by_activity(series: EpochSeries, activity) -> EpochSeries:
    """Keep only the epochs labelled ``activity``.

    Surviving epochs that were not neighbours in the original series
    end up in different segments, since adjacency is re-derived from
    the time grid.
    """
    key = Activity.parse(activity).value
    keep = series.activity == key
    if not np.any(keep):
        raise EmptySelection(f"{series.participant_id}: no {key!r} epochs")
    return EpochSeries(
        series.participant_id,
        series.t[keep],
        series.force[keep],
        series.activity[keep],
        series.epoch_length,
        n_skipped=series.n_skipped,
        n_rows=series.n_rows,
    )
