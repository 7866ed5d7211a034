"""Force maps: gridded KDE probability weights over (force, derivative).

A participant's epochs of one activity are turned into points
``(f_t, (f_t - f_{t-1}) / dt)``; a bivariate Gaussian KDE with the
normal-scale smoothing matrix is integrated over an ``r x c`` grid to
give a matrix of probability weights summing to one.

Matrix orientation: row ``i`` spans the i-th derivative interval
(ascending), column ``j`` the j-th force interval (ascending).
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit, logsumexp

from ._npz import savez_deterministic
from .errors import DegenerateSample, DomainError, InsufficientData, ValidationError
from .ingest import EpochSeries

log = logging.getLogger(__name__)

EPS_FLOOR = 1e-10
RIDGE = 1e-8
DEFAULT_SHAPE = (25, 25)
DEFAULT_MASS_FRACTION = 0.95
DEFAULT_SUBDIVISIONS = 4


@dataclass
class BivariatePoints:
    """Force/derivative pairs, one row per adjacent in-segment epoch pair."""

    points: np.ndarray
    participant_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)

    @property
    def T(self) -> int:
        return len(self.points)

    @property
    def force(self):
        return self.points[:, 0]

    @property
    def derivative(self):
        return self.points[:, 1]


@dataclass(frozen=True)
class GridSpec:
    f_min: float
    f_max: float
    d_min: float
    d_max: float
    rows: int = DEFAULT_SHAPE[0]
    cols: int = DEFAULT_SHAPE[1]

    def __post_init__(self):
        if not (self.f_min < self.f_max and self.d_min < self.d_max):
            raise ValidationError(f"empty grid rectangle: {self}")
        if self.rows < 2 or self.cols < 2:
            raise ValidationError("grid needs at least 2 rows and 2 columns")

    @property
    def M(self) -> int:
        return self.rows * self.cols

    @property
    def f_edges(self):
        return np.linspace(self.f_min, self.f_max, self.cols + 1)

    @property
    def d_edges(self):
        return np.linspace(self.d_min, self.d_max, self.rows + 1)

    @property
    def f_centers(self):
        e = self.f_edges
        return 0.5 * (e[:-1] + e[1:])

    @property
    def d_centers(self):
        e = self.d_edges
        return 0.5 * (e[:-1] + e[1:])

    @property
    def cell_area(self) -> float:
        return ((self.f_max - self.f_min) / self.cols) * ((self.d_max - self.d_min) / self.rows)

    def centers(self) -> np.ndarray:
        """Cell centres as an ``(rows, cols, 2)`` array of (f, f')."""
        dd, ff = np.meshgrid(self.d_centers, self.f_centers, indexing="ij")
        return np.stack([ff, dd], axis=-1)

    def to_list(self):
        return [self.f_min, self.f_max, self.d_min, self.d_max, self.rows, self.cols]

    @classmethod
    def from_list(cls, values):
        f0, f1, d0, d1, r, c = values
        return cls(float(f0), float(f1), float(d0), float(d1), int(r), int(c))


@dataclass
class ForceMap:
    participant_id: str
    weights: np.ndarray
    grid: GridSpec
    captured_mass: float = 1.0
    warnings: list = field(default_factory=list)

    @property
    def shape(self):
        return self.weights.shape


def numeric_derivative(series: EpochSeries) -> BivariatePoints:
    """Backward differences within each contiguous segment.

    Raises
    ------
    InsufficientData
        No two epochs are neighbours on the time grid.
    """
    adj = series.adjacent
    if not np.any(adj):
        raise InsufficientData(f"{series.participant_id}: no adjacent epoch pairs")
    f = series.force
    cur = f[1:][adj]
    prev = f[:-1][adj]
    pts = np.column_stack([cur, (cur - prev) / series.epoch_length])
    return BivariatePoints(pts, series.participant_id)


def normal_scale_bandwidth(points: BivariatePoints, ridge: float = RIDGE) -> np.ndarray:
    """Normal-scale smoothing matrix ``T**(-1/3) * cov`` (unbiased covariance).

    A singular covariance gets ``ridge * trace / 2`` added to its
    diagonal before scaling.
    """
    T = points.T
    if T < 2:
        raise InsufficientData("normal-scale bandwidth needs at least 2 points")
    S = np.cov(points.points, rowvar=False, ddof=1)
    eig = np.linalg.eigvalsh(S)
    if eig[0] <= 1e-12 * max(eig[-1], 0.0):
        tr = np.trace(S)
        S = S + ridge * tr / 2.0 * np.eye(2)
        eig = np.linalg.eigvalsh(S)
        if not tr > 0 or eig[0] <= 0:
            raise DegenerateSample(f"{points.participant_id}: singular sample covariance")
    return T ** (-1.0 / 3.0) * S


def _check_spd(H):
    H = np.asarray(H, dtype=float)
    if H.shape != (2, 2) or not np.allclose(H, H.T):
        raise ValidationError("smoothing matrix must be symmetric 2x2")
    try:
        return np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise ValidationError("smoothing matrix must be positive definite") from None


def kde_logdensity(points: BivariatePoints, H, query, chunk: int = 4096) -> np.ndarray:
    """Log of the Gaussian KDE at ``query`` (shape ``(..., 2)``)."""
    L = _check_spd(H)
    q = np.asarray(query, dtype=float)
    shape = q.shape[:-1]
    q = q.reshape(-1, 2)
    P = points.points
    Linv = np.linalg.inv(L)
    Pw = P @ Linv.T
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    const = -np.log(2 * np.pi) - 0.5 * logdet - np.log(points.T)
    out = np.empty(len(q))
    for a in range(0, len(q), chunk):
        qw = q[a:a + chunk] @ Linv.T
        d2 = (
            np.sum(qw ** 2, axis=1)[:, None]
            - 2.0 * qw @ Pw.T
            + np.sum(Pw ** 2, axis=1)[None, :]
        )
        np.maximum(d2, 0.0, out=d2)
        out[a:a + chunk] = logsumexp(-0.5 * d2, axis=1) + const
    return out.reshape(shape)


def kde_density(points: BivariatePoints, H, query) -> np.ndarray | float:
    """Gaussian KDE ``(1/T) sum_t phi(query; point_t, H)``."""
    q = np.asarray(query, dtype=float)
    out = np.exp(kde_logdensity(points, H, q))
    return float(out) if q.ndim == 1 else out


def _subcell_centers(grid: GridSpec, k: int) -> np.ndarray:
    """``(rows, k, cols, k, 2)`` midpoints of a ``k x k`` split of every cell."""
    fe = np.linspace(grid.f_min, grid.f_max, grid.cols * k + 1)
    de = np.linspace(grid.d_min, grid.d_max, grid.rows * k + 1)
    dd, ff = np.meshgrid(0.5 * (de[:-1] + de[1:]), 0.5 * (fe[:-1] + fe[1:]), indexing="ij")
    return np.stack([ff, dd], axis=-1).reshape(grid.rows, k, grid.cols, k, 2)


def build_force_map(
    points: BivariatePoints,
    grid: GridSpec,
    H,
    *,
    floor: float = EPS_FLOOR,
    min_mass: float = DEFAULT_MASS_FRACTION,
    subdivisions: int = DEFAULT_SUBDIVISIONS,
) -> ForceMap:
    """Integrate the KDE over each grid cell by the composite midpoint rule.

    Each cell is split into ``subdivisions x subdivisions`` sub-cells and
    the density at their centres is summed; ``subdivisions=1`` is the
    plain one-point midpoint rule. Cell weights are normalised to sum to
    one, floored at ``floor`` and renormalised. If the grid captures less
    than ``min_mass`` of the KDE mass a ``GridTooSmall`` warning is
    attached to the returned map.
    """
    k = int(subdivisions)
    if k < 1:
        raise ValidationError("subdivisions must be >= 1")
    sub = kde_logdensity(points, H, _subcell_centers(grid, k))
    logp = logsumexp(sub, axis=(1, 3)) - 2.0 * np.log(k)
    top = logp.max()
    if not np.isfinite(top):
        raw = np.zeros(logp.shape)
        mass = 0.0
    else:
        raw = np.exp(logp - top)
        mass = float(np.exp(top + np.log(raw.sum()) + np.log(grid.cell_area)))
    s = raw.sum()
    w = raw / s if s > 0 else raw
    w = np.maximum(w, floor)
    w = w / w.sum()
    fm = ForceMap(points.participant_id, w, grid, captured_mass=mass)
    if mass < min_mass:
        msg = f"GridTooSmall: grid captures {mass:.4f} of KDE mass (< {min_mass})"
        fm.warnings.append(msg)
        log.debug("%s: %s", points.participant_id, msg)
    return fm


def global_bounds(point_sets, rows: int = DEFAULT_SHAPE[0], cols: int = DEFAULT_SHAPE[1],
                  percentile: float = 99.5) -> GridSpec:
    """Shared grid: ``[0, q(f)] x [-q(|f'|), q(|f'|)]`` over pooled points."""
    pooled = np.concatenate([p.points for p in point_sets], axis=0)
    f_hi = float(np.percentile(pooled[:, 0], percentile))
    d_hi = float(np.percentile(np.abs(pooled[:, 1]), percentile))
    if f_hi <= 0:
        f_hi = 1.0
    if d_hi <= 0:
        d_hi = 1.0
    return GridSpec(0.0, f_hi, -d_hi, d_hi, rows, cols)


def featurize(series: EpochSeries, grid: GridSpec, **kwargs) -> ForceMap:
    """Derivative points, normal-scale bandwidth and force map in one call."""
    pts = numeric_derivative(series)
    return build_force_map(pts, grid, normal_scale_bandwidth(pts), **kwargs)


def logit_transform(fmap) -> np.ndarray:
    """Entrywise ``log(x / (1 - x))`` of a force map (or weight matrix)."""
    x = fmap.weights if isinstance(fmap, ForceMap) else np.asarray(fmap, dtype=float)
    if np.any(x <= 0) or np.any(x >= 1):
        raise DomainError("logit needs every entry strictly inside (0, 1)")
    return logit(x)


def inverse_logit(y) -> np.ndarray:
    return expit(np.asarray(y, dtype=float))


# -- persistence ----------------------------------------------------------

def save_force_maps(maps, path) -> None:
    """Consolidated container (``.npz``): ids, shared grid, stacked weights."""
    maps = list(maps)
    if not maps:
        raise ValidationError("no force maps to save")
    grid = maps[0].grid
    if any(m.grid != grid for m in maps):
        raise ValidationError("force maps in one container must share a grid")
    savez_deterministic(
        path,
        format_version=np.array(1),
        participant_id=np.array([m.participant_id for m in maps]),
        grid=np.array(grid.to_list(), dtype=float),
        weights=np.stack([m.weights for m in maps]),
        captured_mass=np.array([m.captured_mass for m in maps]),
    )


def load_force_maps(path) -> list[ForceMap]:
    with np.load(path, allow_pickle=False) as z:
        grid = GridSpec.from_list(z["grid"].tolist())
        return [
            ForceMap(str(pid), np.array(w), grid, float(cm))
            for pid, w, cm in zip(z["participant_id"], z["weights"], z["captured_mass"])
        ]


def write_force_map_csv(fmap: ForceMap, dest) -> None:
    """Plain-text variant: two ``#`` metadata lines, then the weight rows."""
    owned = isinstance(dest, (str, os.PathLike))
    fh = open(dest, "w", encoding="utf-8", newline="") if owned else dest
    try:
        fh.write(f"# participant_id={fmap.participant_id}\n")
        fh.write("# grid=" + ",".join(repr(v) for v in fmap.grid.to_list()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        for row in fmap.weights:
            w.writerow([repr(float(v)) for v in row])
    finally:
        if owned:
            fh.close()


def read_force_map_csv(src) -> ForceMap:
    with open(src, encoding="utf-8") as fh:
        meta = {}
        rows = []
        for line in fh:
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            elif line.strip():
                rows.append([float(x) for x in line.split(",")])
    grid = GridSpec.from_list(meta["grid"].split(","))
    return ForceMap(meta.get("participant_id", ""), np.array(rows), grid)
