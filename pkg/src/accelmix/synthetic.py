"""Synthetic cohorts with known cluster structure and survival effects.

Two generators share one spec type:

* matrix level - observations drawn directly from the bilinear factor
  analyzer generative model
  ``X = M + A W B' + A E_B + E_A B' + E``;
* epoch level - per-participant epoch series whose moderate-activity
  force follows an AR(1) process around a component-specific level.

Survival times are Weibull with a component hazard scale, multiplied
by optional shift-work and sex hazard ratios.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter
from scipy.special import logit

from .errors import ValidationError
from .forcemap import GridSpec
from .ingest import ACTIVITIES, Activity, EpochSeries, write_epoch_file
from .survival import SurvivalRecord, write_survival_csv


@dataclass
class MatrixComponent:
    n: int
    M: np.ndarray
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    U: np.ndarray | None = None
    V: np.ndarray | None = None
    hazard: float = 0.05

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        r, c = self.M.shape
        self.A = np.zeros((r, 1)) if self.A is None else np.asarray(self.A, dtype=float).reshape(r, -1)
        self.B = np.zeros((c, 1)) if self.B is None else np.asarray(self.B, dtype=float).reshape(c, -1)
        self.U = np.ones(r) if self.U is None else np.asarray(self.U, dtype=float).reshape(r)
        self.V = np.ones(c) if self.V is None else np.asarray(self.V, dtype=float).reshape(c)


@dataclass
class ActivityComponent:
    """Epoch-level behaviour of one latent group.

    ``level`` and ``spread`` are the stationary mean and standard
    deviation (mg) of moderate-activity force; ``persistence`` is the
    AR(1) coefficient between consecutive epochs.
    """

    n: int
    level: float
    spread: float
    persistence: float = 0.8
    hazard: float = 0.05


# mean (mg) and stationary sd of epoch force outside moderate activity
_BACKGROUND = {
    Activity.SLEEP.value: (5.0, 2.0),
    Activity.SEDENTARY.value: (12.0, 4.0),
    Activity.LIGHT.value: (30.0, 8.0),
    Activity.WALKING.value: (90.0, 20.0),
}


@dataclass
class SyntheticCohortSpec:
    components: list
    censoring_rate: float = 0.3
    seed: int = 0
    weibull_shape: float = 1.0
    shift_levels: tuple = ("regular", "late")
    shift_probs: tuple = (0.5, 0.5)
    shift_hr: dict = field(default_factory=lambda: {"regular": 1.0, "late": 1.3})
    sex_levels: tuple = ("female", "male")
    sex_probs: tuple = (0.5, 0.5)
    sex_hr: dict = field(default_factory=lambda: {"female": 1.0, "male": 1.4})
    n_epochs: int = 1200
    moderate_fraction: float = 0.4
    bout_length: float = 60.0
    epoch_length: float = 5.0
    entry_age: tuple = (40.0, 70.0)

    def validate(self):
        if not self.components:
            raise ValidationError("at least one component required")
        if not 0 <= self.censoring_rate < 1:
            raise ValidationError("censoring_rate must be in [0, 1)")
        for comp in self.components:
            if comp.hazard <= 0 or comp.n < 1:
                raise ValidationError("component hazards must be > 0 and sizes >= 1")
        if self.weibull_shape <= 0:
            raise ValidationError("weibull_shape must be positive")
        if not 0 < self.moderate_fraction < 1:
            raise ValidationError("moderate_fraction must be in (0, 1)")
        return self


@dataclass
class SyntheticCohort:
    observations: list
    records: list
    labels: np.ndarray
    participant_ids: list


def sample_mbi(rng, comp: MatrixComponent, n: int) -> np.ndarray:
    """Draw ``n`` matrices from the bilinear factor analyzer equations."""
    r, c = comp.M.shape
    s, v = comp.A.shape[1], comp.B.shape[1]
    su, sv = np.sqrt(comp.U), np.sqrt(comp.V)
    W = rng.standard_normal((n, s, v))
    EB = rng.standard_normal((n, s, c)) * sv[None, None, :]
    EA = su[None, :, None] * rng.standard_normal((n, r, v))
    E = su[None, :, None] * rng.standard_normal((n, r, c)) * sv[None, None, :]
    return comp.M + comp.A @ W @ comp.B.T + comp.A @ EB + EA @ comp.B.T + E


def _survival(rng, spec, hazards, pids):
    n = len(hazards)
    shift = rng.choice(len(spec.shift_levels), size=n, p=spec.shift_probs)
    sex = rng.choice(len(spec.sex_levels), size=n, p=spec.sex_probs)
    age = rng.uniform(*spec.entry_age, size=n)
    rate = np.asarray(hazards, dtype=float).copy()
    rate *= np.array([spec.shift_hr.get(spec.shift_levels[k], 1.0) for k in shift])
    rate *= np.array([spec.sex_hr.get(spec.sex_levels[k], 1.0) for k in sex])
    t_event = (-np.log(rng.uniform(size=n)) / rate) ** (1.0 / spec.weibull_shape)
    censored = rng.uniform(size=n) < spec.censoring_rate
    frac = rng.uniform(size=n)
    time = np.where(censored, t_event * frac, t_event)
    time = np.maximum(time, 1e-6)
    return [
        SurvivalRecord(
            participant_id=pid, time=float(tm), event=not bool(cz), group=None,
            covariates={"shift": spec.shift_levels[sh], "sex": spec.sex_levels[sx], "age": float(ag)},
        )
        for pid, tm, cz, sh, sx, ag in zip(pids, time, censored, shift, sex, age)
    ]


def _activity_labels(rng, spec):
    """Bouts of random activities, about ``moderate_fraction`` of them moderate."""
    others = [a.value for a in ACTIVITIES if a is not Activity.MODERATE]
    labels = []
    while len(labels) < spec.n_epochs:
        length = 1 + int(rng.geometric(1.0 / spec.bout_length))
        act = Activity.MODERATE.value if rng.uniform() < spec.moderate_fraction else others[rng.integers(len(others))]
        labels.extend([act] * length)
    return np.array(labels[:spec.n_epochs], dtype=object)


def _ar1(rng, n, mean, sd, phi):
    e = sd * np.sqrt(1 - phi ** 2) * rng.standard_normal(n)
    e[0] = sd * rng.standard_normal()
    return np.abs(mean + lfilter([1.0], [1.0, -phi], e))


def _epoch_series(rng, spec, comp: ActivityComponent, pid):
    acts = _activity_labels(rng, spec)
    force = np.empty(spec.n_epochs)
    for a in np.unique(acts):
        idx = np.flatnonzero(acts == a)
        if a == Activity.MODERATE.value:
            mean, sd, phi = comp.level, comp.spread, comp.persistence
        else:
            (mean, sd), phi = _BACKGROUND[a], 0.7
        force[idx] = _ar1(rng, len(idx), mean, sd, phi)
    t = np.arange(spec.n_epochs) * spec.epoch_length
    return EpochSeries(pid, t, force, acts, spec.epoch_length)


def generate_synthetic(spec: SyntheticCohortSpec) -> SyntheticCohort:
    """Observations, survival records and 1-based ground-truth labels.

    Matrix components yield ``(N, r, c)`` arrays, activity components
    yield :class:`EpochSeries`. A censored subject's time is a uniform
    fraction of its event time, so ``censoring_rate`` is the expected
    censored fraction.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = np.concatenate([[g + 1] * comp.n for g, comp in enumerate(spec.components)])
    pids = [f"P{k:06d}" for k in range(len(labels))]
    kinds = {type(c) for c in spec.components}
    if len(kinds) != 1:
        raise ValidationError("components must all be matrix-level or all epoch-level")
    if kinds == {MatrixComponent}:
        obs = np.concatenate([sample_mbi(rng, comp, comp.n) for comp in spec.components])
    else:
        obs = []
        k = 0
        for comp in spec.components:
            for _ in range(comp.n):
                obs.append(_epoch_series(rng, spec, comp, pids[k]))
                k += 1
    hazards = np.concatenate([[comp.hazard] * comp.n for comp in spec.components])
    records = _survival(rng, spec, hazards, pids)
    return SyntheticCohort(obs, records, labels, pids)


def three_cluster_activity_spec(n_per=1000, seed=0, **kw) -> SyntheticCohortSpec:
    """Three groups of rising moderate-activity force and falling hazard.

    Levels mirror the mean force maps of a low, middle and high exertion
    group (about 25, 50 and 73 mg), with spread widening with level.
    """
    comps = [
        ActivityComponent(n_per, level=25.0, spread=6.0, hazard=0.08),
        ActivityComponent(n_per, level=50.0, spread=12.0, hazard=0.04),
        ActivityComponent(n_per, level=73.0, spread=20.0, hazard=0.02),
    ]
    return SyntheticCohortSpec(comps, seed=seed, **kw)


def write_cohort(cohort: SyntheticCohort, outdir) -> dict:
    """Write epoch CSVs, a manifest, survival records and ground truth."""
    os.makedirs(outdir, exist_ok=True)
    paths = {}
    if cohort.observations and isinstance(cohort.observations[0], EpochSeries):
        edir = os.path.join(outdir, "epochs")
        os.makedirs(edir, exist_ok=True)
        files = []
        for s in cohort.observations:
            p = os.path.join(edir, f"{s.participant_id}.csv")
            write_epoch_file(s, p)
            files.append(p)
        manifest = os.path.join(outdir, "manifest.csv")
        with open(manifest, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["participant_id", "path"])
            for s, p in zip(cohort.observations, files):
                w.writerow([s.participant_id, os.path.relpath(p, outdir)])
        paths["manifest"] = manifest
    elif len(cohort.observations):
        p = os.path.join(outdir, "observations.npy")
        np.save(p, np.asarray(cohort.observations))
        paths["observations"] = p
    surv = os.path.join(outdir, "survival.csv")
    write_survival_csv(cohort.records, surv, covariate_cols=("shift", "sex", "age"))
    truth = os.path.join(outdir, "truth.csv")
    with open(truth, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["participant_id", "component"])
        w.writerows(zip(cohort.participant_ids, cohort.labels.tolist()))
    paths.update(survival=surv, truth=truth)
    return paths


#: grid of the matrix-level example cohort (mg, mg/s)
EXAMPLE_GRID = GridSpec(0.0, 120.0, -6.0, 6.0, 25, 25)


def bump_logit_map(grid: GridSpec, level: float, spread: float, slope: float = 0.25,
                   floor: float = 1e-6) -> np.ndarray:
    """Logit of a force map from a Gaussian (force, derivative) cloud.

    The cloud is centred at ``(level, 0)`` with force sd ``spread`` and
    derivative sd ``slope * spread``.
    """
    c = grid.centers()
    z = ((c[..., 0] - level) / spread) ** 2 + (c[..., 1] / (slope * spread)) ** 2
    w = np.exp(-0.5 * (z - z.min()))
    w = np.maximum(w / w.sum(), floor)
    return logit(w / w.sum())


def three_cluster_map_spec(n_per=1000, seed=0, grid: GridSpec = EXAMPLE_GRID,
                           loading=0.4, noise=0.5, **kw) -> SyntheticCohortSpec:
    """Matrix-level cohort: three force-map groups of rising exertion.

    Mean maps are logit bumps at 25, 50 and 73 mg; each group gets its
    own rank-2 row and column loadings. Hazards fall with exertion.
    """
    rng = np.random.default_rng([seed, 1])
    comps = []
    for level, spread, hazard in ((25.0, 6.0, 0.08), (50.0, 12.0, 0.04), (73.0, 20.0, 0.02)):
        comps.append(MatrixComponent(
            n_per, bump_logit_map(grid, level, spread),
            A=loading * rng.standard_normal((grid.rows, 2)),
            B=loading * rng.standard_normal((grid.cols, 2)),
            U=np.full(grid.rows, noise), V=np.full(grid.cols, noise),
            hazard=hazard,
        ))
    return SyntheticCohortSpec(comps, seed=seed, **kw)
