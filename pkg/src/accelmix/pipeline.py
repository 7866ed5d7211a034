"""End-to-end orchestration: epochs -> force maps -> clusters -> survival.

A run is driven by a :class:`PipelineConfig` read from a YAML document.
Each stage writes its artifacts into the output directory and records
them in ``report.json``; a failing stage leaves a partial report listing
what was completed.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import forcemap as fm
from . import mbi
from . import survival as sv
from ._npz import savez_deterministic
from .errors import (
    AccelmixError, CollinearDesign, DataError, DegenerateContrast, DegenerateSample, EmptyGroup,
    IoError, NoData, NonIdentifiable, NumericalError, ValidationError,
)
from .ingest import Activity, ColumnMap, EpochSeries, filter_by_activity, parse_epoch_file

log = logging.getLogger(__name__)

WORKERS_ENV = "ACCELMIX_WORKERS"
REPORT_NAME = "report.json"
FEATURES_NAME = "features.npz"


# -- configuration --------------------------------------------------------

@dataclass
class InputConfig:
    manifest: str | None = None          # CSV: participant_id, path (epoch files)
    features: str | None = None          # .npz of logit force maps (skips ingest/featurize)
    epoch_length: float = 5.0
    time_column: str = "time"
    force_column: str = "acc"
    activity_column: str = "activity"
    corrupt_threshold: float = 0.5


@dataclass
class GridConfig:
    rows: int = 25
    cols: int = 25
    bounds: list | None = None           # [f_min, f_max, d_min, d_max]; None = pooled percentiles
    percentile: float = 99.5
    min_mass: float = fm.DEFAULT_MASS_FRACTION
    subdivisions: int = fm.DEFAULT_SUBDIVISIONS   # composite midpoint rule per cell


@dataclass
class SearchConfig:
    G: list = field(default_factory=lambda: [1, 2, 3, 4, 5, 6])
    s: list = field(default_factory=lambda: [1, 2, 3])
    v: list = field(default_factory=lambda: [1, 2, 3])
    inits: list = field(default_factory=lambda: list(mbi.INIT_METHODS))
    max_iter: int = 400
    eps: float = 1e-4
    var_floor: float = mbi.VAR_FLOOR
    top_k: int = 5


@dataclass
class SurvivalConfig:
    path: str | None = None
    id_column: str = "participant_id"
    time_column: str = "time"
    event_column: str = "event"
    shift_column: str = "shift"
    sex_column: str = "sex"
    age_column: str = "age"
    reference_shift: str = "regular"
    time_origin: str = "followup"        # "followup" or "age"
    left_truncation: bool = False


@dataclass
class PipelineConfig:
    """Validated run configuration; relative paths resolve against ``base_dir``."""

    input: InputConfig = field(default_factory=InputConfig)
    activity: str = "moderate"
    grid: GridConfig = field(default_factory=GridConfig)
    logit_floor: float = fm.EPS_FLOOR
    search: SearchConfig = field(default_factory=SearchConfig)
    survival: SurvivalConfig = field(default_factory=SurvivalConfig)
    seed: int = 0
    out: str = "accelmix-out"
    workers: int = 1
    base_dir: str = "."

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "PipelineConfig":
        data = dict(data or {})
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name not in data:
                continue
            value = data.pop(f.name)
            sub = {"input": InputConfig, "grid": GridConfig, "search": SearchConfig,
                   "survival": SurvivalConfig}.get(f.name)
            kw[f.name] = _sub_from_dict(sub, value, f.name) if sub else value
        if data:
            raise ValidationError(f"unknown config keys: {sorted(data)}")
        kw.setdefault("base_dir", str(base_dir))
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def path(self, p):
        if p is None:
            return None
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(self.base_dir, p))

    @property
    def out_dir(self):
        return self.path(self.out)

    def validate(self) -> "PipelineConfig":
        """Check every field before any work is done."""
        inp = self.input
        if (inp.manifest is None) == (inp.features is None):
            raise ValidationError("input needs exactly one of 'manifest' or 'features'")
        for p in (inp.manifest, inp.features, self.survival.path):
            if p is not None and not os.path.isfile(self.path(p)):
                raise ValidationError(f"file not found: {self.path(p)}")
        if not inp.epoch_length > 0:
            raise ValidationError("epoch_length must be positive")
        if not 0 <= inp.corrupt_threshold <= 1:
            raise ValidationError("corrupt_threshold must be in [0, 1]")
        try:
            Activity.parse(self.activity)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        g = self.grid
        if g.rows < 2 or g.cols < 2:
            raise ValidationError("grid needs at least 2 rows and 2 columns")
        if g.bounds is not None:
            if len(g.bounds) != 4:
                raise ValidationError("grid.bounds must be [f_min, f_max, d_min, d_max]")
            fm.GridSpec(*map(float, g.bounds), g.rows, g.cols)
        if g.subdivisions < 1:
            raise ValidationError("grid.subdivisions must be >= 1")
        if not 0 < g.percentile <= 100:
            raise ValidationError("grid.percentile must be in (0, 100]")
        if not 0 < self.logit_floor < 1.0 / (g.rows * g.cols):
            raise ValidationError("logit_floor must be in (0, 1/(rows*cols))")
        s = self.search
        if not (s.G and s.s and s.v and s.inits):
            raise ValidationError("search grids must be non-empty")
        for init in s.inits:
            if init not in mbi.INIT_METHODS:
                raise ValidationError(f"unknown init method {init!r}")
        for G in s.G:
            if int(G) < 1:
                raise ValidationError("G must be >= 1")
        for q in s.s:
            if not 1 <= int(q) < g.rows:
                raise ValidationError(f"s={q} outside [1, rows)")
        for q in s.v:
            if not 1 <= int(q) < g.cols:
                raise ValidationError(f"v={q} outside [1, cols)")
        if s.max_iter < 1 or not s.eps > 0 or not s.var_floor > 0 or s.top_k < 1:
            raise ValidationError("search.max_iter, eps, var_floor and top_k must be positive")
        if self.survival.time_origin not in ("followup", "age"):
            raise ValidationError("survival.time_origin must be 'followup' or 'age'")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        return self


def _sub_from_dict(cls, value, name):
    if value is None:
        return cls()
    if not isinstance(value, dict):
        raise ValidationError(f"config section {name!r} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(value) - names
    if extra:
        raise ValidationError(f"unknown keys in {name!r}: {sorted(extra)}")
    return cls(**value)


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    """Read a YAML config; ``overrides`` (seed, workers, out) win over the file.

    The worker count can also come from the ``ACCELMIX_WORKERS``
    environment variable, which sits between the file and the CLI flag.
    """
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ValidationError(f"malformed config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ValidationError("config must be a mapping")
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            data["workers"] = int(env)
        except ValueError:
            raise ValidationError(f"{WORKERS_ENV} must be an integer") from None
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    cfg = PipelineConfig.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))
    return cfg.validate()


# -- run bookkeeping ------------------------------------------------------

class RunReport:
    """Accumulates counts, artifacts and stage status; written as JSON."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.data = {"status": "running", "config": cfg.to_dict(), "stages": [], "counts": {},
                     "artifacts": [], "warnings": []}
        os.makedirs(cfg.out_dir, exist_ok=True)

    def artifact(self, name) -> str:
        self.data["artifacts"].append(name)
        return os.path.join(self.cfg.out_dir, name)

    def stage_done(self, name):
        self.data["stages"].append(name)

    def write(self):
        path = os.path.join(self.cfg.out_dir, REPORT_NAME)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# -- stage 1: ingest ------------------------------------------------------

def read_manifest(path) -> list[tuple[str, str]]:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"participant_id", "path"} <= set(rows[0]):
        raise ValidationError("manifest needs 'participant_id' and 'path' columns")
    out = []
    for row in rows:
        p = row["path"]
        out.append((row["participant_id"], p if os.path.isabs(p) else os.path.join(base, p)))
    return out


def stage_ingest(cfg: PipelineConfig, report: RunReport | None = None):
    """Parse every manifest entry; unreadable or corrupt files are counted, not fatal."""
    entries = read_manifest(cfg.path(cfg.input.manifest))
    if not entries:
        raise NoData("input manifest is empty")
    cols = ColumnMap(cfg.input.time_column, cfg.input.force_column, cfg.input.activity_column)
    series, failed = [], []
    for pid, path in entries:
        try:
            series.append(parse_epoch_file(path, cfg.input.epoch_length, participant_id=pid,
                                           columns=cols,
                                           corrupt_threshold=cfg.input.corrupt_threshold))
        except (DataError, OSError) as exc:
            failed.append((pid, f"{type(exc).__name__}: {exc}"))
    if report is not None:
        report.data["counts"].update(manifest=len(entries), parsed=len(series), failed=len(failed))
        with open(report.artifact("ingest_report.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["participant_id", "status", "n_rows", "n_skipped", "detail"])
            for s in series:
                w.writerow([s.participant_id, "parsed", s.n_rows, s.n_skipped, ""])
            for pid, msg in failed:
                w.writerow([pid, "failed", "", "", msg])
    if not series:
        raise NoData(f"none of {len(entries)} manifest entries could be parsed")
    return series, failed


# -- stage 2: featurize ---------------------------------------------------

@dataclass
class Features:
    """Logit force maps ready for clustering."""

    participant_ids: list
    X: np.ndarray
    grid: fm.GridSpec
    maps: list | None = None

    def save(self, path):
        savez_deterministic(path, participant_id=np.array(self.participant_ids),
                            X=self.X, grid=np.array(self.grid.to_list(), dtype=float))

    @classmethod
    def load(cls, path) -> "Features":
        try:
            with np.load(path, allow_pickle=False) as z:
                return cls([str(p) for p in z["participant_id"]], np.array(z["X"], dtype=float),
                           fm.GridSpec.from_list(z["grid"].tolist()))
        except (OSError, KeyError, ValueError) as exc:
            raise IoError(f"cannot read features {path}: {exc}") from None


def _points(args):
    series, activity = args
    try:
        return fm.numeric_derivative(filter_by_activity(series, activity)), None
    except DataError as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _map(args):
    pts, grid, floor, min_mass, k = args
    try:
        H = fm.normal_scale_bandwidth(pts)
        return fm.build_force_map(pts, grid, H, floor=floor, min_mass=min_mass,
                                  subdivisions=k), None
    except (DataError, DegenerateSample) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def _pmap(func, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(func, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [func(j) for j in jobs]


def stage_featurize(cfg: PipelineConfig, series: list[EpochSeries],
                    report: RunReport | None = None) -> Features:
    """Derivative points, a shared grid and one force map per participant."""
    activity = Activity.parse(cfg.activity)
    got = _pmap(_points, [(s, activity) for s in series], cfg.workers)
    failed = [(s.participant_id, err) for s, (p, err) in zip(series, got) if p is None]
    pts = [p for p, _ in got if p is not None]
    if not pts:
        raise NoData(f"no participant has usable {activity.value} epochs")
    g = cfg.grid
    grid = (fm.GridSpec(*map(float, g.bounds), g.rows, g.cols) if g.bounds is not None
            else fm.global_bounds(pts, g.rows, g.cols, g.percentile))
    got = _pmap(_map, [(p, grid, cfg.logit_floor, g.min_mass, g.subdivisions) for p in pts],
                cfg.workers)
    failed += [(p.participant_id, err) for p, (m, err) in zip(pts, got) if m is None]
    maps = [m for m, _ in got if m is not None]
    if not maps:
        raise NoData("every force map failed")
    feats = Features([m.participant_id for m in maps],
                     np.stack([fm.logit_transform(m) for m in maps]), grid, maps)
    if report is not None:
        n_warn = sum(bool(m.warnings) for m in maps)
        report.data["counts"].update(feature_failed=len(failed), clustered=len(maps),
                                     grid_too_small=n_warn)
        report.data["grid"] = grid.to_list()
        if n_warn:
            report.data["warnings"].append(f"GridTooSmall on {n_warn} force maps")
        fm.save_force_maps(maps, report.artifact("force_maps.npz"))
        feats.save(report.artifact(FEATURES_NAME))
        if failed:
            with open(report.artifact("feature_failures.csv"), "w", newline="",
                      encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["participant_id", "detail"])
                w.writerows(failed)
    return feats


def load_features(cfg: PipelineConfig, report: RunReport | None = None) -> Features:
    feats = Features.load(cfg.path(cfg.input.features))
    if len(feats.participant_ids) == 0:
        raise NoData("feature container is empty")
    if report is not None:
        n = len(feats.participant_ids)
        report.data["counts"].update(manifest=n, parsed=n, failed=0, feature_failed=0,
                                     clustered=n, grid_too_small=0)
        report.data["grid"] = feats.grid.to_list()
    return feats


# -- stage 3: clustering --------------------------------------------------

def mean_force(model: mbi.MbiModel, grid: fm.GridSpec) -> np.ndarray:
    """Mean force (mg) of each component's mean map, read on the weight scale."""
    f = grid.centers()[..., 0]
    out = []
    for comp in model.components:
        w = fm.inverse_logit(comp.M)
        out.append(float(np.sum(w * f) / np.sum(w)))
    return np.array(out)


def order_by_force(model: mbi.MbiModel, grid: fm.GridSpec) -> mbi.MbiModel:
    """Relabel components so cluster 1 has the lowest mean force."""
    return model.relabel(np.argsort(mean_force(model, grid), kind="stable"))


def stage_search(cfg: PipelineConfig, feats: Features, report: RunReport | None = None):
    s = cfg.search
    result = mbi.model_search(
        feats.X, [int(g) for g in s.G], [int(q) for q in s.s], [int(q) for q in s.v],
        inits=tuple(s.inits), seed=cfg.seed, workers=cfg.workers,
        max_iter=s.max_iter, eps=s.eps, var_floor=s.var_floor,
    )
    best = order_by_force(result.best.model, feats.grid)
    if report is not None:
        mbi.write_search_report(result, report.artifact("model_search.csv"))
        mbi.save_model(best, report.artifact("model.npz"))
        with open(report.artifact("model.txt"), "w", encoding="utf-8") as fh:
            fh.write(mbi.dump_model_text(best))
        report.data["search"] = {
            "n_fits": len(result.entries), "n_failed": len(result.failures),
            "top": [{"G": e.spec.G, "s": e.spec.s, "v": e.spec.v, "init": e.spec.init,
                     "bic": e.bic, "converged": e.converged, "iterations": e.n_iter}
                    for e in result.top(s.top_k)],
        }
        if result.failures:
            report.data["warnings"].append(f"{len(result.failures)} model fits failed")
    return result, best


def stage_classify(cfg: PipelineConfig, model: mbi.MbiModel, feats: Features,
                   report: RunReport | None = None) -> dict:
    labels = mbi.classify(model, feats.X)
    out = dict(zip(feats.participant_ids, labels.tolist()))
    if report is not None:
        with open(report.artifact("clusters.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["participant_id", "cluster"])
            w.writerows(out.items())
        sizes = np.bincount(labels, minlength=model.G + 1)[1:]
        report.data["clusters"] = {
            "G": model.G, "sizes": sizes.tolist(),
            "mean_force": mean_force(model, feats.grid).tolist(),
        }
        for g, comp in enumerate(model.components, start=1):
            emit_contour(comp.M, report.artifact(f"mean_map_cluster{g}.csv"), feats.grid,
                         logit_scale=True, label=f"cluster{g}")
    return out


# -- stage 4: survival ----------------------------------------------------

def load_survival(cfg: PipelineConfig) -> list[sv.SurvivalRecord]:
    sc = cfg.survival
    covs = (sc.shift_column, sc.sex_column, sc.age_column)
    try:
        recs = sv.read_survival_csv(cfg.path(sc.path), sc.id_column, sc.time_column,
                                    sc.event_column, group_col=None, covariate_cols=covs)
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed survival file: {exc}") from None
    if sc.time_origin == "age":
        out = []
        for r in recs:
            age = r.covariates.get(sc.age_column)
            if not isinstance(age, float):
                raise DataError(f"{r.participant_id}: age origin needs a numeric '{sc.age_column}'")
            out.append(dataclasses.replace(r, time=age + r.time, entry=age))
        recs = out
    if not recs:
        raise NoData("survival file has no records")
    return recs


def _contrast(name, records, by, reference, report, left_truncation, terms=("group",)):
    """KM curves, log-rank test and Cox fit for one grouping; failures are recorded."""
    entry = {"n": len(records)}
    curves = sv.kaplan_meier(records, by=by, left_truncation=left_truncation)
    sv.write_km_csv(curves, report.artifact(f"km_{name}.csv"))
    lr = fit = None
    try:
        lr = sv.log_rank_test(records, by=by, left_truncation=left_truncation)
        entry["logrank"] = {"chi2": lr.statistic, "df": lr.df, "p": lr.p_value}
    except (DegenerateContrast, EmptyGroup) as exc:
        entry["logrank_error"] = f"{type(exc).__name__}: {exc}"
    try:
        fit = sv.cox_fit(records, terms=terms, references={terms[0]: reference},
                         left_truncation=left_truncation)
        sv.write_forest_csv(fit, report.artifact(f"forest_{name}.csv"))
        entry["cox"] = fit.table()
        entry["reference"] = reference
    except (DegenerateContrast, EmptyGroup, CollinearDesign, NonIdentifiable,
            NumericalError) as exc:
        entry["cox_error"] = f"{type(exc).__name__}: {exc}"
    return entry, sv.summary_text(name, lr, fit)


def stage_survival(cfg: PipelineConfig, clusters: dict, report: RunReport) -> dict:
    """Shift baseline, per-cluster, cluster x shift and sex-stratified contrasts."""
    sc = cfg.survival
    lt = sc.left_truncation
    recs = load_survival(cfg)
    shift_recs = [dataclasses.replace(r, group=r.covariates.get(sc.shift_column)) for r in recs
                  if r.covariates.get(sc.shift_column) not in (None, "")]
    cl = {pid: str(k) for pid, k in clusters.items()}
    cl_recs = sv.with_group(recs, cl)
    mixed, n_skip = sv.mixed_group_label(recs, clusters, shift=sc.shift_column)
    results, texts = {}, []
    plan = [("shift", shift_recs, sc.reference_shift),
            ("cluster", cl_recs, "1"),
            ("cluster_shift", mixed, f"c1:{sc.reference_shift}")]
    sexes = sorted({str(r.covariates.get(sc.sex_column)) for r in cl_recs
                    if r.covariates.get(sc.sex_column) not in (None, "")})
    for sex in sexes:
        sub = [r for r in cl_recs if str(r.covariates.get(sc.sex_column)) == sex]
        plan.append((f"cluster_sex_{sex}", sub, "1"))
    for name, rs, ref in plan:
        if not rs:
            results[name] = {"n": 0, "error": "no records"}
            continue
        try:
            results[name], txt = _contrast(name, rs, "group", ref, report, lt)
            texts.append(txt)
        except AccelmixError as exc:
            results[name] = {"n": len(rs), "error": f"{type(exc).__name__}: {exc}"}
    with open(report.artifact("survival_summary.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(texts)
    report.data["survival"] = results
    report.data["counts"].update(survival_records=len(recs), survival_matched=len(cl_recs),
                                 mixed_skipped=n_skip)
    return results


# -- figure data ----------------------------------------------------------

def emit_contour(fmap, path, grid: fm.GridSpec | None = None, *, logit_scale=False,
                 label="") -> None:
    """Write ``(f, f', weight)`` triples for a contour plotter.

    ``fmap`` is a :class:`ForceMap` or a matrix on ``grid``; with
    ``logit_scale`` the matrix (e.g. a component mean ``M_g``) is mapped
    back through the inverse logit. Two ``#`` lines carry the grid.
    """
    if isinstance(fmap, fm.ForceMap):
        W, grid, label = fmap.weights, fmap.grid, label or fmap.participant_id
    else:
        W = np.asarray(fmap, dtype=float)
        if grid is None:
            raise ValidationError("a bare matrix needs its grid")
        if logit_scale:
            W = fm.inverse_logit(W)
    if W.shape != (grid.rows, grid.cols):
        raise ValidationError(f"map shape {W.shape} does not match grid")
    c = grid.centers()
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# label={label}\n")
            fh.write("# grid=" + ",".join(repr(v) for v in grid.to_list()) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["f", "df", "weight"])
            for i in range(grid.rows):
                for j in range(grid.cols):
                    w.writerow([repr(float(c[i, j, 0])), repr(float(c[i, j, 1])),
                                repr(float(W[i, j]))])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from None


def read_contour(path):
    """Inverse of :func:`emit_contour`: ``(weights, grid, label)``."""
    meta = {}
    with open(path, encoding="utf-8") as fh:
        lines = fh.readlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
        else:
            body.append(line)
    grid = fm.GridSpec.from_list(meta["grid"].split(","))
    rows = list(csv.reader(body))[1:]
    W = np.array([float(r[2]) for r in rows]).reshape(grid.rows, grid.cols)
    return W, grid, meta.get("label", "")


# -- full run -------------------------------------------------------------

def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run every stage in order and return the report dictionary.

    On failure the report is written with ``status: failed`` and the
    artifacts completed so far, then the error is re-raised.
    """
    cfg.validate()
    report = RunReport(cfg)
    stage = "ingest"
    try:
        if cfg.input.features is not None:
            feats = load_features(cfg, report)
            report.stage_done("ingest")
            report.stage_done("featurize")
        else:
            series, _ = stage_ingest(cfg, report)
            report.stage_done("ingest")
            stage = "featurize"
            feats = stage_featurize(cfg, series, report)
            report.stage_done("featurize")
        stage = "search"
        _, model = stage_search(cfg, feats, report)
        report.stage_done("search")
        stage = "classify"
        clusters = stage_classify(cfg, model, feats, report)
        report.stage_done("classify")
        if cfg.survival.path is not None:
            stage = "survival"
            stage_survival(cfg, clusters, report)
            report.stage_done("survival")
    except AccelmixError as exc:
        report.data.update(status="failed", failed_stage=stage,
                           error=f"{type(exc).__name__}: {exc}")
        report.write()
        raise
    report.data["status"] = "ok"
    report.write()
    return report.data


# -- synthetic inputs -----------------------------------------------------

def write_synthetic_inputs(kind: str, outdir, n_per: int = 1000, seed: int = 0,
                           search: dict | None = None) -> str:
    """Generate a three-group cohort plus a ready-to-run ``config.yaml``.

    ``kind="maps"`` writes logit force maps drawn from the bilinear
    factor model; ``kind="epochs"`` writes per-participant epoch files
    and a manifest. Returns the config path.
    """
    from . import synthetic as syn

    os.makedirs(outdir, exist_ok=True)
    if kind == "maps":
        cohort = syn.generate_synthetic(syn.three_cluster_map_spec(n_per, seed))
        Features(cohort.participant_ids, np.asarray(cohort.observations),
                 syn.EXAMPLE_GRID).save(os.path.join(outdir, FEATURES_NAME))
        paths = syn.write_cohort(dataclasses.replace(cohort, observations=[]), outdir)
        inp = {"features": FEATURES_NAME}
    elif kind == "epochs":
        cohort = syn.generate_synthetic(syn.three_cluster_activity_spec(n_per, seed))
        paths = syn.write_cohort(cohort, outdir)
        inp = {"manifest": os.path.basename(paths["manifest"])}
    else:
        raise ValidationError(f"unknown synthetic kind {kind!r}")
    cfg = {
        "input": inp,
        "search": search or {"G": [1, 2, 3, 4], "s": [2], "v": [2], "inits": ["kmeans"]},
        "survival": {"path": os.path.basename(paths["survival"])},
        "seed": seed,
        "out": "run",
    }
    path = os.path.join(outdir, "config.yaml")
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=False)
    return path
