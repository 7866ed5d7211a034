"""Kaplan-Meier curves, log-rank tests and Cox regression over group labels.

Records may carry a delayed-entry time; when ``left_truncation`` is on a
subject is at risk at ``t`` only if ``entry < t <= time``.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .errors import (
    CollinearDesign, DegenerateContrast, EmptyGroup, NonIdentifiable, ValidationError,
)

log = logging.getLogger(__name__)

Z95 = 1.959964


@dataclass(frozen=True)
class SurvivalRecord:
    participant_id: str
    time: float
    event: bool
    group: str | None = None
    covariates: dict = field(default_factory=dict, hash=False)
    entry: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.time) and self.time > 0):
            raise ValidationError(f"{self.participant_id}: time must be finite and positive")

    def label(self, by="group"):
        return self.group if by == "group" else self.covariates.get(by)


def _arrays(records, left_truncation=False):
    t = np.array([r.time for r in records], dtype=float)
    e = np.array([bool(r.event) for r in records])
    entry = np.array([r.entry if left_truncation else 0.0 for r in records], dtype=float)
    if np.any(entry >= t):
        raise ValidationError("entry time must precede exit time")
    return t, e, entry


def _risk_counts(times, t, entry, weights=None):
    """Number (or weighted sum) at risk at each of ``times``."""
    w = np.ones_like(t) if weights is None else weights
    at = (entry[None, :] < times[:, None]) & (t[None, :] >= times[:, None])
    return at @ w


def _split(records, by, labels=None):
    groups = {}
    for r in records:
        key = r.label(by)
        if key is None:
            continue
        groups.setdefault(str(key), []).append(r)
    if labels is not None:
        for lab in labels:
            if not groups.get(str(lab)):
                raise EmptyGroup(f"group {lab!r} has no records")
        groups = {str(lab): groups[str(lab)] for lab in labels}
    return dict(sorted(groups.items()))


# -- Kaplan-Meier ---------------------------------------------------------

@dataclass
class KmCurve:
    label: str
    times: np.ndarray
    n_at_risk: np.ndarray
    n_events: np.ndarray
    n_censored: np.ndarray
    survival: np.ndarray
    greenwood_var: np.ndarray

    def at(self, when) -> float:
        """Step-function value ``S(when)`` (right-continuous)."""
        k = np.searchsorted(self.times, when, side="right")
        return 1.0 if k == 0 else float(self.survival[k - 1])

    def confidence_band(self, z=Z95):
        se = np.sqrt(self.greenwood_var)
        return np.clip(self.survival - z * se, 0, 1), np.clip(self.survival + z * se, 0, 1)


def _km(records, label, left_truncation):
    t, e, entry = _arrays(records, left_truncation)
    times = np.unique(t)
    d = np.array([np.sum(e & (t == u)) for u in times], dtype=float)
    cens = np.array([np.sum(~e & (t == u)) for u in times], dtype=float)
    n = _risk_counts(times, t, entry)
    with np.errstate(divide="ignore", invalid="ignore"):
        S = np.cumprod(1.0 - d / n)
        terms = np.where(n > d, d / (n * (n - d)), np.where(d > 0, np.inf, 0.0))
        gw = S ** 2 * np.cumsum(terms)
    gw = np.where(S == 0, 0.0, gw)
    return KmCurve(label, times, n, d, cens, S, gw)


def kaplan_meier(records, by="group", labels=None, left_truncation=False) -> dict:
    """Product-limit estimate with Greenwood variance for each group.

    Subjects censored at an event time count as at risk at that time.
    """
    groups = _split(records, by, labels)
    if not groups:
        raise EmptyGroup("no records carry a group label")
    return {lab: _km(recs, lab, left_truncation) for lab, recs in groups.items()}


# -- log-rank -------------------------------------------------------------

@dataclass
class LogRankResult:
    statistic: float
    df: int
    p_value: float
    labels: list
    observed: np.ndarray
    expected: np.ndarray


def log_rank_test(records, by="group", labels=None, left_truncation=False) -> LogRankResult:
    """K-sample Mantel-Haenszel log-rank test (chi-square with K-1 df)."""
    groups = _split(records, by, labels)
    if len(groups) < 2:
        raise DegenerateContrast("log-rank test needs at least two groups")
    labs = list(groups)
    recs = [r for lab in labs for r in groups[lab]]
    gidx = np.concatenate([[k] * len(groups[lab]) for k, lab in enumerate(labs)])
    t, e, entry = _arrays(recs, left_truncation)
    K = len(labs)
    times = np.unique(t[e])
    at = (entry[None, :] < times[:, None]) & (t[None, :] >= times[:, None])
    ev = e[None, :] & (t[None, :] == times[:, None])
    onehot = np.eye(K)[gidx]
    n_k = at @ onehot
    d_k = ev @ onehot
    n = n_k.sum(axis=1)
    d = d_k.sum(axis=1)
    E_k = d[:, None] * n_k / n[:, None]
    O = d_k.sum(axis=0)
    E = E_k.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = np.where(n > 1, d * (n - d) / (n - 1), 0.0) / n ** 2
    V = np.diag((f[:, None] * n_k * n[:, None]).sum(axis=0)) - (f[:, None, None] * n_k[:, :, None] * n_k[:, None, :]).sum(axis=0)
    U = (O - E)[:-1]
    Vr = V[:-1, :-1]
    stat = float(U @ np.linalg.pinv(Vr) @ U) if np.any(Vr) else 0.0
    stat = max(stat, 0.0)
    df = K - 1
    return LogRankResult(stat, df, float(stats.chi2.sf(stat, df)), labs, O, E)


# -- Cox proportional hazards --------------------------------------------

@dataclass
class CoxFit:
    terms: list
    beta: np.ndarray
    se: np.ndarray
    loglik: float
    loglik_null: float
    score_statistic: float
    score_p: float
    lr_statistic: float
    lr_p: float
    n_iter: int
    references: dict
    n: int
    n_events: int

    @property
    def hazard_ratio(self):
        return np.exp(self.beta)

    @property
    def z(self):
        return self.beta / self.se

    @property
    def p_values(self):
        return 2.0 * stats.norm.sf(np.abs(self.z))

    @property
    def ci(self):
        return np.exp(self.beta - Z95 * self.se), np.exp(self.beta + Z95 * self.se)

    def table(self):
        lo, hi = self.ci
        return [
            {"term": name, "coef": float(b), "HR": float(h), "se": float(s), "z": float(zv),
             "p": float(p), "lower": float(l), "upper": float(u)}
            for name, b, h, s, zv, p, l, u in zip(
                self.terms, self.beta, self.hazard_ratio, self.se, self.z, self.p_values, lo, hi)
        ]


def design_matrix(records, terms, references=None):
    """Dummy-code categorical terms; numeric covariates enter as is.

    ``references`` maps a term to its reference level; by default the
    first level in sorted order. Returns ``(X, column names, references)``.
    """
    references = dict(references or {})
    cols, names = [], []
    used = {}
    for term in terms:
        vals = [r.label(term) for r in records]
        if any(v is None for v in vals):
            raise ValidationError(f"term {term!r} missing for some records")
        numeric = all(isinstance(v, (int, float, np.floating, np.integer)) and not isinstance(v, bool)
                      for v in vals) and term not in references
        if numeric:
            cols.append(np.asarray(vals, dtype=float))
            names.append(term)
            continue
        vals = [str(v) for v in vals]
        levels = sorted(set(vals))
        ref = str(references.get(term, levels[0]))
        if ref not in levels:
            raise ValidationError(f"reference level {ref!r} of {term!r} not observed")
        used[term] = ref
        for lev in levels:
            if lev == ref:
                continue
            cols.append(np.array([v == lev for v in vals], dtype=float))
            names.append(f"{term}[{lev}]")
    X = np.column_stack(cols) if cols else np.zeros((len(records), 0))
    return X, names, used


class _PartialLikelihood:
    """Breslow partial likelihood with score and information."""

    def __init__(self, X, t, e, entry):
        self.X = X
        self.times = np.unique(t[e])
        self.at = (entry[None, :] < self.times[:, None]) & (t[None, :] >= self.times[:, None])
        ev = e[None, :] & (t[None, :] == self.times[:, None])
        self.d = ev.sum(axis=1).astype(float)
        self.xsum = ev.astype(float) @ X

    def __call__(self, beta, derivs=True):
        eta = self.X @ beta
        shift = eta.max()
        w = np.exp(eta - shift)
        W = self.at.astype(float) * w[None, :]
        s0 = W.sum(axis=1)
        ll = float(np.sum(self.xsum @ beta) - np.sum(self.d * (np.log(s0) + shift)))
        if not derivs:
            return ll
        s1 = W @ self.X
        xbar = s1 / s0[:, None]
        grad = self.xsum.sum(axis=0) - (self.d[:, None] * xbar).sum(axis=0)
        s2 = np.einsum("kn,ni,nj->kij", W, self.X, self.X) / s0[:, None, None]
        info = (self.d[:, None, None] * (s2 - xbar[:, :, None] * xbar[:, None, :])).sum(axis=0)
        return ll, grad, info


def cox_fit(records, terms=("group",), references=None, left_truncation=False,
            max_iter=100, max_halvings=20) -> CoxFit:
    """Maximise the Breslow partial likelihood by damped Newton steps.

    Stops when ``max|score| < 1e-9`` or the relative log-likelihood
    change is below ``1e-12``. A step that lowers the log-likelihood is
    halved, up to ``max_halvings`` times.

    Raises
    ------
    CollinearDesign
        The design matrix is rank deficient.
    NonIdentifiable
        The likelihood is monotone (coefficients diverge).
    """
    records = list(records)
    t, e, entry = _arrays(records, left_truncation)
    if len(np.unique(t[e])) < 2:
        raise ValidationError("Cox regression needs at least two distinct event times")
    X, names, refs = design_matrix(records, list(terms), references)
    p = X.shape[1]
    if p == 0:
        raise ValidationError("no covariate columns")
    Xc = X - X.mean(axis=0)
    if np.linalg.matrix_rank(Xc) < p:
        raise CollinearDesign(f"design matrix with columns {names} is rank deficient")

    pl = _PartialLikelihood(X, t, e, entry)
    beta = np.zeros(p)
    ll0, grad0, info0 = pl(beta)
    try:
        score_stat = float(grad0 @ np.linalg.solve(info0, grad0))
    except np.linalg.LinAlgError:
        score_stat = float("nan")

    ll, grad, info = ll0, grad0, info0
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < 1e-9:
            break
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise NonIdentifiable(f"singular information at iteration {it}; coefficients {beta}") from None
        new = beta + step
        ll_new = pl(new, derivs=False)
        halvings = 0
        while ll_new < ll and halvings < max_halvings:
            step = step / 2
            new = beta + step
            ll_new = pl(new, derivs=False)
            halvings += 1
        rel = abs(ll_new - ll) / max(abs(ll), 1e-300)
        beta = new
        ll, grad, info = pl(beta)
        if np.max(np.abs(beta)) > 30:
            raise NonIdentifiable(
                f"coefficients diverging ({dict(zip(names, np.round(beta, 2)))}); "
                "likely monotone likelihood / group separation")
        if rel < 1e-12:
            break
    else:
        log.warning("Cox fit reached max_iter=%d", max_iter)

    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise NonIdentifiable("information matrix singular at the optimum") from None
    se = np.sqrt(np.diag(cov))
    if not np.all(np.isfinite(se)) or np.any(se > 1e3):
        raise NonIdentifiable(f"unbounded standard errors {se}; likely separation")
    lr = max(2.0 * (ll - ll0), 0.0)
    return CoxFit(
        terms=names, beta=beta, se=se, loglik=ll, loglik_null=ll0,
        score_statistic=score_stat, score_p=float(stats.chi2.sf(score_stat, p)),
        lr_statistic=lr, lr_p=float(stats.chi2.sf(lr, p)), n_iter=it,
        references=refs, n=len(records), n_events=int(e.sum()),
    )


def partial_loglik(records, beta, terms=("group",), references=None, left_truncation=False):
    """Breslow partial log-likelihood at ``beta`` (for checks and scans)."""
    records = list(records)
    t, e, entry = _arrays(records, left_truncation)
    X, _, _ = design_matrix(records, list(terms), references)
    return _PartialLikelihood(X, t, e, entry)(np.atleast_1d(np.asarray(beta, dtype=float)), derivs=False)


# -- composite labels -----------------------------------------------------

def mixed_group_label(records, cluster_labels, shift="shift"):
    """Records relabelled ``c{cluster}:{shift}``.

    ``cluster_labels`` maps participant id to cluster. Records missing
    either label are dropped; returns ``(records, n_skipped)``.
    """
    out = []
    skipped = 0
    for r in records:
        k = cluster_labels.get(r.participant_id)
        sh = r.covariates.get(shift)
        if k is None or sh is None or sh == "":
            skipped += 1
            continue
        out.append(replace(r, group=f"c{k}:{sh}"))
    if skipped:
        log.info("mixed_group_label skipped %d records missing a label", skipped)
    return out, skipped


def with_group(records, labels: dict, skip_missing=True):
    """Records whose ``group`` is replaced by ``labels[participant_id]``."""
    out = []
    for r in records:
        lab = labels.get(r.participant_id)
        if lab is None:
            if skip_missing:
                continue
            raise ValidationError(f"no label for {r.participant_id}")
        out.append(replace(r, group=str(lab)))
    return out


# -- I/O ------------------------------------------------------------------

def read_survival_csv(path, id_col="participant_id", time_col="time", event_col="event",
                      group_col="group", covariate_cols=(), entry_col=None):
    """Read records; covariates that parse as numbers are stored as floats."""
    truthy = {"1", "true", "yes", "dead", "death"}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cov = {}
            for c in covariate_cols:
                v = row.get(c, "")
                try:
                    cov[c] = float(v)
                except ValueError:
                    cov[c] = v if v != "" else None
            out.append(SurvivalRecord(
                participant_id=row[id_col],
                time=float(row[time_col]),
                event=str(row[event_col]).strip().lower() in truthy,
                group=(row.get(group_col) or None) if group_col else None,
                covariates=cov,
                entry=float(row[entry_col]) if entry_col else 0.0,
            ))
    return out


def write_survival_csv(records, path, covariate_cols=()):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["participant_id", "time", "event", "group", "entry", *covariate_cols])
        for r in records:
            w.writerow([r.participant_id, repr(r.time), int(r.event), r.group or "", repr(r.entry),
                        *[r.covariates.get(c, "") for c in covariate_cols]])


def write_km_csv(curves: dict, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "time", "n_at_risk", "n_events", "n_censored", "survival",
                    "greenwood_var", "lower95", "upper95"])
        for lab, cv in curves.items():
            lo, hi = cv.confidence_band()
            for row in zip(cv.times, cv.n_at_risk, cv.n_events, cv.n_censored, cv.survival,
                           cv.greenwood_var, lo, hi):
                w.writerow([lab, *(repr(float(x)) for x in row)])


def write_forest_csv(fit: CoxFit, path):
    """Forest-plot rows: term, HR, lower, upper, p (reference levels listed with HR 1)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term", "HR", "lower", "upper", "p"])
        for term, ref in fit.references.items():
            w.writerow([f"{term}[{ref}] (reference)", 1.0, "", "", ""])
        for row in fit.table():
            w.writerow([row["term"], repr(row["HR"]), repr(row["lower"]), repr(row["upper"]), repr(row["p"])])


def summary_text(name, lr: LogRankResult | None = None, fit: CoxFit | None = None) -> str:
    lines = [f"== {name}"]
    if lr is not None:
        lines.append(f"log-rank: chi2={lr.statistic:.4f} df={lr.df} p={lr.p_value:.4g}")
        for lab, o, ex in zip(lr.labels, lr.observed, lr.expected):
            lines.append(f"  {lab}: observed={o:.0f} expected={ex:.2f}")
    if fit is not None:
        lines.append(f"cox: n={fit.n} events={fit.n_events} score p={fit.score_p:.4g} "
                     f"LR p={fit.lr_p:.4g}")
        for row in fit.table():
            lines.append(f"  {row['term']}: HR={row['HR']:.3f} "
                         f"[{row['lower']:.3f}, {row['upper']:.3f}] p={row['p']:.4g}")
    return "\n".join(lines) + "\n"
