"""Mixtures of matrix-variate bilinear factor analyzers fitted by AECM.

Component ``g`` models an ``r x c`` observation as
``N_{r,c}(M_g, U_g + A_g A_g', V_g + B_g B_g')`` with ``A_g`` (r x s)
column-factor loadings, ``B_g`` (c x v) row-factor loadings and diagonal
``U_g``, ``V_g``. Each AECM iteration cycles through three conditional
maximisation stages, each preceded by an E-step:

1. mixing proportions and means, complete data ``(X, z)``;
2. ``(A, U)`` with the column covariance held fixed, complete data adds
   the ``s x c`` column-factor scores;
3. ``(B, V)`` with the row covariance held fixed, complete data adds the
   ``r x v`` row-factor scores.

Given the fixed side, stage 2 is one EM step of an ordinary factor
analysis on the whitened columns ``(X_i - M_g) Psi_g^{-1/2}``, of which
there are ``c`` per observation; stage 3 is the same on rows.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from ._npz import savez_deterministic
from .errors import (
    EmptyComponent, InitFailed, NumericalError, NumericalFailure, SearchFailed,
    ValidationError,
)
from .matvar import BilinearComponentParams, _logpdf_from_inverses, component_factors

log = logging.getLogger(__name__)

INIT_METHODS = ("kmeans", "random_soft")
VAR_FLOOR = 1e-8
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class MixtureSpec:
    G: int
    s: int
    v: int
    init: str = "kmeans"
    seed: int = 0
    max_iter: int = 400
    eps: float = 1e-4
    var_floor: float = VAR_FLOOR
    n_min_frac: float = 1e-6

    def validate(self, shape=None):
        if self.G < 1:
            raise ValidationError("G must be >= 1")
        if self.init not in INIT_METHODS:
            raise ValidationError(f"init must be one of {INIT_METHODS}")
        if not self.eps > 0:
            raise ValidationError("eps must be positive")
        if self.s < 1 or self.v < 1:
            raise ValidationError("factor dimensions must be >= 1")
        if shape is not None:
            r, c = shape
            if not self.s < r or not self.v < c:
                raise ValidationError(f"need s < r and v < c, got s={self.s}, v={self.v} for {r}x{c}")
        return self


@dataclass
class MbiModel:
    spec: MixtureSpec
    pi: np.ndarray
    components: list
    loglik_history: list = field(default_factory=list)
    substep_loglik: list = field(default_factory=list)
    bic: float = float("nan")
    n_params: int = 0
    converged: bool = False
    n_iter: int = 0
    Ng: np.ndarray | None = None
    N: int = 0

    @property
    def G(self):
        return len(self.components)

    @property
    def shape(self):
        return self.components[0].shape

    @property
    def loglik(self):
        return self.loglik_history[-1] if self.loglik_history else float("nan")

    def relabel(self, order):
        """Model with components reordered so new ``g`` is old ``order[g]``."""
        order = list(order)
        return replace(
            self,
            pi=self.pi[order].copy(),
            components=[self.components[g].copy() for g in order],
            Ng=None if self.Ng is None else self.Ng[order].copy(),
        )


# -- basics ---------------------------------------------------------------

def as_stack(data) -> np.ndarray:
    X = np.asarray(data, dtype=float)
    if X.ndim != 3:
        raise ValidationError("data must be a list of equally sized r x c matrices")
    if not np.all(np.isfinite(X)):
        raise ValidationError("data contains non-finite entries")
    return X


def n_free_params(G: int, r: int, c: int, s: int, v: int) -> int:
    """Raw parameter count: proportions, means, loadings and noise diagonals."""
    return (G - 1) + G * (r * c + r * s + c * v + r + c)


def bic_value(loglik: float, n_params: int, N: float) -> float:
    """Positive-scale BIC, ``2 l - rho log N`` (larger is better)."""
    return 2.0 * loglik - n_params * math.log(N)


def bic(model: MbiModel, N: int | None = None) -> float:
    r, c = model.shape
    rho = n_free_params(model.G, r, c, model.spec.s, model.spec.v)
    return bic_value(model.loglik, rho, N if N is not None else model.N)


def component_logdens(X, model: MbiModel) -> np.ndarray:
    """``(N, G)`` array of ``log pi_g + log phi_g(X_i)``."""
    out = np.empty((len(X), model.G))
    for g, comp in enumerate(model.components):
        ls, Si, lp, Pi = component_factors(comp)
        out[:, g] = _logpdf_from_inverses(X, comp.M, ls, Si, lp, Pi)
    with np.errstate(divide="ignore"):
        out += np.log(model.pi)
    return out


def mixture_logpdf(data, model: MbiModel) -> np.ndarray:
    return logsumexp(component_logdens(as_stack(data), model), axis=1)


# -- initialisation -------------------------------------------------------

def init_memberships(data, spec: MixtureSpec, rng=None) -> np.ndarray:
    """Starting responsibilities.

    ``kmeans`` gives hard memberships from k-means on the vectorised
    matrices (Lloyd iterations, k-means++ seeding, 10 restarts);
    ``random_soft`` draws each row from a flat Dirichlet.
    """
    X = as_stack(data)
    N = len(X)
    G = spec.G
    if N < G:
        raise ValidationError(f"need at least G={G} observations, got {N}")
    if G == 1:
        return np.ones((N, 1))
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    if spec.init == "random_soft":
        z = rng.dirichlet(np.ones(G), size=N)
        # a Dirichlet draw can round to exactly 0 or 1 in double precision
        z = np.clip(z, 1e-300, None)
        return z / z.sum(axis=1, keepdims=True)

    from sklearn.cluster import KMeans

    flat = X.reshape(N, -1)
    for attempt in range(10):
        km = KMeans(n_clusters=G, init="k-means++", n_init=10, algorithm="lloyd",
                    random_state=int(rng.integers(2**31 - 1)))
        labels = km.fit_predict(flat)
        if len(np.unique(labels)) == G:
            return np.eye(G)[labels]
        log.debug("k-means produced an empty cluster, re-seeding (attempt %d)", attempt + 1)
    raise InitFailed(f"k-means left a cluster empty after 10 attempts (G={G})")


def _ppca_side(S, k, floor):
    """Loadings and noise diagonal of a rank-``k`` fit to covariance ``S``."""
    w, Q = np.linalg.eigh(S)
    w, Q = w[::-1], Q[:, ::-1]
    rest = w[k:]
    sigma2 = max(float(rest.mean()) if len(rest) else 0.0, floor)
    L = Q[:, :k] * np.sqrt(np.maximum(w[:k] - sigma2, 0.0))
    d = np.maximum(np.diag(S) - np.sum(L ** 2, axis=1), max(sigma2 * 1e-3, floor))
    return L, d


def init_params(X, z, spec: MixtureSpec) -> MbiModel:
    """Parameters from initial responsibilities.

    Row and column covariances are started symmetrically from the
    weighted row and column scatters, so transposing the data transposes
    the starting point.
    """
    N, r, c = X.shape
    pi, M = m_step_stage1(X, z, spec)
    comps = []
    for g in range(spec.G):
        w = z[:, g]
        D = X - M[g]
        Ng = w.sum()
        Dw = D * w[:, None, None]
        S_row = (Dw @ D.transpose(0, 2, 1)).sum(axis=0) / (Ng * c)
        S_col = (Dw.transpose(0, 2, 1) @ D).sum(axis=0) / (Ng * r)
        tau = max(np.trace(S_row) / r, spec.var_floor)
        S_row = S_row + spec.var_floor * np.eye(r)
        S_col = S_col / tau + spec.var_floor * np.eye(c)
        A, U = _ppca_side(S_row, spec.s, spec.var_floor)
        B, V = _ppca_side(S_col, spec.v, spec.var_floor)
        comps.append(BilinearComponentParams(M[g], A, B, U, V))
    return MbiModel(spec=spec, pi=pi, components=comps, N=N)


# -- E and CM steps -------------------------------------------------------

def e_step(data, model: MbiModel):
    """Responsibilities and the observed log-likelihood.

    Raises
    ------
    NumericalFailure
        An observation has a non-finite mixture log density.
    """
    X = as_stack(data)
    ld = component_logdens(X, model)
    norm = logsumexp(ld, axis=1)
    bad = ~np.isfinite(norm)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise NumericalFailure(f"non-finite log density at observation {i}", index=i)
    z = np.exp(ld - norm[:, None])
    z /= z.sum(axis=1, keepdims=True)
    return z, float(norm.sum())


def m_step_stage1(data, z, spec: MixtureSpec | None = None):
    """Weighted means and mixing proportions."""
    X = as_stack(data)
    z = np.asarray(z, dtype=float)
    N = len(X)
    Ng = z.sum(axis=0)
    n_min = (spec.n_min_frac if spec is not None else 1e-6) * N
    small = np.flatnonzero(Ng < n_min)
    if len(small):
        g = int(small[0])
        raise EmptyComponent(f"component {g + 1} has effective size {Ng[g]:.3g}", component=g)
    M = (z.T @ X.reshape(N, -1)).reshape(-1, *X.shape[1:]) / Ng[:, None, None]
    return Ng / N, M


def _fa_step(S, L, d, n, floor):
    """One factor-analysis EM update from scatter ``S`` over ``n`` samples.

    Returns the new loadings and the noise diagonal
    ``diag(S_res) / n``, where ``S_res`` is the expected residual scatter.
    """
    Sc = S / n
    k = L.shape[1]
    Ld = L / d[:, None]
    inner = np.eye(k) + L.T @ Ld
    # beta = L' (diag(d) + L L')^{-1}, by Woodbury
    beta = np.linalg.solve(inner, Ld.T)
    SbT = Sc @ beta.T
    Theta = np.eye(k) - beta @ L + beta @ SbT
    L_new = np.linalg.solve(Theta.T, SbT.T).T
    d_new = np.diag(Sc) - np.sum(L_new * SbT, axis=1)
    return L_new, np.maximum(d_new, floor)


def m_step_stage2(data, z, model: MbiModel):
    """Update ``(A_g, U_g)`` with ``Psi_g = V_g + B_g B_g'`` fixed."""
    X = as_stack(data)
    N, r, c = X.shape
    out = []
    for g, comp in enumerate(model.components):
        w = z[:, g]
        Ng = w.sum()
        _, _, _, Pi = component_factors(comp)
        D = X - comp.M
        S = ((D * w[:, None, None]) @ Pi @ D.transpose(0, 2, 1)).sum(axis=0)
        S = 0.5 * (S + S.T)
        A, U = _fa_step(S, comp.A, comp.U, Ng * c, model.spec.var_floor)
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(U))):
            raise NumericalFailure(f"stage 2 produced non-finite loadings for component {g + 1}")
        out.append((A, U))
    return out


def m_step_stage3(data, z, model: MbiModel):
    """Update ``(B_g, V_g)`` with ``Sigma_g = U_g + A_g A_g'`` fixed."""
    X = as_stack(data)
    N, r, c = X.shape
    out = []
    for g, comp in enumerate(model.components):
        w = z[:, g]
        Ng = w.sum()
        _, Si, _, _ = component_factors(comp)
        D = X - comp.M
        S = ((D * w[:, None, None]).transpose(0, 2, 1) @ Si @ D).sum(axis=0)
        S = 0.5 * (S + S.T)
        B, V = _fa_step(S, comp.B, comp.V, Ng * r, model.spec.var_floor)
        if not (np.all(np.isfinite(B)) and np.all(np.isfinite(V))):
            raise NumericalFailure(f"stage 3 produced non-finite loadings for component {g + 1}")
        out.append((B, V))
    return out


def aitken_converged(loglik_history, eps: float) -> bool:
    """Aitken acceleration stopping rule on the last three log-likelihoods.

    With ``a = (l2 - l1) / (l1 - l0)`` and ``l_inf = l1 + (l2 - l1) / (1 - a)``,
    stop when ``0 <= l_inf - l1 < eps``. A non-positive previous increment
    stops only if the latest change is below ``eps / 100``; ``a >= 1``
    never stops.
    """
    if len(loglik_history) < 3:
        return False
    l0, l1, l2 = (float(v) for v in loglik_history[-3:])
    step = l2 - l1
    prev = l1 - l0
    if prev <= 0:
        return abs(step) < eps * 1e-2
    a = step / prev
    if a >= 1:
        return False
    gap = step / (1.0 - a)
    if gap < 0:
        # rounding-level decrease at a stationary point
        return abs(step) < eps * 1e-2
    return gap < eps


def classify(model: MbiModel, data=None, z=None) -> np.ndarray:
    """MAP labels in ``1..G``; ties go to the lowest component index."""
    if z is None:
        z, _ = e_step(data, model)
    return np.argmax(np.asarray(z), axis=1) + 1


# -- fitting --------------------------------------------------------------

def fit(data, spec: MixtureSpec, z0=None) -> MbiModel:
    """Fit by AECM until the Aitken criterion holds or ``max_iter`` is hit.

    ``loglik_history`` holds the observed log-likelihood at the end of
    each iteration, with the starting value first; ``substep_loglik`` has
    one entry per CM stage.
    """
    X = as_stack(data)
    N, r, c = X.shape
    spec.validate((r, c))
    z = init_memberships(X, spec) if z0 is None else np.asarray(z0, dtype=float)
    model = init_params(X, z, spec)

    z, ll = _e(X, model, 0)
    history = [ll]
    subs = [ll]
    converged = False
    it = 0
    for it in range(1, spec.max_iter + 1):
        try:
            pi, M = m_step_stage1(X, z, spec)
        except EmptyComponent as exc:
            exc.iteration = it
            raise
        model.pi = pi
        for comp, m in zip(model.components, M):
            comp.M = m
        z, ll = _e(X, model, it)
        subs.append(ll)

        for comp, (A, U) in zip(model.components, m_step_stage2(X, z, model)):
            comp.A, comp.U = A, U
        z, ll = _e(X, model, it)
        subs.append(ll)

        for comp, (B, V) in zip(model.components, m_step_stage3(X, z, model)):
            comp.B, comp.V = B, V
        z, ll = _e(X, model, it)
        subs.append(ll)

        history.append(ll)
        if aitken_converged(history, spec.eps):
            converged = True
            break

    model.loglik_history = history
    model.substep_loglik = subs
    model.converged = converged
    model.n_iter = it
    model.Ng = z.sum(axis=0)
    model.n_params = n_free_params(spec.G, r, c, spec.s, spec.v)
    model.bic = bic_value(history[-1], model.n_params, N)
    if not converged:
        log.info("AECM hit max_iter=%d without converging (G=%d s=%d v=%d)",
                 spec.max_iter, spec.G, spec.s, spec.v)
    return model


def _e(X, model, it):
    try:
        return e_step(X, model)
    except NumericalFailure as exc:
        exc.iteration = it
        raise
    except NumericalError as exc:
        raise NumericalFailure(str(exc), iteration=it) from exc


# -- model search ---------------------------------------------------------

@dataclass
class SearchEntry:
    spec: MixtureSpec
    bic: float
    n_params: int
    converged: bool
    n_iter: int
    model: MbiModel | None = None
    error: str | None = None


@dataclass
class SearchResult:
    ranked: list
    entries: list
    failures: list

    @property
    def best(self) -> SearchEntry:
        return self.ranked[0]

    def top(self, k=5):
        return self.ranked[:k]


def _cell_seed(seed, G, s, v, init):
    ss = np.random.SeedSequence([seed, G, s, v, INIT_METHODS.index(init)])
    return int(ss.generate_state(1)[0])


def _fit_cell(args):
    X, spec = args
    try:
        m = fit(X, spec)
        return SearchEntry(spec, m.bic, m.n_params, m.converged, m.n_iter, m)
    except (NumericalError, ValidationError) as exc:
        return SearchEntry(spec, float("nan"), 0, False, getattr(exc, "iteration", 0) or 0,
                           error=f"{type(exc).__name__}: {exc}")


def model_search(data, G_grid, s_grid, v_grid, inits=INIT_METHODS, seed=0,
                 workers=1, **spec_kwargs) -> SearchResult:
    """Fit every ``(G, s, v, init)`` combination and rank by BIC.

    For each ``(G, s, v)`` only the better of its initialisations enters
    the ranking. Ranking is by BIC descending, ties by fewer parameters.
    Failed fits are kept in ``failures`` and excluded from the ranking.
    """
    X = as_stack(data)
    _, r, c = X.shape
    if not (len(G_grid) and len(s_grid) and len(v_grid) and len(inits)):
        raise ValidationError("search grids must be non-empty")
    jobs = []
    for G in G_grid:
        for s in s_grid:
            for v in v_grid:
                for init in inits:
                    if G == 1 and init != inits[0]:
                        continue
                    spec = MixtureSpec(G, s, v, init, _cell_seed(seed, G, s, v, init), **spec_kwargs)
                    jobs.append((X, spec))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            entries = list(ex.map(_fit_cell, jobs))
    else:
        entries = [_fit_cell(j) for j in jobs]

    failures = [e for e in entries if e.error is not None]
    best = {}
    for e in entries:
        if e.error is not None:
            continue
        key = (e.spec.G, e.spec.s, e.spec.v)
        if key not in best or e.bic > best[key].bic:
            best[key] = e
    if not best:
        raise SearchFailed(f"all {len(entries)} fits failed; first error: {failures[0].error}")
    ranked = sorted(best.values(), key=lambda e: (-e.bic, e.n_params))
    return SearchResult(ranked, entries, failures)


def write_search_report(result: SearchResult, dest) -> None:
    """CSV with one row per attempted fit.

    ``q`` and ``s_row`` repeat ``s`` and ``v`` under the alternative
    naming (column-factor and row-factor dimension).
    """
    import csv

    rows = sorted(result.entries, key=lambda e: (-(e.bic if e.error is None else -np.inf), e.n_params))
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["BIC", "G", "s", "v", "q", "s_row", "init", "converged", "iterations", "n_params", "error"])
        for e in rows:
            w.writerow([repr(e.bic), e.spec.G, e.spec.s, e.spec.v, e.spec.s, e.spec.v, e.spec.init,
                        e.converged, e.n_iter, e.n_params, e.error or ""])


# -- persistence ----------------------------------------------------------

def save_model(model: MbiModel, path) -> None:
    """Versioned ``.npz`` artifact with every parameter and the fit history."""
    arrays = {
        "format_version": np.array(MODEL_FORMAT_VERSION),
        "spec": np.array(json.dumps(asdict(model.spec))),
        "pi": model.pi,
        "M": np.stack([c.M for c in model.components]),
        "A": np.stack([c.A for c in model.components]),
        "B": np.stack([c.B for c in model.components]),
        "U": np.stack([c.U for c in model.components]),
        "V": np.stack([c.V for c in model.components]),
        "loglik_history": np.asarray(model.loglik_history, dtype=float),
        "substep_loglik": np.asarray(model.substep_loglik, dtype=float),
        "meta": np.array(json.dumps({
            "bic": model.bic, "n_params": model.n_params, "converged": model.converged,
            "n_iter": model.n_iter, "N": model.N,
            "Ng": None if model.Ng is None else model.Ng.tolist(),
        })),
    }
    savez_deterministic(path, **arrays)


def load_model(path) -> MbiModel:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != MODEL_FORMAT_VERSION:
            raise ValidationError(f"unsupported model format version {version}")
        spec = MixtureSpec(**json.loads(str(z["spec"])))
        meta = json.loads(str(z["meta"]))
        comps = [BilinearComponentParams(*parts) for parts in
                 zip(z["M"], z["A"], z["B"], z["U"], z["V"])]
        return MbiModel(
            spec=spec, pi=np.array(z["pi"]), components=comps,
            loglik_history=z["loglik_history"].tolist(),
            substep_loglik=z["substep_loglik"].tolist(),
            bic=meta["bic"], n_params=meta["n_params"], converged=meta["converged"],
            n_iter=meta["n_iter"], N=meta["N"],
            Ng=None if meta["Ng"] is None else np.array(meta["Ng"]),
        )


def dump_model_text(model: MbiModel) -> str:
    """Plain-text dump for diffing two fits."""
    lines = [
        f"# mbi model v{MODEL_FORMAT_VERSION}",
        "spec " + json.dumps(asdict(model.spec), sort_keys=True),
        f"loglik {model.loglik!r}",
        f"bic {model.bic!r}",
        f"n_params {model.n_params}",
        f"converged {model.converged}",
        f"n_iter {model.n_iter}",
        "loglik_history " + " ".join(repr(float(v)) for v in model.loglik_history),
    ]
    for g, (p, comp) in enumerate(zip(model.pi, model.components), start=1):
        lines.append(f"[component {g}] pi {float(p)!r}")
        for name in ("M", "A", "B", "U", "V"):
            arr = np.atleast_2d(getattr(comp, name))
            lines.append(f"{name} {arr.shape[0]}x{arr.shape[1]}")
            lines.extend(" ".join(repr(float(x)) for x in row) for row in arr)
    return "\n".join(lines) + "\n"
