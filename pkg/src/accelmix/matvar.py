"""Matrix-variate normal densities.

``X ~ N_{r,c}(M, Sigma, Psi)`` means ``vec(X) ~ N_{rc}(vec(M), Psi kron Sigma)``
with ``vec`` stacking columns; ``Sigma`` (r x r) is the row covariance and
``Psi`` (c x c) the column covariance. Densities are evaluated from the
two small factors, never the ``rc x rc`` Kronecker product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .errors import NotPositiveDefinite, ValidationError

LOG2PI = np.log(2 * np.pi)


@dataclass
class MatNormParams:
    M: np.ndarray
    Sigma: np.ndarray
    Psi: np.ndarray

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        self.Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        self.Psi = np.atleast_2d(np.asarray(self.Psi, dtype=float))
        r, c = self.M.shape
        if self.Sigma.shape != (r, r) or self.Psi.shape != (c, c):
            raise ValidationError("covariance shapes do not match the mean matrix")


@dataclass
class BilinearComponentParams:
    """One component of a bilinear factor analyzer mixture.

    ``U`` and ``V`` hold the diagonals of the row and column noise
    covariances; the marginal covariances are ``diag(U) + A A'`` (rows)
    and ``diag(V) + B B'`` (columns).
    """

    M: np.ndarray
    A: np.ndarray
    B: np.ndarray
    U: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.M = np.asarray(self.M, dtype=float)
        r, c = self.M.shape
        self.A = np.asarray(self.A, dtype=float).reshape(r, -1)
        self.B = np.asarray(self.B, dtype=float).reshape(c, -1)
        self.U = np.asarray(self.U, dtype=float).reshape(r)
        self.V = np.asarray(self.V, dtype=float).reshape(c)

    @property
    def shape(self):
        return self.M.shape

    @property
    def Sigma(self):
        return np.diag(self.U) + self.A @ self.A.T

    @property
    def Psi(self):
        return np.diag(self.V) + self.B @ self.B.T

    def copy(self):
        return BilinearComponentParams(self.M.copy(), self.A.copy(), self.B.copy(),
                                       self.U.copy(), self.V.copy())


def _chol(S, name):
    try:
        return la.cholesky(S, lower=True)
    except la.LinAlgError:
        raise NotPositiveDefinite(f"{name} is not positive definite") from None


def _logdet_inv(S, name):
    L = _chol(S, name)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    Sinv = la.cho_solve((L, True), np.eye(len(S)))
    return logdet, 0.5 * (Sinv + Sinv.T)


def _lowrank_logdet_inv(d, F, name):
    """``log|diag(d) + F F'|`` and its inverse via the Woodbury identity."""
    if np.any(~(d > 0)):
        raise NotPositiveDefinite(f"{name} has a non-positive diagonal")
    k = F.shape[1]
    if k == 0 or not np.any(F):
        return float(np.sum(np.log(d))), np.diag(1.0 / d)
    Fd = F / d[:, None]
    inner = np.eye(k) + F.T @ Fd
    Li = _chol(inner, name)
    logdet = float(np.sum(np.log(d))) + 2.0 * np.sum(np.log(np.diag(Li)))
    G = la.cho_solve((Li, True), Fd.T)
    Sinv = np.diag(1.0 / d) - Fd @ G
    return logdet, 0.5 * (Sinv + Sinv.T)


def _logpdf_from_inverses(X, M, logdet_S, Sinv, logdet_P, Pinv):
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    Xs = X[None] if single else X
    r, c = M.shape
    D = Xs - M
    # tr(Pinv D' Sinv D) = sum(D * (Sinv D Pinv))
    q = np.einsum("nij,nij->n", D, Sinv @ D @ Pinv)
    out = -0.5 * (r * c * LOG2PI + r * logdet_P + c * logdet_S + q)
    return float(out[0]) if single else out


def matnorm_logpdf(X, params: MatNormParams):
    """Log density of one ``r x c`` matrix or a stack ``(N, r, c)``."""
    Ls = _chol(params.Sigma, "Sigma")
    Lp = _chol(params.Psi, "Psi")
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    D = (X[None] if single else X) - params.M
    r, c = params.M.shape
    # Z = Ls^{-1} D Lp^{-T}; quadratic form is ||Z||_F^2
    Lsi = la.solve_triangular(Ls, np.eye(r), lower=True)
    Lpi = la.solve_triangular(Lp, np.eye(c), lower=True)
    Z = Lsi @ D @ Lpi.T
    q = np.sum(Z ** 2, axis=(1, 2))
    logdet_S = 2.0 * np.sum(np.log(np.diag(Ls)))
    logdet_P = 2.0 * np.sum(np.log(np.diag(Lp)))
    out = -0.5 * (r * c * LOG2PI + r * logdet_P + c * logdet_S + q)
    return float(out[0]) if single else out


def component_factors(params: BilinearComponentParams):
    """``(logdet Sigma, Sigma^-1, logdet Psi, Psi^-1)`` for a component."""
    ls, Si = _lowrank_logdet_inv(params.U, params.A, "Sigma")
    lp, Pi = _lowrank_logdet_inv(params.V, params.B, "Psi")
    return ls, Si, lp, Pi


def mbi_component_logpdf(X, params: BilinearComponentParams):
    """Log density under ``N_{r,c}(M, U + AA', V + BB')``."""
    ls, Si, lp, Pi = component_factors(params)
    return _logpdf_from_inverses(X, params.M, ls, Si, lp, Pi)


def matnorm_logpdf_dense(X, params: MatNormParams) -> float:
    """Reference evaluation through ``vec(X)`` and the full Kronecker covariance."""
    from scipy.stats import multivariate_normal

    cov = np.kron(params.Psi, params.Sigma)
    return float(multivariate_normal(params.M.ravel(order="F"), cov).logpdf(
        np.asarray(X, dtype=float).ravel(order="F")))


def sample_matnorm(rng, M, Sigma, Psi, size=None):
    """Draw ``X = M + L_S Z L_P'`` with ``Z`` iid standard normal."""
    M = np.asarray(M, dtype=float)
    Ls = _chol(np.atleast_2d(Sigma), "Sigma")
    Lp = _chol(np.atleast_2d(Psi), "Psi")
    n = 1 if size is None else size
    Z = rng.standard_normal((n,) + M.shape)
    X = M + Ls @ Z @ Lp.T
    return X[0] if size is None else X
