"""Dense linear-algebra kernels used by every other module.

Everything here is a pure function over numpy arrays. The symmetric
eigensolver is a cyclic Jacobi iteration so that results do not depend on
which LAPACK build numpy happens to link against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class EmptyInputError(ValueError):
    pass


@dataclass(frozen=True)
class EigDecomposition:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # column k pairs with eigenvalues[k]


def _as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError(f"{name} contains non-finite entries")
    return a


def _offdiag_norm(A):
    off = A - np.diag(np.diag(A))
    return float(np.linalg.norm(off))


def sym_eig(S, max_sweeps: int = 100) -> EigDecomposition:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues are returned in descending order. Tiny negative eigenvalues
    (>= -1e-12 relative to the matrix scale) are clamped to zero; anything
    more negative is treated as a non-PSD input and raises.
    """
    A = _as_matrix(S, "S").copy()
    n, m = A.shape
    if n != m:
        raise ShapeError(f"sym_eig needs a square matrix, got {A.shape}")
    scale = np.linalg.norm(A)
    if n and np.max(np.abs(A - A.T)) > 1e-8 * max(1.0, scale):
        raise ShapeError("sym_eig input is not symmetric")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    tol = 1e-12 * scale

    for _ in range(max_sweeps):
        off = _offdiag_norm(A)
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e100:
                    t = 0.5 / theta
                elif theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # A <- J^T A J with J the (p, q) rotation
                ap = A[:, p].copy()
                aq = A[:, q].copy()
                A[:, p] = c * ap - s * aq
                A[:, q] = s * ap + c * aq
                ap = A[p, :].copy()
                aq = A[q, :].copy()
                A[p, :] = c * ap - s * aq
                A[q, :] = s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    else:
        off = _offdiag_norm(A)
        if off > tol:
            raise NumericError(f"Jacobi did not converge in {max_sweeps} sweeps (off={off:.3e})")

    w = np.diag(A).copy()
    neg_tol = 1e-12 * max(1.0, scale)
    if np.any(w < -neg_tol):
        raise NumericError(f"matrix is not positive semi-definite (min eigenvalue {w.min():.3e})")
    w[w < 0] = 0.0
    # stable sort keeps the original index order among equal eigenvalues
    order = np.argsort(-w, kind="stable")
    return EigDecomposition(eigenvalues=w[order], eigenvectors=V[:, order])


def qr_pivot(M, rel_tol: float = 1e-10) -> np.ndarray:
    """Column order chosen by greedy pivoted QR (modified Gram-Schmidt).

    At each step the remaining column with the largest residual norm is
    taken; residual norms below ``rel_tol`` times the largest initial column
    norm count as exactly zero so that post-rank ties fall back to the lowest
    index.
    """
    R = _as_matrix(M, "M").copy()
    if R.size == 0 or R.shape[1] == 0:
        raise ShapeError("qr_pivot needs a non-empty matrix")
    n = R.shape[1]
    norms0 = np.linalg.norm(R, axis=0)
    zero = rel_tol * max(norms0.max(), np.finfo(float).tiny)
    remaining = list(range(n))
    order = []
    while remaining:
        norms = np.linalg.norm(R[:, remaining], axis=0)
        norms[norms <= zero] = 0.0
        j = remaining[int(np.argmax(norms))]
        order.append(j)
        remaining.remove(j)
        nj = np.linalg.norm(R[:, j])
        if nj <= zero or not remaining:
            continue
        q = R[:, j] / nj
        # two passes of MGS keep the residuals orthogonal in floating point
        for _ in range(2):
            R[:, remaining] -= np.outer(q, q @ R[:, remaining])
    return np.asarray(order, dtype=np.int64)


def covariance(Z):
    """Row-sample mean and population (1/N) covariance."""
    Z = _as_matrix(Z, "Z")
    if Z.shape[0] == 0:
        raise EmptyInputError("covariance of zero samples")
    mu = Z.mean(axis=0)
    Zc = Z - mu
    cov = Zc.T @ Zc / Z.shape[0]
    return mu, 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class GaussianParams:
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray  # lower Cholesky factor of the regularized covariance
    logdet: float

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def reg_cov(self) -> np.ndarray:
        return self.chol @ self.chol.T


def regularization(cov) -> float:
    d = cov.shape[0]
    return 1e-6 * float(np.trace(cov)) / d + 1e-12


def gaussian(mean, cov, ridge: float | None = None) -> GaussianParams:
    """Build Gaussian parameters.

    ``ridge=None`` adds the default ``regularization(cov)`` to the diagonal,
    which is what sample covariances from a handful of points need. Pass
    ``ridge=0.0`` for exactly specified, non-singular covariances.
    """
    mean = np.asarray(mean, dtype=np.float64).ravel()
    cov = _as_matrix(cov, "cov")
    d = mean.shape[0]
    if cov.shape != (d, d):
        raise ShapeError(f"covariance shape {cov.shape} does not match mean dim {d}")
    if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10 * max(1.0, np.abs(cov).max(initial=0.0)):
        raise ShapeError("covariance is not symmetric")
    cov = 0.5 * (cov + cov.T)
    eps = regularization(cov) if ridge is None else float(ridge)
    reg = cov + eps * np.eye(d)
    try:
        L = np.linalg.cholesky(reg)
    except np.linalg.LinAlgError as exc:
        raise NumericError("regularized covariance is not positive definite") from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return GaussianParams(mean=mean, cov=cov, chol=L, logdet=logdet)


def fit_gaussian(Z, ridge: float | None = None) -> GaussianParams:
    mu, cov = covariance(Z)
    return gaussian(mu, cov, ridge=ridge)


def gauss_logpdf(z, params: GaussianParams):
    """Log density of one point (1-D ``z``) or of each row of a 2-D ``z``."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    if Z.shape[1] != params.dim:
        raise ShapeError(f"point dim {Z.shape[1]} != Gaussian dim {params.dim}")
    diff = Z - params.mean
    sol = solve_triangular(params.chol, diff.T, lower=True)
    maha = np.sum(sol * sol, axis=0)
    out = -0.5 * (params.dim * np.log(2.0 * np.pi) + params.logdet + maha)
    return float(out[0]) if single else out
