"""Dense real linear algebra used by the CCA code.

Everything works on float64 ``numpy`` arrays.  The symmetric eigensolver is a
row-cyclic Jacobi method compiled with ``numba``.  The SVD is derived from the eigendecomposition of the
smaller Gram matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import DegenerateBatchError, DimensionError, NumericalError, SingularityError

MAX_SWEEPS = 100
OFF_TOL = 1e-12
SPD_EIG_FLOOR = 1e-12


@dataclass(frozen=True)
class EigResult:
    """Eigenvalues in descending order; ``eigenvectors[:, i]`` pairs with ``eigenvalues[i]``."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``a = u @ diag(singular_values) @ v.T``."""

    u: np.ndarray
    singular_values: np.ndarray
    v: np.ndarray


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise DimensionError(f"expected a non-empty 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("matrix contains NaN or Inf")
    return a


@numba.njit(cache=True)
def _jacobi_sweeps(w, vt, max_sweeps, tol):
    """Row-cyclic Jacobi on symmetric ``w`` in place; rows of ``vt`` collect eigenvectors.

    Returns the number of sweeps used, or -1 when ``max_sweeps`` was exhausted.
    """
    n = w.shape[0]
    for sweep in range(max_sweeps + 1):
        off = 0.0
        for i in range(n):
            for j in range(i + 1, n):
                off += 2.0 * w[i, j] * w[i, j]
        if np.sqrt(off) <= tol:
            return sweep
        if sweep == max_sweeps:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = w[p, q]
                if apq == 0.0:
                    continue
                theta = (w[q, q] - w[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for r in range(n):
                    if r != p and r != q:
                        wpr = w[p, r]
                        wqr = w[q, r]
                        w[p, r] = c * wpr - s * wqr
                        w[q, r] = s * wpr + c * wqr
                        w[r, p] = w[p, r]
                        w[r, q] = w[q, r]
                w[p, p] -= t * apq
                w[q, q] += t * apq
                w[p, q] = 0.0
                w[q, p] = 0.0
                for r in range(n):
                    vp = vt[p, r]
                    vq = vt[q, r]
                    vt[p, r] = c * vp - s * vq
                    vt[q, r] = s * vp + c * vq
    return -1


def _canonical_signs(vecs: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made positive, for reproducible output
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def sym_eig(a) -> EigResult:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    The input is symmetrised as ``(a + a.T) / 2`` first.  Iteration stops when
    the off-diagonal Frobenius norm falls below ``1e-12 * ||a||_F``; failing to
    get there within 100 sweeps raises :class:`NumericalError`.
    """
    a = _as_matrix(a)
    n = a.shape[0]
    if a.shape[1] != n:
        raise DimensionError(f"sym_eig needs a square matrix, got {a.shape}")
    w = np.ascontiguousarray(0.5 * (a + a.T))
    vt = np.eye(n)
    if _jacobi_sweeps(w, vt, MAX_SWEEPS, OFF_TOL * np.linalg.norm(w)) < 0:
        raise NumericalError(f"Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps")
    vals = np.diag(w).copy()
    order = np.argsort(-vals, kind="stable")
    return EigResult(vals[order], _canonical_signs(vt.T[:, order]))


def svd(a) -> SvdResult:
    """Thin SVD via the eigendecomposition of the smaller Gram matrix.

    Right singular vectors come from ``eig(a.T a)``; the left ones are the
    columns of ``a @ v`` orthonormalised in order of decreasing singular value,
    which keeps ``u`` orthonormal even for tiny or zero singular values and
    fixes the sign pairing between ``u`` and ``v``.
    """
    a = _as_matrix(a)
    rows, cols = a.shape
    if rows < cols:
        res = svd(a.T)
        return SvdResult(res.v, res.singular_values, res.u)

    eig = sym_eig(a.T @ a)
    v = eig.eigenvectors
    b = a @ v
    k = cols
    u = np.zeros((rows, k))
    sigma = np.zeros(k)
    ref = max(np.linalg.norm(b, axis=0).max(), np.finfo(float).tiny)
    fill = 0
    for i in range(k):
        col = b[:, i].copy()
        for _ in range(2):  # twice is enough for orthogonality to working precision
            col -= u[:, :i] @ (u[:, :i].T @ col)
        norm = np.linalg.norm(col)
        if norm > 1e-13 * ref:
            u[:, i] = col / norm
            sigma[i] = u[:, i] @ b[:, i]
        else:
            # rank deficient: complete u with the next coordinate axis outside its span
            while True:
                e = np.zeros(rows)
                e[fill] = 1.0
                fill += 1
                for _ in range(2):
                    e -= u[:, :i] @ (u[:, :i].T @ e)
                if np.linalg.norm(e) > 0.5:
                    break
            u[:, i] = e / np.linalg.norm(e)
            sigma[i] = 0.0
    neg = sigma < 0
    u[:, neg] *= -1.0
    sigma = np.abs(sigma)
    order = np.argsort(-sigma, kind="stable")
    return SvdResult(u[:, order], sigma[order], v[:, order])


def inv_sqrt_spd(a) -> np.ndarray:
    """Symmetric inverse square root ``R`` of an SPD matrix, so that ``R a R = I``.

    Raises :class:`SingularityError` when the smallest eigenvalue is at or
    below ``1e-12``; callers usually respond by increasing the ridge.
    """
    eig = sym_eig(a)
    lam_min = eig.eigenvalues[-1]
    if lam_min <= SPD_EIG_FLOOR:
        raise SingularityError(
            f"matrix is not positive definite enough (smallest eigenvalue {lam_min:.3e}); "
            "increase the ridge"
        )
    vecs = eig.eigenvectors
    return (vecs / np.sqrt(eig.eigenvalues)) @ vecs.T


def covariance_pair(x_hat, y_hat, r: float):
    """Ridge-regularised covariances of two centred views stored as ``(dim, N)``.

    Returns ``(cxx, cyy, cxy)`` with ``cxx = x x^T / (N - 1) + r I`` and
    ``cxy = x y^T / (N - 1)``.
    """
    x_hat = _as_matrix(x_hat)
    y_hat = _as_matrix(y_hat)
    n = x_hat.shape[1]
    if y_hat.shape[1] != n:
        raise DimensionError(f"views disagree on sample count: {n} vs {y_hat.shape[1]}")
    if n < 2:
        raise DegenerateBatchError("need at least 2 samples to estimate a covariance")
    if r < 0:
        raise ValueError("ridge must be non-negative")
    scale = 1.0 / (n - 1)
    cxx = scale * (x_hat @ x_hat.T)
    cyy = scale * (y_hat @ y_hat.T)
    cxx = 0.5 * (cxx + cxx.T) + r * np.eye(x_hat.shape[0])
    cyy = 0.5 * (cyy + cyy.T) + r * np.eye(y_hat.shape[0])
    cxy = scale * (x_hat @ y_hat.T)
    return cxx, cyy, cxy
