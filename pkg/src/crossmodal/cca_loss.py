"""Differentiable CCA objective for training two-branch networks.

Sign convention: :meth:`CcaLoss.forward` returns the total correlation (to be
*maximised*) and :meth:`CcaLoss.backward` returns its gradient, i.e. the ascent
direction.  Trainers negate both to obtain a descent problem.
"""

from __future__ import annotations

import warnings

import numpy as np

from .cca import DEFAULT_RIDGE
from .errors import ComponentError, DegenerateBatchError, DimensionError, UsageError
from .linalg import covariance_pair, inv_sqrt_spd, svd


class CcaLoss:
    """Sum of the top ``k`` canonical correlations of a batch pair ``(X, Y)``.

    Both batches are ``(D, N)``.  ``k`` defaults to ``D``.  When singular values
    are (nearly) tied the objective is still differentiable, but the SVD basis
    within the tie is arbitrary, so finite-difference checks there need slack.
    """

    def __init__(self, ridge: float = DEFAULT_RIDGE, k: int | None = None):
        if ridge < 0:
            raise ValueError("ridge must be non-negative")
        self.ridge = float(ridge)
        self.k = k
        self._cache = None

    def forward(self, x, y) -> float:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 2 or x.shape != y.shape:
            raise DimensionError(f"both views must be (D, N) with equal shapes, got {x.shape}, {y.shape}")
        d, n = x.shape
        if n < 2:
            raise DegenerateBatchError("CCA loss needs at least 2 samples per batch")
        if n <= d:
            warnings.warn(f"batch of {n} samples for {d} dimensions; covariances are rank deficient",
                          stacklevel=2)
        k = d if self.k is None else self.k
        if not 1 <= k <= d:
            raise ComponentError(f"k={k} outside [1, {d}]")

        x_hat = x - x.mean(axis=1, keepdims=True)
        y_hat = y - y.mean(axis=1, keepdims=True)
        cxx, cyy, cxy = covariance_pair(x_hat, y_hat, self.ridge)
        rxx = inv_sqrt_spd(cxx)
        ryy = inv_sqrt_spd(cyy)
        res = svd(rxx @ cxy @ ryy)
        u, s, v = res.u[:, :k], res.singular_values[:k], res.v[:, :k]
        self._cache = (x_hat, y_hat, rxx, ryy, u, s, v)
        return float(np.sum(s))

    def backward(self):
        """Gradients ``(d corr / dX, d corr / dY)``, each ``(D, N)``."""
        if self._cache is None:
            raise UsageError("backward() called before forward()")
        x_hat, y_hat, rxx, ryy, u, s, v = self._cache
        n = x_hat.shape[1]
        grad_xy = rxx @ u @ v.T @ ryy
        grad_xx = -0.5 * rxx @ (u * s) @ u.T @ rxx
        grad_yy = -0.5 * ryy @ (v * s) @ v.T @ ryy
        gx = (2.0 * grad_xx @ x_hat + grad_xy @ y_hat) / (n - 1)
        gy = (2.0 * grad_yy @ y_hat + grad_xy.T @ x_hat) / (n - 1)
        return gx, gy
