"""Closed-form linear CCA.

Views are stored feature-major, ``(dim, N)``, so a batch of ``N`` samples is a
matrix whose columns are samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ComponentError, DegenerateBatchError, DimensionError
from .linalg import covariance_pair, inv_sqrt_spd, svd

DEFAULT_RIDGE = 1e-4
DEFAULT_COMPONENTS = 30


@dataclass(frozen=True)
class CcaModel:
    """Fitted canonical projections.

    ``w_x`` is ``(d_x, k)`` and ``w_y`` is ``(d_y, k)``; column ``i`` of each
    pairs with ``correlations[i]``.  When singular values tie, the basis of the
    tied subspace is whatever the SVD returned and is not unique.
    """

    w_x: np.ndarray
    w_y: np.ndarray
    mean_x: np.ndarray
    mean_y: np.ndarray
    correlations: np.ndarray
    ridge: float

    @property
    def n_components(self) -> int:
        return self.correlations.shape[0]

    def whitening_error(self, cxx: np.ndarray, cyy: np.ndarray) -> float:
        """Largest deviation of ``W^T C W`` from the identity over both views."""
        eye = np.eye(self.n_components)
        ex = np.abs(self.w_x.T @ cxx @ self.w_x - eye).max()
        ey = np.abs(self.w_y.T @ cyy @ self.w_y - eye).max()
        return float(max(ex, ey))


def _views(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2:
        raise DimensionError("views must be 2-D (dim, N) matrices")
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"views disagree on sample count: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[1] < 2:
        raise DegenerateBatchError("CCA needs at least 2 samples")
    return x, y


def cca_fit(x, y, k: int = DEFAULT_COMPONENTS, r: float = DEFAULT_RIDGE) -> CcaModel:
    """Fit linear CCA between ``x`` (``d_x x N``) and ``y`` (``d_y x N``).

    The projections are ``W_X = C_XX^{-1/2} U_k`` and ``W_Y = C_YY^{-1/2} V_k``
    where ``U D V^T`` is the SVD of ``T = C_XX^{-1/2} C_XY C_YY^{-1/2}``.
    """
    x, y = _views(x, y)
    max_k = min(x.shape[0], y.shape[0])
    if not 1 <= k <= max_k:
        raise ComponentError(f"requested {k} components but at most {max_k} are available")
    mean_x = x.mean(axis=1)
    mean_y = y.mean(axis=1)
    x_hat = x - mean_x[:, None]
    y_hat = y - mean_y[:, None]
    cxx, cyy, cxy = covariance_pair(x_hat, y_hat, r)
    rxx = inv_sqrt_spd(cxx)
    ryy = inv_sqrt_spd(cyy)
    res = svd(rxx @ cxy @ ryy)
    return CcaModel(
        w_x=rxx @ res.u[:, :k],
        w_y=ryy @ res.v[:, :k],
        mean_x=mean_x,
        mean_y=mean_y,
        correlations=res.singular_values[:k].copy(),
        ridge=float(r),
    )


def cca_transform(model: CcaModel, data, side: str, k: int | None = None) -> np.ndarray:
    """Canonical components ``W_side^T (data - mean_side)`` as a ``(k, N)`` matrix.

    ``side`` is ``"x"`` or ``"y"``.  ``k`` keeps only the leading components.
    """
    if side == "x":
        w, mean = model.w_x, model.mean_x
    elif side == "y":
        w, mean = model.w_y, model.mean_y
    else:
        raise ValueError(f"side must be 'x' or 'y', got {side!r}")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[0] != w.shape[0]:
        raise DimensionError(
            f"{side}-view data has {data.shape[0]} features, model expects {w.shape[0]}"
        )
    if k is None:
        k = model.n_components
    if not 1 <= k <= model.n_components:
        raise ComponentError(f"model has {model.n_components} components, {k} requested")
    return w[:, :k].T @ (data - mean[:, None])


def total_correlation(model: CcaModel, k: int | None = None) -> float:
    """Sum of the leading ``k`` canonical correlations (all of them by default)."""
    if k is None:
        k = model.n_components
    if not 1 <= k <= model.n_components:
        raise ComponentError(f"model has {model.n_components} components, {k} requested")
    return float(np.sum(model.correlations[:k]))
