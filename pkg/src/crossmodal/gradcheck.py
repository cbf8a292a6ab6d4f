"""Central finite-difference checks for the CCA head and every layer kind.

The error measure is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``,
i.e. the worst absolute deviation scaled by the gradient's magnitude.  It does
not blow up on individual near-zero gradient entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cca_loss import CcaLoss
from . import nn

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<12s} max_rel_err={self.max_rel_error:.3e} (tol {self.tol:g})"


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-300)
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_gradient(f, x: np.ndarray, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x`` (``x`` is restored afterwards)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def check_cca_loss(x, y, ridge, k=None, step=DEFAULT_STEP, corrupt=0.0) -> float:
    """Relative error of :meth:`CcaLoss.backward` against finite differences, both views."""
    x = np.array(x, dtype=np.float64)
    y = np.array(y, dtype=np.float64)
    loss = CcaLoss(ridge, k)
    loss.forward(x, y)
    gx, gy = loss.backward()
    if corrupt:
        gx = gx * (1.0 + corrupt)

    def f():
        return CcaLoss(ridge, k).forward(x, y)

    nx = numeric_gradient(f, x, step)
    ny = numeric_gradient(f, y, step)
    return max(relative_error(gx, nx), relative_error(gy, ny))


def check_layer(layer: nn.Layer, x: np.ndarray, rng, step=DEFAULT_STEP, corrupt=0.0) -> float:
    """Check input and parameter gradients of ``sum(G * layer(x))`` for random ``G``."""
    x = np.array(x, dtype=np.float64)
    out = layer.forward(x, True)
    upstream = rng.standard_normal(out.shape)
    dx = layer.backward(upstream)
    if corrupt:
        dx = dx * (1.0 + corrupt)
    analytic = {key: g.copy() for key, g in layer.grads.items()}

    def f():
        val = float(np.sum(upstream * layer.forward(x, True)))
        layer.cache = None
        return val

    # batch-norm running statistics drift during probing; restore them afterwards
    saved = (getattr(layer, "running_mean", None), getattr(layer, "running_var", None))
    err = relative_error(dx, numeric_gradient(f, x, step))
    for key, param in layer.params.items():
        err = max(err, relative_error(analytic[key], numeric_gradient(f, param, step)))
    if saved[0] is not None:
        layer.running_mean, layer.running_var = saved
    return err


def _spread(rng, shape, gap=0.05):
    """Random values with pairwise gaps >= ``gap`` so max/relu kinks are never crossed by a probe."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2 + 0.5) * gap
    return rng.permutation(vals).reshape(shape)


def layer_suite(seed=0, corrupt=0.0, tol=DEFAULT_TOL) -> list[CheckResult]:
    """One check per layer kind (each activation separately) on small random shapes."""
    rng = np.random.default_rng(seed)
    results = []
    n, c, h, w = 3, 2, 5, 6

    conv = nn.Conv2d(c, 3, (3, 3), rng)
    conv.params["bias"] = rng.standard_normal(3)
    results.append(CheckResult("conv2d", check_layer(conv, rng.standard_normal((n, c, h, w)), rng,
                                                     corrupt=corrupt), tol))

    pool = nn.MaxPool2d((2, 3))
    results.append(CheckResult("maxpool2d", check_layer(pool, _spread(rng, (n, c, h, w)), rng,
                                                        corrupt=corrupt), tol))

    bn4 = nn.BatchNorm(c)
    bn4.params["gamma"] = rng.uniform(0.5, 1.5, c)
    bn4.params["beta"] = rng.standard_normal(c)
    results.append(CheckResult("batchnorm4d", check_layer(bn4, rng.standard_normal((n, c, h, w)), rng,
                                                          corrupt=corrupt), tol))

    bn2 = nn.BatchNorm(4)
    bn2.params["gamma"] = rng.uniform(0.5, 1.5, 4)
    results.append(CheckResult("batchnorm", check_layer(bn2, rng.standard_normal((6, 4)), rng,
                                                        corrupt=corrupt), tol))

    fc = nn.Dense(6, 4, rng)
    fc.params["bias"] = rng.standard_normal(4)
    results.append(CheckResult("dense", check_layer(fc, rng.standard_normal((5, 6)), rng,
                                                    corrupt=corrupt), tol))

    for name in nn.ACTIVATIONS:
        act = nn.Activation(name)
        x = _spread(rng, (4, 6), gap=0.1) if name == "relu" else rng.standard_normal((4, 6))
        results.append(CheckResult(name, check_layer(act, x, rng, corrupt=corrupt), tol))

    results.append(CheckResult("flatten", check_layer(nn.Flatten(), rng.standard_normal((n, c, 2, 3)), rng,
                                                      corrupt=corrupt), tol))
    return results


def cca_suite(seed=0, dims=(3, 5, 8), sizes=(30, 60), ridges=(1e-3, 1e-4), batches=20, corrupt=0.0,
              tol=DEFAULT_TOL) -> CheckResult:
    """Worst error of the CCA head over ``batches`` seeded random batches cycling through the grid."""
    rng = np.random.default_rng(seed)
    grid = [(d, n, r) for d in dims for n in sizes for r in ridges]
    worst = 0.0
    for b in range(batches):
        d, n, r = grid[b % len(grid)]
        x = rng.standard_normal((d, n))
        # partially shared signal keeps the canonical correlations spread out
        y = 0.7 * x[rng.permutation(d)] + rng.standard_normal((d, n))
        worst = max(worst, check_cca_loss(x, y, r, corrupt=corrupt))
    return CheckResult("cca_head", worst, tol)
