import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossmodal.cca import cca_fit, cca_transform, total_correlation
from crossmodal.errors import ComponentError, DimensionError
from crossmodal.linalg import covariance_pair
from crossmodal.synthdata import SynthSpec, generate


def centred_cov(model, x, y):
    xh = x - x.mean(axis=1, keepdims=True)
    yh = y - y.mean(axis=1, keepdims=True)
    cxx, cyy, _ = covariance_pair(xh, yh, model.ridge)
    return cxx, cyy


def scipy_cca(x, y, r):
    """Reference canonical correlations from scipy's generalised symmetric eigensolver."""
    from scipy.linalg import eigh

    xh = x - x.mean(axis=1, keepdims=True)
    yh = y - y.mean(axis=1, keepdims=True)
    n = x.shape[1]
    cxx = xh @ xh.T / (n - 1) + r * np.eye(x.shape[0])
    cyy = yh @ yh.T / (n - 1) + r * np.eye(y.shape[0])
    cxy = xh @ yh.T / (n - 1)
    vals = eigh(cxy @ np.linalg.solve(cyy, cxy.T), cxx, eigvals_only=True)
    return np.sqrt(np.clip(np.sort(vals)[::-1], 0, None))


def test_identical_views_correlate_perfectly():
    x = np.random.default_rng(0).standard_normal((5, 200))
    model = cca_fit(x, x, k=3, r=1e-9)
    np.testing.assert_allclose(model.correlations, 1.0, atol=1e-4)
    assert total_correlation(model) == pytest.approx(3.0, abs=1e-3)


def test_invariant_to_orthogonal_map():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 300))
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    np.testing.assert_allclose(cca_fit(x, q @ x, k=4, r=1e-10).correlations, 1.0, atol=1e-4)


def test_matches_scipy_reference():
    rng = np.random.default_rng(2)
    z = rng.standard_normal((2, 400))
    x = rng.standard_normal((6, 2)) @ z + rng.standard_normal((6, 400))
    y = rng.standard_normal((5, 2)) @ z + rng.standard_normal((5, 400))
    model = cca_fit(x, y, k=5, r=1e-3)
    np.testing.assert_allclose(model.correlations, scipy_cca(x, y, 1e-3)[:5], atol=1e-10)


def test_whitening_and_transform_properties():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 500))
    y = x[:4] + 0.5 * rng.standard_normal((4, 500))
    model = cca_fit(x, y, k=4, r=1e-4)
    cxx, cyy = centred_cov(model, x, y)
    assert model.whitening_error(cxx, cyy) < 1e-6
    tx = cca_transform(model, x, "x")
    ty = cca_transform(model, y, "y")
    n = x.shape[1]
    # unit variance under the ridged covariance, so the raw variance falls short by r * |w|^2
    raw = np.diag(tx @ tx.T) / (n - 1)
    np.testing.assert_allclose(raw, 1.0 - model.ridge * np.sum(model.w_x ** 2, axis=0), atol=1e-10)
    np.testing.assert_allclose(raw, 1.0, atol=1e-3)
    np.testing.assert_allclose(np.diag(tx @ ty.T) / (n - 1), model.correlations, atol=1e-6)
    zero = cca_transform(model, np.repeat(model.mean_x[:, None], 3, axis=1), "x")
    np.testing.assert_allclose(zero, 0.0, atol=1e-12)


def test_independent_views_have_small_correlation():
    rng = np.random.default_rng(4)
    model = cca_fit(rng.standard_normal((5, 10_000)), rng.standard_normal((5, 10_000)), k=5)
    assert total_correlation(model) < 0.25


def test_planted_model_recovery():
    data, truth = generate(SynthSpec(n_pairs=5000, latent_dim=3, audio_dim=20, text_dim=30, noise=0.1, seed=5))
    model = cca_fit(data.audio.T, data.text.T, k=3)
    np.testing.assert_allclose(model.correlations, truth.population_correlations, atol=0.03)
    assert total_correlation(model) == pytest.approx(truth.population_correlations.sum(), abs=0.1)


def test_symmetry_in_views():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 100))
    y = x[:3] + rng.standard_normal((3, 100))
    a = cca_fit(x, y, k=3).correlations
    b = cca_fit(y, x, k=3).correlations
    np.testing.assert_allclose(a, b, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_invariant_under_invertible_reparameterisation(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 400))
    y = x + rng.standard_normal((3, 400))
    m = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    a = cca_fit(x, y, k=3, r=0.0).correlations
    b = cca_fit(m @ x, y, k=3, r=0.0).correlations
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_total_correlation_monotone_in_k():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((6, 200))
    model = cca_fit(x, x[::-1] + rng.standard_normal((6, 200)), k=6)
    totals = [total_correlation(model, k) for k in range(1, 7)]
    assert all(b >= a for a, b in zip(totals, totals[1:]))
    assert np.all(model.correlations <= 1 + 1e-6)


def test_errors():
    x = np.zeros((3, 10))
    with pytest.raises(ComponentError):
        cca_fit(np.random.default_rng(0).standard_normal((3, 10)), np.random.default_rng(1).standard_normal((2, 10)), k=3)
    with pytest.raises(DimensionError):
        cca_fit(x, np.zeros((3, 9)))
    model = cca_fit(np.random.default_rng(0).standard_normal((3, 20)),
                    np.random.default_rng(1).standard_normal((3, 20)), k=2)
    with pytest.raises(DimensionError):
        cca_transform(model, np.zeros((4, 2)), "x")
    with pytest.raises(ComponentError):
        cca_transform(model, np.zeros((3, 2)), "x", k=3)
    with pytest.raises(ValueError):
        cca_transform(model, np.zeros((3, 2)), "z")
