"""Synthetic paired data with planted cross-modal structure.

Each pair shares a latent ``z`` in R^L.  Items are split evenly over
categories, and each category shifts the latent mean, so category-level
retrieval has something to find.

* linear:      ``x = A z + sigma e``,  ``y = B z + sigma e``
* nonlinear:   ``x = A h(Rz) + sigma e`` where ``h`` is an elementwise cube
  standardised to zero mean / unit variance and ``R`` a rotation.  The
  cube cannot be undone by a linear map, so linear CCA stays below the
  optimum while a network that learns the cube root can reach it.
* spectrogram: ``A``'s columns are smooth band x frame fields; the audio
  view is reshaped to ``(bands, frames)``.  Combines with either of the above.

Population canonical correlations follow in closed form from the second
moments of ``(h, z)`` and the loadings; see :func:`population_correlations`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .dataset import PairedDataset
from .errors import ConfigError


@dataclass(frozen=True)
class SynthSpec:
    n_pairs: int = 400
    latent_dim: int = 3
    audio_dim: int = 64
    text_dim: int = 300
    noise: float = 0.1
    nonlinear: bool = False
    spectrogram_shape: tuple | None = None
    n_categories: int = 20
    category_spread: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 2:
            raise ConfigError("need at least 2 pairs")
        if self.noise < 0:
            raise ConfigError(f"noise must be non-negative, got {self.noise}")
        if self.n_categories < 1:
            raise ConfigError("need at least one category")
        if self.latent_dim < 1:
            raise ConfigError("latent dimension must be positive")
        if self.category_spread < 0:
            raise ConfigError("category spread must be non-negative")
        if self.spectrogram_shape is not None:
            shape = tuple(int(s) for s in self.spectrogram_shape)
            if len(shape) != 2 or min(shape) < 1:
                raise ConfigError(f"spectrogram shape must be (bands, frames), got {self.spectrogram_shape}")
            object.__setattr__(self, "spectrogram_shape", shape)
        if self.latent_dim > min(self.audio_features, self.text_dim):
            raise ConfigError(
                f"latent dim {self.latent_dim} exceeds a view dimension "
                f"(audio {self.audio_features}, text {self.text_dim})"
            )

    @property
    def audio_features(self) -> int:
        if self.spectrogram_shape is not None:
            return self.spectrogram_shape[0] * self.spectrogram_shape[1]
        return self.audio_dim

    @property
    def mode(self) -> str:
        if self.spectrogram_shape is not None:
            return "spectrogram"
        return "nonlinear" if self.nonlinear else "linear"


@dataclass(frozen=True)
class SynthTruth:
    """Generating parameters and the correlations they imply.

    ``population_correlations`` are the canonical correlations between the
    observed views.  ``oracle_correlations`` are those of the same model with
    the audio nonlinearity removed (``h(Rz)`` replaced by ``Rz``), i.e. what
    an ideal nonlinear audio map could reach; they coincide in linear mode.
    """

    audio_loading: np.ndarray
    text_loading: np.ndarray
    rotation: np.ndarray
    category_means: np.ndarray
    latent_cov: np.ndarray
    population_correlations: np.ndarray
    oracle_correlations: np.ndarray
    extra: dict = field(default_factory=dict)


def population_correlations(a, b, s_hh, s_zz, s_hz, sigma) -> np.ndarray:
    """Canonical correlations of ``x = A h + sigma e``, ``y = B z + sigma e``.

    With ``G_a = A^T A`` and ``G_b = B^T B`` the squared correlations are the
    eigenvalues of the small matrix
    ``(S_hh G_a + s^2 I)^-1 S_hz G_b (S_zz G_b + s^2 I)^-1 S_hz^T G_a``,
    obtained from ``C_xx^-1 C_xy C_yy^-1 C_yx`` by the push-through identity.
    """
    a, b = np.asarray(a, float), np.asarray(b, float)
    ga, gb = a.T @ a, b.T @ b
    p, q = ga.shape[0], gb.shape[0]
    s2 = float(sigma) ** 2
    left = np.linalg.solve(s_hh @ ga + s2 * np.eye(p), s_hz)
    right = np.linalg.solve(s_zz @ gb + s2 * np.eye(q), s_hz.T)
    eig = np.linalg.eigvals(left @ gb @ right @ ga).real
    rho = np.sqrt(np.clip(eig, 0.0, 1.0))
    return np.sort(rho)[::-1][: min(p, q)]


def _orthonormal(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def _gains(n):
    # strongest latent first, so the planted correlations are spread out
    return np.linspace(1.0, 0.5, n)


def _cube_moments(means):
    """Second moments of ``(u^3, u)`` for ``u ~ N(m_c, I)`` mixed evenly over rows ``m_c`` of ``means``."""
    g = means ** 3 + 3 * means                          # E[u^3 | c]
    m4 = means ** 4 + 6 * means ** 2 + 3                # E[u^4 | c]
    m6 = means ** 6 + 15 * means ** 4 + 45 * means ** 2 + 15
    e3, e1 = g.mean(axis=0), means.mean(axis=0)
    cov33 = g.T @ g / len(means) - np.outer(e3, e3)
    np.fill_diagonal(cov33, m6.mean(axis=0) - e3 ** 2)
    cov31 = g.T @ means / len(means) - np.outer(e3, e1)
    np.fill_diagonal(cov31, m4.mean(axis=0) - e3 * e1)
    return e3, cov33, cov31


def generate(spec: SynthSpec) -> tuple[PairedDataset, SynthTruth]:
    """Draw a dataset from ``spec``; a pure function of the spec."""
    rng = np.random.default_rng(spec.seed)
    L, n = spec.latent_dim, spec.n_pairs
    means = spec.category_spread * rng.standard_normal((spec.n_categories, L))
    centred = means - means.mean(axis=0)
    s_zz = np.eye(L) + centred.T @ centred / spec.n_categories

    if spec.spectrogram_shape is not None:
        bands, frames = spec.spectrogram_shape
        fields = np.stack([
            ndimage.gaussian_filter(rng.standard_normal((bands, frames)), sigma=(1.5, 4.0), mode="wrap").ravel()
            for _ in range(L)
        ], axis=1)
        audio_loading = fields / np.linalg.norm(fields, axis=0) * _gains(L)
    else:
        audio_loading = _orthonormal(rng, spec.audio_dim, L) * _gains(L)
    text_loading = _orthonormal(rng, spec.text_dim, L) * _gains(L)[::-1]
    rotation = _orthonormal(rng, L, L)

    labels = rng.permutation(np.arange(n) % spec.n_categories)
    z = means[labels] + rng.standard_normal((n, L))
    u = z @ rotation.T                         # u = R z; u | c ~ N(R mu_c, I)

    # in the rotated frame the moments factor per coordinate
    s_uu = rotation @ s_zz @ rotation.T
    s_uz = rotation @ s_zz
    oracle = population_correlations(audio_loading, text_loading, s_uu, s_zz, s_uz, spec.noise)
    if spec.nonlinear:
        e3, cov33, cov31 = _cube_moments(means @ rotation.T)
        scale = np.sqrt(np.diag(cov33))
        h = (u ** 3 - e3) / scale
        s_hh = cov33 / np.outer(scale, scale)
        s_hz = (cov31 / scale[:, None]) @ rotation        # Cov(h, z) = Cov(h, u) R
        population = population_correlations(audio_loading, text_loading, s_hh, s_zz, s_hz, spec.noise)
    else:
        h = u
        population = oracle

    audio = h @ audio_loading.T + spec.noise * rng.standard_normal((n, spec.audio_features))
    text = z @ text_loading.T + spec.noise * rng.standard_normal((n, spec.text_dim))
    if spec.spectrogram_shape is not None:
        audio = audio.reshape(n, *spec.spectrogram_shape)

    width = len(str(n - 1))
    ids = tuple(f"pair{i:0{width}d}" for i in range(n))
    cat_width = len(str(spec.n_categories - 1))
    cats = np.array([f"mood{c:0{cat_width}d}" for c in labels])
    truth = SynthTruth(audio_loading, text_loading, rotation, means, s_zz, population, oracle)
    return PairedDataset(audio, text, ids, cats), truth
