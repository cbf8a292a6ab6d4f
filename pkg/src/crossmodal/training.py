"""Trainers: joint CNN + deep CCA, feature-input deep CCA, linear CCA and the
margin-embedding (MVE) baseline.

All networks are batch-first.  The CCA head works on feature-major
``(D, N)`` views, so branch outputs are transposed on the way in and the
gradients on the way out.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .cca import CcaModel, cca_fit, cca_transform
from .cca_loss import CcaLoss
from .dataset import PairedDataset
from .errors import ComponentError, ConfigError, DimensionError, DivergenceError, InputError

log = logging.getLogger(__name__)

VARIANTS = ("joint-dcca", "feature-dcca", "linear-cca", "mve")
COMBINE_MODES = ("average", "first", "max-score")
DEFAULT_EPOCHS = {"joint-dcca": 200, "feature-dcca": 400, "mve": 1280, "linear-cca": 1}
INFER_CHUNK = 128

__all__ = [
    "PairedDataset", "TrainConfig", "TrainedModel", "RMSProp", "optimizer_step",
    "train_joint_dcca", "train_feature_dcca", "train_linear_cca", "train_mve", "train",
]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1000
    epochs: int = 200
    learning_rate: float = 1e-3
    rms_decay: float = 0.9
    rms_eps: float = 1e-7
    ridge: float = 1e-4
    shared_dim: int = 30
    hidden: int = 1024
    margin: float = 0.3
    cnn_variant: str = "mfcc"
    standardize: bool = True
    combine: str = "average"
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.batch_size >= 2, f"batch_size must be >= 2, got {self.batch_size}"),
            (self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}"),
            (self.learning_rate > 0, f"learning_rate must be positive, got {self.learning_rate}"),
            (0 <= self.rms_decay < 1, f"rms_decay must lie in [0, 1), got {self.rms_decay}"),
            (self.rms_eps > 0, f"rms_eps must be positive, got {self.rms_eps}"),
            (self.ridge >= 0, f"ridge must be non-negative, got {self.ridge}"),
            (self.shared_dim >= 1, f"shared_dim must be >= 1, got {self.shared_dim}"),
            (self.hidden >= 1, f"hidden must be >= 1, got {self.hidden}"),
            (self.margin > 0, f"margin must be positive, got {self.margin}"),
            (self.cnn_variant in ("mfcc", "mel"), f"cnn_variant must be mfcc or mel, got {self.cnn_variant!r}"),
            (self.combine in COMBINE_MODES, f"combine must be one of {COMBINE_MODES}, got {self.combine!r}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown training option(s): {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


@dataclass
class Standardizer:
    """Per-feature (vectors) or per-band (spectrograms) z-score with training statistics."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        axes = (0, 2) if x.ndim == 3 else (0,)
        mean = x.mean(axis=axes)
        std = x.std(axis=axes)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean, std)

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 3:
            return (x - self.mean[None, :, None]) / self.std[None, :, None]
        return (x - self.mean) / self.std


@dataclass
class TrainedModel:
    """Trained mapping of both views into a shared space.

    ``variant`` fixes which parts exist: DCCA variants have two networks and a
    final :class:`CcaModel`; ``linear-cca`` only the CcaModel; ``mve`` only the
    networks.  ``loss_trace`` holds ``(epoch, batch, objective)`` rows, the
    objective being the batch correlation (DCCA) or the hinge loss (MVE).
    """

    variant: str
    config: TrainConfig
    audio_net: nn.Network | None = None
    text_net: nn.Network | None = None
    cca: CcaModel | None = None
    audio_norm: Standardizer | None = None
    text_norm: Standardizer | None = None
    loss_trace: list = field(default_factory=list)

    @property
    def n_components(self) -> int:
        if self.cca is not None:
            return self.cca.n_components
        return int(self.text_net.spec.output_shape[0])

    def audio_input_shape(self) -> tuple:
        if self.audio_net is not None:
            shape = tuple(self.audio_net.spec.input_shape)
            return shape[1:] if self.variant == "joint-dcca" else shape
        return (self.cca.w_x.shape[0],)

    def text_input_dim(self) -> int:
        if self.text_net is not None:
            return int(self.text_net.spec.input_shape[0])
        return self.cca.w_y.shape[0]

    def branch_output(self, data: np.ndarray, side: str) -> np.ndarray:
        """Network output (before the final CCA projection), batch-first."""
        data = np.asarray(data, dtype=np.float64)
        if side not in ("audio", "text"):
            raise ValueError(f"side must be 'audio' or 'text', got {side!r}")
        if side == "audio" and self.audio_net is None and data.ndim > 2:
            data = data.reshape(data.shape[0], -1)
        expected = self.audio_input_shape() if side == "audio" else (self.text_input_dim(),)
        if data.shape[1:] != tuple(expected):
            raise DimensionError(f"{side} input has per-item shape {data.shape[1:]}, model expects {expected}")
        norm = self.audio_norm if side == "audio" else self.text_norm
        if norm is not None:
            data = norm.apply(data)
        net = self.audio_net if side == "audio" else self.text_net
        if net is None:
            return data
        if self.variant == "joint-dcca" and side == "audio":
            data = data[:, None]
        return infer(net, data)

    def embed(self, data: np.ndarray, side: str, k: int | None = None) -> np.ndarray:
        """Shared-space coordinates ``(N, k)`` of a batch of raw inputs."""
        out = self.branch_output(data, side)
        if self.cca is not None:
            return cca_transform(self.cca, out.T, "x" if side == "audio" else "y", k).T
        k = out.shape[1] if k is None else k
        if not 1 <= k <= out.shape[1]:
            raise ComponentError(f"model has {out.shape[1]} components, {k} requested")
        return out[:, :k]


def infer(net: nn.Network, x: np.ndarray, chunk: int = INFER_CHUNK) -> np.ndarray:
    """Inference-mode forward pass in chunks (bounds the convolution buffers)."""
    parts = [net.forward(x[i:i + chunk], "infer") for i in range(0, x.shape[0], chunk)]
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------- optimiser


class RMSProp:
    """Diagonal RMSProp: ``c <- rho c + (1 - rho) g^2``, ``p <- p - lr g / (sqrt(c) + eps)``."""

    def __init__(self, learning_rate=1e-3, decay=0.9, eps=1e-7):
        self.learning_rate = learning_rate
        self.decay = decay
        self.eps = eps
        self.state: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        """Update ``params`` in place from matching ``(name, array)`` lists of parameters and gradients."""
        for (name, p), (gname, g) in zip(params, grads):
            if name != gname:
                raise ValueError(f"parameter/gradient mismatch: {name} vs {gname}")
            if g is None:
                raise ValueError(f"no gradient for {name}; run backward first")
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for parameter {name}")
            cache = self.state.get(name)
            if cache is None:
                cache = self.state[name] = np.zeros_like(p)
            cache *= self.decay
            cache += (1.0 - self.decay) * g * g
            p -= self.learning_rate * g / (np.sqrt(cache) + self.eps)


def optimizer_step(states: RMSProp, networks, cfg: TrainConfig | None = None) -> RMSProp:
    """Apply one RMSProp step to every trainable parameter of ``networks``.

    Gradients are those left by the networks' last ``backward``; they are
    treated as gradients of a loss to be minimised.
    """
    if states is None:
        cfg = cfg or TrainConfig()
        states = RMSProp(cfg.learning_rate, cfg.rms_decay, cfg.rms_eps)
    for tag, net in networks:
        params = [(f"{tag}/{k}", v) for k, v in net.parameters()]
        grads = [(f"{tag}/{k}", v) for k, v in net.gradients()]
        states.step(params, grads)
    return states


# ---------------------------------------------------------------- batching


def batch_slices(n: int, batch_size: int, min_size: int) -> list[slice]:
    """Consecutive slices of ``range(n)``.

    A trailing remainder smaller than ``min_size`` is merged into the previous
    batch so every item is still visited once per epoch.
    """
    bounds = list(range(0, n, batch_size)) + [n]
    slices = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]
    if len(slices) > 1 and slices[-1].stop - slices[-1].start < min_size:
        log.info("merging trailing batch of %d items into the previous batch",
                 slices[-1].stop - slices[-1].start)
        last = slices.pop()
        slices[-1] = slice(slices[-1].start, last.stop)
    return slices


def _seeds(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def _check_finite(value, epoch, batch):
    if not np.isfinite(value):
        raise DivergenceError(f"objective became non-finite at epoch {epoch}, batch {batch}")


# ---------------------------------------------------------------- deep CCA


def _dcca_loop(audio_net, text_net, xa, xt, cfg: TrainConfig, rng) -> list:
    loss = CcaLoss(cfg.ridge)
    opt = RMSProp(cfg.learning_rate, cfg.rms_decay, cfg.rms_eps)
    trace = []
    n = xa.shape[0]
    slices = batch_slices(n, cfg.batch_size, 2 * cfg.shared_dim)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b, sl in enumerate(slices):
            idx = order[sl]
            if idx.size < 2:
                warnings.warn(f"skipping batch of {idx.size} item(s) at epoch {epoch}", stacklevel=2)
                continue
            fa = audio_net.forward(xa[idx], "train")
            ft = text_net.forward(xt[idx], "train")
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                try:
                    corr = loss.forward(fa.T, ft.T)
                except ArithmeticError as exc:
                    raise DivergenceError(f"CCA head failed at epoch {epoch}, batch {b}: {exc}") from exc
            _check_finite(corr, epoch, b)
            ga, gt = loss.backward()
            # ascend the correlation: descend its negation
            audio_net.backward(-ga.T)
            text_net.backward(-gt.T)
            optimizer_step(opt, [("audio", audio_net), ("text", text_net)])
            trace.append((epoch, b, corr))
    return trace


def _prepare(x, standardize):
    norm = Standardizer.fit(x) if standardize else None
    return (norm.apply(x) if norm else x), norm


def _finish_dcca(variant, cfg, audio_net, text_net, xa, xt, audio_norm, text_norm, trace, audio_channel):
    fa = infer(audio_net, xa[:, None] if audio_channel else xa)
    ft = infer(text_net, xt)
    final = cca_fit(fa.T, ft.T, k=cfg.shared_dim, r=cfg.ridge)
    return TrainedModel(variant, cfg, audio_net, text_net, final, audio_norm, text_norm, trace)


def _check_size(data: PairedDataset):
    if len(data) < 2:
        raise InputError("need at least 2 training pairs")


def train_feature_dcca(data: PairedDataset, cfg: TrainConfig) -> TrainedModel:
    """Deep CCA on fixed feature vectors: one sub-DNN per view and the CCA head."""
    if data.is_spectrogram:
        raise InputError("feature-dcca needs vector audio features; use joint-dcca for spectrograms")
    _check_size(data)
    xa, audio_norm = _prepare(data.audio, cfg.standardize)
    xt, text_norm = _prepare(data.text, cfg.standardize)
    s_audio, s_text, s_order = _seeds(cfg.seed, 3)
    audio_net = nn.build_network(nn.build_sub_dnn(xa.shape[1], cfg.shared_dim, cfg.hidden), s_audio)
    text_net = nn.build_network(nn.build_sub_dnn(xt.shape[1], cfg.shared_dim, cfg.hidden), s_text)
    trace = _dcca_loop(audio_net, text_net, xa, xt, cfg, np.random.default_rng(s_order))
    return _finish_dcca("feature-dcca", cfg, audio_net, text_net, xa, xt, audio_norm, text_norm, trace, False)


def joint_audio_spec(bands_frames: tuple, cfg: TrainConfig) -> nn.NetworkSpec:
    """Audio CNN followed by the audio sub-DNN, as one network."""
    cnn = nn.build_audio_cnn(cfg.cnn_variant)
    if tuple(cnn.input_shape[1:]) != tuple(bands_frames):
        raise DimensionError(
            f"{cfg.cnn_variant} CNN expects {cnn.input_shape[1]}x{cnn.input_shape[2]} spectrograms, "
            f"got {bands_frames[0]}x{bands_frames[1]}"
        )
    head = nn.build_sub_dnn(cnn.output_shape[0], cfg.shared_dim, cfg.hidden)
    return nn.NetworkSpec(cnn.input_shape, cnn.layers + head.layers)


class _WithChannel:
    """Presents ``(N, bands, frames)`` batches to a CNN as ``(N, 1, bands, frames)``."""

    def __init__(self, net):
        self.net = net

    def forward(self, x, mode):
        return self.net.forward(x[:, None], mode)

    def backward(self, g):
        return self.net.backward(g)

    def parameters(self):
        return self.net.parameters()

    def gradients(self):
        return self.net.gradients()


def train_joint_dcca(data: PairedDataset, cfg: TrainConfig) -> TrainedModel:
    """End-to-end training: the CCA gradient flows through the sub-DNN into the convolutions."""
    if not data.is_spectrogram:
        raise InputError("joint-dcca needs spectrogram audio input")
    _check_size(data)
    spec = joint_audio_spec(data.audio_shape, cfg)
    xa, audio_norm = _prepare(data.audio, cfg.standardize)
    xt, text_norm = _prepare(data.text, cfg.standardize)
    s_audio, s_text, s_order = _seeds(cfg.seed, 3)
    audio_net = nn.build_network(spec, s_audio)
    text_net = nn.build_network(nn.build_sub_dnn(xt.shape[1], cfg.shared_dim, cfg.hidden), s_text)

    trace = _dcca_loop(_WithChannel(audio_net), text_net, xa, xt, cfg, np.random.default_rng(s_order))
    return _finish_dcca("joint-dcca", cfg, audio_net, text_net, xa, xt, audio_norm, text_norm, trace, True)


def train_linear_cca(data: PairedDataset, k: int = 30, r: float = 1e-4,
                     cfg: TrainConfig | None = None) -> TrainedModel:
    """Linear CCA baseline: exactly :func:`cca_fit` on the raw views."""
    audio = data.audio.reshape(len(data), -1)
    model = cca_fit(audio.T, data.text.T, k=k, r=r)
    if cfg is None:
        cfg = TrainConfig(ridge=r, shared_dim=k, epochs=1)
    return TrainedModel("linear-cca", cfg, cca=model, loss_trace=[(0, 0, float(np.sum(model.correlations)))])


# ---------------------------------------------------------------- MVE


def _cosine_and_grads(a, b, eps=1e-12):
    """Row-wise cosine of ``a`` and ``b`` with its gradients w.r.t. each."""
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    na = np.maximum(na, eps)
    nb = np.maximum(nb, eps)
    cos = np.sum(a * b, axis=1, keepdims=True) / (na * nb)
    da = b / (na * nb) - cos * a / na ** 2
    db = a / (na * nb) - cos * b / nb ** 2
    return cos[:, 0], da, db


def mve_loss(a, t, a_neg, t_neg, margin):
    """Symmetric triplet hinge on cosine similarity, averaged over the batch.

    ``max(0, m - cos(a, t) + cos(a, t_neg)) + max(0, m - cos(t, a) + cos(t, a_neg))``

    Returns the loss and its gradients with respect to ``a, t, a_neg, t_neg``.
    """
    n = a.shape[0]
    c_pos, dpa, dpt = _cosine_and_grads(a, t)
    c_at, dat_a, dat_tn = _cosine_and_grads(a, t_neg)
    c_ta, dta_t, dta_an = _cosine_and_grads(t, a_neg)
    h1 = margin - c_pos + c_at
    h2 = margin - c_pos + c_ta
    act1 = (h1 > 0)[:, None] / n
    act2 = (h2 > 0)[:, None] / n
    loss = float((np.maximum(h1, 0).sum() + np.maximum(h2, 0).sum()) / n)
    ga = act1 * (dat_a - dpa) - act2 * dpa
    gt = act2 * (dta_t - dpt) - act1 * dpt
    ga_neg = act2 * dta_an
    gt_neg = act1 * dat_tn
    return loss, ga, gt, ga_neg, gt_neg


def mve_negatives(pair_ids, rng) -> np.ndarray:
    """One fixed non-paired partner per item (never sharing the item's pair id)."""
    pids = np.asarray(pair_ids)
    n = len(pids)
    if len(set(pair_ids)) < 2:
        raise InputError("MVE needs at least two distinct pairs to draw negatives")
    neg = rng.integers(0, n - 1, size=n)
    neg = neg + (neg >= np.arange(n))            # uniform over j != i
    clash = pids[neg] == pids
    while clash.any():
        neg[clash] = rng.integers(0, n, size=int(clash.sum()))
        clash = pids[neg] == pids
    return neg


def train_mve(data: PairedDataset, cfg: TrainConfig, widths=(512, 256, 128)) -> TrainedModel:
    """Twin tanh branches trained with the symmetric triplet hinge."""
    if data.is_spectrogram:
        raise InputError("mve needs vector features for both views")
    _check_size(data)
    xa, audio_norm = _prepare(data.audio, cfg.standardize)
    xt, text_norm = _prepare(data.text, cfg.standardize)
    s_audio, s_text, s_order, s_neg = _seeds(cfg.seed, 4)
    audio_net = nn.build_network(nn.build_mve_branch(xa.shape[1], widths), s_audio)
    text_net = nn.build_network(nn.build_mve_branch(xt.shape[1], widths), s_text)
    neg = mve_negatives(data.pair_ids, np.random.default_rng(s_neg))
    opt = RMSProp(cfg.learning_rate, cfg.rms_decay, cfg.rms_eps)
    rng = np.random.default_rng(s_order)
    n = len(data)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for b, sl in enumerate(batch_slices(n, cfg.batch_size, 2)):
            idx = order[sl]
            m = idx.size
            # positives and negatives share one forward pass per branch
            fa = audio_net.forward(np.concatenate([xa[idx], xa[neg[idx]]]), "train")
            ft = text_net.forward(np.concatenate([xt[idx], xt[neg[idx]]]), "train")
            value, ga, gt, ga_neg, gt_neg = mve_loss(fa[:m], ft[:m], fa[m:], ft[m:], cfg.margin)
            _check_finite(value, epoch, b)
            audio_net.backward(np.concatenate([ga, ga_neg]))
            text_net.backward(np.concatenate([gt, gt_neg]))
            optimizer_step(opt, [("audio", audio_net), ("text", text_net)])
            trace.append((epoch, b, value))
    return TrainedModel("mve", cfg, audio_net, text_net, None, audio_norm, text_norm, trace)


# ---------------------------------------------------------------- dispatch


def train(data: PairedDataset, variant: str, cfg: TrainConfig) -> TrainedModel:
    if variant == "joint-dcca":
        return train_joint_dcca(data, cfg)
    if variant == "feature-dcca":
        return train_feature_dcca(data, cfg)
    if variant == "linear-cca":
        return train_linear_cca(data, k=cfg.shared_dim, r=cfg.ridge, cfg=cfg)
    if variant == "mve":
        return train_mve(data, cfg)
    raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def epoch_means(trace) -> np.ndarray:
    """Mean objective per epoch, in epoch order."""
    if not trace:
        return np.zeros(0)
    epochs = np.array([row[0] for row in trace])
    values = np.array([row[2] for row in trace])
    return np.array([values[epochs == e].mean() for e in np.unique(epochs)])


def format_trace(trace) -> str:
    """Tab-separated ``epoch, batch, objective`` rows with a header; floats via ``repr``."""
    rows = ["epoch\tbatch\tobjective"] + [f"{e}\t{b}\t{float(v)!r}" for e, b, v in trace]
    return "\n".join(rows) + "\n"
