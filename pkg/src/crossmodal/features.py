"""Audio and text feature front end.

Audio: 16-bit PCM WAV -> mono -> 22050 Hz -> Hann-windowed STFT (2048 / 1024,
center padded) -> Slaney mel filterbank -> log -> optional orthonormal DCT-II.
Text: precomputed document vectors in a delimited text format.
"""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import FormatError, InputError

SAMPLE_RATE = 22050
FRAME_LENGTH = 2048
HOP = 1024
N_MELS = 96
N_MFCC = 20
LOG_FLOOR = 1e-10
TEXT_DIM = 300
RESAMPLE_TAPS = 64
KAISER_BETA = 8.6


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")
        if np.ndim(self.samples) != 1:
            raise InputError("only mono clips are supported")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # (bands, frames)
    kind: str  # "mfcc" or "mel"
    frame_length: int = FRAME_LENGTH
    hop: int = HOP

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class TextFeature:
    id: str
    vector: np.ndarray


# ---------------------------------------------------------------- WAV I/O


def read_wav(path) -> AudioClip:
    """Read a PCM16 WAV file; stereo is averaged to mono, samples scaled to [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{path}: not a readable WAV file ({exc})") from exc
    if width != 2:
        raise FormatError(f"{path}: only 16-bit PCM is supported (sample width {width} bytes)")
    if channels not in (1, 2):
        raise FormatError(f"{path}: only mono or stereo is supported ({channels} channels)")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if data.size % channels:
        raise FormatError(f"{path}: truncated sample data")
    data = data.reshape(-1, channels).mean(axis=1)
    return AudioClip(data, rate)


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(np.round(np.asarray(clip.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(clip.sample_rate))
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------- resampling


def resample(clip: AudioClip, target_rate: int = SAMPLE_RATE) -> AudioClip:
    """Polyphase windowed-sinc resampling.

    The anti-aliasing filter is a Kaiser-windowed sinc spanning 64 samples at
    the lower of the two rates.  Edges are handled by removing and restoring a
    linear trend, so constant signals come through unchanged.
    """
    if target_rate <= 0:
        raise InputError(f"target rate must be positive, got {target_rate}")
    if len(clip.samples) == 0:
        raise InputError("cannot resample an empty clip")
    if clip.sample_rate == target_rate:
        return AudioClip(np.array(clip.samples, dtype=np.float64), target_rate)
    g = math.gcd(int(clip.sample_rate), int(target_rate))
    up, down = int(target_rate) // g, int(clip.sample_rate) // g
    ratio = max(up, down)
    taps = signal.firwin(RESAMPLE_TAPS * ratio + 1, 1.0 / ratio, window=("kaiser", KAISER_BETA))
    out = signal.resample_poly(np.asarray(clip.samples, dtype=np.float64), up, down,
                               window=taps, padtype="line")
    return AudioClip(out, int(target_rate))


# ---------------------------------------------------------------- spectra


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-300) / min_log_hz) / logstep,
                    f / f_sp)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_filterbank(sample_rate=SAMPLE_RATE, n_fft=FRAME_LENGTH, n_mels=N_MELS, fmin=0.0, fmax=None):
    """Triangular filters equally spaced on the mel scale, each with unit area in Hz.

    Returns ``(weights, edges)`` with weights of shape ``(n_mels, n_fft // 2 + 1)``
    and the ``n_mels + 2`` filter edge frequencies in Hz.
    """
    if fmax is None:
        fmax = sample_rate / 2.0
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights *= 2.0 / (upper - lower)
    return weights, edges


def dct_matrix(n_out: int, n_in: int) -> np.ndarray:
    """First ``n_out`` rows of the orthonormal DCT-II matrix of size ``n_in``."""
    k = np.arange(n_out)[:, None]
    m = np.arange(n_in)[None, :]
    mat = np.sqrt(2.0 / n_in) * np.cos(np.pi * k * (2 * m + 1) / (2 * n_in))
    mat[0] /= np.sqrt(2.0)
    return mat


def n_frames(n_samples: int, hop: int = HOP) -> int:
    """Frame count for center-padded framing: one frame per hop-spaced centre inside the signal."""
    return -(-n_samples // hop)


def power_spectrogram(samples, frame_length=FRAME_LENGTH, hop=HOP) -> np.ndarray:
    """``|STFT|^2`` with a periodic Hann window, frames centred at ``k * hop``; ``(bins, frames)``."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < frame_length:
        raise InputError(f"clip has {samples.size} samples, shorter than one frame ({frame_length})")
    count = n_frames(samples.size, hop)
    half = frame_length // 2
    padded = np.pad(samples, (half, half), mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame_length)[::hop][:count]
    window = signal.get_window("hann", frame_length, fftbins=True)
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def _check_rate(clip: AudioClip):
    if clip.sample_rate != SAMPLE_RATE:
        raise InputError(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate} Hz; resample first")


def log_mel(clip: AudioClip, n_mels=N_MELS) -> np.ndarray:
    power = power_spectrogram(clip.samples)
    weights, _ = mel_filterbank(clip.sample_rate, FRAME_LENGTH, n_mels)
    return np.log(np.maximum(weights @ power, LOG_FLOOR))


def mel_spectrogram(clip: AudioClip) -> Spectrogram:
    """96-band log-mel spectrogram (natural log of power, floored at 1e-10)."""
    _check_rate(clip)
    return Spectrogram(log_mel(clip), "mel")


def mfcc(clip: AudioClip, n_mfcc: int = N_MFCC) -> Spectrogram:
    """First 20 orthonormal DCT-II coefficients of the 96-band log-mel spectrogram."""
    _check_rate(clip)
    logmel = log_mel(clip)
    return Spectrogram(dct_matrix(n_mfcc, logmel.shape[0]) @ logmel, "mfcc")


def decimate4(spec: Spectrogram, frames: int = 161, factor: int = 4) -> list[Spectrogram]:
    """Split into ``factor`` interleaved sub-sequences: sub-sequence ``j`` keeps frames ``j, j+4, ...``."""
    needed = factor * frames
    if spec.n_frames < needed:
        raise InputError(f"need at least {needed} frames to decimate, got {spec.n_frames}")
    return [
        Spectrogram(spec.values[:, j:needed:factor].copy(), spec.kind, spec.frame_length, spec.hop * factor)
        for j in range(factor)
    ]


# ---------------------------------------------------------------- delimited vectors


def load_vectors(path, dim: int | None = None) -> list[tuple[str, np.ndarray]]:
    """Read ``id<TAB>v1,v2,...`` records.  Blank lines and ``#`` comments are skipped.

    ``dim`` fixes the expected width; otherwise the first record sets it.
    """
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                item_id, values = line.split("\t", 1)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: expected 'id<TAB>values'") from None
            try:
                vec = np.array([float(v) for v in values.split(",")], dtype=np.float64)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric value in row {item_id!r}") from None
            if dim is None:
                dim = vec.size
            if vec.size != dim:
                raise FormatError(f"{path}:{lineno}: row {item_id!r} has width {vec.size}, expected {dim}")
            if not np.all(np.isfinite(vec)):
                raise FormatError(f"{path}:{lineno}: row {item_id!r} contains non-finite values")
            if item_id in seen:
                raise FormatError(f"{path}:{lineno}: duplicate id {item_id!r}")
            seen.add(item_id)
            records.append((item_id, vec))
    return records


def format_vectors(records) -> str:
    """``id<TAB>v1,v2,...`` lines; ``repr`` of each float round-trips bit-exactly."""
    lines = []
    for item_id, vec in records:
        if "\t" in item_id or "\n" in item_id:
            raise FormatError(f"id {item_id!r} contains a tab or newline")
        lines.append(item_id + "\t" + ",".join(repr(float(v)) for v in np.asarray(vec).ravel()))
    return "\n".join(lines) + "\n"


def write_vectors(path, records) -> None:
    Path(path).write_text(format_vectors(records), encoding="utf-8")


def load_text_features(path, dim: int = TEXT_DIM) -> list[TextFeature]:
    return [TextFeature(i, v) for i, v in load_vectors(path, dim)]
