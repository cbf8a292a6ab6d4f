"""On-disk formats.

Feature file (little-endian)::

    magic  b"XMFT"  | version u16 | kind u16 | rows u64 | cols u64 | rows*cols f64, row-major

Model file: a container of named sections, sorted by name::

    magic  b"XMMD"  | version u16 | n_sections u32
    per section: name_len u16 | name utf-8 | type u8 (0 array, 1 text) | payload
    array payload: ndim u8 | dims u64 * ndim | f64 data, C order
    text payload:  n_bytes u64 | utf-8

The ``meta`` text section holds the variant, training config, seed and
network layouts as JSON with sorted keys, so save -> load -> save is
byte-identical.

Manifest: tab-separated UTF-8 with a header row; ``#`` lines are comments.
Columns ``id, audio, text, category, split``; references are paths relative
to the manifest, optionally ``path#row_id`` into a delimited vector file.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .cca import CcaModel
from .dataset import PairedDataset
from .errors import FormatError, InputError
from .features import Spectrogram, load_vectors
from .training import Standardizer, TrainConfig, TrainedModel

FEATURE_MAGIC = b"XMFT"
MODEL_MAGIC = b"XMMD"
FORMAT_VERSION = 1
KINDS = {"vector": 0, "mfcc": 1, "mel": 2}
KIND_NAMES = {v: k for k, v in KINDS.items()}
_FEATURE_HEADER = struct.Struct("<4sHHQQ")
MANIFEST_COLUMNS = ("id", "audio", "text", "category", "split")


# ---------------------------------------------------------------- atomic writes


def atomic_write(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_if_changed(path, data: bytes) -> bool:
    """Atomic write that is skipped when the file already holds ``data``; returns whether it wrote."""
    path = Path(path)
    if path.exists() and path.read_bytes() == data:
        return False
    atomic_write(path, data)
    return True


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ---------------------------------------------------------------- feature files


def encode_features(values: np.ndarray, kind: str) -> bytes:
    values = np.asarray(values, dtype="<f8")
    if values.ndim == 1:
        values = values[None, :]
    if values.ndim != 2:
        raise FormatError(f"feature matrix must be 1-D or 2-D, got shape {values.shape}")
    if kind not in KINDS:
        raise FormatError(f"unknown feature kind {kind!r}")
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FORMAT_VERSION, KINDS[kind], *values.shape)
    return header + np.ascontiguousarray(values).tobytes()


def decode_features(data: bytes, source="<bytes>") -> tuple[np.ndarray, str]:
    if len(data) < _FEATURE_HEADER.size:
        raise FormatError(f"{source}: truncated feature header")
    magic, version, kind, rows, cols = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{source}: not a feature file (bad magic)")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported feature file version {version}")
    if kind not in KIND_NAMES:
        raise FormatError(f"{source}: unknown kind tag {kind}")
    expected = _FEATURE_HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise FormatError(f"{source}: expected {expected} bytes for {rows}x{cols}, found {len(data)}")
    values = np.frombuffer(data, dtype="<f8", offset=_FEATURE_HEADER.size).reshape(rows, cols)
    return values.astype(np.float64), KIND_NAMES[kind]


def write_features(path, values, kind: str) -> None:
    atomic_write(path, encode_features(values, kind))


def read_features(path) -> tuple[np.ndarray, str]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read feature file {path}: {exc}") from exc
    return decode_features(data, path)


# ---------------------------------------------------------------- model files


def _pack_section(name: str, value) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<H", len(raw)) + raw
    if isinstance(value, str):
        body = value.encode("utf-8")
        return head + struct.pack("<BQ", 1, len(body)) + body
    arr = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
    return head + struct.pack("<BB", 0, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes()


def encode_sections(sections: dict) -> bytes:
    parts = [MODEL_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(sections))]
    for name in sorted(sections):
        parts.append(_pack_section(name, sections[name]))
    return b"".join(parts)


def decode_sections(data: bytes, source="<bytes>") -> dict:
    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise FormatError(f"{source}: truncated model file")
        out = struct.unpack_from(fmt, data, pos)
        pos += size
        return out

    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"{source}: not a model file (bad magic)")
    pos = 4
    version, count = take("<HI")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported model file version {version}")
    sections = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (kind,) = take("<B")
        if kind == 1:
            (size,) = take("<Q")
            sections[name] = data[pos:pos + size].decode("utf-8")
            pos += size
        elif kind == 0:
            (ndim,) = take("<B")
            shape = take(f"<{ndim}Q")
            n = int(np.prod(shape)) if ndim else 1
            if pos + 8 * n > len(data):
                raise FormatError(f"{source}: truncated array section {name!r}")
            sections[name] = np.frombuffer(data, "<f8", n, pos).reshape(shape).astype(np.float64)
            pos += 8 * n
        else:
            raise FormatError(f"{source}: unknown section type {kind} for {name!r}")
    if pos != len(data):
        raise FormatError(f"{source}: trailing bytes after last section")
    return sections


def model_to_sections(model: TrainedModel) -> dict:
    meta = {
        "format": FORMAT_VERSION,
        "variant": model.variant,
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "audio_net": model.audio_net.spec.to_dict() if model.audio_net else None,
        "text_net": model.text_net.spec.to_dict() if model.text_net else None,
        "cca_ridge": model.cca.ridge if model.cca else None,
    }
    sections = {"meta": json.dumps(meta, sort_keys=True, indent=1)}
    for tag, net in (("audio_net", model.audio_net), ("text_net", model.text_net)):
        if net is not None:
            for key, arr in net.state_dict().items():
                sections[f"{tag}/{key}"] = arr
    if model.cca is not None:
        for key in ("w_x", "w_y", "mean_x", "mean_y", "correlations"):
            sections[f"cca/{key}"] = getattr(model.cca, key)
    for tag, norm in (("audio_norm", model.audio_norm), ("text_norm", model.text_norm)):
        if norm is not None:
            sections[f"{tag}/mean"] = norm.mean
            sections[f"{tag}/std"] = norm.std
    trace = np.array(model.loss_trace, dtype=np.float64).reshape(-1, 3)
    sections["loss_trace"] = trace
    return sections


def sections_to_model(sections: dict, source="<model>") -> TrainedModel:
    try:
        meta = json.loads(sections["meta"])
        cfg = TrainConfig.from_dict(meta["config"])
        nets = {}
        for tag in ("audio_net", "text_net"):
            if meta[tag] is None:
                nets[tag] = None
                continue
            net = nn.build_network(nn.NetworkSpec.from_dict(meta[tag]))
            prefix = tag + "/"
            net.load_state_dict({k[len(prefix):]: v for k, v in sections.items() if k.startswith(prefix)})
            nets[tag] = net
        cca = None
        if meta["cca_ridge"] is not None:
            cca = CcaModel(**{k: sections[f"cca/{k}"] for k in ("w_x", "w_y", "mean_x", "mean_y", "correlations")},
                           ridge=float(meta["cca_ridge"]))
        norms = {}
        for tag in ("audio_norm", "text_norm"):
            norms[tag] = (Standardizer(sections[f"{tag}/mean"], sections[f"{tag}/std"])
                          if f"{tag}/mean" in sections else None)
        trace = [(int(e), int(b), float(v)) for e, b, v in sections["loss_trace"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{source}: malformed model file ({exc})") from exc
    return TrainedModel(meta["variant"], cfg, nets["audio_net"], nets["text_net"], cca,
                        norms["audio_norm"], norms["text_norm"], trace)


def save_model(path, model: TrainedModel) -> None:
    atomic_write(path, encode_sections(model_to_sections(model)))


def load_model(path) -> TrainedModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read model file {path}: {exc}") from exc
    return sections_to_model(decode_sections(data, path), path)


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    audio: str
    text: str
    category: str = ""
    split: str = ""


def read_manifest(path) -> list[ManifestRecord]:
    """Parse a manifest; ids must be unique and every referenced file must exist."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    rows = [(i, l) for i, l in enumerate(lines, 1) if l.strip() and not l.lstrip().startswith("#")]
    if not rows:
        raise FormatError(f"{path}: empty manifest")
    header = rows[0][1].split("\t")
    missing = [c for c in ("id", "audio", "text") if c not in header]
    if missing:
        raise FormatError(f"{path}: header lacks column(s) {', '.join(missing)}")
    unknown = [c for c in header if c not in MANIFEST_COLUMNS]
    if unknown:
        raise FormatError(f"{path}: unknown column(s) {', '.join(unknown)}")
    records, seen = [], set()
    for lineno, line in rows[1:]:
        cells = line.split("\t")
        if len(cells) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, found {len(cells)}")
        rec = ManifestRecord(**dict(zip(header, cells)))
        if rec.id in seen:
            raise FormatError(f"{path}:{lineno}: duplicate id {rec.id!r}")
        seen.add(rec.id)
        for ref in (rec.audio, rec.text):
            if not resolve(path, ref)[0].exists():
                raise InputError(f"{path}:{lineno}: referenced file {ref!r} does not exist")
        records.append(rec)
    return records


def write_manifest(path, records) -> bytes:
    lines = ["\t".join(MANIFEST_COLUMNS)]
    for r in records:
        for cell in (r.id, r.audio, r.text, r.category, r.split):
            if "\t" in cell or "\n" in cell:
                raise FormatError(f"manifest cell {cell!r} contains a tab or newline")
        lines.append("\t".join((r.id, r.audio, r.text, r.category, r.split)))
    data = ("\n".join(lines) + "\n").encode("utf-8")
    write_if_changed(path, data)
    return data


def resolve(manifest_path, ref: str) -> tuple[Path, str | None]:
    """Split ``path#row`` and resolve ``path`` relative to the manifest's directory."""
    file_part, _, row = ref.partition("#")
    p = Path(file_part)
    if not p.is_absolute():
        p = Path(manifest_path).parent / p
    return p, (row or None)


class _VectorCache:
    def __init__(self):
        self._files: dict[Path, dict] = {}

    def get(self, path: Path, row: str) -> np.ndarray:
        if path not in self._files:
            self._files[path] = dict(load_vectors(path))
        table = self._files[path]
        if row not in table:
            raise InputError(f"{path}: no row with id {row!r}")
        return table[row]


def _load_ref(manifest_path, ref, cache: _VectorCache):
    path, row = resolve(manifest_path, ref)
    if row is not None:
        return cache.get(path, row), "vector"
    return read_features(path)


def load_dataset(manifest_path, split: str | None = None) -> PairedDataset:
    """Assemble a :class:`PairedDataset` from a manifest.

    ``split`` keeps only records with that split tag (all records when the
    manifest has no tags).  Spectrogram features with at least 644 frames are
    decimated into four sub-sequences per song; shorter ones are used as is.
    Vector audio features give a vector dataset.
    """
    records = read_manifest(manifest_path)
    if split is not None and any(r.split for r in records):
        records = [r for r in records if r.split == split]
    if not records:
        raise InputError(f"{manifest_path}: no records for split {split!r}")
    cache = _VectorCache()
    audios, texts, kinds = [], [], set()
    for r in records:
        a, kind = _load_ref(manifest_path, r.audio, cache)
        t, _ = _load_ref(manifest_path, r.text, cache)
        audios.append(a)
        texts.append(np.ravel(t))
        kinds.add(kind)
    if len(kinds) != 1:
        raise FormatError(f"{manifest_path}: mixed audio feature kinds {sorted(kinds)}")
    kind = kinds.pop()
    shapes = {a.shape for a in audios}
    if len(shapes) != 1:
        raise FormatError(f"{manifest_path}: audio features have differing shapes {sorted(shapes)}")
    widths = {t.size for t in texts}
    if len(widths) != 1:
        raise FormatError(f"{manifest_path}: text features have differing widths {sorted(widths)}")
    cats = np.array([r.category for r in records]) if all(r.category for r in records) else None
    ids = [r.id for r in records]
    text = np.stack(texts)
    if kind == "vector":
        return PairedDataset(np.stack([np.ravel(a) for a in audios]), text, ids, cats)
    if audios[0].shape[1] >= 644:
        return PairedDataset.from_songs(ids, [Spectrogram(a, kind) for a in audios], text, cats)
    return PairedDataset(np.stack(audios), text, ids, cats)
