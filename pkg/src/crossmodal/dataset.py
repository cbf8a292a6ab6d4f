"""Index-aligned paired audio/text data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InputError
from .features import Spectrogram, decimate4


@dataclass(frozen=True)
class PairedDataset:
    """Item ``i`` pairs ``audio[i]`` with ``text[i]``.

    ``audio`` is ``(N, F)`` for feature vectors or ``(N, bands, frames)`` for
    spectrograms; ``text`` is ``(N, T)``.  Items derived from the same song
    (decimated sub-sequences) share a ``pair_id``.  ``categories`` holds one
    label string per item, or is ``None``.
    """

    audio: np.ndarray
    text: np.ndarray
    pair_ids: tuple
    categories: np.ndarray | None = None

    def __post_init__(self):
        audio = np.asarray(self.audio, dtype=np.float64)
        text = np.asarray(self.text, dtype=np.float64)
        object.__setattr__(self, "audio", audio)
        object.__setattr__(self, "text", text)
        object.__setattr__(self, "pair_ids", tuple(str(p) for p in self.pair_ids))
        if audio.ndim not in (2, 3):
            raise DimensionError(f"audio view must be (N, F) or (N, bands, frames), got {audio.shape}")
        if text.ndim != 2:
            raise DimensionError(f"text view must be (N, T), got {text.shape}")
        n = audio.shape[0]
        if text.shape[0] != n or len(self.pair_ids) != n:
            raise DimensionError(
                f"views are not aligned: {n} audio, {text.shape[0]} text, {len(self.pair_ids)} ids"
            )
        if self.categories is not None:
            cats = np.asarray(self.categories, dtype=str)
            if cats.shape != (n,):
                raise DimensionError(f"expected {n} category labels, got shape {cats.shape}")
            object.__setattr__(self, "categories", cats)
        if not (np.all(np.isfinite(audio)) and np.all(np.isfinite(text))):
            raise InputError("dataset contains non-finite values")

    def __len__(self) -> int:
        return self.audio.shape[0]

    @property
    def is_spectrogram(self) -> bool:
        return self.audio.ndim == 3

    @property
    def audio_shape(self) -> tuple:
        return self.audio.shape[1:]

    @property
    def unique_pairs(self) -> list[str]:
        """Pair ids in order of first appearance."""
        return list(dict.fromkeys(self.pair_ids))

    def subset(self, index) -> "PairedDataset":
        index = np.asarray(index, dtype=np.int64)
        cats = None if self.categories is None else self.categories[index]
        return PairedDataset(self.audio[index], self.text[index], tuple(self.pair_ids[i] for i in index), cats)

    def select_pairs(self, pair_ids) -> "PairedDataset":
        wanted = set(pair_ids)
        return self.subset([i for i, p in enumerate(self.pair_ids) if p in wanted])

    def split(self, train_fraction: float, seed: int, test_fraction: float | None = None):
        """Random split by pair id, so sub-sequences of one song never straddle the split.

        ``test_fraction`` defaults to ``1 - train_fraction``; a smaller train
        fraction with a fixed test fraction leaves the remaining pairs unused.
        """
        if test_fraction is None:
            test_fraction = 1.0 - train_fraction
        if not (0 < train_fraction < 1 and 0 < test_fraction < 1 and train_fraction + test_fraction <= 1 + 1e-12):
            raise InputError(f"invalid split fractions train={train_fraction}, test={test_fraction}")
        pairs = self.unique_pairs
        order = np.random.default_rng(seed).permutation(len(pairs))
        n_test = int(round(test_fraction * len(pairs)))
        n_train = int(round(train_fraction * len(pairs)))
        n_train = min(n_train, len(pairs) - n_test)
        if n_test < 1 or n_train < 1:
            raise InputError(f"{len(pairs)} pairs are too few for the requested split")
        test = [pairs[i] for i in order[:n_test]]
        train = [pairs[i] for i in order[n_test:n_test + n_train]]
        return self.select_pairs(train), self.select_pairs(test)

    @classmethod
    def from_songs(cls, ids, spectrograms: list[Spectrogram], text, categories=None) -> "PairedDataset":
        """Decimate each song's spectrogram into 4 sub-sequences, each paired with the song's text."""
        text = np.asarray(text, dtype=np.float64)
        audio, texts, pids, cats = [], [], [], []
        for i, (pid, spec) in enumerate(zip(ids, spectrograms)):
            for sub in decimate4(spec):
                audio.append(sub.values)
                texts.append(text[i])
                pids.append(pid)
                if categories is not None:
                    cats.append(categories[i])
        if not audio:
            raise InputError("no songs given")
        return cls(np.stack(audio), np.stack(texts), tuple(pids), np.array(cats) if categories is not None else None)
