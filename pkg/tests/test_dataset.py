import numpy as np
import pytest

from crossmodal.dataset import PairedDataset
from crossmodal.errors import DimensionError, InputError
from crossmodal.features import Spectrogram


def make(n=10):
    rng = np.random.default_rng(0)
    return PairedDataset(rng.standard_normal((n, 4)), rng.standard_normal((n, 3)),
                         [f"p{i}" for i in range(n)], [f"c{i % 3}" for i in range(n)])


def test_alignment_validation():
    with pytest.raises(DimensionError):
        PairedDataset(np.zeros((3, 2)), np.zeros((4, 2)), ["a", "b", "c"])
    with pytest.raises(DimensionError):
        PairedDataset(np.zeros((3, 2)), np.zeros((3, 2)), ["a", "b"])
    with pytest.raises(DimensionError):
        PairedDataset(np.zeros((3, 2)), np.zeros((3, 2)), ["a", "b", "c"], ["x"])
    with pytest.raises(InputError):
        PairedDataset(np.full((2, 2), np.nan), np.zeros((2, 2)), ["a", "b"])


def test_split_is_disjoint_and_seeded():
    data = make(50)
    tr, te = data.split(0.8, seed=1)
    assert len(tr) == 40 and len(te) == 10
    assert not set(tr.pair_ids) & set(te.pair_ids)
    tr2, te2 = data.split(0.8, seed=1)
    assert tr.pair_ids == tr2.pair_ids and te.pair_ids == te2.pair_ids
    small, test = data.split(0.3, seed=2, test_fraction=0.2)
    assert len(small) == 15 and len(test) == 10
    with pytest.raises(InputError):
        data.split(0.9, seed=0, test_fraction=0.2)


def test_from_songs_keeps_sub_sequences_together():
    rng = np.random.default_rng(3)
    songs = [Spectrogram(rng.standard_normal((2, 646)), "mfcc") for _ in range(10)]
    data = PairedDataset.from_songs([f"s{i}" for i in range(10)], songs, rng.standard_normal((10, 3)),
                                    [f"m{i % 2}" for i in range(10)])
    assert len(data) == 40 and data.audio_shape == (2, 161)
    assert data.unique_pairs == [f"s{i}" for i in range(10)]
    np.testing.assert_array_equal(data.text[0], data.text[3])
    tr, te = data.split(0.5, seed=0)
    for part in (tr, te):
        _, counts = np.unique(part.pair_ids, return_counts=True)
        assert np.all(counts == 4)
