import numpy as np
import pytest

from crossmodal.cca import cca_transform
from crossmodal.dataset import PairedDataset
from crossmodal.errors import DimensionError, InputError
from crossmodal.features import Spectrogram
from crossmodal.retrieval import (
    cosine_scores, cross_validate, evaluate, format_reports, mrr1, project_query, rank, recall_at_n,
    relevant_ranks,
)
from crossmodal.synthdata import SynthSpec, generate
from crossmodal.training import TrainConfig, train_feature_dcca, train_linear_cca


def naive_rank(query, database, ids):
    """All-pairs oracle: explicit cosine loop, then a sort on (-score, id)."""
    rows = []
    for vec, item in zip(database, ids):
        qn, vn = np.sqrt(np.sum(query ** 2)), np.sqrt(np.sum(vec ** 2))
        s = 0.0 if qn == 0 or vn == 0 else float(np.dot(query, vec) / (qn * vn))
        rows.append((-s, item))
    rows.sort()
    return [item for _, item in rows], [-s for s, _ in rows]


def test_rank_matches_brute_force():
    rng = np.random.default_rng(0)
    db = rng.standard_normal((100, 8))
    ids = [f"c{i:03d}" for i in rng.permutation(100)]
    for _ in range(10):
        q = rng.standard_normal(8)
        res = rank(q, db, ids)
        exp_ids, exp_scores = naive_rank(q, db, ids)
        assert list(res.candidate_ids) == exp_ids
        np.testing.assert_allclose(res.scores, exp_scores, atol=1e-12)
        assert np.all(np.diff(res.scores) <= 0)


def test_self_retrieval_and_ties():
    rng = np.random.default_rng(1)
    db = rng.standard_normal((20, 5))
    assert rank(db[7], db, relevant_id="7").relevant_rank == 1
    res = rank(np.array([1.0, 0.0]), np.array([[0.0, 2.0], [0.0, -1.0], [0.0, 3.0]]), ["b", "c", "a"])
    np.testing.assert_array_equal(res.scores, 0.0)
    assert res.candidate_ids == ("a", "b", "c")


@pytest.mark.filterwarnings("ignore:zero-norm")
def test_rank_insertion_order_irrelevant():
    rng = np.random.default_rng(2)
    db = np.round(rng.standard_normal((30, 3)))       # many exact ties
    ids = [f"x{i:02d}" for i in range(30)]
    perm = rng.permutation(30)
    q = np.array([1.0, 1.0, 0.0])
    a = rank(q, db, ids)
    b = rank(q, db[perm], [ids[i] for i in perm])
    assert a.candidate_ids == b.candidate_ids


def test_zero_norm_scores_zero_with_warning():
    with pytest.warns(UserWarning, match="zero-norm"):
        s = cosine_scores(np.zeros((1, 3)), np.ones((2, 3)))
    np.testing.assert_array_equal(s, 0.0)
    with pytest.raises(DimensionError):
        cosine_scores(np.ones((1, 3)), np.ones((2, 4)))
    with pytest.raises(InputError):
        rank(np.ones(3), np.zeros((0, 3)))


def test_metric_formulae():
    assert mrr1([1, 1, 1]) == 1.0
    assert mrr1([1, 2, 4]) == pytest.approx(0.5833333333333334, abs=1e-15)
    assert recall_at_n([1, 2, 4], 1) == pytest.approx(1 / 3)
    assert recall_at_n([1, 2, 4], 5) == 1.0
    with pytest.raises(InputError):
        mrr1([])
    with pytest.raises(InputError):
        recall_at_n([], 1)
    with pytest.raises(InputError):
        recall_at_n([1], 0)


def test_metrics_match_independent_recomputation():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        ranks = rng.integers(1, 50, size=rng.integers(1, 30))
        total = 0.0
        for r in ranks:
            total += 1.0 / r
        assert abs(mrr1(ranks) - total / len(ranks)) < 1e-12
        for n in (1, 5, 10):
            assert abs(recall_at_n(ranks, n) - sum(1 for r in ranks if r <= n) / len(ranks)) < 1e-12


def test_recall_monotone_and_saturates():
    ranks = np.random.default_rng(4).integers(1, 101, size=500)
    values = [recall_at_n(ranks, n) for n in range(1, 101)]
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert values[-1] == 1.0


def test_relevant_ranks_matches_rank():
    rng = np.random.default_rng(5)
    scores = np.round(rng.standard_normal((15, 15)), 1)
    ids = [f"u{i:02d}" for i in rng.permutation(15)]
    cats = rng.integers(0, 3, size=15)
    mask = cats[:, None] == cats[None, :]
    got = relevant_ranks(scores, ids, mask)
    for q in range(15):
        ordered = sorted(range(15), key=lambda j: (-scores[q, j], ids[j]))
        expected = next(pos for pos, j in enumerate(ordered, 1) if mask[q, j])
        assert got[q] == expected


def test_category_rank_never_worse_than_instance():
    rng = np.random.default_rng(6)
    scores = rng.standard_normal((200, 200))
    ids = [f"p{i:03d}" for i in range(200)]
    cats = rng.integers(0, 20, size=200)
    inst = relevant_ranks(scores, ids, np.eye(200, dtype=bool))
    cat = relevant_ranks(scores, ids, cats[:, None] == cats[None, :])
    assert np.all(cat <= inst)
    assert mrr1(cat) >= mrr1(inst)


def test_null_model_mrr():
    n = 2000
    rng = np.random.default_rng(7)
    ranks = relevant_ranks(rng.standard_normal((n, n)), [f"{i:04d}" for i in range(n)], np.eye(n, dtype=bool))
    expected = np.sum(1.0 / np.arange(1, n + 1)) / n
    # per-query 1/rank has variance below pi^2 / 6 / n over n draws
    sd = np.sqrt(np.pi ** 2 / 6 / n / n)
    assert abs(mrr1(ranks) - expected) < 4 * sd


@pytest.fixture(scope="module")
def linear_model():
    data, _ = generate(SynthSpec(n_pairs=300, latent_dim=3, audio_dim=12, text_dim=15, noise=0.3, seed=8))
    return data, train_linear_cca(data, k=10)


def test_projection_of_mean_is_zero(linear_model):
    data, model = linear_model
    np.testing.assert_allclose(project_query(model, data.audio.mean(axis=0), "audio"), 0.0, atol=1e-12)


def test_projection_nesting_and_consistency(linear_model):
    data, model = linear_model
    item = data.audio[4]
    full = project_query(model, item, "audio", k=10)
    np.testing.assert_allclose(project_query(model, item, "audio", k=3), full[:3], atol=1e-12)
    np.testing.assert_allclose(full, cca_transform(model.cca, item[:, None], "x")[:, 0], atol=1e-10)
    with pytest.raises(DimensionError):
        project_query(model, np.zeros(5), "audio")


def test_projection_combines_sub_sequences():
    data, _ = generate(SynthSpec(n_pairs=120, latent_dim=2, audio_dim=8, text_dim=6, seed=9))
    model = train_feature_dcca(data, TrainConfig(epochs=1, batch_size=60, shared_dim=4, hidden=8))
    stack = data.audio[:4]
    subs = model.embed(stack, "audio")
    np.testing.assert_allclose(project_query(model, stack, "audio", combine="average"), subs.mean(0), atol=1e-12)
    np.testing.assert_array_equal(project_query(model, stack, "audio", combine="first"), subs[0])
    assert project_query(model, stack, "audio", combine="max-score").shape == (4, 4)


def identical_view_data(n=80, dim=6, seed=10):
    x = np.random.default_rng(seed).standard_normal((n, dim))
    return PairedDataset(x, x.copy(), tuple(f"p{i:03d}" for i in range(n)),
                         np.array([f"c{i % 4}" for i in range(n)]))


def test_perfect_retrieval_and_direction_symmetry():
    data = identical_view_data()
    model = train_linear_cca(data, k=6, r=1e-8)
    a2t = evaluate(model, data, "audio-to-text", ks=[6], ns=[1, 5])[0]
    t2a = evaluate(model, data, "text-to-audio", ks=[6], ns=[1, 5])[0]
    assert a2t.mrr1 == 1.0 and t2a.mrr1 == 1.0
    assert abs(a2t.mrr1 - t2a.mrr1) < 1e-12
    cat = evaluate(model, data, "audio-to-text", "category", ks=[6])[0]
    assert cat.mrr1 == 1.0


def test_unavailable_components(linear_model):
    data, model = linear_model
    reports = evaluate(model, data, ks=[5, 10, 20], ns=[1])
    assert [r.available for r in reports] == [True, True, False]
    table = format_reports(reports)
    assert table.splitlines()[-1].split("\t")[3:5] == ["N/A", "N/A"]
    assert reports[2].to_dict()["mrr1"] is None


def test_evaluate_slices_match_fresh_embedding(linear_model):
    data, model = linear_model
    sweep = evaluate(model, data, ks=[3, 10], ns=[1])
    alone = evaluate(model, data, ks=[3], ns=[1])
    assert sweep[0].ranks == alone[0].ranks


def test_decimated_songs_evaluate_per_song():
    rng = np.random.default_rng(11)
    n_songs = 30
    z = rng.standard_normal((n_songs, 2))
    songs = [Spectrogram(np.outer([1.0, -1.0], np.repeat(z[i, 0], 644)) + 0.3 * rng.standard_normal((2, 644)),
                         "mfcc") for i in range(n_songs)]
    text = z @ rng.standard_normal((2, 5)) + 0.3 * rng.standard_normal((n_songs, 5))
    data = PairedDataset.from_songs([f"s{i:02d}" for i in range(n_songs)], songs, text)
    assert len(data) == 4 * n_songs
    model = train_linear_cca(data, k=2, r=1e-2)
    for combine in ("average", "first", "max-score"):
        rep = evaluate(model, data, "text-to-audio", ks=[2], ns=[1], combine=combine)[0]
        assert rep.n_queries == n_songs
    # oracle for "average": mean of the four sub-sequence embeddings, then a plain cosine ranking
    emb = model.embed(data.audio, "audio").reshape(n_songs, 4, 2).mean(axis=1)
    temb = model.embed(data.text[::4], "text")
    ids = data.unique_pairs
    expected = [rank(emb[q], temb, ids, relevant_id=ids[q]).relevant_rank for q in range(n_songs)]
    got = evaluate(model, data, "audio-to-text", ks=[2], ns=[1], combine="average")[0]
    assert list(got.ranks) == expected


def test_evaluate_errors(linear_model):
    data, model = linear_model
    with pytest.raises(InputError):
        evaluate(model, data, "sideways")
    with pytest.raises(InputError):
        evaluate(model, data, level="genre")


def test_cross_validation_determinism_and_means():
    data, _ = generate(SynthSpec(n_pairs=200, latent_dim=3, audio_dim=10, text_dim=10, noise=0.3, seed=12))
    cfg = TrainConfig(shared_dim=5, seed=3)
    a = cross_validate(data, "linear-cca", cfg, runs=5, ks=[2, 5, 8], ns=[1, 5])
    b = cross_validate(data, "linear-cca", cfg, runs=5, ks=[2, 5, 8], ns=[1, 5])
    assert a.seeds == (3, 4, 5, 6, 7)
    assert format_reports(a.reports) == format_reports(b.reports)
    for i, rep in enumerate(a.reports):
        if not rep.available:
            assert rep.k == 8
            continue
        per_run = [run[i].mrr1 for run in a.runs]
        assert abs(rep.mrr1 - np.mean(per_run)) < 1e-12
        assert rep.per_run_mrr1 == tuple(per_run)
        assert rep.seeds == a.seeds
    assert {r.direction for r in a.reports} == {"audio-to-text", "text-to-audio"}
