"""Cross-modal retrieval in the shared space and its evaluation.

Similarity is cosine.  Rankings are by descending score with ties broken by
ascending candidate id, so results do not depend on database order.
Instance level: the query's own pair is the single relevant item.
Category level: the highest-ranked candidate sharing the query's category
is the relevant one.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import PairedDataset
from .errors import DimensionError, InputError
from .training import COMBINE_MODES, TrainConfig, TrainedModel, train

DIRECTIONS = ("audio-to-text", "text-to-audio")
LEVELS = ("instance", "category")
DEFAULT_KS = (10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
DEFAULT_NS = (1, 5, 10)


@dataclass(frozen=True)
class RankedResult:
    query_id: str
    candidate_ids: tuple
    scores: np.ndarray
    relevant_rank: int | None = None


@dataclass
class EvalReport:
    direction: str
    level: str
    k: int
    mrr1: float
    recall_at: dict
    ranks: tuple = ()
    n_queries: int = 0
    seeds: tuple = ()
    available: bool = True
    per_run_mrr1: tuple = ()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["recall_at"] = {str(n): v for n, v in self.recall_at.items()}
        d["ranks"] = list(self.ranks)
        d["seeds"] = list(self.seeds)
        d["per_run_mrr1"] = list(self.per_run_mrr1)
        if not self.available:
            d["mrr1"] = None
            d["recall_at"] = {str(n): None for n in self.recall_at}
        return d


def _check_direction(direction):
    if direction not in DIRECTIONS:
        raise InputError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


def cosine_scores(queries: np.ndarray, database: np.ndarray) -> np.ndarray:
    """``(Q, C)`` cosine similarities; zero-norm vectors score 0 against everything."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    database = np.atleast_2d(np.asarray(database, dtype=np.float64))
    if queries.shape[1] != database.shape[1]:
        raise DimensionError(f"query dim {queries.shape[1]} != database dim {database.shape[1]}")
    qn = np.linalg.norm(queries, axis=1)
    dn = np.linalg.norm(database, axis=1)
    if not (qn.all() and dn.all()):
        warnings.warn("zero-norm vector in retrieval; its similarities are set to 0", stacklevel=2)
    qn = np.where(qn > 0, qn, np.inf)
    dn = np.where(dn > 0, dn, np.inf)
    return (queries / qn[:, None]) @ (database / dn[:, None]).T


def rank(query, database, ids=None, relevant_id=None, query_id="query") -> RankedResult:
    """Rank ``database`` rows against ``query`` by cosine similarity."""
    database = np.atleast_2d(np.asarray(database, dtype=np.float64))
    if database.shape[0] == 0:
        raise InputError("database is empty")
    if ids is None:
        ids = [str(i) for i in range(database.shape[0])]
    ids = [str(i) for i in ids]
    if len(ids) != database.shape[0]:
        raise DimensionError(f"{len(ids)} ids for {database.shape[0]} database rows")
    scores = cosine_scores(np.asarray(query, dtype=np.float64).reshape(1, -1), database)[0]
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    ranked = tuple(ids[i] for i in order)
    rel = ranked.index(str(relevant_id)) + 1 if relevant_id is not None else None
    return RankedResult(str(query_id), ranked, scores[order], rel)


def _ranks(results) -> np.ndarray:
    ranks = [r.relevant_rank if isinstance(r, RankedResult) else r for r in results]
    if not ranks:
        raise InputError("no results to score")
    if any(r is None or r < 1 for r in ranks):
        raise InputError("every result needs a relevant rank >= 1")
    return np.asarray(ranks, dtype=np.float64)


def mrr1(results) -> float:
    """Mean reciprocal rank of the relevant item (results or plain ranks)."""
    return float(np.mean(1.0 / _ranks(results)))


def recall_at_n(results, n: int) -> float:
    """Fraction of queries whose relevant item is within the top ``n``."""
    if n < 1:
        raise InputError(f"N must be >= 1, got {n}")
    return float(np.mean(_ranks(results) <= n))


def relevant_ranks(scores: np.ndarray, candidate_ids, relevant: np.ndarray) -> np.ndarray:
    """Rank of the first relevant candidate for each query row of ``scores``.

    ``relevant`` is a boolean ``(Q, C)`` mask.  The first relevant candidate
    in ranked order is the one with the highest score, ties going to the
    smallest id; its rank counts strictly better scores plus equal scores
    with smaller ids.
    """
    ids = np.asarray([str(i) for i in candidate_ids])
    order = np.argsort(ids, kind="stable")
    scores = scores[:, order]
    relevant = relevant[:, order]
    if not relevant.any(axis=1).all():
        raise InputError("a query has no relevant candidate")
    masked = np.where(relevant, scores, -np.inf)
    best = np.argmax(masked, axis=1)            # first maximum = smallest id among ties
    top = scores[np.arange(len(best)), best][:, None]
    before = np.arange(scores.shape[1])[None, :] < best[:, None]
    return 1 + np.sum(scores > top, axis=1) + np.sum((scores == top) & before, axis=1)


# ---------------------------------------------------------------- projection


def project_query(model: TrainedModel, item, side: str, k: int | None = None, combine: str | None = None):
    """Shared-space vector of one item.

    ``side`` is ``"audio"`` or ``"text"``.  An audio item may be a stack of
    decimated sub-sequences ``(n_sub, bands, frames)``; the sub-vectors are
    averaged (``average``), the first is used (``first``), or all are
    returned as a matrix (``max-score``, scored by the best sub-sequence).
    """
    combine = combine or model.config.combine
    item = np.asarray(item, dtype=np.float64)
    per_item = model.audio_input_shape() if side == "audio" else (model.text_input_dim(),)
    if item.shape == tuple(per_item):
        return model.embed(item[None], side, k)[0]
    if item.ndim == len(per_item) + 1 and item.shape[1:] == tuple(per_item):
        vecs = model.embed(item, side, k)
        return _combine(vecs, combine)
    raise DimensionError(f"{side} item of shape {item.shape} does not match model input {per_item}")


def _combine(vecs: np.ndarray, combine: str):
    if combine == "average":
        return vecs.mean(axis=0)
    if combine == "first":
        return vecs[0]
    if combine == "max-score":
        return vecs
    raise InputError(f"combine must be one of {COMBINE_MODES}, got {combine!r}")


@dataclass
class _Units:
    ids: list
    categories: np.ndarray | None
    audio: list = field(default_factory=list)    # per unit: (n_sub, k_max)
    text: np.ndarray | None = None


def _embed_units(model: TrainedModel, data: PairedDataset, k: int) -> _Units:
    audio = model.embed(data.audio, "audio", k)
    text = model.embed(data.text, "text", k)
    ids = data.unique_pairs
    groups: dict[str, list[int]] = {p: [] for p in ids}
    for i, p in enumerate(data.pair_ids):
        groups[p].append(i)
    first = [groups[p][0] for p in ids]
    cats = None if data.categories is None else data.categories[first]
    return _Units(ids, cats, [audio[groups[p]] for p in ids], text[first])


def unit_scores(units: _Units, combine: str) -> np.ndarray:
    """Score matrix between audio units (rows) and text units (columns)."""
    if combine == "max-score":
        sizes = [len(a) for a in units.audio]
        flat = np.concatenate(units.audio)
        sub = cosine_scores(flat, units.text)
        bounds = np.cumsum([0] + sizes)
        return np.stack([sub[a:b].max(axis=0) for a, b in zip(bounds[:-1], bounds[1:])])
    vecs = np.stack([_combine(a, combine) for a in units.audio])
    return cosine_scores(vecs, units.text)


def evaluate(model: TrainedModel, test: PairedDataset, direction: str = "audio-to-text",
             level: str = "instance", ks=DEFAULT_KS, ns=DEFAULT_NS, combine: str | None = None,
             seeds=()) -> list[EvalReport]:
    """One report per ``k``; ``k`` beyond the model's components yields an unavailable row."""
    _check_direction(direction)
    if level not in LEVELS:
        raise InputError(f"level must be one of {LEVELS}, got {level!r}")
    if level == "category" and test.categories is None:
        raise InputError("category-level evaluation needs category labels")
    combine = combine or model.config.combine
    ns = tuple(int(n) for n in ns)
    ks = [int(k) for k in ks]
    usable = [k for k in ks if 1 <= k <= model.n_components]
    units = _embed_units(model, test, max(usable)) if usable else None
    reports = []
    for k in ks:
        if k not in usable:
            reports.append(EvalReport(direction, level, k, float("nan"), {n: float("nan") for n in ns},
                                      seeds=tuple(seeds), available=False))
            continue
        # fitted components nest, so the top-k slice of the full embedding is the k embedding
        sliced = _Units(units.ids, units.categories, [a[:, :k] for a in units.audio], units.text[:, :k])
        scores = unit_scores(sliced, combine)
        if direction == "text-to-audio":
            scores = scores.T
        n_units = len(units.ids)
        if level == "instance":
            relevant = np.eye(n_units, dtype=bool)
        else:
            relevant = units.categories[:, None] == units.categories[None, :]
        ranks = relevant_ranks(scores, units.ids, relevant)
        reports.append(EvalReport(
            direction, level, k, mrr1(ranks), {n: recall_at_n(ranks, n) for n in ns},
            tuple(int(r) for r in ranks), n_units, tuple(seeds),
        ))
    return reports


@dataclass
class CrossValidation:
    reports: list            # aggregated EvalReport per (direction, level, k)
    runs: list               # per-run lists of EvalReport
    seeds: tuple


def cross_validate(dataset: PairedDataset, variant: str, cfg: TrainConfig, runs: int = 5,
                   seed: int | None = None, train_fraction: float = 0.8, test_fraction: float = 0.2,
                   directions=DIRECTIONS, levels=("instance",), ks=DEFAULT_KS, ns=DEFAULT_NS,
                   combine: str | None = None) -> CrossValidation:
    """Average evaluation over ``runs`` fresh splits and models with seeds ``s, s+1, ...``."""
    if runs < 1:
        raise InputError("runs must be >= 1")
    base = cfg.seed if seed is None else int(seed)
    seeds = tuple(base + i for i in range(runs))
    per_run = []
    for s in seeds:
        train_set, test_set = dataset.split(train_fraction, s, test_fraction)
        model = train(train_set, variant, dataclasses.replace(cfg, seed=s))
        rows = []
        for d in directions:
            for lv in levels:
                rows.extend(evaluate(model, test_set, d, lv, ks, ns, combine, seeds=(s,)))
        per_run.append(rows)
    aggregated = []
    for i, first in enumerate(per_run[0]):
        column = [run[i] for run in per_run]
        available = all(r.available for r in column)
        vals = tuple(r.mrr1 for r in column)
        aggregated.append(EvalReport(
            first.direction, first.level, first.k,
            float(np.mean(vals)) if available else float("nan"),
            {n: float(np.mean([r.recall_at[n] for r in column])) if available else float("nan")
             for n in first.recall_at},
            n_queries=first.n_queries, seeds=seeds, available=available,
            per_run_mrr1=vals if available else (),
        ))
    return CrossValidation(aggregated, per_run, seeds)


def format_reports(reports) -> str:
    """Tab-separated table, one row per report; unavailable rows read ``N/A``."""
    ns = sorted({n for r in reports for n in r.recall_at})
    header = ["direction", "level", "k", "mrr1"] + [f"recall@{n}" for n in ns] + ["queries"]
    lines = ["\t".join(header)]
    for r in reports:
        if r.available:
            vals = [repr(r.mrr1)] + [repr(r.recall_at[n]) for n in ns]
        else:
            vals = ["N/A"] * (1 + len(ns))
        lines.append("\t".join([r.direction, r.level, str(r.k)] + vals + [str(r.n_queries)]))
    return "\n".join(lines) + "\n"
