"""Metrics, baselines and nearest-neighbour dataset diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .heads import rank_experts


@dataclass
class RankingResult:
    ranking: np.ndarray  # expert ids, best first
    scores: np.ndarray  # aligned with ranking
    relevant: frozenset

    @classmethod
    def from_scores(cls, scores: np.ndarray, expert_ids: Sequence[int], relevant: Iterable[int]) -> "RankingResult":
        ids = np.asarray(expert_ids)
        order = np.lexsort((ids, -np.asarray(scores, dtype=np.float64)))
        return cls(ids[order], np.asarray(scores)[order], frozenset(relevant))

    def first_relevant_rank(self) -> int:
        hits = np.flatnonzero(np.isin(self.ranking, list(self.relevant)))
        if hits.size == 0:
            raise ValueError("no relevant expert in the ranking")
        return int(hits[0]) + 1


def category_accuracy(probs: np.ndarray, golds: Sequence[Iterable[int]]) -> dict[str, float]:
    """top1_hit: argmax category is in the gold set; subset_exact: {p >= 0.5} equals the gold set."""
    probs = np.asarray(probs)
    if len(probs) == 0 or len(probs) != len(golds):
        raise ValueError("predictions and golds must be non-empty and aligned")
    top = probs.argmax(axis=1)
    gold_sets = [set(int(c) for c in g) for g in golds]
    hit = np.mean([t in g for t, g in zip(top, gold_sets)])
    exact = np.mean([set(np.flatnonzero(p >= 0.5).tolist()) == g for p, g in zip(probs, gold_sets)])
    return {"top1_hit": float(hit), "subset_exact": float(exact)}


def top1_hit_from_predictions(pred: np.ndarray, golds: Sequence[Iterable[int]]) -> float:
    if len(pred) == 0:
        raise ValueError("empty predictions")
    return float(np.mean([int(p) in set(g) for p, g in zip(pred, golds)]))


def mean_reciprocal_rank(results: Sequence[RankingResult]) -> float:
    if not results:
        raise ValueError("no ranking results")
    return float(np.mean([1.0 / r.first_relevant_rank() for r in results]))


def mrr_from_scores(scores: np.ndarray, relevant: Sequence[Sequence[int]]) -> float:
    """Vectorised MRR over a [Q, P] score matrix, columns ordered by expert id, ties by id.

    ``relevant`` holds column indices; rows with no relevant column are skipped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    rr = []
    for s, rel in zip(scores, relevant):
        if not rel:
            continue
        rel = np.asarray(rel)
        best = s[rel].max()
        # columns that outrank the best relevant one: strictly higher, or equal with smaller index
        first = rel[s[rel] == best].min()
        rank = int(np.sum(s > best) + np.sum(s[:first] == best)) + 1
        rr.append(1.0 / rank)
    if not rr:
        raise ValueError("no question with a relevant expert")
    return float(np.mean(rr))


def harmonic_mrr(pool_size: int) -> float:
    """Expected reciprocal rank of one relevant item under a uniformly random ranking: H_P / P."""
    return float(np.sum(1.0 / np.arange(1, pool_size + 1)) / pool_size)


# ---------------------------------------------------------------- baselines


def random_predictions(n: int, n_categories: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(n_categories, size=n)


def label_distribution(golds: Sequence[Iterable[int]], n_categories: int) -> np.ndarray:
    """Share of all training labels carried by each category."""
    counts = np.zeros(n_categories)
    for g in golds:
        for c in g:
            counts[int(c)] += 1
    if counts.sum() == 0:
        raise ValueError("no labels")
    return counts / counts.sum()


def weighted_random_predictions(n: int, train_dist: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(len(train_dist), size=n, p=train_dist)


def weighted_random_expected_hit(train_dist: np.ndarray, test_golds: Sequence[Iterable[int]]) -> float:
    """Closed form of the weighted-random top1_hit: sum_c q_c * P_test(c in gold)."""
    g = np.zeros(len(train_dist))
    for gold in test_golds:
        for c in set(int(c) for c in gold):
            g[c] += 1
    g /= len(test_golds)
    return float(np.dot(train_dist, g))


def frequency_ranking_scores(train_relevant: Sequence[Sequence[int]], pool_size: int) -> np.ndarray:
    """Score per pool column = number of training questions the expert answered."""
    counts = np.zeros(pool_size)
    for rel in train_relevant:
        for c in rel:
            counts[c] += 1
    return counts


# ---------------------------------------------------------------- K-NN diagnostics


def jaccard_needham(a: Iterable, b: Iterable) -> float:
    """1 - |a ∩ b| / |a ∪ b|; two empty sets are at distance 0."""
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return 0.0
    return 1.0 - len(a & b) / union


def jaccard_matrix(sets: Sequence[Iterable]) -> np.ndarray:
    """Pairwise Jaccard-Needham distances via a binary incidence matrix."""
    index: dict = {}
    rows, cols = [], []
    for i, s in enumerate(sets):
        for tok in set(s):
            rows.append(i)
            cols.append(index.setdefault(tok, len(index)))
    X = np.zeros((len(sets), max(1, len(index))), dtype=np.float32)
    X[rows, cols] = 1.0
    inter = X @ X.T
    size = X.sum(axis=1)
    union = size[:, None] + size[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        d = 1.0 - np.where(union > 0, inter / union, 1.0)
    return d.astype(np.float64)


def euclidean_matrix(x: np.ndarray, normalize: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = x / np.where(norms > 0, norms, 1.0)
    sq = (x**2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2 * x @ x.T
    return np.sqrt(np.maximum(d2, 0.0))


def knn_mean_average_distance(items: Sequence, metric: str, n: int, k: int,
                              rng: np.random.Generator | None = None) -> float:
    """Mean over a random size-``n`` subset of each item's average distance to its K nearest neighbours.

    ``metric`` is ``"jaccard-bow"`` (items are token collections) or
    ``"euclidean-feature"`` (items are vectors, unit-normalised first).
    """
    if k >= n:
        raise ValueError(f"K={k} must be smaller than the subset size n={n}")
    if n > len(items):
        raise ValueError(f"subset size {n} exceeds the {len(items)} available items")
    rng = rng or np.random.default_rng(0)
    pick = np.sort(rng.choice(len(items), size=n, replace=False))
    return knn_distances_from_matrix(_distance_matrix([items[i] for i in pick], metric), k)


def _distance_matrix(items: Sequence, metric: str) -> np.ndarray:
    if metric == "jaccard-bow":
        return jaccard_matrix(items)
    if metric == "euclidean-feature":
        return euclidean_matrix(np.stack([np.asarray(x, dtype=np.float64).reshape(-1) for x in items]))
    raise ValueError(f"unknown metric {metric!r}")


def knn_distances_from_matrix(dist: np.ndarray, k: int) -> float:
    d = np.array(dist, dtype=np.float64)
    np.fill_diagonal(d, np.inf)
    nearest = np.partition(d, k - 1, axis=1)[:, :k]
    return float(nearest.mean(axis=1).mean())


def knn_curve(items: Sequence, metric: str, sizes: Sequence[int], ks: Sequence[int],
              seed: int = 0) -> list[tuple[int, int, float]]:
    """(n, K, mean average distance) rows; one shared subset per n so K values are comparable."""
    out = []
    for n in sizes:
        rng = np.random.default_rng([seed, n])
        pick = np.sort(rng.choice(len(items), size=n, replace=False))
        dist = _distance_matrix([items[i] for i in pick], metric)
        for k in ks:
            if k >= n:
                raise ValueError(f"K={k} must be smaller than n={n}")
            out.append((n, k, knn_distances_from_matrix(dist, k)))
    return out
