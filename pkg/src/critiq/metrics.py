"""Ranking and explanation metrics over binary relevance.

All functions take a ranking (sequence of item indices, best first) and a
relevant set; every metric is in [0, 1] except the falling-MAP delta,
which is signed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmptyRelevantSet(ValueError):
    pass


def _as_relevant(relevant):
    rel = frozenset(int(i) for i in relevant)
    if not rel:
        raise EmptyRelevantSet("relevant set must be nonempty")
    return rel


def ndcg(ranking, relevant):
    """Binary NDCG over the full ranking: gain 1/log2(rank+1), normalized
    by the ideal ordering (relevant count truncated to the list length)."""
    rel = _as_relevant(relevant)
    dcg = 0.0
    for pos, item in enumerate(ranking, start=1):
        if int(item) in rel:
            dcg += 1.0 / np.log2(pos + 1)
    ideal_hits = min(len(rel), len(ranking))
    idcg = sum(1.0 / np.log2(k + 1) for k in range(1, ideal_hits + 1))
    return dcg / idcg if idcg > 0 else 0.0


def precision_at_n(ranking, relevant, n):
    rel = _as_relevant(relevant)
    if n <= 0:
        raise ValueError("n must be positive")
    top = ranking[:n]
    hits = sum(1 for item in top if int(item) in rel)
    return hits / n


def recall_at_n(ranking, relevant, n):
    rel = _as_relevant(relevant)
    if n <= 0:
        raise ValueError("n must be positive")
    hits = sum(1 for item in ranking[:n] if int(item) in rel)
    return hits / len(rel)


def r_precision(ranking, relevant):
    """Precision at a cutoff equal to the relevant count."""
    rel = _as_relevant(relevant)
    return precision_at_n(ranking, rel, len(rel))


def map_at_n(ranking, relevant, n):
    """Average precision at n, normalized by min(|relevant|, n)."""
    rel = _as_relevant(relevant)
    if n <= 0:
        raise ValueError("n must be positive")
    hits = 0
    ap = 0.0
    for pos, item in enumerate(ranking[:n], start=1):
        if int(item) in rel:
            hits += 1
            ap += hits / pos
    return ap / min(len(rel), n)


def f_map(ranking_before, ranking_after, affected, n):
    """Falling MAP: MAP@n of the affected items before minus after the
    critique. Positive means the affected items dropped."""
    affected = _as_relevant(affected)
    return map_at_n(ranking_before, affected, n) - map_at_n(ranking_after, affected, n)


@dataclass
class RankingMetrics:
    r_precision: float
    ndcg: float
    map_at: dict
    precision_at: dict
    recall_at: dict

    def as_dict(self):
        out = {"r_precision": self.r_precision, "ndcg": self.ndcg}
        for n, v in self.map_at.items():
            out[f"map@{n}"] = v
        for n, v in self.precision_at.items():
            out[f"precision@{n}"] = v
        for n, v in self.recall_at.items():
            out[f"recall@{n}"] = v
        return out


def evaluate_rankings(per_user, ns=(5, 10, 20)):
    """Average metrics over (ranking, relevant) pairs; pairs with an empty
    relevant set are skipped."""
    rows = []
    for ranking, relevant in per_user:
        relevant = set(int(i) for i in relevant)
        if not relevant:
            continue
        row = [r_precision(ranking, relevant), ndcg(ranking, relevant)]
        for n in ns:
            row.append(map_at_n(ranking, relevant, n))
        for n in ns:
            row.append(precision_at_n(ranking, relevant, n))
        for n in ns:
            row.append(recall_at_n(ranking, relevant, n))
        rows.append(row)
    if not rows:
        raise EmptyRelevantSet("no users with a nonempty relevant set")
    mean = np.mean(np.asarray(rows, dtype=np.float64), axis=0)
    k = len(ns)
    return RankingMetrics(
        r_precision=float(mean[0]),
        ndcg=float(mean[1]),
        map_at={n: float(v) for n, v in zip(ns, mean[2:2 + k])},
        precision_at={n: float(v) for n, v in zip(ns, mean[2 + k:2 + 2 * k])},
        recall_at={n: float(v) for n, v in zip(ns, mean[2 + 2 * k:2 + 3 * k])},
    )


def evaluate_model(model, dataset, split="test", ns=(5, 10, 20), modalities="r"):
    """Rank with the chosen inference modalities, excluding each user's
    training items, and score against the held-out split."""
    held = {"val": dataset.r_val, "test": dataset.r_test}[split]
    pairs = []
    for u in range(dataset.n_users):
        relevant = held.row(u)
        if len(relevant) == 0:
            continue
        r_row = dataset.r_train.row(u) if "r" in modalities else None
        k_row = dataset.k_user.row(u) if "k" in modalities else None
        if r_row is None and k_row is None:
            continue
        items, _ = model.recommend(r_row, k_row, exclude=dataset.r_train.row(u))
        pairs.append((items, relevant))
    return evaluate_rankings(pairs, ns)
