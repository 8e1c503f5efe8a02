"""Ranking metrics: MRR, NDCG@K and HIT@K.

A ranking is a sequence of candidate ids ordered best-first; ground truths
are collections of ids. Ranks are 1-based. A ground truth missing from the
ranking gets rank ``len(ranking) + 1``.
"""
from __future__ import annotations

import math
from typing import Collection, Sequence


def ranks(ranking: Sequence[str], truths: Collection[str]) -> list[tuple[int, bool]]:
    """(rank, found) for each ground truth, in sorted ground-truth order."""
    pos = {e: i + 1 for i, e in enumerate(ranking)}
    miss = len(ranking) + 1
    return [(pos.get(t, miss), t in pos) for t in sorted(truths)]


def mrr(rankings: Sequence[Sequence[str]], truths: Sequence[Collection[str]]) -> float:
    total, n = 0.0, 0
    for ranking, gt in zip(rankings, truths, strict=True):
        if not gt:
            raise ValueError("every query needs at least one ground truth")
        for r, _ in ranks(ranking, gt):
            total += 1.0 / r
            n += 1
    return total / n if n else 0.0


def missing_truths(rankings, truths) -> list[int]:
    """Indices of queries with a ground truth absent from the ranking."""
    return [i for i, (rk, gt) in enumerate(zip(rankings, truths))
            if any(not found for _, found in ranks(rk, gt))]


def ndcg_at_k(rankings: Sequence[Sequence[str]], truths: Sequence[Collection[str]], k: int = 5) -> float:
    if k < 1:
        raise ValueError("K must be at least 1")
    scores = []
    for ranking, gt in zip(rankings, truths, strict=True):
        gt = set(gt)
        dcg = sum(1.0 / math.log2(i + 2) for i, e in enumerate(ranking[:k]) if e in gt)
        ideal = sum(1.0 / math.log2(i + 2) for i in range(min(k, len(gt))))
        scores.append(dcg / ideal if ideal else 0.0)
    return sum(scores) / len(scores) if scores else 0.0


def hit_at_k(rankings: Sequence[Sequence[str]], truths: Sequence[Collection[str]], k: int = 1) -> float:
    if k < 1:
        raise ValueError("K must be at least 1")
    hits = [1.0 if set(ranking[:k]) & set(gt) else 0.0
            for ranking, gt in zip(rankings, truths, strict=True)]
    return sum(hits) / len(hits) if hits else 0.0


def random_mrr(n_candidates: int) -> float:
    """Expected reciprocal rank of one answer under a uniformly random ranking."""
    return sum(1.0 / k for k in range(1, n_candidates + 1)) / n_candidates
