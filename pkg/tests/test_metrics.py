import math
import random

import pytest
from hypothesis import given, strategies as st

from kgsec.metrics import hit_at_k, mrr, ndcg_at_k, random_mrr, ranks


def ref_mrr(rankings, truths):
    rr = []
    for ranking, gt in zip(rankings, truths):
        for t in gt:
            rr.append(1.0 / (ranking.index(t) + 1) if t in ranking else 1.0 / (len(ranking) + 1))
    return sum(rr) / len(rr)


def ref_ndcg(rankings, truths, k):
    vals = []
    for ranking, gt in zip(rankings, truths):
        rel = [1 if e in gt else 0 for e in ranking[:k]]
        dcg = sum(r / math.log2(i + 2) for i, r in enumerate(rel))
        idcg = sum(1 / math.log2(i + 2) for i in range(min(k, len(gt))))
        vals.append(dcg / idcg)
    return sum(vals) / len(vals)


def ref_hit(rankings, truths, k):
    return sum(any(e in gt for e in ranking[:k]) for ranking, gt in zip(rankings, truths)) / len(rankings)


def fixture(rng: random.Random):
    n = rng.randint(1, 30)
    rankings, truths = [], []
    for _ in range(rng.randint(1, 8)):
        ents = [f"e{i}" for i in range(n)]
        rng.shuffle(ents)
        gt = set(rng.sample([f"e{i}" for i in range(n + 3)], rng.randint(1, min(4, n))))
        rankings.append(ents)
        truths.append(gt)
    return rankings, truths


def test_worked_examples():
    r = [f"e{i}" for i in range(10)]
    assert mrr([r], [{"e0"}]) == 1.0
    assert mrr([r], [{"e1"}]) == 0.5
    assert mrr([r, r, r], [{"e0"}, {"e3"}, {"e9"}]) == pytest.approx(0.45, abs=1e-15)
    assert ndcg_at_k([r], [{"e0"}], 5) == 1.0
    assert ndcg_at_k([r], [{"e7"}], 5) == 0.0
    assert ndcg_at_k([r], [{"e2"}], 5) == 0.5
    assert hit_at_k([r], [{"e0"}], 1) == 1.0
    assert hit_at_k([r], [{"e1"}], 1) == 0.0
    assert hit_at_k([r] * 4, [{"e0"}, {"e1"}, {"e0"}, {"e4"}], 1) == 0.5


def test_missing_truth_rank():
    assert ranks(["a", "b"], {"z"}) == [(3, False)]
    assert mrr([["a", "b"]], [{"z"}]) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        mrr([["a"]], [set()])
    with pytest.raises(ValueError):
        ndcg_at_k([["a"]], [{"a"}], 0)


def test_against_reference_on_random_fixtures():
    rng = random.Random(12345)
    for _ in range(100):
        rk, gt = fixture(rng)
        k = rng.randint(1, 6)
        assert abs(mrr(rk, gt) - ref_mrr(rk, gt)) <= 1e-12
        assert abs(ndcg_at_k(rk, gt, k) - ref_ndcg(rk, gt, k)) <= 1e-12
        assert abs(hit_at_k(rk, gt, k) - ref_hit(rk, gt, k)) <= 1e-12


@given(st.integers(0, 2**31))
def test_aggregates_are_bounded(seed):
    rk, gt = fixture(random.Random(seed))
    for v in (mrr(rk, gt), ndcg_at_k(rk, gt, 5), hit_at_k(rk, gt, 3)):
        assert 0.0 <= v <= 1.0


def test_random_baseline():
    assert random_mrr(1) == 1.0
    assert random_mrr(4) == pytest.approx((1 + 1 / 2 + 1 / 3 + 1 / 4) / 4)
