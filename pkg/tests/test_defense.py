import math

import pytest
import torch

from conftest import toy_kg
from kgsec.boxes import BoxModel
from kgsec.defense import (
    DefenseConfig,
    adversarial_training,
    anomaly_score,
    anomaly_scores,
    audit,
    filter_and_retrain,
    filter_facts,
    integrated_defense,
    rank_anomalies,
)
from kgsec.graph import reverse_fact
from kgsec.synth import training_queries
from kgsec.training import TrainConfig, train_entity_model


def test_config_validation():
    DefenseConfig().validate()
    for kw in (dict(m=100), dict(m=-1), dict(n_qp_d=-1), dict(refresh=0)):
        with pytest.raises(ValueError):
            DefenseConfig(**kw).validate()


def test_anomaly_zero_when_projection_lands_on_tail():
    g = toy_kg(seed=1)
    m = BoxModel.for_graph(g, dim=6, seed=0).double()
    f = sorted(g.primary_facts)[0]
    with torch.no_grad():
        h = m.entity[m.index(f[0])]
        c, _ = m.project_tensors(h, torch.zeros_like(h), m.rel(f[1]))
        m.entity[m.index(f[2])] = c
    assert anomaly_score(f, m) == pytest.approx(0.0, abs=1e-12)


def test_scores_are_pure_and_nonnegative():
    g = toy_kg(seed=2)
    m = BoxModel.for_graph(g, dim=6, seed=1)
    facts = sorted(g.primary_facts)
    a = anomaly_scores(facts, m)
    b = anomaly_scores(facts[::-1], m)[::-1]
    assert a == b and min(a) >= 0
    ranked = rank_anomalies(g, m)
    assert [s for s, _ in ranked] == sorted((s for s, _ in ranked), reverse=True)


@pytest.mark.parametrize("m_pct", [0.0, 1.0, 7.5, 30.0])
def test_filter_removes_exact_count_with_reverse_partners(m_pct):
    g = toy_kg(seed=3)
    model = BoxModel.for_graph(g, dim=6, seed=0)
    pruned, removed = filter_facts(g, model, m_pct)
    assert len(removed) == math.ceil(m_pct / 100 * len(g.primary_facts))
    for f in removed:
        assert f not in pruned.facts and reverse_fact(f) not in pruned.facts
    pruned.check()
    if m_pct == 0:
        assert pruned is g


def test_audit_uses_provenance_only_for_reporting():
    g = toy_kg(seed=4)
    new = [("a0", "r3", "c0")] if ("a0", "r3", "c0") not in g.facts else [("a1", "r3", "c1")]
    gp = g.with_facts(new, "poison")
    rep = audit(new + [sorted(g.primary_facts)[0]], gp)
    assert rep["poison_removed"] == 1 and rep["precision"] == 0.5 and rep["recall"] == 1.0


def qfn(g):
    return training_queries(g, templates=((2, 1), (2, 2)), count=8, seed=0, sink_category="c")


def test_adversarial_training_zero_budget_is_plain_training():
    g = toy_kg(seed=5, p=0.25)
    cfg = TrainConfig(dim=6, epochs=3, batch=32, seed=2)
    m1, r = adversarial_training(g, qfn(g), 0, cfg)
    m2, _ = train_entity_model(g, qfn(g), cfg)
    assert r["augmented"] == 0
    assert all(torch.equal(a, b) for a, b in zip(m1.state_dict().values(), m2.state_dict().values()))


def test_adversarial_training_counts_and_labels():
    g = toy_kg(seed=6, p=0.25)
    cfg = TrainConfig(dim=6, epochs=2, batch=32, seed=2)
    qs = qfn(g)
    _, rep = adversarial_training(g, qs, 1, cfg, DefenseConfig(qp_steps=3))
    multi = [q for q in qs if q.answers and len(q.edges) > 1]
    assert rep["pool"] == len(multi)
    assert rep["augmented"] + rep["failed"] == rep["pool"]
    assert rep["training_set"] == len([q for q in qs if q.answers]) + rep["augmented"]
    assert rep["generations"] == 2


def test_integrated_defense_report_and_identity():
    g = toy_kg(seed=7, p=0.25)
    cfg = TrainConfig(dim=6, epochs=2, batch=32, seed=1)
    model, _ = train_entity_model(g, qfn(g), cfg)
    pruned, robust, rep = integrated_defense(g, model, cfg, qfn, DefenseConfig(m=0, n_qp_d=0))
    assert pruned is g
    base, _ = train_entity_model(g, qfn(g), cfg)
    assert all(torch.equal(a, b) for a, b in zip(robust.state_dict().values(), base.state_dict().values()))
    _, _, rep = integrated_defense(g, model, cfg, qfn, DefenseConfig(m=5, n_qp_d=1, qp_steps=2))
    assert {"filter", "adversarial"} <= set(rep)
    assert rep["filter"]["removed"] == math.ceil(0.05 * len(g.primary_facts))
    pruned, new, removed = filter_and_retrain(g, model, 5, cfg, qfn)
    assert len(removed) == rep["filter"]["removed"]
