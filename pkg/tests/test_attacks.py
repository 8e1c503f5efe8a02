import math

import pytest
import torch
from hypothesis import given, strategies as st

from conftest import toy_kg
from kgsec.attacks import (
    AttackConfig,
    AttackError,
    _replay,
    attack_anchors,
    beam_search_perturbation,
    co_optimize,
    kp_attack,
    make_surrogate,
    optimize_perturbation_embedding,
    qp_attack_many,
    retrograde_search,
    split_budget,
)
from kgsec.boxes import BoxModel, embed_queries
from kgsec.graph import KnowledgeGraph, TriggerPattern, match_trigger, validate_entity_query
from kgsec.synth import InsufficientQueries, sample_entity_queries
from kgsec.training import TrainConfig


def random_model(g, seed, dim=6):
    m = BoxModel.for_graph(g, dim=dim, seed=seed).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in m.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.1)
    return m


def state(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def same_state(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


# -- configuration -----------------------------------------------------------------

def test_taxonomy_rows_roundtrip():
    for row in range(1, 13):
        cfg = AttackConfig.from_row(row, target="x")
        assert cfg.taxonomy_row == row
    assert AttackConfig.from_row(12).encoder_known and AttackConfig.from_row(12).operator_known
    assert AttackConfig.from_row(1).vectors == "kp" and not AttackConfig.from_row(1).encoder_known


@pytest.mark.parametrize("kw", [dict(n_kp=-1), dict(n_qp=51), dict(lam=-1), dict(objective="x"),
                                dict(vectors="both", n_iter=0), dict(target=None)])
def test_config_rejects_bad_values(kw):
    base = dict(target="t")
    base.update(kw)
    with pytest.raises(ValueError):
        AttackConfig(**base).validate()


def test_config_dict_roundtrip():
    cfg = AttackConfig(target="t", trigger=TriggerPattern(("a0",), (("r1", "variable"),)), lam=0.3)
    d = cfg.asdict()
    d["lambda"] = d.pop("lam")
    assert AttackConfig.from_dict(d) == cfg


@given(st.integers(0, 500), st.integers(1, 20))
def test_split_budget(total, rounds):
    parts = split_budget(total, rounds)
    assert sum(parts) == total and len(parts) == rounds
    assert max(parts) - min(parts) <= 1


# -- retrograde search vs brute force ----------------------------------------------

@torch.no_grad()
def brute_retrograde(g, kstar, phi, m, n_kp):
    best = {}
    table = m.entity.detach()
    for v in kstar:
        for hc, r, tc in g.schema:
            if hc != g.entities[v]:
                continue
            c, _ = m.project_tensors(phi[v], torch.zeros_like(phi[v]), m.rel(r))
            for t in g.members.get(tc, ()):
                if t in kstar or (v, r, t) in g.facts:
                    continue
                d = float((table[m.index(t)] - c).norm())
                f = g.canonical((v, r, t))
                best[f] = min(best.get(f, math.inf), d)
    return set(sorted(best, key=lambda f: (best[f], f))[:n_kp])


@pytest.mark.parametrize("seed", range(20))
def test_retrograde_equals_brute_force(seed):
    g = toy_kg(n=15 + 35 * seed // 19, seed=seed, p=0.1)
    m = random_model(g, seed)
    kstar = sorted(g.entity_ids)[seed % 5:: 7][:3]
    gen = torch.Generator().manual_seed(seed)
    phi = {v: torch.randn(m.dim, generator=gen, dtype=torch.float64) for v in kstar}
    for n_kp in (1, 5, 12):
        got = retrograde_search(g, kstar, phi, m, n_kp)
        assert len(got) <= n_kp
        assert set(got.facts) == brute_retrograde(g, kstar, phi, m, n_kp)
        assert all(g.is_legal(f) for f in got.facts)


# -- beam search vs exhaustive BFS --------------------------------------------------

@torch.no_grad()
def exhaustive_best(g, center, m, roots, anchor_ok, max_depth):
    table = m.entity.detach()
    root = min(((float((table[m.index(e)] - center).norm()), e) for e in roots))[1]
    level = [(root, ())]
    complete = []
    for _ in range(max_depth):
        nxt = set()
        for f, seq in level:
            for r, u in g.in_edges(f):
                nxt.add((u, (r,) + seq))
        level = []
        for u, seq in sorted(nxt):
            c, o = table[m.index(u)], torch.zeros(m.dim, dtype=table.dtype)
            for r in seq:
                c, o = m.project_tensors(c, o, m.rel(r))
            s = float((c - center).norm())
            (complete if anchor_ok(u) else level).append((s, u, seq))
        level = [(u, seq) for _, u, seq in level]
    return min(complete) if complete else None


@pytest.mark.parametrize("seed", range(20))
def test_full_width_beam_equals_exhaustive(seed):
    g = toy_kg(n=12 + seed % 19, seed=100 + seed, p=0.15)
    m = random_model(g, seed)
    roots = list(g.members["c"])
    ok = lambda e: g.entities[e] == "a"  # noqa: E731
    gen = torch.Generator().manual_seed(seed)
    center = torch.randn(m.dim, generator=gen, dtype=torch.float64)
    for depth in (1, 2, 3):
        best = exhaustive_best(g, center, m, roots, ok, depth)
        got = beam_search_perturbation(g, center, m, 1, depth, roots, ok, beam_width=len(g.entities))
        if best is None:
            assert got.failed and not got.paths
            continue
        assert got.paths[0] == (best[1], best[2])
        assert math.isclose(got.scores[0], best[0], rel_tol=1e-12, abs_tol=1e-12)


def test_beam_recovers_unique_one_hop_path():
    ents = {"a0": "a", "a1": "a", "b0": "b", "c0": "c", "c1": "c"}
    facts = [("a0", "r3", "c0"), ("a1", "r3", "c1"), ("a1", "r1", "b0"), ("b0", "r2", "c1")]
    g = KnowledgeGraph.build(ents, facts, [("a", "r1", "b"), ("b", "r2", "c"), ("a", "r3", "c")])
    m = random_model(g, 0)
    center = m.entity.detach()[m.index("c0")]
    got = beam_search_perturbation(g, center, m, 1, 3, ["c0", "c1"], lambda e: g.entities[e] != "c")
    assert got.root == "c0" and got.paths == [("a0", ("r3",))]
    assert beam_search_perturbation(g, center, m, 0, 3).paths == []
    none = beam_search_perturbation(g, center, m, 1, 3, ["c0"], lambda e: False)
    assert none.failed and not none.paths


# -- perturbation optimization ------------------------------------------------------

def test_targeted_loss_starts_near_zero_at_own_center_and_never_rises():
    g = toy_kg(seed=3, p=0.25)
    m = random_model(g, 3)
    qs = sample_entity_queries(g, (2, 2), 3, 0, sink_category="c")
    with torch.no_grad():
        qc, qo = embed_queries(m, qs)
        m.entity[m.index("c0")] = qc[0]
    pc, po, traces = optimize_perturbation_embedding(qc[:1], qo[:1], [[m.index("c0")]], m, steps=10)
    assert traces[0][0] < 1e-9
    _, _, traces = optimize_perturbation_embedding(qc, qo, [[m.index("c1")]] * len(qs), m, steps=15)
    for tr in traces:
        assert all(b <= a for a, b in zip(tr, tr[1:]))
    assert (po >= 0).all()


# -- end-to-end contracts on a small trained model ----------------------------------

@pytest.fixture(scope="module")
def setting(small_kg, small_model):
    g = small_kg
    p = max(g.members["product"], key=lambda e: (len(g.neighbors(e, "vulnerable_to")), e))
    trig = TriggerPattern((p,), (("vulnerable_to", "variable"),))
    try:
        tq = sample_entity_queries(g, (2, 2), 6, 1, sink_category="cve", required_path=(p, ("vulnerable_to",)))
    except InsufficientQueries as exc:
        tq = exc.found
    oq = [q for q in sample_entity_queries(g, (2, 2), 12, 2, sink_category="cve") if not match_trigger(q, trig)]
    ans = set().union(*(q.answers for q in tq))
    target = next(e for e in g.members["cve"] if e not in ans)
    return g, small_model, trig, tq, oq, target


def cfg_for(setting, **kw):
    g, m, trig, tq, oq, target = setting
    base = dict(trigger=trig, target=target, n_kp=6, n_qp=2, n_iter=2, kp_steps=5, qp_steps=5)
    base.update(kw)
    return AttackConfig(**base).validate()


def test_kp_respects_budget_and_schema(setting):
    g, m, trig, tq, oq, target = setting
    before = state(m)
    gp, poison, rep = kp_attack(g, m, cfg_for(setting), tq, oq)
    assert same_state(before, m.state_dict())
    assert 0 < len(poison) <= 6
    assert all(g.is_legal(f) and f not in g.facts for f in poison.facts)
    assert set(gp.facts) >= set(g.facts)
    assert {f for f, p in gp.provenance.items() if p == "poison" and f in gp.primary_facts} == set(poison.facts)
    kstar = set(attack_anchors(cfg_for(setting)))
    assert all(f[0] in kstar or f[2] in kstar for f in poison.facts)


@pytest.mark.parametrize("objective", ["targeted", "untargeted"])
def test_qp_adds_paths_only(setting, objective):
    g, m, trig, tq, oq, target = setting
    before = state(m)
    cfg = cfg_for(setting, vectors="qp", objective=objective,
                  target=target if objective == "targeted" else None, vicinity=2)
    out, reps = qp_attack_many(tq, g, m, cfg)
    assert same_state(before, m.state_dict())
    for q, qs, r in zip(tq, out, reps):
        assert validate_entity_query(qs, g)
        assert set(q.edges) <= set(qs.edges)
        assert qs.answers == q.answers
        assert len(r["paths"]) <= cfg.n_qp
        assert qs.tag[0] <= q.tag[0] + cfg.n_qp


def test_co_single_round_is_kp_then_qp(setting):
    g, m, trig, tq, oq, target = setting
    cfg = cfg_for(setting, vectors="both", n_iter=1)
    gp, poison, adv, _ = co_optimize(g, tq, m, cfg, oq)
    gk, pk, _ = kp_attack(g, m, cfg, tq, oq, rounds=1)
    qk, _ = qp_attack_many(tq, gk, m, cfg)
    assert poison.facts == pk.facts
    assert [q.edges for q in adv] == [q.edges for q in qk]


@given(st.integers(0, 8), st.integers(0, 3), st.integers(1, 3))
def test_co_budgets(setting, n_kp, n_qp, n_iter):
    g, m, trig, tq, oq, target = setting
    cfg = cfg_for(setting, vectors="both", n_kp=n_kp, n_qp=n_qp, n_iter=n_iter, kp_steps=2, qp_steps=2)
    _, poison, adv, _ = co_optimize(g, tq[:2], m, cfg, oq[:2])
    assert len(poison) <= n_kp
    for q, qs in zip(tq, adv):
        assert len(qs.edges) - len(q.edges) <= n_qp * cfg.max_depth


def test_attack_errors(setting):
    g, m, trig, tq, oq, target = setting
    with pytest.raises(AttackError):
        kp_attack(g, m, cfg_for(setting, vectors="qp"), tq, oq)
    with pytest.raises(AttackError):
        qp_attack_many(tq, g, m, cfg_for(setting, vectors="kp"))
    with pytest.raises(AttackError):
        kp_attack(g, m, cfg_for(setting), [], oq)


def test_surrogates(setting, small_queries):
    g, m, trig, tq, oq, target = setting
    tc = TrainConfig(dim=8, epochs=1, batch=128)
    assert make_surrogate(g, (8, 1), 0, small_queries, tc, m, True, True) is m
    before = state(m)
    s = make_surrogate(g, (6, 2), 1, small_queries, tc)
    assert s is not m and s.dim == 6 and s.depth == 2
    kp_attack(g, s, cfg_for(setting, n_iter=1), tq, oq)
    assert same_state(before, m.state_dict())
    enc = make_surrogate(g, (6, 2), 1, small_queries, tc, m, encoder_known=True)
    assert torch.equal(enc.entity, m.entity) and enc.dim == m.dim
    op = make_surrogate(g, (6, 2), 1, small_queries, tc, m, operator_known=True)
    assert torch.equal(op.rel_center, m.rel_center) and not torch.equal(op.entity, m.entity)
    with pytest.raises(ValueError):
        make_surrogate(g, (0, 1))
