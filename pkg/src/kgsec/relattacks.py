"""Poisoning and perturbation of relation queries.

Same optimize-then-approximate skeleton as the entity-query attacks, with the
distance taken between softmax score vectors of the relation scorer.
"""
from __future__ import annotations

import logging
from typing import Sequence

import torch

from .attacks import AttackConfig, AttackError, PoisonSet, _descend, split_budget
from .graph import Fact, KnowledgeGraph, RelationQuery, reverse_fact
from .relscore import RelationScorer

log = logging.getLogger(__name__)


def relation_trigger(q: RelationQuery, g: KnowledgeGraph, anchors: Sequence[str],
                     relation: str = "includes") -> bool:
    """True when the query head hangs off one of the anchors through ``relation``."""
    return any((a, relation, q.head) in g.facts for a in anchors)


def _probs(scorer, q: RelationQuery, table, extra=None):
    return torch.softmax(_score(scorer, q, table, extra), -1)


def _score(scorer: RelationScorer, q: RelationQuery, table, extra=None):
    """Score the pair; ``extra`` maps an entity to a virtual message added in round 0."""
    if not extra:
        return scorer.score_context(q.head, q.tail, q.context, q.context_entities, table)
    ents = sorted(set(q.context_entities) | {q.head, q.tail})
    local = {e: i for i, e in enumerate(ents)}
    h = table[torch.tensor([scorer.ent_index[e] for e in ents])]
    src, rel, dst = scorer.edge_tensor(q.context, local)
    deg = torch.zeros(len(h), dtype=h.dtype).index_add_(0, dst, torch.ones(len(dst), dtype=h.dtype))
    for k in range(scorer.rounds):
        msg = torch.einsum("eij,ej->ei", scorer.message[k][rel], h[src])
        agg = torch.zeros_like(h).index_add_(0, dst, msg)
        d = deg.clone()
        if k == 0:
            for e, p in extra.items():
                row = torch.zeros_like(h)
                row[local[e]] = 1
                agg = agg + row * p
                d[local[e]] += 1
        h = torch.tanh(h @ scorer.self_loop[k].T + agg / d.clamp_min(1).unsqueeze(-1))
    return scorer.score_states(h[local[q.head]].unsqueeze(0), h[local[q.tail]].unsqueeze(0))[0]


def _ref(scorer: RelationScorer, label: str, dtype) -> torch.Tensor:
    v = torch.zeros(len(scorer.labels), dtype=dtype)
    v[scorer.labels.index(label)] = 1
    return v


def relation_loss_target(scorer, q, table, cfg: AttackConfig, extra=None):
    p = _probs(scorer, q, table, extra)
    if cfg.targeted:
        return (p - _ref(scorer, cfg.target, p.dtype)).norm()
    return -(p - _ref(scorer, q.answer, p.dtype)).norm()


def optimize_relation_anchor(scorer: RelationScorer, anchor: str, target_queries, other_queries,
                             cfg: AttackConfig):
    """Optimize the anchor's table row against trigger and non-trigger queries."""
    base = scorer.entity.detach()
    row = scorer.index(anchor)
    idx = torch.tensor([row])
    with torch.no_grad():
        clean = [_probs(scorer, q, base) for q in other_queries]

    def table_with(x):
        return base.index_put((idx,), x.unsqueeze(0))

    def f(x):
        t = table_with(x)
        loss = sum(relation_loss_target(scorer, q, t, cfg) for q in target_queries) / len(target_queries)
        if other_queries and cfg.lam:
            keep = sum((_probs(scorer, q, t) - c).norm() for q, c in zip(other_queries, clean))
            loss = loss + cfg.lam * keep / len(other_queries)
        return loss

    return _descend(f, base[row], cfg.kp_steps, cfg.step_size, [])


def message_candidates(g: KnowledgeGraph, scorer: RelationScorer, v: str, pool=None):
    """Facts that would add a message into ``v``: ``(u, r, v)`` legal under the schema."""
    cat = g.entities[v]
    out = []
    for hc, r, tc in sorted(g.schema):
        if tc != cat or r not in scorer.rel_index:
            continue
        for u in g.members.get(hc, ()):
            if u == v or (pool is not None and u not in pool) or (u, r, v) in g.facts:
                continue
            out.append((u, r, v))
    return out


def _rank_messages(scorer: RelationScorer, cands: Sequence[Fact], goal: torch.Tensor, table=None):
    table = scorer.entity.detach() if table is None else table
    if not cands:
        return []
    with torch.no_grad():
        u = table[torch.tensor([scorer.index(f[0]) for f in cands])]
        r = torch.tensor([scorer.rel_index[f[1]] for f in cands])
        m = torch.einsum("eij,ej->ei", scorer.message[0][r], u)
        d = (m - goal).norm(dim=-1).tolist()
    return sorted(zip(d, cands), key=lambda x: (x[0], x[1]))


def _canonical(g: KnowledgeGraph, f: Fact) -> Fact:
    return g.canonical(f) if g.reverse else f


def relation_kp_attack(g: KnowledgeGraph, scorer: RelationScorer, cfg: AttackConfig,
                       target_queries: Sequence[RelationQuery],
                       other_queries: Sequence[RelationQuery] = ()):
    """Poison facts around the trigger anchor; returns (poisoned graph, poison, report)."""
    cfg.validate()
    if cfg.trigger is None or not target_queries:
        raise AttackError("relation poisoning needs a trigger and trigger queries")
    poison = PoisonSet()
    report = {"rounds": []}
    for anchor in cfg.trigger.anchors:
        phi, trace = optimize_relation_anchor(scorer, anchor, target_queries, other_queries, cfg)
        k = scorer.index(anchor)
        with torch.no_grad():
            # the message whose arrival best reproduces the optimized row in round 0
            goal = (phi - scorer.entity[k]) @ scorer.self_loop[0].T
        ranked = _rank_messages(scorer, message_candidates(g, scorer, anchor), goal)
        seen = set(poison.facts)
        budget = split_budget(cfg.n_kp, len(cfg.trigger.anchors))[len(report["rounds"])]
        added = 0
        for d, f in ranked:
            c = _canonical(g, f)
            if c in seen:
                continue
            seen.add(c)
            poison.facts.append(c)
            poison.scores.append(d)
            added += 1
            if added == budget:
                break
        report["rounds"].append({"anchor": anchor, "loss_initial": trace[0],
                                 "loss_final": trace[-1], "added": added})
    assert len(poison) <= cfg.n_kp
    return g.with_facts(poison.facts, "poison"), poison, report


def relation_qp_attack(q: RelationQuery, g: KnowledgeGraph, scorer: RelationScorer,
                       cfg: AttackConfig) -> tuple[RelationQuery, dict]:
    """Append up to ``n_qp`` context facts pointing into the pair."""
    cfg.validate()
    if cfg.n_qp == 0:
        return q, {"added": [], "failed": False}
    table = scorer.entity.detach()
    d = table.shape[1]
    ends = (q.head, q.tail)

    def f(x):
        return relation_loss_target(scorer, q, table, cfg, {q.head: x[:d], q.tail: x[d:]})

    x, trace = _descend(f, torch.zeros(2 * d, dtype=table.dtype), cfg.qp_steps, cfg.step_size, [])
    pool = set(q.context_entities)
    ranked = []
    for i, v in enumerate(ends):
        cands = [c for c in message_candidates(g, scorer, v, pool) if c not in q.context]
        ranked += _rank_messages(scorer, cands, x[i * d:(i + 1) * d])
    ranked.sort(key=lambda s: (s[0], s[1]))
    added = [f for _, f in ranked[:cfg.n_qp]]
    if not added:
        return q, {"added": [], "failed": True, "trace": trace}
    ctx = set(q.context) | set(added)
    if g.reverse:
        ctx |= {reverse_fact(f) for f in added}
    ents = tuple(sorted(set(q.context_entities) | {f[0] for f in added}))
    out = RelationQuery(q.id, q.head, q.tail, tuple(sorted(ctx)), ents, q.answer, q.trigger)
    return out, {"added": [list(f) for f in added], "failed": False, "trace": trace}
