"""Poisoning and query-perturbation attacks on the box-embedding reasoner.

Every attack follows the same two-phase recipe: optimize the embeddings we
would like the system to hold (anchor embeddings for poisoning, an extra
query box for perturbation), then search the discrete space of facts or
query paths for structures whose embeddings approximate them.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .boxes import BatchExecutor, BoxModel, candidate_rows, compile_query
from .graph import (
    VAR_PREFIX,
    EntityQuery,
    Fact,
    GraphError,
    KnowledgeGraph,
    TriggerPattern,
    answer_by_traversal,
    sink_categories,
    validate_entity_query,
)

log = logging.getLogger(__name__)

VECTORS = ("kp", "qp", "both")
OBJECTIVES = ("targeted", "untargeted")


class AttackError(RuntimeError):
    pass


@dataclass
class AttackConfig:
    vectors: str = "kp"
    objective: str = "targeted"
    target: str | None = None
    trigger: TriggerPattern | None = None
    n_kp: int = 100
    n_qp: int = 2
    n_iter: int = 5
    lam: float = 0.1
    delta: str = "l2"
    encoder_known: bool = True
    operator_known: bool = True
    surrogate: tuple[int, int] = (64, 1)
    kp_steps: int = 40
    qp_steps: int = 40
    step_size: float = 0.5
    minibatch: int = 32
    vicinity: int | None = 2
    max_depth: int = 3
    beam_width: int | None = None
    refit_fraction: float = 0.1
    anchor_categories: tuple[str, ...] | None = None
    seed: int = 0
    max_n_kp: int = 2000
    max_n_qp: int = 50
    max_n_iter: int = 50

    def validate(self) -> "AttackConfig":
        if self.vectors not in VECTORS:
            raise ValueError(f"vectors must be one of {VECTORS}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.objective == "targeted" and not self.target:
            raise ValueError("a targeted attack needs a target answer")
        if self.vectors == "both" and self.n_iter < 1:
            raise ValueError("co-optimization needs n_iter >= 1")
        for name, cap in (("n_kp", self.max_n_kp), ("n_qp", self.max_n_qp), ("n_iter", self.max_n_iter)):
            v = getattr(self, name)
            if v < 0 or v > cap:
                raise ValueError(f"{name}={v} outside [0, {cap}]")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.delta not in ("l2", "box"):
            raise ValueError("delta must be 'l2' or 'box'")
        if min(self.surrogate) < 1:
            raise ValueError("surrogate spec must be positive")
        return self

    @property
    def targeted(self) -> bool:
        return self.objective == "targeted"

    @property
    def taxonomy_row(self) -> int:
        base = {"kp": 0, "qp": 4, "both": 8}[self.vectors]
        return base + 1 + int(self.encoder_known) + 2 * int(self.operator_known)

    @classmethod
    def from_row(cls, row: int, **kw) -> "AttackConfig":
        if not 1 <= row <= 12:
            raise ValueError("taxonomy rows run from 1 to 12")
        vec = VECTORS[(row - 1) // 4]
        k = (row - 1) % 4
        return cls(vectors=vec, encoder_known=bool(k & 1), operator_known=bool(k & 2), **kw)

    def with_(self, **kw) -> "AttackConfig":
        return replace(self, **kw)

    def asdict(self) -> dict:
        d = asdict(self)
        if self.trigger is not None:
            d["trigger"] = {"anchors": list(self.trigger.anchors),
                            "path": [list(p) for p in self.trigger.path]}
        d["surrogate"] = list(self.surrogate)
        if self.anchor_categories is not None:
            d["anchor_categories"] = list(self.anchor_categories)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        t = d.get("trigger")
        if isinstance(t, dict):
            d["trigger"] = TriggerPattern(tuple(t["anchors"]), tuple(tuple(p) for p in t["path"]))
        if "surrogate" in d:
            d["surrogate"] = tuple(d["surrogate"])
        if d.get("anchor_categories") is not None:
            d["anchor_categories"] = tuple(d["anchor_categories"])
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class PoisonSet:
    facts: list[Fact] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.facts)

    def extend(self, other: "PoisonSet") -> None:
        self.facts.extend(other.facts)
        self.scores.extend(other.scores)


@dataclass
class Perturbation:
    """Extra logical paths, each ``(anchor, relations)`` ending at the query sink."""
    paths: list[tuple[str, tuple[str, ...]]] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    root: str | None = None
    failed: bool = False

    def __len__(self):
        return len(self.paths)


# -- distances -------------------------------------------------------------------

def _delta(model: BoxModel, kind: str, center, offset, points):
    if kind == "l2":
        return (points - center).norm(dim=-1)
    return model.distance_tensors(points, center, offset)


class _Objective:
    """Mean over queries of the mean Delta to each query's reference rows."""

    def __init__(self, model: BoxModel, queries: Sequence[EntityQuery],
                 refs: Sequence[Sequence[int]], kind: str):
        self.queries = list(queries)
        self.plans = [compile_query(q, model) for q in self.queries]
        self.refs = [list(r) for r in refs]
        self.kind = kind
        self.model = model
        self._full = None

    def __len__(self):
        return len(self.queries)

    def _parts(self, idx):
        pq, pr, w = [], [], []
        for j, i in enumerate(idx):
            ref = self.refs[i]
            for r in ref:
                pq.append(j)
                pr.append(r)
                w.append(1.0 / (len(ref) * len(idx)))
        return BatchExecutor([self.plans[i] for i in idx]), torch.tensor(pq), torch.tensor(pr), w

    def parts(self, idx=None):
        if idx is None:
            if self._full is None:
                self._full = self._parts(range(len(self)))
            return self._full
        return self._parts(list(idx))

    def value(self, table, parts):
        ex, pq, pr, w = parts
        c, o = ex.run(self.model, table)
        d = _delta(self.model, self.kind, c[pq], o[pq], table[pr])
        return (d * torch.tensor(w, dtype=d.dtype)).sum()


def _rows(model: BoxModel, ids) -> list[int]:
    return [model.index(e) for e in sorted(ids)]


def kp_loss(model: BoxModel, table, target_obj: _Objective, other_obj: _Objective | None,
            lam: float, sign: float, t_parts=None, o_parts=None):
    """``sign * E_target Delta + lam * E_other Delta`` on an entity table."""
    loss = sign * target_obj.value(table, t_parts or target_obj.parts())
    if other_obj is not None and len(other_obj) and lam:
        loss = loss + lam * other_obj.value(table, o_parts or other_obj.parts())
    return loss


def _descend(f, x0: torch.Tensor, steps: int, step_size: float, trace: list,
             batch_f=None, rng=None, max_halvings: int = 20):
    """Normalized gradient descent with backtracking; keeps the best iterate under ``f``."""
    x = x0.detach().clone()
    with torch.no_grad():
        best = float(f(x))
    best_x = x.clone()
    trace.append(best)
    for _ in range(steps):
        fb = batch_f(rng) if batch_f is not None else f
        xv = x.clone().requires_grad_(True)
        val = fb(xv)
        (g,) = torch.autograd.grad(val, xv)
        gn = g.norm()
        if not torch.isfinite(gn) or gn == 0:
            break
        direction = g / gn
        t = step_size
        moved = False
        with torch.no_grad():
            for _h in range(max_halvings + 1):
                cand = x - t * direction
                if float(fb(cand)) <= float(val):
                    x = cand
                    moved = True
                    break
                t /= 2
        if not moved:
            break
        with torch.no_grad():
            full = float(f(x))
        if full <= best:
            best, best_x = full, x.clone()
        trace.append(best)
    return best_x, trace


def optimize_anchor_embeddings(model: BoxModel, kstar: Sequence[str], target_queries: Sequence[EntityQuery],
                               other_queries: Sequence[EntityQuery] = (), target: str | None = None,
                               lam: float = 0.1, steps: int = 40, step_size: float = 0.5,
                               delta: str = "l2", minibatch: int | None = 32, seed: int = 0):
    """Optimize the embeddings of ``kstar`` with every other entity frozen.

    Targeted (``target`` given): pull target queries towards ``target``.
    Untargeted: push them away from their own answers. Non-target queries are
    kept near their answers with weight ``lam``. Returns ``({entity: vector},
    trace)``; the trace holds the full objective of the best iterate so far.
    """
    if not target_queries:
        raise AttackError("empty target query set")
    kstar = sorted(set(kstar))
    rows = torch.tensor(_rows(model, kstar))
    base = model.entity.detach()
    sign = 1.0
    if target is not None:
        refs = [[model.index(target)]] * len(target_queries)
    else:
        refs = [_rows(model, q.answers) for q in target_queries]
        sign = -1.0
    t_obj = _Objective(model, target_queries, refs, delta)
    o_obj = _Objective(model, other_queries, [_rows(model, q.answers) for q in other_queries], delta) \
        if other_queries and lam else None

    def table_of(x):
        return base.index_put((rows,), x)

    def full(x):
        return kp_loss(model, table_of(x), t_obj, o_obj, lam, sign)

    batch_f = None
    big = minibatch and (len(t_obj) > minibatch or (o_obj is not None and len(o_obj) > minibatch))
    if big:
        def batch_f(rng):
            ti = sorted(rng.choice(len(t_obj), min(minibatch, len(t_obj)), replace=False))
            tp = t_obj.parts(ti)
            op = None
            if o_obj is not None:
                oi = sorted(rng.choice(len(o_obj), min(minibatch, len(o_obj)), replace=False))
                op = o_obj.parts(oi)
            return lambda x: kp_loss(model, table_of(x), t_obj, o_obj, lam, sign, tp, op)

    with torch.enable_grad():
        x, trace = _descend(full, base[rows], steps, step_size, [], batch_f,
                            np.random.default_rng(seed))
    return {e: x[i].detach() for i, e in enumerate(kstar)}, trace


def retrograde_search(g: KnowledgeGraph, kstar: Sequence[str], phi_plus: dict, model: BoxModel,
                      n_kp: int, exclude: Sequence[Fact] = ()) -> PoisonSet:
    """Pick the ``n_kp`` facts ``v -r-> v'`` whose projection of ``phi_plus[v]`` lands nearest ``v'``."""
    kset = set(kstar)
    missing = kset - set(phi_plus)
    if missing:
        raise AttackError(f"no optimized embedding for {sorted(missing)}")
    if n_kp <= 0:
        return PoisonSet()
    skip = {g.canonical(f) for f in exclude}
    table = model.entity.detach()
    scored = []
    with torch.no_grad():
        for v in sorted(kset):
            pv = phi_plus[v].to(table.dtype)
            for r, tcat in g.relation_tails(g.entities[v]):
                rows = model.members(tcat)
                if not len(rows):
                    continue
                c, _ = model.project_tensors(pv, torch.zeros_like(pv), model.rel(r))
                dist = (table[rows] - c).norm(dim=-1).tolist()
                for row, d in zip(rows.tolist(), dist):
                    t = model.entity_ids[row]
                    if t in kset or (v, r, t) in g.facts:
                        continue
                    f = g.canonical((v, r, t))
                    if f in skip:
                        continue
                    scored.append((d, (v, r, t), f))
    if not scored:
        log.warning("retrograde search found no candidate facts")
        return PoisonSet()
    scored.sort(key=lambda s: (s[0], s[1]))
    out = PoisonSet()
    seen = set()
    for d, _, f in scored:
        if f in seen:
            continue
        seen.add(f)
        out.facts.append(f)
        out.scores.append(d)
        if len(out) == n_kp:
            break
    return out


def split_budget(total: int, rounds: int) -> list[int]:
    rounds = max(1, rounds)
    return [total // rounds + (1 if i < total % rounds else 0) for i in range(rounds)]


def attack_anchors(cfg: AttackConfig) -> list[str]:
    """Entities whose embeddings the poisoning step optimizes."""
    if cfg.trigger is None:
        raise AttackError("poisoning needs a trigger pattern")
    ks = list(cfg.trigger.anchors)
    if cfg.targeted:
        ks.append(cfg.target)
    return sorted(set(ks))


def kp_attack(g: KnowledgeGraph, model: BoxModel, cfg: AttackConfig,
              target_queries: Sequence[EntityQuery], other_queries: Sequence[EntityQuery] = (),
              refit: Callable[[BoxModel, KnowledgeGraph], BoxModel] | None = None,
              rounds: int | None = None):
    """Interleave anchor optimization and retrograde search; returns (poisoned graph, poison, report)."""
    cfg.validate()
    if cfg.vectors not in ("kp", "both"):
        raise AttackError("configuration does not include knowledge poisoning")
    rounds = cfg.n_iter if rounds is None else rounds
    rounds = max(1, rounds)
    kstar = attack_anchors(cfg)
    budgets = split_budget(cfg.n_kp, rounds)
    poison = PoisonSet()
    current, gi = model, g
    report = {"rounds": [], "flag": None}
    improved = False
    for i, budget in enumerate(budgets):
        phi, trace = optimize_anchor_embeddings(
            current, kstar, target_queries, other_queries, cfg.target if cfg.targeted else None,
            cfg.lam, cfg.kp_steps, cfg.step_size, cfg.delta, cfg.minibatch, cfg.seed + i)
        improved |= trace[-1] < trace[0]
        ps = retrograde_search(gi, kstar, phi, current, budget, exclude=poison.facts)
        poison.extend(ps)
        gi = g.with_facts(poison.facts, "poison")
        report["rounds"].append({"loss_initial": trace[0], "loss_final": trace[-1],
                                 "steps": len(trace) - 1, "added": len(ps)})
        if refit is not None and i < len(budgets) - 1 and len(ps):
            current = refit(current, gi)
    if not improved:
        report["flag"] = "no_improvement"
    assert len(poison) <= cfg.n_kp
    return gi, poison, report


# -- query perturbation ----------------------------------------------------------

def qp_loss(model: BoxModel, qc, qo, pc, po, ref_pairs, kind: str, sign: float):
    """Per-query loss of the intersection of the query box with the extra box."""
    c, o = model.intersect_tensors(torch.stack([qc, pc], -2), torch.stack([qo, po], -2))
    q_idx, points, w = ref_pairs
    d = _delta(model, kind, c[q_idx], o[q_idx], points)
    out = torch.zeros(len(qc), dtype=d.dtype).index_add(0, q_idx, d * w)
    return sign * out


def _ref_pairs(model: BoxModel, refs: Sequence[Sequence[int]], table):
    q_idx, rows, w = [], [], []
    for i, ref in enumerate(refs):
        for r in ref:
            q_idx.append(i)
            rows.append(r)
            w.append(1.0 / len(ref))
    return torch.tensor(q_idx), table[torch.tensor(rows)], torch.tensor(w, dtype=table.dtype)


def optimize_perturbation_embedding(qc, qo, refs: Sequence[Sequence[int]], model: BoxModel,
                                    steps: int = 40, objective: str = "targeted",
                                    step_size: float = 0.5, delta: str = "l2", table=None,
                                    max_halvings: int = 20):
    """Optimize one extra box per query, starting from the query box itself.

    ``qc, qo`` are ``(B, d)`` query boxes held fixed; ``refs[i]`` are the entity
    rows the loss of query ``i`` refers to (the target answer, or the ground
    truth for untargeted attacks). Returns (centers, offsets, per-query traces).
    """
    table = model.entity.detach() if table is None else table
    qc, qo = qc.detach(), qo.detach()
    sign = 1.0 if objective == "targeted" else -1.0
    pairs = _ref_pairs(model, refs, table)
    x = torch.cat([qc, qo], -1).clone()
    d = qc.shape[-1]

    def f(z):
        return qp_loss(model, qc, qo, z[..., :d], z[..., d:].clamp_min(0), pairs, delta, sign)

    with torch.no_grad():
        cur = f(x)
    traces = [[float(v)] for v in cur]
    active = torch.ones(len(x), dtype=torch.bool)
    for _ in range(steps):
        if not active.any():
            break
        with torch.enable_grad():
            xv = x.clone().requires_grad_(True)
            (g,) = torch.autograd.grad(f(xv).sum(), xv)
        gn = g.norm(dim=-1, keepdim=True)
        active &= (gn.squeeze(-1) > 0) & torch.isfinite(gn.squeeze(-1))
        direction = torch.where(gn > 0, g / gn.clamp_min(1e-300), torch.zeros_like(g))
        t = torch.full((len(x), 1), step_size, dtype=x.dtype)
        pending = active.clone()
        new_x = x.clone()
        with torch.no_grad():
            for _h in range(max_halvings + 1):
                if not pending.any():
                    break
                cand = x - t * direction
                cand[..., d:] = cand[..., d:].clamp_min(0)
                val = f(cand)
                ok = pending & (val <= cur)
                new_x[ok] = cand[ok]
                cur = torch.where(ok, val, cur)
                pending &= ~ok
                t = torch.where(pending.unsqueeze(-1), t / 2, t)
        active &= ~pending
        x = new_x
        for i in range(len(x)):
            traces[i].append(float(cur[i]))
    return x[..., :d], x[..., d:].clamp_min(0), traces


def _replay(model: BoxModel, anchors: Sequence[str], rel_seqs: Sequence[tuple[str, ...]], table=None):
    """Embed many single paths at once; all paths in one call must share a length."""
    table = model.entity.detach() if table is None else table
    c = table[torch.tensor([model.index(a) for a in anchors])]
    o = torch.zeros_like(c)
    for k in range(len(rel_seqs[0])):
        c, o = model.project_tensors(c, o, torch.tensor([model.rel(r[k]) for r in rel_seqs]))
    return c, o


def beam_search_perturbation(g: KnowledgeGraph, center: torch.Tensor, model: BoxModel, n_qp: int,
                             max_depth: int = 3, roots: Sequence[str] | None = None,
                             anchor_ok: Callable[[str], bool] | None = None,
                             beam_width: int | None = None, table=None,
                             skip: set | None = None) -> Perturbation:
    """Grow paths backwards from the entity nearest ``center`` until they reach anchors.

    A structure is ``(frontier entity, relation sequence)``; its embedding is
    the replay of the relations from the frontier. Structures whose frontier is
    anchor-eligible are complete; the rest stay on a beam of ``beam_width``
    (default ``n_qp``) ranked by center distance to ``center``.
    """
    if n_qp <= 0:
        return Perturbation()
    table = model.entity.detach() if table is None else table
    center = center.detach()
    pool = list(roots) if roots is not None else list(g.entity_ids)
    if not pool:
        return Perturbation(failed=True)
    rows = torch.tensor([model.index(e) for e in pool])
    with torch.no_grad():
        dist = (table[rows] - center).norm(dim=-1).tolist()
    root = min(zip(dist, pool))[1]
    anchor_ok = anchor_ok or (lambda e: True)
    width = beam_width or n_qp
    beam = [(root, ())]
    complete: list[tuple[float, str, tuple[str, ...]]] = []
    for _depth in range(max_depth):
        seen = set()
        exp = []
        for frontier, rels in beam:
            for r, u in g.in_edges(frontier):
                key = (u, (r,) + rels)
                if key not in seen:
                    seen.add(key)
                    exp.append(key)
        if not exp:
            break
        exp.sort()
        with torch.no_grad():
            c, _ = _replay(model, [u for u, _ in exp], [s for _, s in exp], table)
            sc = (c - center).norm(dim=-1).tolist()
        nxt = []
        for s, (u, seq) in zip(sc, exp):
            if skip and (u, seq) in skip:
                continue
            if anchor_ok(u):
                complete.append((s, u, seq))
            else:
                nxt.append((s, u, seq))
        nxt.sort()
        beam = [(u, seq) for _, u, seq in nxt[:width]]
        if not beam:
            break
    if not complete:
        return Perturbation(root=root, failed=True)
    complete.sort()
    best = complete[:n_qp]
    return Perturbation([(u, seq) for _, u, seq in best], [s for s, _, _ in best], root)


def attach_paths(q: EntityQuery, pert: Perturbation, tag: str = "p") -> EntityQuery:
    """q* = q with each perturbation path ending at q's sink through fresh variables."""
    edges = list(q.edges)
    for i, (anchor, rels) in enumerate(pert.paths):
        node = anchor
        for k, r in enumerate(rels):
            nxt = q.sink if k == len(rels) - 1 else f"{VAR_PREFIX}{tag}{i}_{k}"
            edges.append((node, r, nxt))
            node = nxt
    return EntityQuery.from_edges(q.id, edges, q.sink, q.answers, q.trigger)


def vicinity(g: KnowledgeGraph, seeds, hops: int) -> set[str]:
    seen = set(seeds)
    frontier = set(seeds)
    for _ in range(hops):
        nxt = set()
        for e in frontier:
            nxt.update(t for _, t in g.out_edges(e))
        frontier = nxt - seen
        seen |= frontier
    return seen


def root_candidates(g: KnowledgeGraph, q: EntityQuery, model: BoxModel, cfg: AttackConfig) -> list[str]:
    """Sink-category entities the perturbation may be rooted at.

    Targeted roots lie within ``cfg.vicinity`` hops of the ground truth.
    Untargeted roots exclude the ground truth itself (a path rooted at a true
    answer cannot pull the box away from it); the radius grows until some
    root exists.
    """
    cands = [model.entity_ids[r] for r in candidate_rows(q, model, g).tolist()]
    if cfg.vicinity is None:
        return cands if cfg.targeted else [e for e in cands if e not in q.answers] or cands
    radius = cfg.vicinity
    while True:
        near = vicinity(g, q.answers, radius)
        pool = [e for e in cands if e in near and (cfg.targeted or e not in q.answers)]
        if pool or cfg.targeted or radius > cfg.max_depth + cfg.vicinity:
            return pool or cands
        radius += 1


def existing_paths(q: EntityQuery) -> set[tuple[str, tuple[str, ...]]]:
    from .graph import anchor_sink_paths
    return {(p[0][0], tuple(r for _, r, _ in p)) for p in anchor_sink_paths(q)}


def _anchor_predicate(g: KnowledgeGraph, q: EntityQuery, cfg: AttackConfig):
    sink_cats = sink_categories(q, g)
    if cfg.anchor_categories is not None:
        allowed = set(cfg.anchor_categories) - sink_cats
    else:
        allowed = set(g.categories) - sink_cats
    return lambda e: g.entities[e] in allowed


def qp_attack_many(queries: Sequence[EntityQuery], g: KnowledgeGraph, model: BoxModel,
                   cfg: AttackConfig, table=None):
    """Perturb each query; returns (perturbed queries, per-query reports)."""
    cfg.validate()
    if cfg.vectors not in ("qp", "both"):
        raise AttackError("configuration does not include query perturbation")
    queries = list(queries)
    if not queries or cfg.n_qp == 0:
        return queries, [{"id": q.id, "paths": [], "failed": False} for q in queries]
    table = model.entity.detach() if table is None else table
    with torch.no_grad():
        qc, qo = BatchExecutor([compile_query(q, model) for q in queries]).run(model, table)
    if cfg.targeted:
        refs = [[model.index(cfg.target)]] * len(queries)
    else:
        refs = [_rows(model, q.answers) for q in queries]
    pc, po, traces = optimize_perturbation_embedding(
        qc, qo, refs, model, cfg.qp_steps, cfg.objective, cfg.step_size, cfg.delta, table)
    out, reports = [], []
    for i, q in enumerate(queries):
        cands = root_candidates(g, q, model, cfg)
        pert = beam_search_perturbation(g, pc[i], model, cfg.n_qp, cfg.max_depth, cands,
                                        _anchor_predicate(g, q, cfg), cfg.beam_width, table,
                                        skip=existing_paths(q))
        qs = attach_paths(q, pert) if pert.paths else q
        failed = pert.failed
        if pert.paths and not validate_entity_query(qs, g):
            qs, failed = q, True
        out.append(qs)
        reports.append({"id": q.id, "paths": [[a, list(s)] for a, s in pert.paths],
                        "scores": pert.scores, "root": pert.root, "failed": failed,
                        "loss_initial": traces[i][0], "loss_final": traces[i][-1]})
    return out, reports


def qp_attack(q: EntityQuery, g: KnowledgeGraph, model: BoxModel, cfg: AttackConfig, table=None):
    qs, reps = qp_attack_many([q], g, model, cfg, table)
    return qs[0], reps[0]


# -- co-optimization -------------------------------------------------------------

def co_optimize(g: KnowledgeGraph, target_queries: Sequence[EntityQuery], model: BoxModel,
                cfg: AttackConfig, other_queries: Sequence[EntityQuery] = (),
                refit: Callable[[BoxModel, KnowledgeGraph], BoxModel] | None = None,
                apply_to: Sequence[EntityQuery] | None = None):
    """Alternate poisoning against the current adversarial queries and perturbation
    against the current poisoned graph. Returns (poisoned graph, poison, queries, report).

    ``apply_to`` swaps the queries perturbed in the last round (for instance the
    live queries when crafting ran on the attacker's own sample).
    """
    cfg.validate()
    if cfg.vectors != "both":
        raise AttackError("co-optimization needs vectors='both'")
    budgets = split_budget(cfg.n_kp, cfg.n_iter)
    kstar = attack_anchors(cfg)
    current = model
    adv = list(target_queries)
    poison = PoisonSet()
    gi = g
    report = {"rounds": []}
    for i, budget in enumerate(budgets):
        try:
            phi, trace = optimize_anchor_embeddings(
                current, kstar, adv, other_queries, cfg.target if cfg.targeted else None,
                cfg.lam, cfg.kp_steps, cfg.step_size, cfg.delta, cfg.minibatch, cfg.seed + i)
            ps = retrograde_search(gi, kstar, phi, current, budget, exclude=poison.facts)
            poison.extend(ps)
            gi = g.with_facts(poison.facts, "poison")
            if refit is not None and len(ps):
                current = refit(current, gi)
            last = i == len(budgets) - 1
            pool = apply_to if (last and apply_to is not None) else target_queries
            adv, qrep = qp_attack_many(pool, gi, current, cfg)
        except Exception as exc:
            raise AttackError(f"co-optimization round {i + 1} failed: {exc}") from exc
        report["rounds"].append({"loss_initial": trace[0], "loss_final": trace[-1], "added": len(ps),
                                 "perturbed": sum(1 for r in qrep if r["paths"] and not r["failed"])})
    report["queries"] = qrep
    return gi, poison, adv, report


# -- surrogates ------------------------------------------------------------------

def make_refitter(train_queries: Sequence[EntityQuery], train_cfg, fraction: float = 0.1,
                  seed: int = 0):
    """Short fine-tuning of a model copy on a (poisoned) graph."""
    from .synth import link_queries
    from .training import TrainingSet, fit

    multi = [q for q in train_queries if len(q.edges) > 1]

    def refit(model: BoxModel, gi: KnowledgeGraph) -> BoxModel:
        m = copy.deepcopy(model)
        qs = link_queries(gi)
        for q in multi:
            ans = answer_by_traversal(q, gi)
            if ans:
                qs.append(q.replace(answers=ans))
        ts = TrainingSet.build(m, gi, qs)
        fit(m, ts, train_cfg, np.random.default_rng(seed), epochs=max(1e-9, fraction * train_cfg.epochs))
        m.eval()
        return m

    return refit


def make_surrogate(g: KnowledgeGraph, spec: tuple[int, int] = (64, 1), seed: int = 0,
                   train_queries: Sequence[EntityQuery] | None = None, train_cfg=None,
                   victim: BoxModel | None = None, encoder_known: bool = False,
                   operator_known: bool = False) -> BoxModel:
    """Model the attacker crafts on.

    With both components known the victim itself is returned (crafting never
    writes to it). Otherwise a fresh model of ``spec = (dim, depth)`` is trained
    on the attacker's graph, with whichever victim component is known copied
    in and frozen.
    """
    from .synth import link_queries
    from .training import TrainConfig, TrainingSet, fit

    dim, depth = spec
    if dim < 1 or depth < 1:
        raise ValueError("surrogate spec must be positive")
    if encoder_known and operator_known:
        if victim is None:
            raise ValueError("white-box attack needs the victim model")
        return victim
    if (encoder_known or operator_known) and victim is None:
        raise ValueError("partial knowledge needs the victim model")
    cfg = (train_cfg or TrainConfig()).with_(seed=seed)
    if encoder_known or operator_known:
        dim, depth = victim.dim, victim.depth
    torch.manual_seed(seed)
    m = BoxModel.for_graph(g, dim=dim, hidden=None if not operator_known else victim.hidden,
                           alpha=cfg.alpha, margin=cfg.margin, seed=seed, depth=depth)
    m = m.to(victim.entity.dtype if victim is not None else m.entity.dtype)
    frozen = set()
    with torch.no_grad():
        if encoder_known:
            m.entity.copy_(victim.entity)
            frozen.add("entity")
        if operator_known:
            for name, p in victim.named_parameters():
                if name != "entity":
                    dict(m.named_parameters())[name].copy_(p)
                    frozen.add(name)
    qs = list(train_queries) if train_queries is not None else link_queries(g)
    ts = TrainingSet.build(m, g, qs)
    params = [p for n, p in m.named_parameters() if n not in frozen]
    fit(m, ts, cfg.with_(dim=dim, depth=depth), np.random.default_rng(seed), params=params)
    m.eval()
    return m


def surrogate_for(cfg: AttackConfig, victim: BoxModel, g: KnowledgeGraph, train_queries, train_cfg,
                  seed: int = 0) -> BoxModel:
    return make_surrogate(g, cfg.surrogate, seed, train_queries, train_cfg, victim,
                          cfg.encoder_known, cfg.operator_known)


# -- manifest --------------------------------------------------------------------

def attack_manifest(cfg: AttackConfig, seeds: dict, poison: PoisonSet | None = None,
                    perturbed: Sequence[EntityQuery] = (), reports: dict | None = None) -> dict:
    from .graph import query_to_record
    return {
        "format": "kgsec.attack", "version": 1,
        "config": cfg.asdict(), "seeds": dict(seeds),
        "poison": [{"fact": list(f), "score": s} for f, s in
                   zip(poison.facts, poison.scores)] if poison else [],
        "perturbed_queries": [query_to_record(q) for q in perturbed],
        "reports": reports or {},
    }
