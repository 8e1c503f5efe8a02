"""Relation prediction with relational message passing.

Entity states start from a learned table and go through two rounds of
per-relation linear messages with mean aggregation. A pair ``(v, v')`` is
scored against each candidate relation with a bilinear form on the final
states.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph import Fact, GraphError, KnowledgeGraph, RelationQuery

log = logging.getLogger(__name__)


class RelationScorer(nn.Module):
    def __init__(self, entity_ids: Sequence[str], relations: Sequence[str], labels: Sequence[str],
                 dim: int = 32, rounds: int = 2, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.entity_ids = tuple(entity_ids)
        self.ent_index = {e: i for i, e in enumerate(self.entity_ids)}
        self.relations = tuple(relations)
        self.rel_index = {r: i for i, r in enumerate(self.relations)}
        self.labels = tuple(labels)
        self.dim, self.rounds, self.seed = dim, rounds, seed
        n, r, k = len(self.entity_ids), len(self.relations), len(self.labels)
        std = 1.0 / math.sqrt(dim)
        self.entity = nn.Parameter(torch.randn(n, dim, generator=gen))
        self.message = nn.Parameter(torch.randn(rounds, r, dim, dim, generator=gen) * std)
        self.self_loop = nn.Parameter(torch.randn(rounds, dim, dim, generator=gen) * std)
        self.bilinear = nn.Parameter(torch.randn(k, dim, dim, generator=gen) * std)

    def config(self) -> dict:
        return {"dim": self.dim, "rounds": self.rounds, "seed": self.seed}

    def index(self, entity: str) -> int:
        try:
            return self.ent_index[entity]
        except KeyError:
            raise KeyError(f"unknown entity {entity!r}") from None

    def edge_tensor(self, facts: Sequence[Fact], local: dict[str, int]) -> torch.Tensor:
        """``(3, E)`` tensor of (src, rel, dst), sorted so aggregation order is canonical."""
        rows = sorted((local[t], self.rel_index[r], local[h]) for h, r, t in facts
                      if h in local and t in local and r in self.rel_index)
        if not rows:
            return torch.zeros(3, 0, dtype=torch.long)
        dst, rel, src = torch.tensor(rows).T
        return torch.stack([src, rel, dst])

    def propagate(self, h: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
        src, rel, dst = edges
        deg = torch.zeros(len(h), dtype=h.dtype).index_add_(0, dst, torch.ones(len(dst), dtype=h.dtype))
        for k in range(self.rounds):
            msg = torch.einsum("eij,ej->ei", self.message[k][rel], h[src])
            agg = torch.zeros_like(h).index_add_(0, dst, msg) / deg.clamp_min(1).unsqueeze(-1)
            h = torch.tanh(h @ self.self_loop[k].T + agg)
        return h

    def score_states(self, hv: torch.Tensor, hw: torch.Tensor) -> torch.Tensor:
        return torch.einsum("bi,kij,bj->bk", hv, self.bilinear, hw)

    def score_context(self, head: str, tail: str, context: Sequence[Fact],
                      entities: Sequence[str] | None = None, table=None) -> torch.Tensor:
        ents = sorted(set(entities or ()) | {head, tail} | {x for h, _, t in context for x in (h, t)})
        for e in ents:
            self.index(e)
        local = {e: i for i, e in enumerate(ents)}
        table = self.entity if table is None else table
        h0 = table[torch.tensor([self.ent_index[e] for e in ents])]
        h = self.propagate(h0, self.edge_tensor(context, local))
        return self.score_states(h[local[head]].unsqueeze(0), h[local[tail]].unsqueeze(0))[0]


def answer_relation_query(q: RelationQuery, scorer: RelationScorer, model=None,
                          table=None) -> list[tuple[str, float]]:
    """Candidate relations ranked by descending score, ties by relation id."""
    if not q.context:
        raise GraphError(f"relation query {q.id} has an empty context")
    with torch.no_grad():
        s = scorer.score_context(q.head, q.tail, q.context, q.context_entities, table).double().tolist()
    return sorted(zip(scorer.labels, s), key=lambda x: (-x[1], x[0]))


@dataclass
class RelTrainConfig:
    dim: int = 32
    rounds: int = 2
    lr: float = 0.01
    batch: int = 256
    epochs: int = 60
    seed: int = 0
    weight_decay: float = 0.0
    # input dropout on the entity table; without it the scorer memorizes pairs
    dropout: float = 0.5

    @classmethod
    def full_scale(cls, **kw) -> "RelTrainConfig":
        """Full-scale drug-repurposing settings (dim 200, lr 1e-3, batch 2048)."""
        base = dict(dim=200, lr=0.001, batch=2048, epochs=20000)
        base.update(kw)
        return cls(**base)

    def with_(self, **kw) -> "RelTrainConfig":
        return replace(self, **kw)

    def asdict(self) -> dict:
        return asdict(self)


def _pair_mask(g_edges: torch.Tensor, pairs: set[tuple[int, int]]) -> torch.Tensor:
    src, _, dst = g_edges
    keys = (src * (1 << 32) + dst).tolist()
    drop = {a * (1 << 32) + b for a, b in pairs} | {b * (1 << 32) + a for a, b in pairs}
    return torch.tensor([k not in drop for k in keys], dtype=torch.bool)


def relation_loss(scorer: RelationScorer, edges: torch.Tensor, heads, tails, labels, table=None):
    table = scorer.entity if table is None else table
    h = scorer.propagate(table, edges)
    logits = scorer.score_states(h[heads], h[tails])
    return F.cross_entropy(logits, labels)


def train_relation_model(g: KnowledgeGraph, triples: Sequence[Fact], cfg: RelTrainConfig | None = None,
                         labels: Sequence[str] | None = None):
    """Fit a scorer on ``triples`` using ``g`` as message-passing context.

    Each step masks every edge between the batch pairs so a pair never sees
    the relation it is asked to predict. Returns (scorer, loss trace).
    """
    cfg = cfg or RelTrainConfig()
    if not triples:
        raise ValueError("empty training set")
    from .training import TrainingDiverged

    labels = tuple(sorted(labels or {r for _, r, _ in triples}))
    torch.manual_seed(cfg.seed)
    scorer = RelationScorer(g.entity_ids, g.relation_types, labels, cfg.dim, cfg.rounds, cfg.seed)
    local = {e: i for i, e in enumerate(g.entity_ids)}
    edges = scorer.edge_tensor(sorted(g.facts), local)
    lab = {r: i for i, r in enumerate(labels)}
    heads = torch.tensor([local[h] for h, _, _ in triples])
    tails = torch.tensor([local[t] for _, _, t in triples])
    ys = torch.tensor([lab[r] for _, r, _ in triples])
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(scorer.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(triples)
    steps = max(1, math.ceil(cfg.epochs * n / cfg.batch))
    trace = []
    for step in range(steps):
        idx = torch.from_numpy(rng.permutation(n)[:cfg.batch])
        pairs = set(zip(heads[idx].tolist(), tails[idx].tolist()))
        e = edges[:, _pair_mask(edges, pairs)]
        table = F.dropout(scorer.entity, cfg.dropout) if cfg.dropout else None
        loss = relation_loss(scorer, e, heads[idx], tails[idx], ys[idx], table)
        val = loss.item()
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite loss {val} at step {step} (lr={cfg.lr})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(val)
    scorer.eval()
    return scorer, trace


RELATION_CHECKPOINT_VERSION = 1


def save_scorer(scorer: RelationScorer, path, cfg: RelTrainConfig | None = None) -> None:
    torch.save({
        "format": "kgsec.rel", "version": RELATION_CHECKPOINT_VERSION,
        "model": scorer.config(), "entity_ids": list(scorer.entity_ids),
        "relations": list(scorer.relations), "labels": list(scorer.labels),
        "state": {k: v.clone() for k, v in scorer.state_dict().items()},
        "train_config": cfg.asdict() if cfg else None,
    }, path)


def load_scorer(path) -> RelationScorer:
    blob = torch.load(path, weights_only=False)
    if blob.get("format") != "kgsec.rel" or blob.get("version") != RELATION_CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{RELATION_CHECKPOINT_VERSION} relation checkpoint")
    m = blob["model"]
    s = RelationScorer(blob["entity_ids"], blob["relations"], blob["labels"], m["dim"], m["rounds"], m["seed"])
    s.load_state_dict(blob["state"])
    return s.to(next(iter(blob["state"].values())).dtype)
