"""Countermeasures: anomaly-based fact filtering and adversarial query training."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .attacks import AttackConfig, qp_attack_many
from .boxes import BoxModel
from .graph import EntityQuery, Fact, KnowledgeGraph
from .training import TrainConfig, TrainingSet, fit, train_entity_model

log = logging.getLogger(__name__)

QueryFn = Callable[[KnowledgeGraph], Sequence[EntityQuery]]


@dataclass
class DefenseConfig:
    m: float = 1.0
    n_qp_d: int = 2
    filter: bool = True
    adversarial: bool = True
    # epochs between regenerations of the adversarial queries
    refresh: int = 1
    # only multi-hop training queries get adversarial twins when False
    perturb_links: bool = False
    vicinity: int | None = 2
    max_depth: int = 3
    qp_steps: int = 20

    def validate(self) -> "DefenseConfig":
        if not 0 <= self.m < 100:
            raise ValueError("prune rate m must be in [0, 100)")
        if self.n_qp_d < 0:
            raise ValueError("n_qp_d must be nonnegative")
        if self.refresh < 1:
            raise ValueError("refresh must be at least one epoch")
        return self

    def with_(self, **kw) -> "DefenseConfig":
        return replace(self, **kw)

    def asdict(self) -> dict:
        return asdict(self)


def anomaly_scores(facts: Sequence[Fact], model: BoxModel) -> list[float]:
    """``||center(psi_r(phi_h)) - phi_t||`` for each fact."""
    if not facts:
        return []
    table = model.entity.detach()
    h = torch.tensor([model.index(f[0]) for f in facts])
    r = torch.tensor([model.rel(f[1]) for f in facts])
    t = torch.tensor([model.index(f[2]) for f in facts])
    with torch.no_grad():
        c, _ = model.project_tensors(table[h], torch.zeros_like(table[h]), r)
        return (c - table[t]).norm(dim=-1).tolist()


def anomaly_score(fact: Fact, model: BoxModel) -> float:
    return anomaly_scores([fact], model)[0]


def rank_anomalies(g: KnowledgeGraph, model: BoxModel) -> list[tuple[float, Fact]]:
    """Primary facts by descending anomaly; a fact scores the max over its two directions."""
    from .graph import reverse_fact

    prim = sorted(g.primary_facts)
    s = anomaly_scores(prim, model)
    if g.reverse:
        s = [max(a, b) for a, b in zip(s, anomaly_scores([reverse_fact(f) for f in prim], model))]
    return sorted(zip(s, prim), key=lambda x: (-x[0], x[1]))


def audit(removed: Sequence[Fact], g: KnowledgeGraph) -> dict:
    """Precision/recall of removed facts against poison provenance (evaluation only)."""
    poison = {f for f in g.primary_facts if g.provenance.get(f) == "poison"}
    hit = len(poison & set(removed))
    return {"removed": len(removed), "poison": len(poison), "poison_removed": hit,
            "precision": hit / len(removed) if removed else 0.0,
            "recall": hit / len(poison) if poison else 0.0}


def filter_facts(g: KnowledgeGraph, model: BoxModel, m: float) -> tuple[KnowledgeGraph, list[Fact]]:
    if not 0 <= m < 100:
        raise ValueError("prune rate m must be in [0, 100)")
    k = math.ceil(m / 100 * len(g.primary_facts))
    removed = [f for _, f in rank_anomalies(g, model)[:k]]
    return (g.without_facts(removed) if removed else g), removed


def filter_and_retrain(g: KnowledgeGraph, model: BoxModel, m: float, cfg: TrainConfig,
                       query_fn: QueryFn):
    """Prune the ``ceil(m% |facts|)`` most anomalous facts and retrain from scratch."""
    pruned, removed = filter_facts(g, model, m)
    new, _ = train_entity_model(pruned, query_fn(pruned), cfg)
    return pruned, new, removed


def _adversarial_twins(model: BoxModel, g: KnowledgeGraph, pool: Sequence[EntityQuery],
                       acfg: AttackConfig) -> list[EntityQuery]:
    qs, reps = qp_attack_many(pool, g, model, acfg)
    out = []
    for q, rep in zip(qs, reps):
        if rep["paths"] and not rep["failed"]:
            out.append(q.replace(id=q.id + "+adv"))
    return out


def adversarial_training(g: KnowledgeGraph, train_queries: Sequence[EntityQuery], n_qp_d: int,
                         cfg: TrainConfig, dcfg: DefenseConfig | None = None):
    """Train while augmenting with untargeted perturbations of the training queries.

    Perturbed twins keep the original answers and are regenerated against the
    current model every ``dcfg.refresh`` epochs. Returns (model, report).
    """
    dcfg = (dcfg or DefenseConfig()).validate()
    if n_qp_d == 0:
        model, trace = train_entity_model(g, train_queries, cfg)
        return model, {"augmented": 0, "failed": 0, "generations": 0, "trace": trace}
    torch.manual_seed(cfg.seed)
    model = BoxModel.for_graph(g, dim=cfg.dim, hidden=cfg.hidden, alpha=cfg.alpha,
                               margin=cfg.margin, seed=cfg.seed, depth=cfg.depth)
    base = [q for q in train_queries if q.answers]
    pool = base if dcfg.perturb_links else [q for q in base if len(q.edges) > 1]
    acfg = AttackConfig(vectors="qp", objective="untargeted", n_qp=n_qp_d, vicinity=dcfg.vicinity,
                        max_depth=dcfg.max_depth, qp_steps=dcfg.qp_steps, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    epochs = max(1, int(math.ceil(cfg.epochs)))
    trace: list[float] = []
    adv: list[EntityQuery] = []
    generations = 0
    for epoch in range(epochs):
        if epoch % dcfg.refresh == 0:
            model.eval()
            adv = _adversarial_twins(model, g, pool, acfg)
            generations += 1
            ts = TrainingSet.build(model, g, list(base) + adv)
            model.train()
        fit(model, ts, cfg, rng, epochs=1, trace=trace, opt=opt)
    model.eval()
    report = {"augmented": len(adv), "failed": len(pool) - len(adv), "pool": len(pool),
              "training_set": len(base) + len(adv), "generations": generations, "trace": trace}
    return model, report


def integrated_defense(g: KnowledgeGraph, model: BoxModel, cfg: TrainConfig, query_fn: QueryFn,
                       dcfg: DefenseConfig | None = None):
    """Filter first, then adversarially train on the pruned graph.

    ``model`` is the one trained on ``g`` that scores the facts. Returns
    (pruned graph, robust model, report).
    """
    dcfg = (dcfg or DefenseConfig()).validate()
    report: dict = {"config": dcfg.asdict()}
    pruned, removed = g, []
    if dcfg.filter and dcfg.m > 0:
        pruned, removed = filter_facts(g, model, dcfg.m)
    report["filter"] = audit(removed, g)
    report["filter"]["facts"] = [list(f) for f in removed]
    queries = query_fn(pruned)
    n = dcfg.n_qp_d if dcfg.adversarial else 0
    robust, rep = adversarial_training(pruned, queries, n, cfg, dcfg)
    report["adversarial"] = {k: v for k, v in rep.items() if k != "trace"}
    return pruned, robust, report
