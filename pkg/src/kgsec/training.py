"""Training loops for the box model."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .boxes import BatchExecutor, BoxModel, compile_query
from .graph import EntityQuery, KnowledgeGraph, sink_categories

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    dim: int = 64
    hidden: int | None = None
    depth: int = 1
    lr: float = 0.01
    batch: int = 512
    epochs: int = 60
    negatives: int = 16
    margin: float = 6.0
    alpha: float = 0.2
    seed: int = 0
    max_steps: int | None = None

    @classmethod
    def full_scale(cls, **kw) -> "TrainConfig":
        """Full-scale settings of the cyber-threat case (dim 400, lr 1e-3, batch 512)."""
        base = dict(dim=400, hidden=400, lr=0.001, batch=512, epochs=80000, margin=24.0)
        base.update(kw)
        return cls(**base)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def asdict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingSet:
    """Queries prepared for sampling: compiled plans, answer rows and candidates."""
    queries: list[EntityQuery]
    plans: list
    answers: list[np.ndarray]
    category: np.ndarray
    members: list[np.ndarray]

    @classmethod
    def build(cls, model: BoxModel, g: KnowledgeGraph,
              queries: Sequence[EntityQuery]) -> "TrainingSet":
        qs = [q for q in queries if q.answers]
        plans = [compile_query(q, model) for q in qs]
        answers = [np.array(sorted(model.ent_index[a] for a in q.answers), dtype=np.int64) for q in qs]
        cat_ids: dict[tuple[str, ...], int] = {}
        members = []
        cat = np.zeros(len(qs), dtype=np.int64)
        for i, q in enumerate(qs):
            cs = tuple(sorted(sink_categories(q, g)))
            if cs not in cat_ids:
                cat_ids[cs] = len(members)
                members.append(np.sort(np.concatenate([model.members(c).numpy() for c in cs])))
            cat[i] = cat_ids[cs]
        return cls(qs, plans, answers, cat, members)

    def __len__(self):
        return len(self.queries)


def margin_loss(model: BoxModel, center, offset, pos_rows, neg_rows, table=None):
    """Negative-sampling loss averaged over the batch.

    ``-log sigmoid(margin - d(pos)) - mean_j log sigmoid(d(neg_j) - margin)``
    """
    table = model.entity if table is None else table
    d_pos = model.distance_tensors(table[pos_rows], center, offset)
    d_neg = model.distance_tensors(table[neg_rows], center.unsqueeze(1), offset.unsqueeze(1))
    pos = -F.logsigmoid(model.margin - d_pos)
    neg = -F.logsigmoid(d_neg - model.margin).mean(-1)
    return (pos + neg).mean()


def sample_batch(ts: TrainingSet, idx: np.ndarray, k: int, rng: np.random.Generator):
    pos = np.array([a[rng.integers(len(a))] for a in (ts.answers[i] for i in idx)], dtype=np.int64)
    neg = np.empty((len(idx), k), dtype=np.int64)
    cats = ts.category[idx]
    for c in np.unique(cats):
        sel = np.nonzero(cats == c)[0]
        pool = ts.members[c]
        neg[sel] = pool[rng.integers(len(pool), size=(len(sel), k))]
    return torch.from_numpy(pos), torch.from_numpy(neg)


def fit(model: BoxModel, ts: TrainingSet, cfg: TrainConfig, rng: np.random.Generator,
        epochs: float | None = None, params=None, trace: list | None = None,
        opt: torch.optim.Optimizer | None = None) -> list[float]:
    """Run Adam on the margin loss; returns the per-step loss trace."""
    trace = [] if trace is None else trace
    epochs = cfg.epochs if epochs is None else epochs
    steps = max(1, int(math.ceil(epochs * len(ts) / cfg.batch)))
    if cfg.max_steps is not None:
        steps = min(steps, cfg.max_steps)
    if opt is None:
        opt = torch.optim.Adam(params if params is not None else model.parameters(), lr=cfg.lr)
    n = len(ts)
    for step in range(steps):
        idx = rng.integers(n, size=min(cfg.batch, n)) if n > cfg.batch else rng.permutation(n)
        pos, neg = sample_batch(ts, idx, cfg.negatives, rng)
        c, o = BatchExecutor([ts.plans[i] for i in idx]).run(model)
        loss = margin_loss(model, c, o, pos, neg)
        val = loss.item()
        if not math.isfinite(val):
            raise TrainingDiverged(f"non-finite loss {val} at step {step} (lr={cfg.lr})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(val)
    return trace


def train_entity_model(g: KnowledgeGraph, queries: Sequence[EntityQuery],
                       cfg: TrainConfig | None = None) -> tuple[BoxModel, list[float]]:
    cfg = cfg or TrainConfig()
    if not queries:
        raise ValueError("empty training set")
    torch.manual_seed(cfg.seed)
    model = BoxModel.for_graph(g, dim=cfg.dim, hidden=cfg.hidden, alpha=cfg.alpha,
                               margin=cfg.margin, seed=cfg.seed, depth=cfg.depth)
    ts = TrainingSet.build(model, g, queries)
    rng = np.random.default_rng(cfg.seed)
    trace = fit(model, ts, cfg, rng)
    model.eval()
    log.info("trained on %d queries: loss %.4f -> %.4f", len(ts), trace[0], trace[-1])
    return model, trace


def copy_model(model: BoxModel) -> BoxModel:
    import copy
    return copy.deepcopy(model)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_model(model: BoxModel, path, cfg: TrainConfig | None = None) -> None:
    torch.save({
        "format": "kgsec.box", "version": CHECKPOINT_VERSION,
        "model": model.config(),
        "entity_ids": list(model.entity_ids),
        "entity_categories": list(model.entity_categories),
        "relations": list(model.relations),
        "state": {k: v.clone() for k, v in model.state_dict().items()},
        "train_config": cfg.asdict() if cfg else None,
    }, path)


def load_model(path) -> BoxModel:
    blob = torch.load(path, weights_only=False)
    if blob.get("format") != "kgsec.box" or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} box checkpoint")
    m = blob["model"]
    model = BoxModel(blob["entity_ids"], blob["entity_categories"], blob["relations"],
                     dim=m["dim"], hidden=m["hidden"], alpha=m["alpha"], margin=m["margin"],
                     seed=m["seed"], depth=m.get("depth", 1))
    model.load_state_dict(blob["state"])
    first = next(iter(blob["state"].values()))
    return model.to(first.dtype)
