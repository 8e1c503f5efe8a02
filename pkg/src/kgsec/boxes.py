"""Box-embedding query answering: encoder, projection/intersection operators.

Queries are answered by lifting anchors to zero-volume boxes, pushing them
through relation projections and intersections along the computation graph,
and ranking candidate entities by their distance to the resulting box.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .graph import EntityQuery, GraphError, KnowledgeGraph, _in_out, is_variable, sink_categories, topological_order


@dataclass
class Box:
    center: torch.Tensor
    offset: torch.Tensor

    def detach(self) -> "Box":
        return Box(self.center.detach(), self.offset.detach())


class BoxModel(nn.Module):
    """Entity table plus relation projection and intersection operators.

    Projection is a residual two-layer map whose output layers start at zero,
    so an untrained projection translates the center by the relation vector
    and widens the offset by ``softplus`` of the relation offset parameter.
    """

    def __init__(self, entity_ids: Sequence[str], entity_categories: Sequence[str],
                 relations: Sequence[str], dim: int = 64, hidden: int | None = None,
                 alpha: float = 0.2, margin: float = 6.0, seed: int = 0,
                 init_scale: float | None = None, gate_bias: float = 4.0, depth: int = 1):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        hidden = hidden or dim
        self.entity_ids = tuple(entity_ids)
        self.entity_categories = tuple(entity_categories)
        self.relations = tuple(relations)
        self.rel_index = {r: i for i, r in enumerate(self.relations)}
        self.ent_index = {e: i for i, e in enumerate(self.entity_ids)}
        self.dim, self.hidden, self.depth = dim, hidden, depth
        self.alpha, self.margin = alpha, margin
        self.seed = seed
        scale = init_scale if init_scale is not None else margin / dim
        n, r = len(self.entity_ids), len(self.relations)

        def uni(*shape, a):
            return nn.Parameter((torch.rand(*shape, generator=gen) * 2 - 1) * a)

        def lin(i, o, zero=False):
            layer = nn.Linear(i, o)
            with torch.no_grad():
                if zero:
                    layer.weight.zero_()
                    layer.bias.zero_()
                else:
                    bound = (6.0 / (i + o)) ** 0.5
                    layer.weight.copy_((torch.rand(o, i, generator=gen) * 2 - 1) * bound)
                    layer.bias.zero_()
            return layer

        self.entity = uni(n, dim, a=scale * 4)
        self.rel_center = uni(r, dim, a=scale)
        self.rel_offset = uni(r, dim, a=scale)
        self.proj_layers = nn.ModuleList(
            [lin(2 * dim, hidden)] + [lin(hidden, hidden) for _ in range(depth - 1)])
        self.proj_center = lin(hidden, dim, zero=True)
        self.proj_offset = lin(hidden, dim, zero=True)
        self.att_in = lin(2 * dim, hidden)
        self.att_out = lin(hidden, dim)
        self.gate_in = lin(2 * dim, hidden)
        self.gate_out = lin(hidden, dim)
        with torch.no_grad():
            self.gate_out.bias.fill_(gate_bias)

        cats = sorted(set(self.entity_categories))
        self._members = {c: torch.tensor([i for i, x in enumerate(self.entity_categories) if x == c])
                         for c in cats}

    # -- config round-trip --------------------------------------------------
    def config(self) -> dict:
        return {"dim": self.dim, "hidden": self.hidden, "depth": self.depth,
                "alpha": self.alpha, "margin": self.margin, "seed": self.seed}

    @classmethod
    def for_graph(cls, g: KnowledgeGraph, **kw) -> "BoxModel":
        return cls(g.entity_ids, [g.entities[e] for e in g.entity_ids], g.relation_types, **kw)

    def members(self, category: str) -> torch.Tensor:
        return self._members.get(category, torch.zeros(0, dtype=torch.long))

    def index(self, entity: str) -> int:
        try:
            return self.ent_index[entity]
        except KeyError:
            raise KeyError(f"unknown entity {entity!r}") from None

    def rel(self, relation: str) -> int:
        try:
            return self.rel_index[relation]
        except KeyError:
            raise KeyError(f"unknown relation {relation!r}") from None

    # -- batched operators ----------------------------------------------------
    def project_tensors(self, center, offset, rel_idx):
        t = self.rel_center[rel_idx]
        moved = center + t
        h = torch.cat([moved, offset], -1)
        for layer in self.proj_layers:
            h = F.relu(layer(h))
        c = moved + self.proj_center(h)
        o = offset + F.softplus(self.rel_offset[rel_idx] + self.proj_offset(h))
        return c, o

    def intersect_tensors(self, centers, offsets, mask=None):
        """Intersect along dim -2: ``(..., k, d)`` inputs, optional ``(..., k)`` mask."""
        z = torch.cat([centers, offsets], -1)
        logits = self.att_out(F.relu(self.att_in(z)))
        g_h = F.relu(self.gate_in(z))
        if mask is None:
            att = torch.softmax(logits, dim=-2)
            pooled = g_h.mean(-2)
            low = offsets.min(-2).values
        else:
            m = mask.unsqueeze(-1)
            att = torch.softmax(logits.masked_fill(~m, float("-inf")), dim=-2)
            pooled = (g_h * m).sum(-2) / m.sum(-2).clamp_min(1)
            low = offsets.masked_fill(~m, float("inf")).min(-2).values
        c = (att * centers).sum(-2)
        o = low * torch.sigmoid(self.gate_out(pooled))
        return c, o

    def distance_tensors(self, points, center, offset):
        diff = (points - center).abs()
        outside = F.relu(diff - offset).sum(-1)
        inside = torch.minimum(diff, offset).sum(-1)
        return outside + self.alpha * inside

    # -- single-box API -------------------------------------------------------
    def anchor_box(self, entity: str, table: torch.Tensor | None = None) -> Box:
        table = self.entity if table is None else table
        c = table[self.index(entity)]
        return Box(c, torch.zeros_like(c))

    def project(self, box: Box, relation: str) -> Box:
        c, o = self.project_tensors(box.center, box.offset, self.rel(relation))
        return Box(c, o)

    def intersect(self, boxes: Sequence[Box]) -> Box:
        if not boxes:
            raise ValueError("intersection of an empty list")
        if len(boxes) == 1:
            return boxes[0]
        # canonical input order makes the result bitwise order-independent
        keyed = sorted(boxes, key=lambda b: tuple(torch.cat([b.center, b.offset]).tolist()))
        c, o = self.intersect_tensors(torch.stack([b.center for b in keyed]),
                                      torch.stack([b.offset for b in keyed]))
        return Box(c, o)

    def box_distance(self, entity: str, box: Box, table: torch.Tensor | None = None) -> torch.Tensor:
        table = self.entity if table is None else table
        return self.distance_tensors(table[self.index(entity)], box.center, box.offset)

    def embed_query(self, q: EntityQuery, table: torch.Tensor | None = None) -> Box:
        """Evaluate one query's computation graph with the single-box operators."""
        from .graph import Intersection, Projection, to_computation_graph

        vals: dict[str, Box] = {}
        for step in to_computation_graph(q):
            if isinstance(step, Projection):
                src = vals.get(step.source) or self.anchor_box(step.source, table)
                vals[step.output] = self.project(src, step.relation)
            else:
                vals[step.output] = self.intersect([vals[i] for i in step.inputs])
        return vals[q.sink]


# -- batched execution ----------------------------------------------------------

@dataclass
class QueryPlan:
    """Query-local execution plan: anchors then levels of (node, incoming edges)."""
    anchors: tuple[int, ...]
    levels: tuple[tuple[tuple[int, tuple[tuple[int, int], ...]], ...], ...]
    n_nodes: int
    sink: int


def compile_query(q: EntityQuery, model: BoxModel) -> QueryPlan:
    order = topological_order(q)
    ins, _ = _in_out(q)
    local = {}
    anchors = []
    level = {}
    for n in order:
        if not ins[n]:
            if is_variable(n):
                raise GraphError(f"variable {n} has no incoming edge")
            local[n] = len(local)
            anchors.append(model.index(n))
            level[n] = 0
    by_level: dict[int, list] = {}
    for n in order:
        if not ins[n]:
            continue
        level[n] = 1 + max(level[h] for _, h in ins[n])
        by_level.setdefault(level[n], []).append(n)
    levels = []
    for lv in sorted(by_level):
        items = []
        for n in by_level[lv]:
            local[n] = len(local)
        for n in by_level[lv]:
            items.append((local[n], tuple((local[h], model.rel(r)) for r, h in sorted(ins[n]))))
        levels.append(tuple(items))
    return QueryPlan(tuple(anchors), tuple(levels), len(local), local[q.sink])


class BatchExecutor:
    """Evaluates many queries at once, one vectorized call per level."""

    def __init__(self, plans: Sequence[QueryPlan]):
        self.size = len(plans)
        anchor_rows, anchor_ent = [], []
        offsets = []
        total = 0
        for p in plans:
            offsets.append(total)
            total += p.n_nodes
        self.total = total
        # global row ids: node id = offset + local id
        for p, off in zip(plans, offsets):
            for i, e in enumerate(p.anchors):
                anchor_rows.append(off + i)
                anchor_ent.append(e)
        depth = max((len(p.levels) for p in plans), default=0)
        self.levels = []
        for lv in range(depth):
            proj_src, proj_rel, proj_node = [], [], []
            node_rows, node_k = [], []
            for p, off in zip(plans, offsets):
                if lv >= len(p.levels):
                    continue
                for node, inc in p.levels[lv]:
                    node_rows.append(off + node)
                    node_k.append(len(inc))
                    for src, rel in inc:
                        proj_src.append(off + src)
                        proj_rel.append(rel)
            kmax = max(node_k)
            gather = np.full((len(node_rows), kmax), -1, dtype=np.int64)
            pos = 0
            for i, k in enumerate(node_k):
                gather[i, :k] = np.arange(pos, pos + k)
                pos += k
            self.levels.append(dict(
                src=torch.tensor(proj_src), rel=torch.tensor(proj_rel),
                rows=torch.tensor(node_rows), gather=torch.tensor(gather),
                single=bool(kmax == 1)))
        self.anchor_rows = torch.tensor(anchor_rows, dtype=torch.long)
        self.anchor_ent = torch.tensor(anchor_ent, dtype=torch.long)
        self.sinks = torch.tensor([off + p.sink for p, off in zip(plans, offsets)])

    def run(self, model: BoxModel, table: torch.Tensor | None = None):
        table = model.entity if table is None else table
        d = table.shape[1]
        # row -> (chunk, position); chunks are concatenated lazily per level
        c_parts = [table[self.anchor_ent]]
        o_parts = [torch.zeros(len(self.anchor_ent), d, dtype=table.dtype)]
        row_pos = torch.full((self.total,), -1, dtype=torch.long)
        row_pos[self.anchor_rows] = torch.arange(len(self.anchor_rows))
        n_have = len(self.anchor_rows)
        for lv in self.levels:
            C = torch.cat(c_parts)
            O = torch.cat(o_parts)
            src = row_pos[lv["src"]]
            pc, po = model.project_tensors(C[src], O[src], lv["rel"])
            if lv["single"]:
                nc, no = pc, po
            else:
                gi = lv["gather"]
                mask = gi >= 0
                gi = gi.clamp_min(0)
                nc, no = model.intersect_tensors(pc[gi], po[gi], mask)
                # a node with a single incoming edge takes the projection as is
                one = mask.sum(-1) == 1
                if one.any():
                    first = gi[:, 0]
                    nc = torch.where(one.unsqueeze(-1), pc[first], nc)
                    no = torch.where(one.unsqueeze(-1), po[first], no)
            row_pos[lv["rows"]] = torch.arange(n_have, n_have + len(lv["rows"]))
            n_have += len(lv["rows"])
            c_parts = [C, nc]
            o_parts = [O, no]
        C = torch.cat(c_parts)
        O = torch.cat(o_parts)
        s = row_pos[self.sinks]
        return C[s], O[s]


def embed_queries(model: BoxModel, queries: Sequence[EntityQuery], table=None, plans=None):
    plans = plans or [compile_query(q, model) for q in queries]
    return BatchExecutor(plans).run(model, table)


def rank_candidates(model: BoxModel, center, offset, candidates: torch.Tensor,
                    table=None) -> tuple[np.ndarray, np.ndarray]:
    """Ascending distances of candidate rows to one box; ties by entity id."""
    table = model.entity if table is None else table
    with torch.no_grad():
        dist = model.distance_tensors(table[candidates], center, offset).double().numpy()
    cand = candidates.numpy()
    # entity rows are in sorted-id order, so row index breaks ties by id
    order = np.lexsort((cand, dist))
    return cand[order], dist[order]


def answer_entity_query(q: EntityQuery, model: BoxModel, g: KnowledgeGraph | None = None,
                        table=None) -> list[tuple[str, float]]:
    return answer_entity_queries([q], model, g, table)[0]


def answer_entity_queries(queries: Sequence[EntityQuery], model: BoxModel,
                          g: KnowledgeGraph | None = None, table=None,
                          chunk: int = 256) -> list[list[tuple[str, float]]]:
    """Rank candidates of the sink category for each query by box distance."""
    out = []
    for start in range(0, len(queries), chunk):
        part = list(queries[start:start + chunk])
        if g is not None:
            from .graph import validate_entity_query
            for q in part:
                if not validate_entity_query(q, g):
                    raise GraphError(f"query {q.id} is not valid")
        with torch.no_grad():
            c, o = embed_queries(model, part, table)
        for i, q in enumerate(part):
            cands = candidate_rows(q, model, g)
            rows, dist = rank_candidates(model, c[i], o[i], cands, table)
            out.append([(model.entity_ids[r], float(d)) for r, d in zip(rows, dist)])
    return out


def candidate_rows(q: EntityQuery, model: BoxModel, g: KnowledgeGraph | None = None) -> torch.Tensor:
    cats = sink_category_set(q, model, g)
    return torch.cat([model.members(c) for c in sorted(cats)]).sort().values


def sink_category_set(q: EntityQuery, model: BoxModel, g: KnowledgeGraph | None = None) -> set[str]:
    if g is not None:
        return sink_categories(q, g)
    # fall back to the categories of known answers, or the whole table
    cats = {model.entity_categories[model.ent_index[a]] for a in q.answers if a in model.ent_index}
    return cats or set(model.entity_categories)
