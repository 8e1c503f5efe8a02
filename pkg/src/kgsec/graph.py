"""Knowledge graph and query data model.

Entities are opaque string ids, each with a mandatory category. Query
nodes are either entity ids (anchors) or variable names carrying the
``var:`` prefix.
"""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

REVERSE_SUFFIX = "_rev"
VAR_PREFIX = "var:"

Fact = tuple[str, str, str]


class GraphError(ValueError):
    pass


def is_variable(node: str) -> bool:
    return node.startswith(VAR_PREFIX)


def reverse_relation(r: str) -> str:
    if r.endswith(REVERSE_SUFFIX):
        return r[: -len(REVERSE_SUFFIX)]
    return r + REVERSE_SUFFIX


def reverse_fact(fact: Fact) -> Fact:
    h, r, t = fact
    return (t, reverse_relation(r), h)


@dataclass(frozen=True)
class KnowledgeGraph:
    entities: Mapping[str, str]
    relation_types: tuple[str, ...]
    facts: frozenset[Fact]
    schema: frozenset[tuple[str, str, str]]
    reverse: bool = False
    provenance: Mapping[Fact, str] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        entities: Mapping[str, str],
        facts: Iterable[Fact],
        schema: Iterable[tuple[str, str, str]],
        reverse: bool = True,
        provenance: Mapping[Fact, str] | None = None,
        relation_types: Iterable[str] | None = None,
    ) -> "KnowledgeGraph":
        """Assemble a graph, closing facts and schema under reversal if asked."""
        schema = set(schema)
        base = [r for r in (relation_types or sorted({r for _, r, _ in schema}))
                if not r.endswith(REVERSE_SUFFIX)]
        base = list(dict.fromkeys(base))
        facts = set(facts)
        prov = dict(provenance or {})
        if reverse:
            schema |= {(tc, reverse_relation(r), hc) for hc, r, tc in schema}
            for f in list(facts):
                rf = reverse_fact(f)
                facts.add(rf)
                if f in prov and rf not in prov:
                    prov[rf] = prov[f]
            rels = tuple(base + [reverse_relation(r) for r in base])
        else:
            rels = tuple(base)
        g = cls(dict(sorted(entities.items())), rels, frozenset(facts),
                frozenset(schema), reverse, prov)
        g.check()
        return g

    def check(self) -> None:
        rels = set(self.relation_types)
        for h, r, t in self.facts:
            if h not in self.entities or t not in self.entities:
                raise GraphError(f"fact {(h, r, t)} references an unknown entity")
            if r not in rels:
                raise GraphError(f"fact {(h, r, t)} uses unknown relation {r!r}")
            if (self.entities[h], r, self.entities[t]) not in self.schema:
                raise GraphError(f"fact {(h, r, t)} violates the schema")
        if self.reverse:
            for f in self.facts:
                if reverse_fact(f) not in self.facts:
                    raise GraphError(f"reverse of {f} missing")

    # -- indices ---------------------------------------------------------
    @cached_property
    def entity_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.entities))

    @cached_property
    def index_of(self) -> dict[str, int]:
        return {e: i for i, e in enumerate(self.entity_ids)}

    @cached_property
    def categories(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.entities.values())))

    @cached_property
    def members(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = defaultdict(list)
        for e in self.entity_ids:
            out[self.entities[e]].append(e)
        return {c: tuple(v) for c, v in out.items()}

    @cached_property
    def _adjacency(self) -> tuple[dict, dict]:
        out: dict[tuple[str, str], list[str]] = defaultdict(list)
        inc: dict[tuple[str, str], list[str]] = defaultdict(list)
        for h, r, t in self.facts:
            out[(h, r)].append(t)
            inc[(t, r)].append(h)
        return ({k: tuple(sorted(v)) for k, v in out.items()},
                {k: tuple(sorted(v)) for k, v in inc.items()})

    @cached_property
    def _edges_by_entity(self) -> tuple[dict, dict]:
        out: dict[str, list[tuple[str, str]]] = defaultdict(list)
        inc: dict[str, list[tuple[str, str]]] = defaultdict(list)
        for h, r, t in self.facts:
            out[h].append((r, t))
            inc[t].append((r, h))
        return ({k: tuple(sorted(v)) for k, v in out.items()},
                {k: tuple(sorted(v)) for k, v in inc.items()})

    def neighbors(self, entity: str, relation: str, direction: str = "out") -> tuple[str, ...]:
        out, inc = self._adjacency
        table = out if direction == "out" else inc
        return table.get((entity, relation), ())

    def out_edges(self, entity: str) -> tuple[tuple[str, str], ...]:
        """Sorted ``(relation, tail)`` pairs leaving ``entity``."""
        return self._edges_by_entity[0].get(entity, ())

    def in_edges(self, entity: str) -> tuple[tuple[str, str], ...]:
        """Sorted ``(relation, head)`` pairs entering ``entity``."""
        return self._edges_by_entity[1].get(entity, ())

    def relation_tails(self, head_category: str) -> list[tuple[str, str]]:
        """Schema-legal ``(relation, tail category)`` pairs for a head category."""
        return sorted((r, tc) for hc, r, tc in self.schema if hc == head_category)

    @cached_property
    def primary_facts(self) -> frozenset[Fact]:
        """Facts in their canonical (non-reversed) direction."""
        if not self.reverse:
            return self.facts
        return frozenset(f for f in self.facts if not f[1].endswith(REVERSE_SUFFIX))

    def canonical(self, fact: Fact) -> Fact:
        if self.reverse and fact[1].endswith(REVERSE_SUFFIX):
            return reverse_fact(fact)
        return fact

    def is_legal(self, fact: Fact) -> bool:
        h, r, t = fact
        return (h in self.entities and t in self.entities
                and (self.entities[h], r, self.entities[t]) in self.schema)

    # -- mutation (returns new graphs) ------------------------------------
    def with_facts(self, facts: Iterable[Fact], provenance: str | None = None) -> "KnowledgeGraph":
        new = set(self.facts)
        prov = dict(self.provenance)
        for f in facts:
            pair = [f, reverse_fact(f)] if self.reverse else [f]
            for x in pair:
                new.add(x)
                if provenance is not None:
                    prov[x] = provenance
        g = KnowledgeGraph(self.entities, self.relation_types, frozenset(new),
                           self.schema, self.reverse, prov)
        g.check()
        return g

    def without_facts(self, facts: Iterable[Fact]) -> "KnowledgeGraph":
        drop = set()
        for f in facts:
            drop.add(f)
            if self.reverse:
                drop.add(reverse_fact(f))
        prov = {f: p for f, p in self.provenance.items() if f not in drop}
        return KnowledgeGraph(self.entities, self.relation_types, self.facts - drop,
                              self.schema, self.reverse, prov)

    def without_entities(self, ids: Iterable[str]) -> "KnowledgeGraph":
        ids = set(ids)
        ents = {e: c for e, c in self.entities.items() if e not in ids}
        facts = frozenset(f for f in self.facts if f[0] not in ids and f[2] not in ids)
        prov = {f: p for f, p in self.provenance.items() if f in facts}
        return KnowledgeGraph(ents, self.relation_types, facts, self.schema, self.reverse, prov)

    def stats(self) -> dict:
        per_cat = {c: len(m) for c, m in self.members.items()}
        per_rel: dict[str, int] = defaultdict(int)
        for h, r, t in self.primary_facts:
            per_rel[f"{self.entities[h]}|{r}|{self.entities[t]}"] += 1
        return {
            "entities": len(self.entities),
            "relations": len(self.relation_types),
            "facts": len(self.facts),
            "primary_facts": len(self.primary_facts),
            "per_category": per_cat,
            "per_schema_triple": dict(sorted(per_rel.items())),
            "poison_facts": sum(1 for f, p in self.provenance.items()
                                if p == "poison" and f in self.primary_facts),
        }


@dataclass(frozen=True)
class EntityQuery:
    id: str
    anchors: tuple[str, ...]
    variables: tuple[str, ...]
    sink: str
    edges: tuple[Fact, ...]
    answers: frozenset[str] = frozenset()
    tag: tuple[int, int] = (0, 0)
    trigger: bool = False

    @classmethod
    def from_edges(cls, id: str, edges: Iterable[Fact], sink: str,
                   answers: Iterable[str] = (), trigger: bool = False) -> "EntityQuery":
        edges = tuple(sorted(set(edges)))
        nodes = {n for h, _, t in edges for n in (h, t)} | {sink}
        anchors = tuple(sorted(n for n in nodes if not is_variable(n)))
        variables = tuple(sorted(n for n in nodes if is_variable(n) and n != sink))
        q = cls(id, anchors, variables, sink, edges, frozenset(answers), (0, 0), trigger)
        return q.retagged()

    def retagged(self) -> "EntityQuery":
        try:
            tag = structure_tag(self)
        except GraphError:
            tag = (0, 0)
        return EntityQuery(self.id, self.anchors, self.variables, self.sink, self.edges,
                           self.answers, tag, self.trigger)

    def replace(self, **kw) -> "EntityQuery":
        d = dict(id=self.id, anchors=self.anchors, variables=self.variables, sink=self.sink,
                 edges=self.edges, answers=self.answers, tag=self.tag, trigger=self.trigger)
        d.update(kw)
        return EntityQuery(**d)

    @property
    def relations(self) -> tuple[str, ...]:
        return tuple(r for _, r, _ in self.edges)


@dataclass(frozen=True)
class RelationQuery:
    id: str
    head: str
    tail: str
    context: tuple[Fact, ...]
    context_entities: tuple[str, ...]
    answer: str | None = None
    trigger: bool = False


@dataclass(frozen=True)
class TriggerPattern:
    anchors: tuple[str, ...]
    path: tuple[tuple[str, str], ...]

    @property
    def length(self) -> int:
        return len(self.path)

    @property
    def relations(self) -> tuple[str, ...]:
        return tuple(r for r, _ in self.path)

    def validate(self, g: KnowledgeGraph) -> None:
        if not self.anchors or self.length < 1:
            raise GraphError("trigger needs at least one anchor and one hop")
        for a in self.anchors:
            if a not in g.entities:
                raise GraphError(f"trigger anchor {a!r} not in graph")
        cats = {g.entities[a] for a in self.anchors}
        for r, _ in self.path:
            nxt = {tc for hc, rr, tc in g.schema if rr == r and hc in cats}
            if not nxt:
                raise GraphError(f"relation {r!r} not schema-legal on the trigger path")
            cats = nxt


# -- query structure --------------------------------------------------------

def _in_out(q: EntityQuery):
    ins: dict[str, list[tuple[str, str]]] = defaultdict(list)
    outs: dict[str, list[tuple[str, str]]] = defaultdict(list)
    for h, r, t in q.edges:
        outs[h].append((r, t))
        ins[t].append((r, h))
    return ins, outs


def topological_order(q: EntityQuery) -> list[str]:
    """Kahn's algorithm with lexicographic tie-breaking; raises on cycles."""
    ins, outs = _in_out(q)
    nodes = sorted({n for h, _, t in q.edges for n in (h, t)} | {q.sink})
    indeg = {n: len(ins[n]) for n in nodes}
    ready = sorted(n for n in nodes if indeg[n] == 0)
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for _, t in outs[n]:
            indeg[t] -= 1
            if indeg[t] == 0:
                ready.append(t)
                ready.sort()
    if len(order) != len(nodes):
        raise GraphError("query dependency graph has a cycle")
    return order


def anchor_sink_paths(q: EntityQuery) -> list[list[Fact]]:
    ins, _ = _in_out(q)
    paths: list[list[Fact]] = []

    def walk(node, suffix):
        if not ins[node]:
            paths.append(list(reversed(suffix)))
            return
        for r, h in sorted(ins[node]):
            walk(h, suffix + [(h, r, node)])

    topological_order(q)
    walk(q.sink, [])
    return paths


def structure_tag(q: EntityQuery) -> tuple[int, int]:
    paths = anchor_sink_paths(q)
    return (len(paths), max((len(p) for p in paths), default=0))


def infer_categories(q: EntityQuery, g: KnowledgeGraph) -> dict[str, set[str]] | None:
    """Possible categories per query node under the schema, or None if unsatisfiable."""
    try:
        order = topological_order(q)
    except GraphError:
        return None
    ins, _ = _in_out(q)
    cats: dict[str, set[str]] = {}
    for n in order:
        if not is_variable(n):
            if n not in g.entities:
                return None
            cats[n] = {g.entities[n]}
            if ins[n]:
                return None
            continue
        if not ins[n]:
            return None
        possible = None
        for r, h in ins[n]:
            tails = {tc for hc, rr, tc in g.schema if rr == r and hc in cats[h]}
            possible = tails if possible is None else possible & tails
        if not possible:
            return None
        cats[n] = possible
    return cats


def validate_entity_query(q: EntityQuery, g: KnowledgeGraph) -> bool:
    try:
        if not q.edges or not is_variable(q.sink):
            return False
        nodes = {n for h, _, t in q.edges for n in (h, t)}
        if q.sink not in nodes:
            return False
        ins, outs = _in_out(q)
        sinks = [n for n in nodes if not outs[n]]
        if sinks != [q.sink]:
            return False
        for n in nodes:
            if not ins[n] and is_variable(n):
                return False
            if ins[n] and not is_variable(n):
                return False
        if any(a not in nodes for a in q.anchors):
            return False
        return infer_categories(q, g) is not None
    except (TypeError, ValueError, KeyError):
        return False


def sink_categories(q: EntityQuery, g: KnowledgeGraph) -> set[str]:
    cats = infer_categories(q, g)
    if cats is None:
        raise GraphError(f"query {q.id} is not valid against the graph")
    return cats[q.sink]


# -- computation graph ------------------------------------------------------

@dataclass(frozen=True)
class Projection:
    source: str
    relation: str
    output: str


@dataclass(frozen=True)
class Intersection:
    inputs: tuple[str, ...]
    output: str

    @property
    def arity(self) -> int:
        return len(self.inputs)


def to_computation_graph(q: EntityQuery, g: KnowledgeGraph | None = None) -> list:
    """Lower a query to projection/intersection steps in topological order."""
    if g is not None and not validate_entity_query(q, g):
        raise GraphError(f"query {q.id} is not valid")
    order = topological_order(q)
    ins, _ = _in_out(q)
    steps: list = []
    for n in order:
        incoming = sorted(ins[n])
        if not incoming:
            continue
        if len(incoming) == 1:
            r, h = incoming[0]
            steps.append(Projection(h, r, n))
            continue
        slots = []
        for i, (r, h) in enumerate(incoming):
            slot = f"{n}#{i}"
            steps.append(Projection(h, r, slot))
            slots.append(slot)
        steps.append(Intersection(tuple(slots), n))
    return steps


def execute_by_traversal(steps: list, g: KnowledgeGraph, sink: str | None = None) -> set[str]:
    """Replay computation-graph steps as set operations on the graph."""
    values: dict[str, set[str]] = {}

    def value(node):
        if node in values:
            return values[node]
        if is_variable(node) or "#" in node:
            raise GraphError(f"node {node} used before it was computed")
        return {node}

    last = None
    for s in steps:
        if isinstance(s, Projection):
            out = set()
            for e in value(s.source):
                out.update(g.neighbors(e, s.relation))
            values[s.output] = out
        else:
            sets = [value(i) for i in s.inputs]
            values[s.output] = set.intersection(*sets)
        last = s.output
    return values[sink] if sink is not None else (values[last] if last else set())


def answer_by_traversal(q: EntityQuery, g: KnowledgeGraph) -> frozenset[str]:
    return frozenset(execute_by_traversal(to_computation_graph(q), g, q.sink))


def match_trigger(q: EntityQuery, p: TriggerPattern) -> bool:
    """True iff q contains p's relation path rooted at one of p's anchors."""
    _, outs = _in_out(q)
    anchors = set(q.anchors)

    def follow(node, i):
        if i == len(p.path):
            return True
        rel, kind = p.path[i]
        for r, t in outs[node]:
            if r != rel:
                continue
            if kind == "variable" and not is_variable(t):
                continue
            if kind == "anchor" and is_variable(t):
                continue
            if follow(t, i + 1):
                return True
        return False

    return any(a in anchors and follow(a, 0) for a in p.anchors)


# -- serialization ----------------------------------------------------------

def save_kg(g: KnowledgeGraph, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "facts.tsv", "w", encoding="utf-8") as fh:
        for f in sorted(g.primary_facts):
            tag = g.provenance.get(f)
            fh.write("\t".join(f + ((tag,) if tag else ())) + "\n")
    with open(d / "categories.tsv", "w", encoding="utf-8") as fh:
        for e in g.entity_ids:
            fh.write(f"{e}\t{g.entities[e]}\n")
    base = sorted(t for t in g.schema if not (g.reverse and t[1].endswith(REVERSE_SUFFIX)))
    rels = [r for r in g.relation_types if not (g.reverse and r.endswith(REVERSE_SUFFIX))]
    meta = {"reverse": g.reverse, "relations": rels,
            "schema": [list(t) for t in base]}
    (d / "schema.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_kg(directory: str | Path) -> KnowledgeGraph:
    d = Path(directory)
    meta = json.loads((d / "schema.json").read_text(encoding="utf-8"))
    entities = {}
    for line in (d / "categories.tsv").read_text(encoding="utf-8").splitlines():
        if line:
            e, c = line.split("\t")
            entities[e] = c
    facts, prov = [], {}
    for line in (d / "facts.tsv").read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        parts = line.split("\t")
        f = (parts[0], parts[1], parts[2])
        facts.append(f)
        if len(parts) > 3:
            prov[f] = parts[3]
    return KnowledgeGraph.build(entities, facts, [tuple(t) for t in meta["schema"]],
                                reverse=meta["reverse"], provenance=prov,
                                relation_types=meta["relations"])


def query_to_record(q) -> dict:
    if isinstance(q, RelationQuery):
        return {"id": q.id, "kind": "relation", "anchors": [q.head, q.tail],
                "edges": [list(f) for f in q.context], "sink": None,
                "answers": [q.answer] if q.answer is not None else [],
                "context": list(q.context_entities), "tag": {"n_path": 0, "m_path": 0},
                "trigger": q.trigger}
    return {"id": q.id, "kind": "entity", "anchors": list(q.anchors),
            "edges": [list(e) for e in q.edges], "sink": q.sink,
            "answers": sorted(q.answers),
            "tag": {"n_path": q.tag[0], "m_path": q.tag[1]}, "trigger": q.trigger}


def query_from_record(rec: dict):
    if rec["kind"] == "relation":
        head, tail = rec["anchors"]
        return RelationQuery(rec["id"], head, tail, tuple(tuple(e) for e in rec["edges"]),
                             tuple(rec.get("context", [])),
                             rec["answers"][0] if rec["answers"] else None,
                             bool(rec.get("trigger", False)))
    edges = tuple(tuple(e) for e in rec["edges"])
    nodes = {n for h, _, t in edges for n in (h, t)}
    return EntityQuery(
        id=rec["id"], anchors=tuple(rec["anchors"]),
        variables=tuple(sorted(n for n in nodes if is_variable(n) and n != rec["sink"])),
        sink=rec["sink"], edges=edges, answers=frozenset(rec["answers"]),
        tag=(rec["tag"]["n_path"], rec["tag"]["m_path"]), trigger=bool(rec["trigger"]))


def save_queries(queries, path: str | Path) -> None:
    Path(path).write_text(json.dumps([query_to_record(q) for q in queries], indent=1) + "\n",
                          encoding="utf-8")


def load_queries(path: str | Path) -> list:
    return [query_from_record(r) for r in json.loads(Path(path).read_text(encoding="utf-8"))]
