"""Synthetic KG generation, query sampling and holdout splits."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .graph import (
    VAR_PREFIX,
    EntityQuery,
    Fact,
    GraphError,
    KnowledgeGraph,
    RelationQuery,
    anchor_sink_paths,
    answer_by_traversal,
    is_variable,
    reverse_relation,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RelationSpec:
    head: str
    name: str
    tail: str
    degree: float
    # head communities this relation prefers; empty means no preference
    affinity: tuple[int, ...] = ()


@dataclass(frozen=True)
class KGSpec:
    counts: dict[str, int]
    relations: tuple[RelationSpec, ...]
    density: float = 1.0
    seed: int = 0
    reverse: bool = True
    communities: int = 8
    locality: float = 0.85
    prefix: dict[str, str] = field(default_factory=dict)


# Entity and fact counts of the cyber-domain KG (entity category -> count,
# schema triple -> fact count).
CYBER_ENTITY_COUNTS = {
    "cve": 18587, "vendor": 2223, "product": 7103, "version": 96725, "campaign": 13,
    "tactic": 11, "technique": 99, "attack_pattern": 323, "weakness": 150, "mitigation": 74794,
}
CYBER_FACT_COUNTS = {
    ("vendor", "develops", "product"): 7897,
    ("product", "obtains", "version"): 96725,
    ("vendor", "vulnerable_to", "cve"): 26884,
    ("product", "vulnerable_to", "cve"): 47419,
    ("version", "vulnerable_to", "cve"): 510781,
    ("cve", "aims_to", "campaign"): 27325,
    ("cve", "is_related_to", "cve"): 2502,
    ("tactic", "includes", "technique"): 123,
    ("technique", "leverages", "attack_pattern"): 111,
    ("attack_pattern", "applies_to", "weakness"): 575,
    ("weakness", "contains", "cve"): 19047,
    ("cve", "fixable_by", "mitigation"): 125943,
}


def cyber_spec(scale: float = 0.01, density: float = 1.0, seed: int = 0,
               min_count: int = 2, **kw) -> KGSpec:
    """Cyber-threat schema with category sizes scaled from the reference KG."""
    counts = {c: max(min_count, round(n * scale)) for c, n in CYBER_ENTITY_COUNTS.items()}
    rels = []
    for (hc, r, tc), n in CYBER_FACT_COUNTS.items():
        target = max(1.0, n * scale)
        rels.append(RelationSpec(hc, r, tc, target / counts[hc]))
    return KGSpec(counts, tuple(rels), density=density, seed=seed, **kw)


DRUG_DISEASE_RELATIONS = ("treats", "palliates", "biomarker_of", "alleviates",
                          "exacerbates", "prevents")


def drug_spec(scale: float = 1.0, density: float = 1.0, seed: int = 0, **kw) -> KGSpec:
    """Small drug-repurposing style schema for relation queries."""
    n = lambda x: max(2, round(x * scale))  # noqa: E731
    counts = {"atc": n(8), "drug": n(240), "disease": n(120), "gene": n(300)}
    k = len(DRUG_DISEASE_RELATIONS)
    comm = kw.pop("communities", 12)
    rels = [
        RelationSpec("atc", "includes", "drug", counts["drug"] / counts["atc"]),
        RelationSpec("drug", "inhibits", "gene", 2.0),
        RelationSpec("drug", "activates", "gene", 1.5),
        RelationSpec("gene", "associated_with", "disease", 1.2),
        RelationSpec("gene", "interacts", "gene", 1.0),
    ]
    for j, r in enumerate(DRUG_DISEASE_RELATIONS):
        aff = tuple(c for c in range(comm) if c % k == j)
        rels.append(RelationSpec("drug", r, "disease", 1.4 / k * 2, aff))
    return KGSpec(counts, tuple(rels), density=density, seed=seed, communities=comm, **kw)


def _check_reachable(spec: KGSpec) -> None:
    cats = set(spec.counts)
    adj: dict[str, set[str]] = defaultdict(set)
    for r in spec.relations:
        if r.head not in cats or r.tail not in cats:
            raise GraphError(f"relation {r.name} references an unknown category")
        adj[r.head].add(r.tail)
        adj[r.tail].add(r.head)
    start = sorted(cats)[0]
    seen, stack = {start}, [start]
    while stack:
        for n in adj[stack.pop()]:
            if n not in seen:
                seen.add(n)
                stack.append(n)
    if seen != cats:
        raise GraphError(f"unreachable categories in schema: {sorted(cats - seen)}")


def generate_synthetic_kg(spec: KGSpec) -> KnowledgeGraph:
    """Sample a schema-conformant KG with community structure.

    Each entity is assigned one of ``spec.communities`` latent groups; with
    probability ``spec.locality`` a fact connects entities of the same group,
    which is what makes held-out facts predictable from the rest.
    """
    if spec.density <= 0:
        raise GraphError("density must be positive")
    if any(n < 1 for n in spec.counts.values()):
        raise GraphError("every category needs at least one entity")
    _check_reachable(spec)
    rng = np.random.default_rng(spec.seed)
    members: dict[str, list[str]] = {}
    community: dict[str, int] = {}
    for cat in sorted(spec.counts):
        pre = spec.prefix.get(cat, cat)
        width = len(str(spec.counts[cat] - 1))
        ids = [f"{pre}:{i:0{width}d}" for i in range(spec.counts[cat])]
        members[cat] = ids
        for e, c in zip(ids, rng.integers(0, spec.communities, len(ids))):
            community[e] = int(c)
    by_comm: dict[tuple[str, int], list[str]] = defaultdict(list)
    for cat, ids in members.items():
        for e in ids:
            by_comm[(cat, community[e])].append(e)

    facts: set[Fact] = set()

    def partner(cat, anchor, exclude):
        pool = by_comm.get((cat, community[anchor]), [])
        if pool and rng.random() < spec.locality:
            cand = pool[int(rng.integers(len(pool)))]
        else:
            cand = members[cat][int(rng.integers(len(members[cat])))]
        return None if cand == exclude else cand

    for rs in spec.relations:
        heads, tails = members[rs.head], members[rs.tail]
        cap = len(heads) * len(tails) - (len(heads) if rs.head == rs.tail else 0)
        n = min(cap, max(1, int(round(spec.density * rs.degree * len(heads)))))
        if rs.affinity:
            pref = [h for h in heads if community[h] in rs.affinity] or heads
        else:
            pref = heads
        made: set[Fact] = set()
        # cover tails first so no tail category member is left isolated
        cover = [tails[i] for i in rng.permutation(len(tails))][: n]
        for t in cover:
            for _ in range(8):
                if rs.affinity and rng.random() < spec.locality:
                    h = pref[int(rng.integers(len(pref)))]
                else:
                    h = partner(rs.head, t, t)
                if h is not None and (h, rs.name, t) not in made:
                    made.add((h, rs.name, t))
                    break
        attempts = 0
        while len(made) < n and attempts < 50 * n:
            attempts += 1
            if rs.affinity and rng.random() < spec.locality:
                h = pref[int(rng.integers(len(pref)))]
            else:
                h = heads[int(rng.integers(len(heads)))]
            t = partner(rs.tail, h, h)
            if t is not None:
                made.add((h, rs.name, t))
        facts |= made

    touched = {e for h, _, t in facts for e in (h, t)}
    for cat in sorted(members):
        for e in members[cat]:
            if e in touched:
                continue
            for rs in spec.relations:
                if rs.head == cat or rs.tail == cat:
                    other = rs.tail if rs.head == cat else rs.head
                    p = partner(other, e, e) or next(x for x in members[other] if x != e)
                    facts.add((e, rs.name, p) if rs.head == cat else (p, rs.name, e))
                    break
    entities = {e: cat for cat, ids in members.items() for e in ids}
    schema = {(r.head, r.name, r.tail) for r in spec.relations}
    rel_order = list(dict.fromkeys(r.name for r in spec.relations))
    return KnowledgeGraph.build(entities, facts, schema, reverse=spec.reverse,
                                relation_types=rel_order)


# -- entity queries ---------------------------------------------------------

class InsufficientQueries(RuntimeError):
    def __init__(self, msg, found):
        super().__init__(msg)
        self.found = found


def _backward_walk(g, start, length, rng, allowed_anchor, avoid):
    node, prev, steps = start, None, []
    for i in range(length):
        options = [(r, h) for r, h in g.in_edges(node) if h != prev and h not in avoid]
        if i == length - 1 and allowed_anchor is not None:
            options = [(r, h) for r, h in options if g.entities[h] in allowed_anchor]
        if not options:
            return None
        r, h = options[int(rng.integers(len(options)))]
        steps.append((h, r, node))
        prev, node = node, h
    return node, [rel for _, rel, _ in reversed(steps)], list(reversed(steps))


def _canonical_key(edges, sink):
    return (tuple(sorted(edges)), sink)


def sample_entity_queries(
    g: KnowledgeGraph,
    template: tuple[int, int],
    count: int,
    seed: int,
    sink_category: str | None = None,
    junction: tuple[str, str] | None = None,
    anchor_categories: tuple[str, ...] | None = None,
    max_answers: int | None = None,
    required_path: tuple[str, tuple[str, ...]] | None = None,
    prefix: str = "q",
    max_attempts: int | None = None,
) -> list[EntityQuery]:
    """Sample conjunctive queries with ``n_path`` paths, the longest ``m_path`` hops.

    Paths are sampled backwards from a sampled answer and conjoined at a
    junction node: the sink itself, or (with ``junction=(relation, category)``)
    a variable one ``relation`` hop before the sink. ``required_path`` forces
    one path to be ``(anchor, relation sequence)``, which is how trigger-bearing
    queries are drawn. Ground truth is computed by traversal on ``g``.
    """
    n_path, m_path = template
    tail_len = 1 if junction else 0
    if n_path < 1 or m_path - tail_len < 1:
        raise GraphError(f"template {template} not achievable")
    rng = np.random.default_rng(seed)
    if sink_category is None:
        sink_category = g.categories[0]
    sinks = g.members.get(sink_category, ())
    if not sinks:
        raise GraphError(f"no entities of category {sink_category}")
    allowed = set(anchor_categories) if anchor_categories else None
    if allowed is not None:
        allowed.discard(sink_category)
    max_attempts = max_attempts or 60 * count + 200
    found: list[EntityQuery] = []
    seen = set()
    sink = VAR_PREFIX + "s"
    for _ in range(max_attempts):
        if len(found) >= count:
            break
        edges: list[Fact] = []
        if junction:
            jrel, jcat = junction
            a = sinks[int(rng.integers(len(sinks)))]
            opts = [h for h in g.neighbors(a, jrel, "in") if g.entities[h] == jcat]
            if not opts:
                continue
            j_ent = opts[int(rng.integers(len(opts)))]
            j_node = VAR_PREFIX + "j"
            edges.append((j_node, jrel, sink))
        else:
            a = sinks[int(rng.integers(len(sinks)))]
            j_ent, j_node = a, sink
        span = m_path - tail_len
        paths = []
        used_anchors: set[str] = set()
        n_free = n_path
        need_full = True
        if required_path is not None:
            ra, rseq = required_path
            if len(rseq) > span or (n_path == 1 and len(rseq) != span):
                raise GraphError("required path does not fit the template")
            # the required anchor must reach the junction through rseq
            frontier = {ra}
            for r in rseq:
                frontier = {t for e in frontier for t in g.neighbors(e, r)}
            if j_ent not in frontier:
                continue
            paths.append((ra, list(rseq)))
            used_anchors.add(ra)
            n_free -= 1
            need_full = len(rseq) != span
        lengths = [int(rng.integers(1, span + 1)) for _ in range(n_free)]
        if need_full and lengths:
            lengths[0] = span
        ok = True
        for L in lengths:
            w = None
            for _try in range(6):
                w = _backward_walk(g, j_ent, L, rng, allowed, {a, j_ent})
                if w is not None and w[0] not in used_anchors:
                    break
                w = None
            if w is None:
                ok = False
                break
            anchor, rels, _ = w
            used_anchors.add(anchor)
            paths.append((anchor, rels))
        if not ok:
            continue
        counter = 0
        for anchor, rels in paths:
            node = anchor
            for i, r in enumerate(rels):
                if i == len(rels) - 1:
                    nxt = j_node
                else:
                    counter += 1
                    nxt = f"{VAR_PREFIX}v{counter}"
                edges.append((node, r, nxt))
                node = nxt
        key = _canonical_key(edges, sink)
        if key in seen:
            continue
        q = EntityQuery.from_edges("", edges, sink)
        if q.tag != (n_path, m_path):
            continue
        answers = answer_by_traversal(q, g)
        if a not in answers:
            continue
        if max_answers is not None and len(answers) > max_answers:
            continue
        seen.add(key)
        found.append(q.replace(id=f"{prefix}{len(found)}", answers=answers))
    if len(found) < count:
        raise InsufficientQueries(
            f"only {len(found)} distinct queries for template {template}", found)
    return found


def link_queries(g: KnowledgeGraph, prefix: str = "l") -> list[EntityQuery]:
    """One single-hop query per (head, relation) pair present in ``g``."""
    groups: dict[tuple[str, str], set[str]] = defaultdict(set)
    for h, r, t in g.facts:
        groups[(h, r)].add(t)
    out = []
    sink = VAR_PREFIX + "s"
    for i, ((h, r), tails) in enumerate(sorted(groups.items())):
        out.append(EntityQuery(f"{prefix}{i}", (h,), (), sink, ((h, r, sink),),
                               frozenset(tails), (1, 1), False))
    return out


# -- holdout ----------------------------------------------------------------

def supporting_facts(q: EntityQuery, g: KnowledgeGraph) -> set[Fact]:
    """Facts that instantiate some query edge on an anchor-to-answer route.

    Forward reachable sets are intersected with backward sets from the
    answers (a semi-join pass); exact for tree-shaped queries.
    """
    from .graph import topological_order

    order = topological_order(q)
    fwd: dict[str, set[str]] = {}
    ins = defaultdict(list)
    outs = defaultdict(list)
    for h, r, t in q.edges:
        ins[t].append((h, r))
        outs[h].append((r, t))
    for n in order:
        if not is_variable(n):
            fwd[n] = {n}
            continue
        sets = [{t for e in fwd[h] for t in g.neighbors(e, r)} for h, r in ins[n]]
        fwd[n] = set.intersection(*sets) if sets else set()
    bwd: dict[str, set[str]] = {q.sink: fwd[q.sink] & set(q.answers) if q.answers else fwd[q.sink]}
    for n in reversed(order):
        if n == q.sink:
            continue
        sets = [{h for e in bwd[t] for h in g.neighbors(e, r, "in")} for r, t in outs[n]]
        bwd[n] = fwd[n] & set.intersection(*sets) if sets else set()
    support = set()
    for h, r, t in q.edges:
        for e in bwd[h]:
            for x in g.neighbors(e, r):
                if x in bwd[t]:
                    support.add(g.canonical((e, r, x)))
    return support


class HoldoutError(ValueError):
    pass


def holdout_split(
    g: KnowledgeGraph,
    fraction: float,
    mode: str = "uniform-facts",
    seed: int = 0,
    queries: list[EntityQuery] | None = None,
    category: str | None = None,
    reachability_floor: float = 0.0,
) -> tuple[KnowledgeGraph, tuple]:
    if not 0 <= fraction < 1:
        raise HoldoutError("fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    if mode == "uniform-facts":
        if queries is None:
            eligible = sorted(g.primary_facts)
        else:
            eligible = sorted(set().union(*[supporting_facts(q, g) for q in queries]) if queries else set())
        k = int(round(fraction * len(eligible)))
        idx = sorted(rng.choice(len(eligible), size=k, replace=False)) if k else []
        removed = tuple(eligible[i] for i in idx)
        train = g.without_facts(removed)
        if queries and reachability_floor > 0:
            reach = sum(1 for q in queries if answer_by_traversal(q, train) & q.answers)
            if reach / len(queries) < reachability_floor:
                raise HoldoutError(
                    f"holdout leaves {reach}/{len(queries)} queries reachable, "
                    f"below floor {reachability_floor}")
        return train, removed
    if mode == "answer-entities":
        if category is None:
            raise HoldoutError("answer-entities mode needs a category")
        pool = list(g.members.get(category, ()))
        k = int(round(fraction * len(pool)))
        idx = sorted(rng.choice(len(pool), size=k, replace=False)) if k else []
        removed = tuple(pool[i] for i in idx)
        return g.without_entities(removed), removed
    raise HoldoutError(f"unknown holdout mode {mode!r}")


# -- relation queries -------------------------------------------------------

def two_hop_context(g: KnowledgeGraph, head: str, tail: str) -> tuple[tuple[Fact, ...], tuple[str, ...]]:
    """Induced subgraph on every entity within two hops of ``head`` or ``tail``."""
    near = {head, tail}
    frontier = {head, tail}
    for _ in range(2):
        nxt = set()
        for e in frontier:
            nxt.update(t for _, t in g.out_edges(e))
            nxt.update(h for _, h in g.in_edges(e))
        frontier = nxt - near
        near |= nxt
    facts = tuple(sorted(f for e in near for f in ((e, r, t) for r, t in g.out_edges(e)) if f[2] in near))
    return facts, tuple(sorted(near))


def sample_relation_queries(
    g: KnowledgeGraph,
    relations: tuple[str, ...],
    test_fraction: float,
    seed: int,
    max_queries: int | None = None,
    prefix: str = "rq",
) -> tuple[KnowledgeGraph, list[RelationQuery], list[tuple[str, str, str]]]:
    """Hold out a fraction of facts with the given relations as relation queries.

    Returns the training graph (held-out facts removed), the test queries with
    their 2-hop context in the training graph, and the training triples.
    """
    rng = np.random.default_rng(seed)
    pool = sorted(f for f in g.primary_facts if f[1] in relations)
    pairs: dict[tuple[str, str], list[str]] = defaultdict(list)
    for h, r, t in pool:
        pairs[(h, t)].append(r)
    keys = sorted(pairs)
    order = rng.permutation(len(keys))
    n_test = int(round(test_fraction * len(keys)))
    if max_queries is not None:
        n_test = min(n_test, max_queries)
    test_keys = [keys[i] for i in order[:n_test]]
    held = [(h, r, t) for h, t in test_keys for r in pairs[(h, t)]]
    train = g.without_facts(held)
    queries = []
    for i, (h, t) in enumerate(test_keys):
        ctx, ents = two_hop_context(train, h, t)
        queries.append(RelationQuery(f"{prefix}{i}", h, t, ctx, ents, sorted(pairs[(h, t)])[0]))
    train_triples = [(h, r, t) for h, r, t in sorted(train.primary_facts) if r in relations]
    return train, queries, train_triples




def training_queries(g: KnowledgeGraph, templates=((2, 1), (2, 2), (3, 2), (5, 2)), count: int = 100,
                     seed: int = 0, sink_category: str | None = None) -> list[EntityQuery]:
    """One-hop link queries for every fact plus sampled multi-path queries."""
    out = link_queries(g)
    for n, m in templates:
        try:
            out += sample_entity_queries(g, (n, m), count, seed=seed * 1000 + n * 10 + m,
                                         sink_category=sink_category, prefix=f"tr{n}.{m}_")
        except InsufficientQueries as exc:
            out += exc.found
    return out


__all__ = [
    "RelationSpec", "KGSpec", "cyber_spec", "drug_spec", "generate_synthetic_kg",
    "sample_entity_queries", "link_queries", "training_queries", "holdout_split", "supporting_facts",
    "InsufficientQueries", "HoldoutError", "two_hop_context", "sample_relation_queries",
    "reverse_relation", "anchor_sink_paths", "DRUG_DISEASE_RELATIONS",
]
