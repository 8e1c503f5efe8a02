"""Scenario orchestration and report emission."""
from __future__ import annotations

import csv
import io
import json
import logging
import statistics
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .attacks import (
    AttackConfig,
    PoisonSet,
    attack_manifest,
    co_optimize,
    kp_attack,
    make_refitter,
    make_surrogate,
    qp_attack_many,
    vicinity,
)
from .boxes import BoxModel, answer_entity_queries
from .defense import DefenseConfig, adversarial_training, audit, filter_facts
from .graph import (
    EntityQuery,
    GraphError,
    KnowledgeGraph,
    TriggerPattern,
    load_kg,
    match_trigger,
    query_to_record,
    save_kg,
    save_queries,
)
from .metrics import hit_at_k, missing_truths, mrr, ndcg_at_k
from .synth import (
    InsufficientQueries,
    cyber_spec,
    drug_spec,
    generate_synthetic_kg,
    holdout_split,
    sample_entity_queries,
    training_queries,
)
from .training import TrainConfig, save_model, train_entity_model

log = logging.getLogger(__name__)

# sink category, junction, trigger path after the anchor
QUERY_KINDS = {
    "vulnerability": ("cve", None, (("vulnerable_to", "variable"),)),
    "mitigation": ("mitigation", ("fixable_by", "cve"),
                   (("vulnerable_to", "variable"), ("fixable_by", "variable"))),
}

TRAIN_KEYS = ("dim", "hidden", "depth", "lr", "batch", "epochs", "negatives", "margin", "alpha", "max_steps")
ATTACK_KEYS = ("n_kp", "n_qp", "n_iter", "lambda", "lam", "delta", "kp_steps", "qp_steps", "step_size",
               "minibatch", "max_depth", "beam_width", "refit_fraction", "surrogate",
               "encoder_known", "operator_known")
DEFENSE_KEYS = ("m", "n_qp_d", "refresh", "perturb_links")


class StageError(RuntimeError):
    def __init__(self, stage: str, seed: int, cause: BaseException):
        super().__init__(f"stage {stage!r} failed for seed {seed}: {cause}")
        self.stage, self.seed = stage, seed


@dataclass
class Scenario:
    name: str = "desk"
    kg: dict = field(default_factory=lambda: {"preset": "cyber", "scale": 0.01, "density": 1.0})
    query_kind: str = "vulnerability"
    template: tuple[int, int] = (3, 2)
    count: int = 50
    trigger_anchor: str | None = None
    target: str | None = None
    holdout: dict | None = None
    train: dict = field(default_factory=lambda: {"epochs": 60})
    train_templates: tuple = ((2, 1), (2, 2), (3, 2), (5, 2))
    train_count: int = 100
    attack: dict = field(default_factory=dict)
    attacks: tuple[str, ...] = ("kp", "qp", "co")
    objectives: tuple[str, ...] = ("targeted", "untargeted")
    vicinity: dict = field(default_factory=lambda: {"targeted": 1, "untargeted": 2})
    defense: dict = field(default_factory=dict)
    defenses: tuple[str, ...] = ()
    defend_against: tuple = (("co", "targeted"), ("qp", "untargeted"))
    sweep: dict | None = None
    seeds: tuple[int, ...] = (0,)
    K: int = 5
    hit_k: int = 1

    def validate(self) -> "Scenario":
        if not self.seeds:
            raise ValueError("scenario needs at least one seed")
        if "path" in self.kg and not Path(self.kg["path"]).exists():
            raise ValueError(f"KG path {self.kg['path']} does not exist")
        if self.query_kind not in QUERY_KINDS:
            raise ValueError(f"unknown query kind {self.query_kind!r}")
        for a in self.attacks:
            if a not in ("kp", "qp", "co"):
                raise ValueError(f"unknown attack {a!r}")
        for d in self.defenses:
            if d not in ("filter", "advtrain", "both"):
                raise ValueError(f"unknown defense {d!r}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        """Build from JSON; flat hyperparameter keys are routed to their section."""
        d = dict(d)
        train = dict(d.pop("train", {"epochs": 60}))
        attack = dict(d.pop("attack", {}))
        defense = dict(d.pop("defense", {}))
        for k in list(d):
            if k in TRAIN_KEYS:
                train[k] = d.pop(k)
            elif k in ATTACK_KEYS:
                attack[k] = d.pop(k)
            elif k in DEFENSE_KEYS:
                defense[k] = d.pop(k)
        for k in ("template",):
            if k in d:
                d[k] = tuple(d[k])
        for k in ("attacks", "objectives", "defenses", "seeds"):
            if k in d:
                d[k] = tuple(d[k])
        if "train_templates" in d:
            d["train_templates"] = tuple(tuple(t) for t in d["train_templates"])
        if "defend_against" in d:
            d["defend_against"] = tuple(tuple(t) for t in d["defend_against"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys {sorted(unknown)}")
        return cls(train=train, attack=attack, defense=defense, **d).validate()

    def asdict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    def with_(self, **kw) -> "Scenario":
        return replace(self, **kw)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed).with_(**self.train)


# -- setup ----------------------------------------------------------------------

def build_kg(spec: dict, seed: int) -> KnowledgeGraph:
    if "path" in spec:
        return load_kg(spec["path"])
    preset = spec.get("preset", "cyber")
    kw = {k: v for k, v in spec.items() if k not in ("preset",)}
    if preset == "cyber":
        return generate_synthetic_kg(cyber_spec(seed=seed, **kw))
    if preset == "drug":
        return generate_synthetic_kg(drug_spec(seed=seed, **kw))
    raise ValueError(f"unknown KG preset {preset!r}")


def default_trigger_anchor(g: KnowledgeGraph, relation: str = "vulnerable_to",
                           category: str = "product") -> str:
    """The ``category`` entity with the most ``relation`` facts, ties by id."""
    pool = g.members.get(category, ())
    if not pool:
        raise GraphError(f"no {category} entities for a trigger anchor")
    return min(pool, key=lambda e: (-len(g.neighbors(e, relation)), e))


def _neighborhood(g: KnowledgeGraph, e: str) -> set[str]:
    return {t for _, t in g.out_edges(e)} | {h for _, h in g.in_edges(e)}


def choose_target(g: KnowledgeGraph, sink: str, anchor: str, queries: Sequence[EntityQuery],
                  seed: int, junction=None) -> str:
    """A sink entity far from the target queries.

    Candidates are non-answers off the anchor's trigger path; among them the
    ones sharing the fewest neighbors with the answers (or with the junction
    entities for two-hop sinks) are kept and one is drawn at random.
    """
    answers = set().union(*(q.answers for q in queries)) if queries else set()
    near = vicinity(g, answers, 1) | set(g.neighbors(anchor, "vulnerable_to"))
    pool = [e for e in g.members[sink] if e not in near] or \
        [e for e in g.members[sink] if e not in answers]
    ref = answers
    if junction is not None:
        rel, _ = junction
        ref = {j for a in answers for j in g.neighbors(a, rel, "in")}
    shared = set().union(*(_neighborhood(g, a) for a in ref)) if ref else set()
    overlap = {e: len(_neighborhood(g, e) & shared) for e in pool}
    best = min(overlap.values())
    pool = sorted(e for e in pool if overlap[e] == best)
    rng = np.random.default_rng(seed)
    return pool[int(rng.integers(len(pool)))]


def _sample(g, template, count, seed, sink, junction, prefix, required=None, trigger=None):
    if required is not None:
        try:
            return sample_entity_queries(g, template, count, seed, sink_category=sink, junction=junction,
                                         required_path=required, prefix=prefix)
        except InsufficientQueries as exc:
            if len(exc.found) < max(1, count // 2):
                raise
            return exc.found
    try:
        qs = sample_entity_queries(g, template, 2 * count, seed, sink_category=sink, junction=junction,
                                   prefix=prefix)
    except InsufficientQueries as exc:
        qs = exc.found
    return [q for q in qs if not match_trigger(q, trigger)][:count]


@dataclass
class Setup:
    g: KnowledgeGraph
    g_train: KnowledgeGraph
    trigger: TriggerPattern
    target: str
    target_queries: list
    other_queries: list
    attacker_target: list
    attacker_other: list
    sink: str
    held_out: tuple = ()


def prepare(s: Scenario, seed: int, template: tuple[int, int] | None = None) -> Setup:
    template = tuple(template or s.template)
    g = build_kg(s.kg, seed)
    sink, junction, path = QUERY_KINDS[s.query_kind]
    anchor = s.trigger_anchor or default_trigger_anchor(g)
    trigger = TriggerPattern((anchor,), path)
    trigger.validate(g)
    req = (anchor, ("vulnerable_to",))
    base = seed * 7919 + template[0] * 101 + template[1]
    qs = _sample(g, template, s.count, base + 1, sink, junction, "t", req)
    qn = _sample(g, template, s.count, base + 2, sink, junction, "n", trigger=trigger)
    qa = _sample(g, template, s.count, base + 3, sink, junction, "a", req)
    qan = _sample(g, template, s.count, base + 4, sink, junction, "an", trigger=trigger)
    target = s.target or choose_target(g, sink, anchor, qs + qa, seed, junction)
    g_train, held = g, ()
    if s.holdout:
        h = dict(s.holdout)
        mode = h.get("mode", "uniform-facts")
        if mode == "uniform-facts":
            g_train, held = holdout_split(g, h.get("fraction", 0.5), mode, seed, queries=qs + qn)
        else:
            g_train, held = holdout_split(g, h.get("fraction", 0.3), mode, seed,
                                          category=h.get("category", "cve"))
            held = tuple(held)
    return Setup(g, g_train, trigger, target, qs, qn, qa, qan, sink, tuple(held))


# -- evaluation -----------------------------------------------------------------

def evaluate(model: BoxModel, g: KnowledgeGraph, queries: Sequence[EntityQuery], truths=None,
             K: int = 5, hit_k: int = 1, keep: int = 10) -> dict:
    res = answer_entity_queries(queries, model, g)
    rankings = [[e for e, _ in r] for r in res]
    truths = [q.answers for q in queries] if truths is None else truths
    return {
        "mrr": mrr(rankings, truths),
        "ndcg": ndcg_at_k(rankings, truths, K),
        "hit": hit_at_k(rankings, truths, hit_k),
        "missing": len(missing_truths(rankings, truths)),
        "rankings": {q.id: r[:keep] for q, r in zip(queries, rankings)},
    }


@dataclass
class Outcome:
    kind: str
    objective: str
    model: BoxModel
    graph: KnowledgeGraph
    queries: list
    poison: PoisonSet = field(default_factory=PoisonSet)
    report: dict = field(default_factory=dict)
    config: AttackConfig | None = None


class Experiment:
    """One seed of a scenario; trained models and attack outcomes are cached."""

    def __init__(self, s: Scenario, seed: int, template: tuple[int, int] | None = None):
        self.s = s.validate()
        self.seed = seed
        try:
            self.setup = prepare(s, seed, template)
        except Exception as exc:
            raise StageError("setup", seed, exc) from exc
        self._cache: dict = {}

    # training
    def train_cfg(self, salt: int = 0) -> TrainConfig:
        return self.s.train_config(self.seed + salt)

    def queries_for(self, g: KnowledgeGraph, salt: int = 0):
        return training_queries(g, self.s.train_templates, self.s.train_count,
                                seed=self.seed + salt, sink_category=self.setup.sink)

    def train(self, g: KnowledgeGraph, salt: int) -> BoxModel:
        model, _ = train_entity_model(g, self.queries_for(g, salt), self.train_cfg(salt))
        return model

    @cached_property
    def victim(self) -> BoxModel:
        try:
            return self.train(self.setup.g_train, 0)
        except Exception as exc:
            raise StageError("train", self.seed, exc) from exc

    def retrain(self, g: KnowledgeGraph) -> BoxModel:
        # the defender retrains from scratch with a fresh seed
        return self.train(g, 1000)

    # attacks
    def attack_config(self, vectors: str, objective: str, **kw) -> AttackConfig:
        d = dict(self.s.attack)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if "surrogate" in d:
            d["surrogate"] = tuple(d["surrogate"])
        cfg = AttackConfig(**d).with_(
            vectors=vectors, objective=objective, trigger=self.setup.trigger,
            target=self.setup.target if objective == "targeted" else None,
            vicinity=self.s.vicinity.get(objective, 2), seed=self.seed)
        return cfg.with_(**kw).validate()

    def surrogate(self, cfg: AttackConfig) -> BoxModel:
        if cfg.encoder_known and cfg.operator_known:
            return self.victim
        key = ("surrogate", cfg.surrogate, cfg.encoder_known, cfg.operator_known)
        if key not in self._cache:
            g = self.setup.g_train
            self._cache[key] = make_surrogate(
                g, cfg.surrogate, self.seed + 500, self.queries_for(g, 500),
                self.train_cfg(500), self.victim, cfg.encoder_known, cfg.operator_known)
        return self._cache[key]

    def refitter(self, cfg: AttackConfig):
        g = self.setup.g_train
        return make_refitter(self.queries_for(g, 500), self.train_cfg(500), cfg.refit_fraction,
                             self.seed + 500)

    def run_attack(self, kind: str, objective: str, **kw) -> Outcome:
        key = (kind, objective, tuple(sorted(kw.items())))
        if key in self._cache:
            return self._cache[key]
        st = self.setup
        try:
            if kind == "none":
                out = Outcome("none", objective, self.victim, st.g_train, list(st.target_queries))
            elif kind == "kp":
                cfg = self.attack_config("kp", objective, **kw)
                sur = self.surrogate(cfg)
                gp, ps, rep = kp_attack(st.g_train, sur, cfg, st.attacker_target, st.attacker_other,
                                        refit=self.refitter(cfg))
                model = self.retrain(gp) if len(ps) else self.victim
                out = Outcome("kp", objective, model, gp, list(st.target_queries), ps, rep, cfg)
            elif kind == "qp":
                cfg = self.attack_config("qp", objective, **kw)
                sur = self.surrogate(cfg)
                qs, reps = qp_attack_many(st.target_queries, st.g_train, sur, cfg)
                out = Outcome("qp", objective, self.victim, st.g_train, qs, PoisonSet(),
                              {"queries": reps}, cfg)
            elif kind == "co":
                cfg = self.attack_config("both", objective, **kw)
                sur = self.surrogate(cfg)
                gp, ps, qs, rep = co_optimize(st.g_train, st.attacker_target, sur, cfg, st.attacker_other,
                                              refit=self.refitter(cfg), apply_to=st.target_queries)
                model = self.retrain(gp) if len(ps) else self.victim
                out = Outcome("co", objective, model, gp, qs, ps, rep, cfg)
            else:
                raise ValueError(f"unknown attack {kind!r}")
        except StageError:
            raise
        except Exception as exc:
            raise StageError(f"attack:{kind}:{objective}", self.seed, exc) from exc
        self._cache[key] = out
        return out

    def score(self, out: Outcome, model: BoxModel | None = None) -> dict:
        """Metrics on the target split (target answer and ground truth) and the non-target split."""
        st, s = self.setup, self.s
        model = model or out.model
        graph = out.graph
        tq = out.queries
        target = evaluate(model, graph, tq, [{st.target}] * len(tq), s.K, s.hit_k)
        truth = evaluate(model, graph, tq, [q.answers for q in st.target_queries], s.K, s.hit_k)
        other = evaluate(model, graph, st.other_queries, None, s.K, s.hit_k)
        return {"target_answer": target, "ground_truth": truth, "non_target": other}

    def metrics(self, kind: str, objective: str, **kw) -> dict:
        key = ("metrics", kind, objective, tuple(sorted(kw.items())))
        if key not in self._cache:
            self._cache[key] = self.score(self.run_attack(kind, objective, **kw))
        return self._cache[key]

    # defenses
    def defense_config(self, **kw) -> DefenseConfig:
        return DefenseConfig(**self.s.defense).with_(**kw).validate()

    def run_defense(self, kind: str, attack: str, objective: str, **kw) -> dict:
        key = ("defense", kind, attack, objective, tuple(sorted(kw.items())))
        if key in self._cache:
            return self._cache[key]
        out = self.run_attack(attack, objective)
        dcfg = self.defense_config(**kw)
        report: dict = {"kind": kind, "attack": attack, "objective": objective, "config": dcfg.asdict()}
        try:
            g, model, rep = self._defended(kind, out, dcfg)
            report.update(rep)
            queries = out.queries
            if attack in ("qp",) and kind != "filter":
                # inference-time perturbations are re-crafted against the served model
                cfg = out.config
                queries, _ = qp_attack_many(self.setup.target_queries, g, model, cfg)
            res = self.score(Outcome(attack, objective, model, g, list(queries)))
        except Exception as exc:
            raise StageError(f"defense:{kind}", self.seed, exc) from exc
        report["metrics"] = res
        self._cache[key] = report
        return report

    def _defended(self, kind: str, out: Outcome, dcfg: DefenseConfig):
        """Served graph and model after defense; shared by attacks that serve the same graph."""
        key = ("defended", kind, id(out.graph), id(out.model), json.dumps(dcfg.asdict(), sort_keys=True))
        if key in self._cache:
            return self._cache[key][1:]
        g, rep = out.graph, {}
        if kind in ("filter", "both") and dcfg.m > 0:
            # the scoring model is the one the defender trained on the served graph
            g, removed = filter_facts(out.graph, out.model, dcfg.m)
            rep["filter"] = audit(removed, out.graph)
        if kind == "filter":
            model = self.retrain(g) if g is not out.graph else out.model
        else:
            model, adv = adversarial_training(g, self.queries_for(g, 1000), dcfg.n_qp_d, self.train_cfg(1000),
                                              dcfg.with_(vicinity=self.s.vicinity.get("untargeted", 2)))
            rep["adversarial"] = {k: v for k, v in adv.items() if k != "trace"}
        # keep the source objects alive so their ids stay unique
        self._cache[key] = ((out.graph, out.model), g, model, rep)
        return g, model, rep


# -- reporting ------------------------------------------------------------------

SPLITS = ("target_answer", "ground_truth", "non_target")
METRICS = ("mrr", "ndcg", "hit")


def _round(x: float) -> float:
    return float(f"{x:.6f}")


def _rows(seed: int, objective: str, query_kind: str, attack: str, defense: str,
          scored: dict, baseline: dict) -> list[dict]:
    rows = []
    for split in SPLITS:
        for m in METRICS:
            v = scored[split][m]
            b = baseline[split][m]
            rows.append({"seed": seed, "objective": objective, "query_kind": query_kind,
                         "attack": attack, "defense": defense, "split": split, "metric": m,
                         "value": _round(v), "baseline": _round(b), "delta": _round(v - b)})
    return rows


def run_seed(s: Scenario, seed: int, out: Path | None = None) -> dict:
    ex = Experiment(s, seed)
    st = ex.setup
    base = ex.metrics("none", "targeted")
    rows = []
    for obj in s.objectives:
        rows += _rows(seed, obj, s.query_kind, "none", "none", base, base)
    manifests = {}
    for attack in s.attacks:
        for obj in s.objectives:
            scored = ex.metrics(attack, obj)
            rows += _rows(seed, obj, s.query_kind, attack, "none", scored, base)
            o = ex.run_attack(attack, obj)
            manifests[f"{attack}-{obj}"] = attack_manifest(
                o.config, {"scenario": seed}, o.poison, o.queries if attack != "kp" else (),
                {k: v for k, v in o.report.items() if k != "queries"})
    for d in s.defenses:
        for attack, obj in s.defend_against:
            rep = ex.run_defense(d, attack, obj)
            rows += _rows(seed, obj, s.query_kind, attack, d, rep["metrics"], base)
    sweep = []
    if s.sweep:
        obj = s.sweep.get("objective", "targeted")
        for nk in s.sweep.get("n_kp", [0]):
            for nq in s.sweep.get("n_qp", [1]):
                m = ex.metrics("co", obj, n_kp=nk, n_qp=nq)
                split = "target_answer" if obj == "targeted" else "ground_truth"
                sweep.append({"seed": seed, "objective": obj, "n_kp": nk, "n_qp": nq,
                              "mrr": _round(m[split]["mrr"]), "ndcg": _round(m[split]["ndcg"]),
                              "baseline_mrr": _round(base[split]["mrr"])})
    result = {"seed": seed, "trigger": {"anchors": list(st.trigger.anchors),
                                        "path": [list(p) for p in st.trigger.path]},
              "target": st.target, "rows": rows, "sweep": sweep}
    if out is not None:
        d = out / f"seed{seed}"
        d.mkdir(parents=True, exist_ok=True)
        save_queries(st.target_queries, d / "target_queries.json")
        save_queries(st.other_queries, d / "other_queries.json")
        for name, man in manifests.items():
            (d / f"attack-{name}.json").write_text(json.dumps(man, indent=1, sort_keys=True))
        rankings = {f"{k[1]}-{k[2]}": {sp: v[sp]["rankings"] for sp in SPLITS}
                    for k, v in ex._cache.items() if k[0] == "metrics" and not k[3]}
        (d / "rankings.json").write_text(json.dumps(rankings, indent=1, sort_keys=True))
    return result


def run_scenario(s: Scenario, out: str | Path, threads: int | None = 1) -> Path:
    """Run every seed of a scenario and write ``results.json`` plus reports to ``out``."""
    s.validate()
    if threads:
        torch.set_num_threads(threads)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scenario.json").write_text(json.dumps(s.asdict(), indent=1, sort_keys=True))
    results = {"scenario": s.asdict(), "complete": False, "seeds": []}
    for seed in s.seeds:
        results["seeds"].append(run_seed(s, seed, out))
        _write_json(out / "results.json", results)
    results["complete"] = True
    _write_json(out / "results.json", results)
    emit_report(out, ("json", "csv"))
    return out


def surrogate_grid(s: Scenario, specs: Sequence[tuple[int, int]], attack: str = "kp",
                   objective: str = "targeted") -> dict:
    """Attack the same victim with surrogates of different (dim, depth)."""
    if not specs:
        raise ValueError("surrogate grid needs at least one spec")
    out = {"attack": attack, "objective": objective, "columns": {}}
    split = "target_answer" if objective == "targeted" else "ground_truth"
    for seed in s.seeds:
        ex = Experiment(s, seed)
        for spec in specs:
            label = f"dim{spec[0]}-depth{spec[1]}"
            m = ex.metrics(attack, objective, surrogate=tuple(spec), encoder_known=False,
                           operator_known=False)
            col = out["columns"].setdefault(label, {"mrr": [], "ndcg": []})
            col["mrr"].append(_round(m[split]["mrr"]))
            col["ndcg"].append(_round(m[split]["ndcg"]))
    for col in out["columns"].values():
        col["median_mrr"] = _round(statistics.median(col["mrr"]))
        col["median_ndcg"] = _round(statistics.median(col["ndcg"]))
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def summarize(rows: Sequence[dict]) -> list[dict]:
    """Median over seeds per (objective, query kind, attack, defense, split, metric)."""
    groups: dict = {}
    for r in rows:
        k = (r["objective"], r["query_kind"], r["attack"], r["defense"], r["split"], r["metric"])
        groups.setdefault(k, []).append(r)
    out = []
    for k in sorted(groups):
        g = groups[k]
        out.append(dict(zip(("objective", "query_kind", "attack", "defense", "split", "metric"), k),
                        value=_round(statistics.median(x["value"] for x in g)),
                        baseline=_round(statistics.median(x["baseline"] for x in g)),
                        delta=_round(statistics.median(x["delta"] for x in g)),
                        seeds=len(g)))
    return out


CSV_FIELDS = ("objective", "query_kind", "attack", "defense", "split", "metric",
              "value", "baseline", "delta", "seeds")


def emit_report(run_dir: str | Path, formats: Sequence[str] = ("json", "csv", "svg")) -> list[Path]:
    """Write report.json / report.csv / plots from ``results.json`` in ``run_dir``."""
    run_dir = Path(run_dir)
    res = json.loads((run_dir / "results.json").read_text())
    rows = [r for sd in res["seeds"] for r in sd["rows"]]
    table = summarize(rows)
    sweep = [r for sd in res["seeds"] for r in sd.get("sweep", [])]
    sweep_table = _sweep_table(sweep)
    incomplete = not res.get("complete", False)
    written = []
    if "json" in formats:
        p = run_dir / "report.json"
        _write_json(p, {"incomplete": incomplete, "table": table, "sweep": sweep_table})
        written.append(p)
    if "csv" in formats:
        p = run_dir / "report.csv"
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in table:
            w.writerow({k: r[k] for k in CSV_FIELDS})
        if incomplete:
            buf.write("# incomplete run\n")
        p.write_text(buf.getvalue())
        written.append(p)
        if sweep_table:
            p = run_dir / "sweep.csv"
            buf = io.StringIO()
            w = csv.DictWriter(buf, fieldnames=("objective", "n_kp", "n_qp", "mrr", "ndcg", "seeds"),
                               lineterminator="\n")
            w.writeheader()
            for r in sweep_table:
                w.writerow(r)
            p.write_text(buf.getvalue())
            written.append(p)
    if "svg" in formats:
        written += _plots(run_dir, table, sweep_table)
    return written


def _sweep_table(sweep: Sequence[dict]) -> list[dict]:
    groups: dict = {}
    for r in sweep:
        groups.setdefault((r["objective"], r["n_kp"], r["n_qp"]), []).append(r)
    return [{"objective": k[0], "n_kp": k[1], "n_qp": k[2],
             "mrr": _round(statistics.median(x["mrr"] for x in v)),
             "ndcg": _round(statistics.median(x["ndcg"] for x in v)), "seeds": len(v)}
            for k, v in sorted(groups.items())]


def _plots(run_dir: Path, table, sweep_table) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "kgsec"
    written = []
    meta = {"Date": None, "Creator": None}
    attacks = [r for r in table if r["split"] in ("target_answer", "ground_truth") and r["metric"] == "mrr"
               and r["defense"] == "none"]
    if attacks:
        fig, ax = plt.subplots(figsize=(6, 3))
        labels = [f"{r['objective'][:4]}/{r['attack']}/{r['split'][:6]}" for r in attacks]
        ax.bar(range(len(attacks)), [r["value"] for r in attacks])
        ax.set_xticks(range(len(attacks)))
        ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=6)
        ax.set_ylabel("MRR")
        fig.tight_layout()
        p = run_dir / "attacks.svg"
        fig.savefig(p, format="svg", metadata=meta)
        plt.close(fig)
        written.append(p)
    if sweep_table:
        for obj in sorted({r["objective"] for r in sweep_table}):
            sub = [r for r in sweep_table if r["objective"] == obj]
            kps = sorted({r["n_kp"] for r in sub})
            qps = sorted({r["n_qp"] for r in sub})
            grid = np.full((len(kps), len(qps)), np.nan)
            for r in sub:
                grid[kps.index(r["n_kp"]), qps.index(r["n_qp"])] = r["ndcg"]
            fig, ax = plt.subplots(figsize=(4, 3))
            im = ax.imshow(grid, origin="lower", vmin=0, vmax=1, cmap="viridis")
            ax.set_xticks(range(len(qps)))
            ax.set_xticklabels(qps)
            ax.set_yticks(range(len(kps)))
            ax.set_yticklabels(kps)
            ax.set_xlabel("n_qp")
            ax.set_ylabel("n_kp")
            for i in range(len(kps)):
                for j in range(len(qps)):
                    ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center", fontsize=7, color="w")
            fig.colorbar(im, ax=ax, label="NDCG@5")
            fig.tight_layout()
            p = run_dir / f"sweep-{obj}.svg"
            fig.savefig(p, format="svg", metadata=meta)
            plt.close(fig)
            written.append(p)
    return written
