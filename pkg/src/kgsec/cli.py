"""Command-line entry point: ``kgsec <group> <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import harness
from .attacks import AttackConfig, attack_manifest, co_optimize, kp_attack, qp_attack_many
from .defense import DefenseConfig, adversarial_training, audit, filter_facts, integrated_defense
from .graph import TriggerPattern, load_kg, load_queries, match_trigger, save_kg, save_queries
from .relscore import RelTrainConfig, save_scorer, train_relation_model
from .synth import (
    DRUG_DISEASE_RELATIONS,
    InsufficientQueries,
    cyber_spec,
    drug_spec,
    generate_synthetic_kg,
    sample_entity_queries,
    sample_relation_queries,
    training_queries,
)
from .training import TrainConfig, load_model, save_model, train_entity_model

log = logging.getLogger("kgsec")


def _config(args) -> dict:
    if not args.config:
        return {}
    return json.loads(Path(args.config).read_text())


def _pick(cfg: dict, keys) -> dict:
    return {k: v for k, v in cfg.items() if k in keys}


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(seed=args.seed).with_(**_pick(_config(args), harness.TRAIN_KEYS))


def _out(args, default: str) -> Path:
    p = Path(args.out or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _template(s: str) -> tuple[int, int]:
    a, b = s.split(",")
    return int(a), int(b)


# -- kg ---------------------------------------------------------------------------

def cmd_kg_gen(args):
    spec = {"cyber": cyber_spec, "drug": drug_spec}[args.preset]
    kw = {"seed": args.seed, "density": args.density}
    if args.scale is not None:
        kw["scale"] = args.scale
    g = generate_synthetic_kg(spec(**kw))
    out = _out(args, "kg")
    save_kg(g, out)
    print(json.dumps({k: v for k, v in g.stats().items() if k != "per_schema_triple"}, sort_keys=True))


def cmd_kg_stats(args):
    print(json.dumps(load_kg(args.kg).stats(), indent=1, sort_keys=True))


# -- queries ----------------------------------------------------------------------

def cmd_query_sample(args):
    g = load_kg(args.kg)
    out = _out(args, "queries")
    if args.kind == "relation":
        rels = tuple(args.relations.split(",")) if args.relations else DRUG_DISEASE_RELATIONS
        train, qs, triples = sample_relation_queries(g, rels, args.fraction, args.seed, args.count)
        save_queries(qs, out / "relation_queries.json")
        _dump([list(t) for t in triples], out / "train_triples.json")
        print(f"{len(qs)} relation queries, {len(triples)} training triples")
        return
    req = (args.anchor, tuple(args.path.split(","))) if args.anchor else None
    try:
        qs = sample_entity_queries(g, _template(args.template), args.count, args.seed,
                                   sink_category=args.sink, required_path=req)
    except InsufficientQueries as exc:
        log.warning("%s", exc)
        qs = exc.found
    save_queries(qs, out / "queries.json")
    print(f"{len(qs)} queries")


# -- training ---------------------------------------------------------------------

def cmd_train_entity(args):
    g = load_kg(args.kg)
    cfg = _train_cfg(args)
    qs = load_queries(args.queries) if args.queries else training_queries(g, seed=args.seed,
                                                                           sink_category=args.sink)
    model, trace = train_entity_model(g, qs, cfg)
    out = _out(args, "model")
    save_model(model, out / "model.pt", cfg)
    _dump({"config": cfg.asdict(), "loss": trace}, out / "train.json")
    print(f"loss {trace[0]:.4f} -> {trace[-1]:.4f}")


def cmd_train_relation(args):
    g = load_kg(args.kg)
    conf = _config(args)
    cfg = RelTrainConfig(seed=args.seed).with_(**_pick(conf, ("dim", "rounds", "lr", "batch", "epochs", "dropout")))
    rels = tuple(args.relations.split(",")) if args.relations else DRUG_DISEASE_RELATIONS
    train, qs, triples = sample_relation_queries(g, rels, args.fraction, args.seed)
    scorer, trace = train_relation_model(train, triples, cfg, labels=rels)
    out = _out(args, "relmodel")
    save_scorer(scorer, out / "scorer.pt", cfg)
    save_queries(qs, out / "test_queries.json")
    _dump({"config": cfg.asdict(), "loss": trace}, out / "train.json")
    print(f"loss {trace[0]:.4f} -> {trace[-1]:.4f}")


# -- attacks ----------------------------------------------------------------------

def _attack_cfg(args, vectors: str) -> AttackConfig:
    conf = _pick(_config(args), harness.ATTACK_KEYS)
    if "lambda" in conf:
        conf["lam"] = conf.pop("lambda")
    if "surrogate" in conf:
        conf["surrogate"] = tuple(conf["surrogate"])
    path = tuple((r, "variable") for r in args.path.split(","))
    trig = TriggerPattern((args.anchor,), path)
    return AttackConfig(vectors=vectors, objective=args.objective, trigger=trig,
                        target=args.target if args.objective == "targeted" else None,
                        seed=args.seed, vicinity=args.vicinity).with_(**conf).validate()


def cmd_attack(args):
    g = load_kg(args.kg)
    model = load_model(args.model)
    queries = load_queries(args.queries)
    vec = {"kp": "kp", "qp": "qp", "co": "both"}[args.vector]
    cfg = _attack_cfg(args, vec)
    cfg.trigger.validate(g)
    targets = [q for q in queries if match_trigger(q, cfg.trigger)] or queries
    others = load_queries(args.other) if args.other else [q for q in queries if q not in targets]
    out = _out(args, f"attack-{args.vector}")
    gp, poison, perturbed, report = g, None, [], {}
    if args.vector == "kp":
        gp, poison, report = kp_attack(g, model, cfg, targets, others)
    elif args.vector == "qp":
        perturbed, reps = qp_attack_many(targets, g, model, cfg)
        report = {"queries": reps}
    else:
        gp, poison, perturbed, report = co_optimize(g, targets, model, cfg, others)
    if poison is not None and len(poison):
        save_kg(gp, out / "kg")
    if perturbed:
        save_queries(perturbed, out / "perturbed.json")
    _dump(attack_manifest(cfg, {"attack": args.seed}, poison, perturbed, report), out / "manifest.json")
    print(f"poison facts: {len(poison) if poison is not None else 0}, perturbed queries: {len(perturbed)}")


# -- defenses ---------------------------------------------------------------------

def cmd_defend(args):
    g = load_kg(args.kg)
    conf = _config(args)
    dcfg = DefenseConfig().with_(**_pick(conf, harness.DEFENSE_KEYS)).validate()
    cfg = _train_cfg(args)
    out = _out(args, f"defense-{args.kind}")

    def qfn(gx):
        return training_queries(gx, seed=args.seed, sink_category=args.sink)

    report: dict = {"config": dcfg.asdict()}
    if args.kind == "filter":
        model = load_model(args.model)
        pruned, removed = filter_facts(g, model, dcfg.m)
        report["filter"] = audit(removed, g)
        report["filter"]["facts"] = [list(f) for f in removed]
        robust, _ = train_entity_model(pruned, qfn(pruned), cfg)
    elif args.kind == "advtrain":
        pruned = g
        robust, rep = adversarial_training(g, qfn(g), dcfg.n_qp_d, cfg, dcfg)
        report["adversarial"] = {k: v for k, v in rep.items() if k != "trace"}
    else:
        pruned, robust, report = integrated_defense(g, load_model(args.model), cfg, qfn, dcfg)
    save_kg(pruned, out / "kg")
    save_model(robust, out / "model.pt", cfg)
    _dump(report, out / "report.json")
    print(json.dumps({k: v for k, v in report.get("filter", {}).items() if k != "facts"}, sort_keys=True))


# -- scenarios and reports --------------------------------------------------------

def cmd_scenario_run(args):
    d = json.loads(Path(args.file).read_text())
    if args.seed_given:
        d["seeds"] = [args.seed]
    s = harness.Scenario.from_dict(d)
    out = harness.run_scenario(s, args.out or f"runs/{s.name}")
    harness.emit_report(out, ("json", "csv", "svg"))
    print(out)


def cmd_report_emit(args):
    for p in harness.emit_report(args.run_dir, tuple(args.format.split(","))):
        print(p)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets flags appear before or after the subcommand
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON file with hyperparameters (dim, lr, n_kp, m, ...)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="kgsec", parents=[common],
                                description="Attacks and defenses for KG query answering at desk scale")
    top = p.add_subparsers(dest="group", required=True)

    kg = top.add_parser("kg").add_subparsers(dest="cmd", required=True)
    x = kg.add_parser("gen", parents=[common])
    x.add_argument("--preset", choices=("cyber", "drug"), default="cyber")
    x.add_argument("--scale", type=float)
    x.add_argument("--density", type=float, default=1.0)
    x.set_defaults(fn=cmd_kg_gen)
    x = kg.add_parser("stats", parents=[common])
    x.add_argument("kg")
    x.set_defaults(fn=cmd_kg_stats)

    q = top.add_parser("query").add_subparsers(dest="cmd", required=True)
    x = q.add_parser("sample", parents=[common])
    x.add_argument("--kg", required=True)
    x.add_argument("--kind", choices=("entity", "relation"), default="entity")
    x.add_argument("--template", default="3,2", help="n_path,m_path")
    x.add_argument("--count", type=int, default=50)
    x.add_argument("--sink", default="cve")
    x.add_argument("--anchor", help="require a path from this anchor")
    x.add_argument("--path", default="vulnerable_to")
    x.add_argument("--relations")
    x.add_argument("--fraction", type=float, default=0.2)
    x.set_defaults(fn=cmd_query_sample)

    t = top.add_parser("train").add_subparsers(dest="cmd", required=True)
    x = t.add_parser("entity", parents=[common])
    x.add_argument("--kg", required=True)
    x.add_argument("--queries")
    x.add_argument("--sink", default="cve")
    x.set_defaults(fn=cmd_train_entity)
    x = t.add_parser("relation", parents=[common])
    x.add_argument("--kg", required=True)
    x.add_argument("--relations")
    x.add_argument("--fraction", type=float, default=0.2)
    x.set_defaults(fn=cmd_train_relation)

    a = top.add_parser("attack").add_subparsers(dest="cmd", required=True)
    for vec in ("kp", "qp", "co"):
        x = a.add_parser(vec, parents=[common])
        x.add_argument("--kg", required=True)
        x.add_argument("--model", required=True)
        x.add_argument("--queries", required=True)
        x.add_argument("--other")
        x.add_argument("--anchor", required=True, help="trigger anchor entity")
        x.add_argument("--path", default="vulnerable_to", help="trigger relations after the anchor")
        x.add_argument("--objective", choices=("targeted", "untargeted"), default="targeted")
        x.add_argument("--target")
        x.add_argument("--vicinity", type=int, default=2)
        x.set_defaults(fn=cmd_attack, vector=vec)

    d = top.add_parser("defend").add_subparsers(dest="cmd", required=True)
    for kind in ("filter", "advtrain", "both"):
        x = d.add_parser(kind, parents=[common])
        x.add_argument("--kg", required=True)
        x.add_argument("--model", required=kind != "advtrain")
        x.add_argument("--sink", default="cve")
        x.set_defaults(fn=cmd_defend, kind=kind)

    s = top.add_parser("scenario").add_subparsers(dest="cmd", required=True)
    x = s.add_parser("run", parents=[common])
    x.add_argument("file")
    x.set_defaults(fn=cmd_scenario_run)

    r = top.add_parser("report").add_subparsers(dest="cmd", required=True)
    x = r.add_parser("emit", parents=[common])
    x.add_argument("run_dir")
    x.add_argument("--format", default="json,csv,svg")
    x.set_defaults(fn=cmd_report_emit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.seed_given = hasattr(args, "seed")
    for k, v in (("seed", 0), ("config", None), ("out", None), ("verbose", False)):
        if not hasattr(args, k):
            setattr(args, k, v)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        args.fn(args)
    except (ValueError, RuntimeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
