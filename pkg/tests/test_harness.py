import json

import pytest

from kgsec import harness
from kgsec.cli import build_parser, main
from kgsec.graph import load_kg
from kgsec.harness import Experiment, Scenario, emit_report, run_scenario, summarize

TINY = dict(
    name="tiny",
    kg={"preset": "cyber", "scale": 0.003, "density": 1.0},
    count=8,
    template=(2, 1),
    train={"epochs": 2, "dim": 8, "batch": 64},
    train_templates=((2, 1), (2, 2)),
    train_count=20,
    attack={"kp_steps": 4, "qp_steps": 4, "n_kp": 4, "n_qp": 1, "n_iter": 2},
    attacks=("kp", "qp"),
    objectives=("targeted",),
    sweep={"n_kp": [0, 2], "n_qp": [1]},
    seeds=(3,),
)


@pytest.fixture(scope="module")
def tiny():
    return Scenario(**TINY).validate()


@pytest.fixture(scope="module")
def run_dir(tiny, tmp_path_factory):
    return run_scenario(tiny, tmp_path_factory.mktemp("run"))


def test_from_dict_routes_flat_keys():
    s = Scenario.from_dict({"epochs": 7, "lambda": 0.3, "n_kp": 5, "m": 2.0, "seeds": [1, 2],
                            "template": [5, 2]})
    assert s.train["epochs"] == 7
    assert s.attack == {"lambda": 0.3, "n_kp": 5}
    assert s.defense == {"m": 2.0}
    assert s.seeds == (1, 2) and s.template == (5, 2)


@pytest.mark.parametrize("bad", [{"bogus": 1}, {"query_kind": "nope"}, {"attacks": ["xx"]},
                                 {"seeds": []}, {"kg": {"path": "/does/not/exist"}}])
def test_from_dict_rejects(bad):
    with pytest.raises(ValueError):
        Scenario.from_dict(bad)


def test_asdict_roundtrip(tiny):
    again = Scenario.from_dict(tiny.asdict())
    assert again.asdict() == tiny.asdict()


def test_no_attack_matches_baseline(tiny):
    ex = Experiment(tiny, 3)
    base = ex.metrics("none", "targeted")
    again = harness.evaluate(ex.victim, ex.setup.g_train, ex.setup.target_queries, K=tiny.K)
    assert again["mrr"] == base["ground_truth"]["mrr"]
    st = ex.setup
    assert st.target not in {a for q in st.target_queries for a in q.answers}
    assert st.g_train.entities[st.target] == "cve"


def test_run_writes_reports(run_dir):
    res = json.loads((run_dir / "results.json").read_text())
    assert res["complete"]
    rep = json.loads((run_dir / "report.json").read_text())
    assert not rep["incomplete"]
    attacks = {r["attack"] for r in rep["table"]}
    assert attacks == {"none", "kp", "qp"}
    for r in rep["table"]:
        if r["attack"] == "none":
            assert r["delta"] == 0
    assert (run_dir / "sweep.csv").exists()
    assert (run_dir / "seed3" / "attack-kp-targeted.json").exists()


def test_json_and_csv_agree(run_dir):
    rep = json.loads((run_dir / "report.json").read_text())
    lines = (run_dir / "report.csv").read_text().splitlines()
    assert len(lines) == len(rep["table"]) + 1
    first = lines[1].split(",")
    assert float(first[6]) == rep["table"][0]["value"]


def test_emit_report_is_byte_stable(run_dir):
    before = {p.name: p.read_bytes() for p in emit_report(run_dir)}
    after = {p.name: p.read_bytes() for p in emit_report(run_dir)}
    assert before == after
    assert any(n.endswith(".svg") for n in after)


def test_incomplete_run_is_flagged(run_dir, tmp_path):
    res = json.loads((run_dir / "results.json").read_text())
    res["complete"] = False
    (tmp_path / "results.json").write_text(json.dumps(res))
    emit_report(tmp_path, ("json", "csv"))
    assert json.loads((tmp_path / "report.json").read_text())["incomplete"]
    assert (tmp_path / "report.csv").read_text().rstrip().endswith("# incomplete run")


def test_summarize_medians():
    rows = [dict(objective="t", query_kind="v", attack="kp", defense="none", split="s", metric="mrr",
                 value=v, baseline=0.0, delta=v) for v in (0.1, 0.5, 0.3)]
    (out,) = summarize(rows)
    assert out["value"] == 0.3 and out["seeds"] == 3


def test_surrogate_grid_labels(tiny):
    grid = harness.surrogate_grid(tiny, [(8, 1), (4, 2)])
    assert sorted(grid["columns"]) == ["dim4-depth2", "dim8-depth1"]
    for col in grid["columns"].values():
        assert len(col["mrr"]) == len(tiny.seeds)
    with pytest.raises(ValueError):
        harness.surrogate_grid(tiny, [])


def test_parser_accepts_global_flags_anywhere():
    p = build_parser()
    a = p.parse_args(["kg", "gen", "--seed", "4", "--scale", "0.01"])
    assert a.seed == 4
    a = p.parse_args(["--seed", "5", "kg", "gen"])
    assert a.seed == 5


def test_cli_pipeline(tmp_path):
    kg, qd, md = tmp_path / "kg", tmp_path / "q", tmp_path / "m"
    assert main(["kg", "gen", "--scale", "0.003", "--seed", "3", "--out", str(kg)]) == 0
    anchor = harness.default_trigger_anchor(load_kg(kg))
    assert main(["query", "sample", "--kg", str(kg), "--template", "2,1", "--count", "5",
                 "--anchor", anchor, "--out", str(qd)]) == 0
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "dim": 8, "n_kp": 3, "kp_steps": 2, "qp_steps": 2,
                               "n_qp": 1, "m": 1.0}))
    assert main(["train", "entity", "--kg", str(kg), "--config", str(cfg), "--out", str(md)]) == 0
    model = str(md / "model.pt")
    for vec in ("kp", "qp"):
        out = tmp_path / vec
        assert main(["attack", vec, "--kg", str(kg), "--model", model, "--queries",
                     str(qd / "queries.json"), "--anchor", anchor, "--objective", "untargeted",
                     "--config", str(cfg), "--out", str(out)]) == 0
        man = json.loads((out / "manifest.json").read_text())
        assert man
    assert (tmp_path / "kp" / "kg").exists()
    assert main(["defend", "filter", "--kg", str(tmp_path / "kp" / "kg"), "--model", model,
                 "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
    assert main(["kg", "stats", str(tmp_path / "missing")]) == 1
