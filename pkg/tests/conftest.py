import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from kgsec.graph import KnowledgeGraph
from kgsec.synth import cyber_spec, generate_synthetic_kg, training_queries
from kgsec.training import TrainConfig, train_entity_model

torch.set_num_threads(1)
settings.register_profile("kgsec", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("kgsec")

# "criterion N: PASS|FAIL" lines from the acceptance module
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


TOY_SCHEMA = [("a", "r1", "b"), ("b", "r2", "c"), ("a", "r3", "c"), ("c", "r4", "c")]


def toy_kg(n: int = 30, seed: int = 0, p: float = 0.15, reverse: bool = True) -> KnowledgeGraph:
    """Random graph over three categories with a fixed four-relation schema."""
    rng = np.random.default_rng(seed)
    cats = {c: [f"{c}{i}" for i in range(k)] for c, k in zip("abc", (n // 3, n // 3, n - 2 * (n // 3)))}
    ents = {e: c for c, es in cats.items() for e in es}
    facts = []
    for hc, r, tc in TOY_SCHEMA:
        for h in cats[hc]:
            for t in cats[tc]:
                if h != t and rng.random() < p:
                    facts.append((h, r, t))
    return KnowledgeGraph.build(ents, facts, TOY_SCHEMA, reverse=reverse)


@pytest.fixture(scope="session")
def small_kg():
    return generate_synthetic_kg(cyber_spec(scale=0.003, seed=3))


@pytest.fixture(scope="session")
def small_cfg():
    return TrainConfig(dim=8, epochs=3, batch=128, seed=0)


@pytest.fixture(scope="session")
def small_queries(small_kg):
    return training_queries(small_kg, templates=((2, 1), (3, 2)), count=20, seed=0, sink_category="cve")


@pytest.fixture(scope="session")
def small_model(small_kg, small_queries, small_cfg):
    model, _ = train_entity_model(small_kg, small_queries, small_cfg)
    return model
