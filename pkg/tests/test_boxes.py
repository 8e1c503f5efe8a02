import pytest
import torch
from hypothesis import given, strategies as st

from conftest import toy_kg
from kgsec.boxes import Box, BoxModel, BatchExecutor, answer_entity_queries, compile_query, embed_queries
from kgsec.graph import EntityQuery
from kgsec.synth import sample_entity_queries, training_queries
from kgsec.training import TrainConfig, load_model, save_model, train_entity_model


def model_for(g, dim=8, seed=0, **kw):
    return BoxModel.for_graph(g, dim=dim, seed=seed, **kw).double()


def test_distance_examples():
    m = model_for(toy_kg())
    c = torch.zeros(2, dtype=torch.float64)
    o = torch.ones(2, dtype=torch.float64)
    assert m.distance_tensors(torch.zeros(2, dtype=torch.float64), c, o) == 0
    p = torch.tensor([3.0, 0.5], dtype=torch.float64)
    # outside part 2, inside part min(3,1) + min(0.5,1) = 1.5
    assert float(m.distance_tensors(p, c, o)) == pytest.approx(2 + 0.2 * 1.5)


def test_untrained_projection_is_translation():
    m = model_for(toy_kg())
    c = torch.randn(8, dtype=torch.float64)
    o = torch.zeros(8, dtype=torch.float64)
    pc, po = m.project_tensors(c, o, 0)
    assert torch.allclose(pc, c + m.rel_center[0])
    assert torch.allclose(po, torch.nn.functional.softplus(m.rel_offset[0]))


@given(st.integers(0, 1000))
def test_intersection_is_order_free_and_inside(seed):
    m = model_for(toy_kg(), seed=seed % 7)
    gen = torch.Generator().manual_seed(seed)
    boxes = [Box(torch.randn(8, generator=gen, dtype=torch.float64),
                 torch.rand(8, generator=gen, dtype=torch.float64)) for _ in range(3)]
    a = m.intersect(boxes)
    b = m.intersect(boxes[::-1])
    assert torch.equal(a.center, b.center) and torch.equal(a.offset, b.offset)
    assert (a.offset <= torch.stack([x.offset for x in boxes]).min(0).values + 1e-12).all()
    assert (a.offset >= 0).all()


def test_batched_executor_matches_single_queries():
    g = toy_kg(seed=5, p=0.2)
    m = model_for(g)
    qs = []
    for t in ((1, 1), (2, 2), (3, 2), (1, 3)):
        try:
            qs += sample_entity_queries(g, t, 3, 1, sink_category="c")
        except Exception:
            pass
    assert qs
    c, o = embed_queries(m, qs)
    for i, q in enumerate(qs):
        box = m.embed_query(q)
        assert torch.allclose(c[i], box.center, atol=1e-12)
        assert torch.allclose(o[i], box.offset, atol=1e-12)


def test_answers_restricted_to_sink_category_and_ties_by_id():
    g = toy_kg(seed=6)
    m = model_for(g)
    q = sample_entity_queries(g, (1, 1), 1, 0, sink_category="c")[0]
    res = answer_entity_queries([q], m, g)[0]
    assert {g.entities[e] for e, _ in res} == {"c"}
    scores = [s for _, s in res]
    assert scores == sorted(scores)


def test_training_is_deterministic_and_learns():
    g = toy_kg(seed=7, p=0.2)
    qs = training_queries(g, templates=((2, 1),), count=10, seed=0, sink_category="c")
    cfg = TrainConfig(dim=8, epochs=20, batch=64, seed=3)
    m1, t1 = train_entity_model(g, qs, cfg)
    m2, t2 = train_entity_model(g, qs, cfg)
    assert t1 == t2
    assert all(torch.equal(a, b) for a, b in zip(m1.state_dict().values(), m2.state_dict().values()))
    assert sum(t1[-5:]) < sum(t1[:5])


def test_checkpoint_roundtrip(tmp_path):
    g = toy_kg(seed=8)
    m = BoxModel.for_graph(g, dim=8, seed=2, depth=2)
    save_model(m, tmp_path / "m.pt", TrainConfig(dim=8))
    n = load_model(tmp_path / "m.pt")
    assert n.config() == m.config()
    for (k, a), (_, b) in zip(m.state_dict().items(), n.state_dict().items()):
        assert torch.equal(a, b), k
    with pytest.raises(ValueError):
        torch.save({"format": "other"}, tmp_path / "x.pt")
        load_model(tmp_path / "x.pt")
