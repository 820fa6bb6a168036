import math

import pytest
from hypothesis import given, settings, strategies as st

from landmark_rerank.metrics import ap_at_k
from landmark_rerank.rerank import (RankedList, RerankContext, insert_step, read_ranked_lists,
                                    rerank, sort_step, write_ranked_lists)
from landmark_rerank.soft_voting import Prediction, PredictionTable


def _ctx(labels, scores=None, q_label="P", q_score=0.9, tau=0.6):
    scores = scores or {}
    table = PredictionTable({i: Prediction(lab, scores.get(i, 0.5)) for i, lab in labels.items()})
    return RerankContext(Prediction(q_label, q_score), table, tau)


def test_sort_step_stable_partition():
    ctx = _ctx({"n1": "N", "p1": "P", "n2": "N", "p2": "P"})
    out = sort_step(RankedList("q", ("n1", "p1", "n2", "p2")), ctx)
    assert out.items == ("p1", "p2", "n1", "n2")
    assert sort_step(RankedList("q", ("p1", "p2")), ctx).items == ("p1", "p2")
    assert sort_step(RankedList("q", ("n2", "n1")), ctx).items == ("n2", "n1")


def test_sort_step_missing_prediction():
    with pytest.raises(KeyError, match="no prediction"):
        sort_step(RankedList("q", ("zz",)), _ctx({"a": "P"}))


def test_insert_hand_trace():
    ctx = _ctx({"p1": "P", "n1": "N", "n2": "N", "p9": "P"}, {"p9": 0.8}, q_score=0.9)
    out = insert_step(RankedList("q", ("p1", "n1", "n2"), capacity=3), ctx)
    assert out.items == ("p1", "p9", "n1")


def test_insert_gate_closed():
    ctx = _ctx({"p1": "P", "n1": "N", "p9": "P"}, {"p9": 0.2}, q_score=0.3)
    rl = RankedList("q", ("p1", "n1"), capacity=3)
    assert insert_step(rl, ctx) == rl
    # boundary equality suppresses insertion
    ctx = _ctx({"p1": "P", "n1": "N", "p9": "P"}, {"p9": 0.25}, q_score=0.25, tau=0.5)
    assert insert_step(rl, ctx) == rl


def test_insert_order_and_pool():
    labels = {"p1": "P", "a": "P", "b": "P", "c": "P", "n1": "N"}
    ctx = _ctx(labels, {"a": 0.7, "b": 0.9, "c": 0.7}, q_score=0.5, tau=0.0)
    rl = RankedList("q", ("p1", "n1"), capacity=10)
    assert insert_step(rl, ctx).items == ("p1", "b", "a", "c", "n1")
    assert insert_step(rl, ctx, pool=["a", "c", "p1", "n1"]).items == ("p1", "a", "c", "n1")
    with pytest.raises(KeyError):
        insert_step(rl, ctx, pool=["ghost"])


def test_insert_requires_sorted_list():
    ctx = _ctx({"p1": "P", "n1": "N"})
    with pytest.raises(ValueError):
        insert_step(RankedList("q", ("n1", "p1")), ctx)


def test_empty_and_infinite_tau():
    ctx = _ctx({"p1": "P"}, tau=math.inf)
    assert rerank(RankedList("q", ()), ctx).items == ()
    ctx = _ctx({}, tau=0.0)
    assert rerank(RankedList("q", ()), ctx).items == ()


def test_ranked_list_validation():
    with pytest.raises(ValueError):
        RankedList("q", ("a", "a"))
    with pytest.raises(ValueError):
        RankedList("q", ("a", "b"), capacity=1)


def test_csv_round_trip(tmp_path):
    lists = [RankedList("q1", ("a", "b")), RankedList("q2", ())]
    write_ranked_lists(tmp_path / "r.csv", lists)
    assert (tmp_path / "r.csv").read_text() == "id,images\nq1,a b\nq2,\n"
    assert read_ranked_lists(tmp_path / "r.csv") == lists
    (tmp_path / "bad.csv").write_text("query,images\n")
    with pytest.raises(ValueError):
        read_ranked_lists(tmp_path / "bad.csv")
    (tmp_path / "bad2.csv").write_text("id,images\nq1,a,b\n")
    with pytest.raises(ValueError):
        read_ranked_lists(tmp_path / "bad2.csv")


# -- properties over random instances -------------------------------------

@st.composite
def instances(draw):
    n_pool = draw(st.integers(1, 30))
    pool = [f"i{j:02d}" for j in range(n_pool)]
    labels = {i: draw(st.sampled_from("PQR")) for i in pool}
    scores = {i: draw(st.floats(0, 1)) for i in pool}
    listed = draw(st.lists(st.sampled_from(pool), unique=True, max_size=n_pool))
    cap = draw(st.integers(max(1, len(listed)), len(listed) + 5))
    tau = draw(st.sampled_from([-math.inf, 0.0, 0.6, 1.2, math.inf]))
    q_score = draw(st.floats(0, 1))
    ctx = _ctx(labels, scores, "P", q_score, tau)
    return RankedList("q", tuple(listed), cap), ctx


@settings(max_examples=200, deadline=None)
@given(instances())
def test_rerank_properties(inst):
    rl, ctx = inst
    s = sort_step(rl, ctx)
    assert sort_step(s, ctx) == s
    assert sorted(s.items) == sorted(rl.items)
    out = insert_step(s, ctx)
    positives = [i for i in s.items if ctx.is_positive(i)]
    assert out.items[:len(positives)] == tuple(positives)
    inserted = [i for i in out.items if i not in rl.items]
    assert len(out) == min(rl.capacity, len(rl) + len(inserted))
    assert len(out) <= rl.capacity
    assert len(set(out.items)) == len(out)
    for i in inserted:
        assert ctx.is_positive(i) and ctx.query.score + ctx.table[i].score > ctx.tau
    if ctx.tau == math.inf:
        assert out == s


@settings(max_examples=100, deadline=None)
@given(instances())
def test_no_match_is_identity(inst):
    rl, ctx = inst
    table = PredictionTable({i: Prediction("Z", p.score) for i, p in ctx.table.entries.items()})
    ctx = RerankContext(ctx.query, table, ctx.tau)
    assert rerank(rl, ctx) == rl


@settings(max_examples=200, deadline=None)
@given(instances())
def test_oracle_predictions_never_hurt_ap(inst):
    rl, ctx = inst
    relevant = {i for i, p in ctx.table.entries.items() if p.label == "P"}
    oracle = PredictionTable({i: Prediction(p.label, 1.0) for i, p in ctx.table.entries.items()})
    octx = RerankContext(Prediction("P", 1.0), oracle, 0.0)
    if relevant:
        k = rl.capacity
        assert ap_at_k(rerank(rl, octx).items, relevant, k) >= ap_at_k(rl.items, relevant, k)
