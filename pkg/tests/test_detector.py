import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from provsight.detector import (
    DetectorError,
    apply_threshold,
    detect,
    read_verdicts,
    score_all,
    train,
    write_verdicts,
)
from provsight.events import Label
from provsight.features import Universe, adjacency, info, vectorize
from provsight.graph import build, make_uuid
from provsight.metrics import confusion
from provsight.tracegen import ScenarioSpec, simulate

from _util import ev, file, proc, seqd, with_isolated


def test_empty_training_graph_is_an_error():
    with pytest.raises(DetectorError):
        train(build([]))


def test_one_node_model():
    g = with_isolated(build([]), file("/only"))
    model = train(g)
    assert model.vector_count == 1


def test_duplicate_vectors_collapse():
    p = proc()
    g = build(seqd([ev(p, "read", file(f"/f{i}")) for i in range(5)]))
    model = train(g, k=1)
    # five identical leaf files plus the hub
    assert model.vector_count == 2 <= g.node_count
    assert sorted(model.multiplicity.tolist()) == [1, 5]
    # at two hops every node sees the whole star
    assert train(g).vector_count == 1


def test_vector_count_matches_brute_force_recount():
    events = simulate(ScenarioSpec(seed=42, attacks=("none",), scale=3000)).train[0].events
    g = build(events)
    u = Universe.from_graphs(g)
    adj = adjacency(g)
    distinct = {tuple(vectorize(info(g, int(uid), adj=adj), u).counts.tolist()) for uid in g.uuids}
    assert train(g).vector_count == len(distinct)


def test_self_scores_are_zero(mining_graphs):
    g_train, _ = mining_graphs
    model = train(g_train)
    assert {s for _, s in score_all(model, g_train)} == {0.0}
    assert confusion(detect(model, g_train, threshold=1e-9)).fp == 0


def test_empty_neighbourhood_matches_isolated_train_node():
    g_train = with_isolated(build(seqd([ev(proc(), "read", file("/a"))])), file("/t"))
    g_test = with_isolated(build(seqd([ev(proc(), "read", file("/a"))])), file("/u"))
    scores = dict(score_all(train(g_train), g_test))
    assert scores[make_uuid(file("/u"))] == 0.0


def test_five_node_fixture_scores():
    # train: P1 -read-> F1, so every train vector is one (process, read, file) edge
    g_train = build(seqd([ev(proc("/p1", 1), "read", file("/f1"))]))
    p2, p3 = proc("/p2", 2), proc("/p3", 3)
    g_test = build(seqd([
        ev(p2, "read", file("/f2")),
        ev(p2, "write", file("/f3")),
        ev(p2, "exec", p3),
        ev(p3, "read", file("/f4")),
    ]))
    # hand-computed 2-hop vectors over (exec p->p, read p->f, write p->f):
    #   p2, p3 -> [1,2,1]; f2, f3 -> [1,1,1]; f4 -> [1,1,0]; train -> [0,1,0]
    want = {p2: math.sqrt(3), p3: math.sqrt(3), file("/f2"): math.sqrt(2), file("/f3"): math.sqrt(2),
            file("/f4"): 1.0}
    scores = dict(score_all(train(g_train), g_test))
    for attrs, value in want.items():
        assert scores[make_uuid(attrs)] == pytest.approx(value, abs=1e-12)


def _triples(scores):
    return [(i, s) for i, s in enumerate(scores)]


def test_threshold_at_max_flags_nothing():
    scores = _triples([0.0, 1.5, 3.0])
    assert not any(v.alerted for v in apply_threshold(scores, 3.0))


def test_zero_threshold_flags_any_positive_score():
    verdicts = apply_threshold(_triples([0.0, 0.25]), -0.0)
    assert [v.alerted for v in verdicts] == [False, True]


def test_threshold_is_strict():
    verdicts = apply_threshold(_triples([0.0, 2.0, 5.0]), 2.0)
    assert [v.alerted for v in verdicts] == [False, False, True]


def test_negative_threshold_rejected():
    with pytest.raises(DetectorError):
        apply_threshold([], -1.0)


def test_truth_is_attached():
    verdicts = apply_threshold(_triples([1.0, 1.0]), 0.5, {1: True})
    assert [v.truth for v in verdicts] == [Label.BENIGN, Label.MALICIOUS]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10, allow_nan=False), st.booleans()), min_size=2, max_size=40),
       st.floats(0, 10), st.floats(0, 10))
def test_raising_threshold_never_raises_rates(rows, t1, t2):
    lo, hi = sorted((t1, t2))
    scores = [(i, s) for i, (s, _) in enumerate(rows)]
    truth = {i: b for i, (_, b) in enumerate(rows)}
    a = confusion(apply_threshold(scores, lo, truth))
    b = confusion(apply_threshold(scores, hi, truth))
    assert b.tpr <= a.tpr and b.fpr <= a.fpr


def test_auto_threshold_is_loo_percentile(mining_graphs):
    g_train, _ = mining_graphs
    model = train(g_train)
    per_node = np.repeat(model.loo_scores, model.multiplicity)
    assert per_node.size == g_train.node_count
    assert model.auto_threshold() == pytest.approx(np.percentile(per_node, 95))
    # a vector shared by several training nodes has a zero-distance twin
    assert (model.loo_scores[model.multiplicity > 1] == 0).all()


def test_detect_is_deterministic(mining_graphs):
    g_train, g_test = mining_graphs
    assert detect(train(g_train), g_test) == detect(train(g_train), g_test)


def test_verdict_csv_round_trip(tmp_path, mining_graphs):
    g_train, g_test = mining_graphs
    verdicts = detect(train(g_train), g_test)
    path = tmp_path / "verdicts.csv"
    write_verdicts(path, verdicts, g_test.entity_of)
    back, entity_of = read_verdicts(path)
    assert back == verdicts
    assert entity_of == g_test.entity_of
