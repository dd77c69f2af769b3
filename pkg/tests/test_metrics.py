import json
import math
import random

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy import stats

from provsight.detector import Verdict, detect, train
from provsight.events import ActionKind, Event, Label
from provsight.metrics import (
    MetricsError,
    auc,
    confusion,
    entity_dedup,
    evaluate,
    fpr_series,
    pearson,
    roc_curve,
)
from provsight.graph import build
from provsight.tracegen import ScenarioSpec, simulate

from _util import file, proc

B, M = Label.BENIGN, Label.MALICIOUS


def brute_auc(pairs):
    pos = [s for s, t in pairs if t]
    neg = [s for s, t in pairs if not t]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def _v(i, alerted, bad, score=0.0):
    return Verdict(i, score, M if alerted else B, M if bad else B)


# --- confusion ------------------------------------------------------------------------


def test_all_correct_benign():
    c = confusion([_v(i, False, False) for i in range(7)])
    assert (c.tp, c.tn, c.fp, c.fn) == (0, 7, 0, 0)


def test_inverted_two_node_fixture():
    c = confusion([_v(0, True, False), _v(1, False, True)])
    assert (c.tp, c.tn, c.fp, c.fn) == (0, 0, 1, 1)


def test_ten_verdict_hand_tally():
    rows = [(1, 1), (1, 1), (1, 0), (0, 1), (0, 0), (0, 0), (0, 0), (1, 0), (1, 1), (0, 0)]
    c = confusion([_v(i, a, b) for i, (a, b) in enumerate(rows)])
    assert (c.tp, c.tn, c.fp, c.fn) == (3, 4, 2, 1)
    assert c.tpr == pytest.approx(3 / 4)
    assert c.fpr == pytest.approx(2 / 6)


def test_empty_confusion_is_an_error():
    with pytest.raises(MetricsError):
        confusion([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=50))
def test_confusion_counts_sum_to_total(rows):
    c = confusion([_v(i, a, b) for i, (a, b) in enumerate(rows)])
    assert c.tp + c.tn + c.fp + c.fn == len(rows)
    assert 0.0 <= c.tpr <= 1.0 and 0.0 <= c.fpr <= 1.0


# --- auc ------------------------------------------------------------------------------------


def test_perfect_separation():
    assert auc([(0.1, False), (0.2, False), (0.9, True)]) == 1.0


def test_all_ties_give_one_half():
    assert auc([(1.0, False), (1.0, True), (1.0, True), (1.0, False)]) == 0.5


def test_random_fixture_matches_brute_force():
    rng = random.Random(50)
    pairs = [(rng.choice([0.0, 0.5, 1.0, rng.random()]), rng.random() < 0.4) for _ in range(50)]
    assert auc(pairs) == pytest.approx(brute_auc(pairs), abs=1e-9)


def test_single_class_is_an_error():
    with pytest.raises(MetricsError):
        auc([(1.0, True), (2.0, True)])
    with pytest.raises(MetricsError):
        roc_curve([(1.0, False)])


_pairs = st.lists(st.tuples(st.integers(0, 6).map(float), st.booleans()), min_size=2, max_size=40)


@settings(max_examples=200, deadline=None)
@given(_pairs)
def test_auc_properties(pairs):
    assume(any(t for _, t in pairs) and not all(t for _, t in pairs))
    a = auc(pairs)
    assert a == pytest.approx(brute_auc(pairs), abs=1e-12)
    assert a == pytest.approx(1.0 - auc([(-s, t) for s, t in pairs]), abs=1e-12)
    assert a == pytest.approx(auc([(math.exp(s) * 3 + 1, t) for s, t in pairs]), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(_pairs)
def test_roc_trapezoid_equals_auc(pairs):
    assume(any(t for _, t in pairs) and not all(t for _, t in pairs))
    pts = roc_curve(pairs)
    assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
    xs, ys = zip(*pts)
    assert list(xs) == sorted(xs) and list(ys) == sorted(ys)
    area = sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(pts, pts[1:]))
    assert area == pytest.approx(auc(pairs), abs=1e-12)


# --- pearson ------------------------------------------------------------------------------


def test_exact_linear_relations():
    xs = [1.0, 2.0, 3.5, 7.0]
    assert pearson(xs, [2 * x + 1 for x in xs]).r == pytest.approx(1.0)
    assert pearson(xs, [-x for x in xs]).r == pytest.approx(-1.0)


def test_definition_level_fixture():
    pts = [(1, 2), (2, 1), (3, 4), (4, 3), (5, 6)]
    xs, ys = zip(*pts)
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    num = sum((x - mx) * (y - my) for x, y in pts)
    den = math.sqrt(sum((x - mx) ** 2 for x in xs) * sum((y - my) ** 2 for y in ys))
    res = pearson(xs, ys)
    assert res.r == pytest.approx(num / den, abs=1e-12)
    # t-distribution p-value with n-2 degrees of freedom, checked against scipy's own test
    assert res.p_value == pytest.approx(stats.pearsonr(xs, ys).pvalue, rel=1e-9)


def test_pearson_errors():
    with pytest.raises(MetricsError, match="variance"):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(MetricsError):
        pearson([1, 2], [1, 2])
    with pytest.raises(MetricsError):
        pearson([1, 2, 3], [1, 2])


def test_exact_permutation_p_value():
    xs, ys = [1, 2, 3, 4], [1, 2, 3, 4]
    # only the identity ordering and its reverse reach |r| = 1
    assert pearson(xs, ys, permutations=0).p_value == pytest.approx(2 / 24)
    with pytest.raises(MetricsError):
        pearson(list(range(10)), list(range(10)), permutations=0)
    assert 0.0 < pearson(xs, ys, permutations=200).p_value <= 1.0


def test_drop_removes_points_by_index():
    xs, ys = [1, 2, 3, 4, 100], [1, 2, 3, 4, -50]
    assert pearson(xs, ys, drop=[4]).r == pytest.approx(1.0)


_floats = st.floats(-100, 100, allow_nan=False).map(lambda v: round(v, 3))


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(_floats, _floats), min_size=3, max_size=20),
       st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 10), st.floats(-5, 5))
def test_pearson_range_and_affine_invariance(pts, a, b, c, d):
    xs, ys = zip(*pts)
    assume(np.std(xs) > 1e-3 and np.std(ys) > 1e-3)
    r = pearson(xs, ys).r
    assert -1.0 <= r <= 1.0
    r2 = pearson([a * x + b for x in xs], [c * y + d for y in ys]).r
    assert r2 == pytest.approx(r, abs=1e-9)


# --- entity counting -------------------------------------------------------------------------


def test_every_node_its_own_entity():
    verdicts = [_v(i, True, True) for i in range(4)]
    e = entity_dedup(verdicts, {i: f"e{i}" for i in range(4)})
    assert (e.tp_entity, e.expansion_ratio) == (4, 1.0)


def test_ten_tp_nodes_one_entity():
    verdicts = [_v(i, True, True) for i in range(10)] + [_v(10, True, False), _v(11, True, False)]
    e = entity_dedup(verdicts, {**{i: "miner" for i in range(10)}, 10: "a", 11: "a"})
    assert (e.tp_entity, e.fp_entity, e.expansion_ratio) == (1, 1, 10.0)


def test_no_tp_gives_infinite_ratio_and_missing_uuid_errors():
    assert math.isinf(entity_dedup([_v(0, False, True)], {0: "x"}).expansion_ratio)
    with pytest.raises(MetricsError):
        entity_dedup([_v(0, True, True)], {})


def test_mining_trace_expands_under_default(mining_graphs):
    g_train, g_test = mining_graphs
    report = evaluate(detect(train(g_train), g_test), g_test.entity_of)
    assert report.tp >= report.tp_entity
    assert report.expansion_ratio > 1.0
    assert report.fp_entity <= report.fp


# --- fpr series -----------------------------------------------------------------------------------


def test_day_identical_to_training_has_zero_fpr():
    sc = simulate(ScenarioSpec(seed=5, attacks=("none",), scale=3000))
    events = sc.train[0].events
    model = train(build(events))
    series = fpr_series(model, [events], threshold=1e-9)
    assert series.fpr == [0.0]


def _novel_day(base, n_new):
    """The training day plus ``n_new`` processes with a structure training never saw."""
    out = list(base)
    ts = base[-1].timestamp
    for j in range(n_new):
        p = proc(f"/opt/novel{j}", 90_000 + j)
        for i in range(4):
            ts += 1
            out.append(Event(len(out), ts, p, ActionKind.DELETE, file(f"/srv/n{j}/{i}"), B))
    return out


def test_increasing_novelty_gives_rising_fpr():
    sc = simulate(ScenarioSpec(seed=8, attacks=("none",), scale=3000))
    base = sc.train[0].events
    model = train(build(base))
    series = fpr_series(model, [_novel_day(base, n) for n in (0, 2, 4, 8, 16, 32, 64)], threshold=1e-9)
    assert series.fpr[0] == 0.0
    assert series.fpr == sorted(series.fpr)
    assert series.non_decreasing_trend and series.slope > 0


def test_trend_flag_on_generated_semantic_drift():
    spec = ScenarioSpec(seed=8, host_profile="ever_changing", attacks=("none",),
                        fp_archetypes=("semantic_change",), days=3, scale=3000, novelty=0.2)
    sc = simulate(spec)
    series = fpr_series(train(build(sc.train[0].events)), [d.events for d in sc.test])
    assert len(series.fpr) == 3
    assert series.non_decreasing_trend == (series.slope >= 0)


def test_empty_day_propagates_error():
    sc = simulate(ScenarioSpec(seed=5, attacks=("none",), scale=2000))
    model = train(build(sc.train[0].events))
    with pytest.raises(MetricsError):
        fpr_series(model, [[]])


# --- reports -----------------------------------------------------------------------------------


def test_report_formats():
    verdicts = [_v(0, True, True, 3.0), _v(1, False, False, 0.0), _v(2, True, False, 2.0), _v(3, False, True, 1.0)]
    r = evaluate(verdicts, {i: f"e{i}" for i in range(4)}, method="demo", threshold=1.5)
    data = json.loads(r.to_json())
    assert (data["tp"], data["tn"], data["fp"], data["fn"]) == (1, 1, 1, 1)
    assert data["auc"] == pytest.approx(brute_auc([(v.score, v.truth is M) for v in verdicts]))
    assert data["roc"][0] == [0.0, 0.0]
    header, row = r.csv_row().splitlines()
    assert header == "Method,TPR,FPR,AUC,TP,TN,FN,FP"
    assert row == "demo,0.5000,0.5000,0.7500,1,1,1,1"


def test_single_class_report_has_no_auc():
    r = evaluate([_v(0, True, False), _v(1, False, False)], {0: "a", 1: "b"})
    assert r.auc is None and r.roc == [] and r.expansion_ratio is None
    assert json.loads(r.to_json())["auc"] is None
