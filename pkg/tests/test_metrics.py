import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from toolpose3d.errors import ConfigError, UndefinedMetricError
from toolpose3d.metrics import (
    THRESHOLDS,
    BpeAccumulator,
    BpeReport,
    OksParams,
    average_precision,
    back_projection_error,
    detection_oks,
    evaluate_detections,
    iou,
    match_and_score,
    mean_average_precision,
    oks,
)
from toolpose3d.types import BEAN, GRASPER, Keypoint, ToolDetection2D

from oracles import POOL, ap_oracle, det, exhaustive_instances, greedy_oracle, iou_raster, oks_loop


# IoU ---------------------------------------------------------------------

int_box = st.tuples(st.integers(0, 8), st.integers(0, 8), st.integers(1, 6), st.integers(1, 6)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
)


@given(int_box, int_box)
def test_iou_matches_raster_oracle(a, b):
    assert iou(a, b) == pytest.approx(iou_raster(a, b), abs=1e-12)
    assert iou(a, b) == iou(b, a)


def test_iou_edge_cases():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0  # touching edges
    assert iou((0, 0, 0, 1), (0, 0, 1, 1), return_flag=True) == (0.0, True)
    assert iou((0, 0, 4, 4), (2, 2, 6, 6)) == pytest.approx(4 / 28)


float_box = st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(0.01, 40), st.floats(0.01, 40)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
)


@given(float_box, float_box)
def test_iou_bounds_and_symmetry(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0 and v == iou(b, a)
    assert iou(a, a) == 1.0
    if max(abs(x - y) for x, y in zip(a, b)) > 1e-6:
        assert v < 1.0


# OKS ---------------------------------------------------------------------


def test_oks_spot_value_exp_minus_one():
    area, k = 400.0, 0.05
    d = math.sqrt(2.0 * area * k * k)
    box = (0.0, 0.0, 20.0, 20.0)
    value = oks([(10.0 + d, 10.0)], [(10.0, 10.0)], [2], box, OksParams((k,)))
    assert abs(value - math.exp(-1.0)) < 1e-12


@given(
    st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50)), min_size=4, max_size=4),
    st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50)), min_size=4, max_size=4),
    st.lists(st.sampled_from([0, 1, 2]), min_size=4, max_size=4).filter(any),
    st.floats(1.0, 2500.0),
    st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4),
)
def test_oks_matches_loop_oracle(pred, gt, vis, area, k):
    box = (0.0, 0.0, area, 1.0)
    got = oks(pred, gt, vis, box, OksParams(tuple(k)))
    assert got == pytest.approx(oks_loop(pred, gt, vis, area, k), rel=1e-12, abs=1e-300)
    assert 0.0 <= got <= 1.0


@given(
    st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50)), min_size=4, max_size=4),
    st.lists(st.sampled_from([0, 1, 2]), min_size=4, max_size=4).filter(any),
    st.integers(0, 3),
    st.floats(0.1, 10.0),
    st.floats(0.1, 10.0),
)
def test_oks_monotone_and_scale_invariant(gt, vis, which, push, scale):
    box = (0.0, 0.0, 40.0, 30.0)
    params = OksParams((0.05, 0.08, 0.1, 0.2))
    pred = [(x + 1.0, y) for x, y in gt]
    base = oks(pred, gt, vis, box, params)
    assert 0.0 < base <= 1.0
    farther = list(pred)
    farther[which] = (pred[which][0] + push, pred[which][1])
    assert oks(farther, gt, vis, box, params) <= base
    scaled = oks([(scale * x, scale * y) for x, y in pred], [(scale * x, scale * y) for x, y in gt], vis,
                 tuple(scale * c for c in box), params)
    assert scaled == pytest.approx(base, rel=1e-9, abs=1e-300)


def test_oks_undefined_cases():
    with pytest.raises(UndefinedMetricError):
        oks([(0, 0)], [(0, 0)], [0], (0, 0, 1, 1), OksParams((0.05,)))
    with pytest.raises(UndefinedMetricError):
        oks([(0, 0)], [(0, 0)], [2], (0, 0, 0, 1), OksParams((0.05,)))
    with pytest.raises(ConfigError):
        OksParams((0.0,))
    with pytest.raises(ValueError):
        oks([(0, 0)], [(0, 0), (1, 1)], [2, 2], (0, 0, 1, 1), OksParams((0.05,)))


def test_detection_oks_uses_class_constants():
    g = det(0, (0, 0, 10, 10), cls=GRASPER)
    assert detection_oks(g, g) == 1.0


# Matching and AP ---------------------------------------------------------

def test_matching_and_ap_exhaustive_small_instances():
    checked = 0
    for p, g in exhaustive_instances():
        # strictly decreasing scores: position in the sequence is the rank
        preds = [(0, det(0, POOL[b], 1.0 - 0.1 * r)) for r, b in enumerate(p)]
        gts = [(0, det(0, POOL[b])) for b in g]
        scores = [d.score for _, d in preds]
        sim = [[iou(pd.bbox, gd.bbox) for _, gd in gts] for _, pd in preds]
        for thr in (0.5, 0.75):
            res = match_and_score(preds, gts, thr)
            flags = greedy_oracle(scores, sim, thr)
            assert res.tp == sum(flags) and res.fp == len(flags) - sum(flags)
            if gts:
                assert res.recall == pytest.approx(sum(flags) / len(gts))
            if preds:
                assert res.precision == pytest.approx(sum(flags) / len(preds))
        if gts:
            ap = {t: ap_oracle(greedy_oracle(scores, sim, t), len(gts)) for t in THRESHOLDS}
            m50, m5095 = mean_average_precision(preds, gts)
            assert m50 == pytest.approx(ap[0.5], abs=1e-12)
            assert m5095 == pytest.approx(np.mean(list(ap.values())), abs=1e-12)
        checked += 1
    assert checked == 35 * 121


box_st = st.tuples(st.integers(0, 6), st.integers(0, 6), st.integers(1, 5), st.integers(1, 5)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3])
)
item_st = st.tuples(st.integers(0, 1), st.sampled_from([BEAN, GRASPER]), box_st)


@given(
    st.lists(st.tuples(item_st, st.floats(0.0, 1.0)), max_size=4),
    st.lists(item_st, max_size=4),
    st.sampled_from(THRESHOLDS),
)
def test_matching_random_images_and_classes(preds, gts, thr):
    P = [(img, det(0, box, s, cls)) for (img, cls, box), s in preds]
    G = [(img, det(0, box, 1.0, cls)) for img, cls, box in gts]
    sim = [
        [iou(pd.bbox, gd.bbox) if (pi == gi and pd.cls == gd.cls) else None for gi, gd in G]
        for pi, pd in P
    ]
    flags = greedy_oracle([d.score for _, d in P], sim, thr)
    res = match_and_score(P, G, thr)
    assert res.tp == sum(flags)
    assert res.tp <= min(len(P), len(G))


@given(st.lists(st.booleans(), max_size=12), st.integers(1, 8))
def test_average_precision_matches_oracle(flags, n_gt):
    if sum(flags) > n_gt:
        flags = flags[:n_gt]  # cannot have more hits than ground truths
        while sum(flags) > n_gt:
            flags.pop()
    assert average_precision(flags, n_gt) == pytest.approx(ap_oracle(flags, n_gt), abs=1e-12)


@given(st.lists(st.tuples(st.integers(0, 1), box_st), min_size=1, max_size=6),
       st.lists(st.tuples(st.integers(0, 1), box_st), min_size=1, max_size=6),
       st.randoms(use_true_random=False))
def test_map_ignores_prediction_order(preds, gts, rnd):
    P = [(img, det(0, box, 1.0 - 0.01 * i)) for i, (img, box) in enumerate(preds)]
    G = [(img, det(0, box)) for img, box in gts]
    shuffled = list(P)
    rnd.shuffle(shuffled)
    assert mean_average_precision(shuffled, G) == mean_average_precision(P, G)


def test_ap_hand_values_and_undefined():
    assert average_precision([True, False, True], 2) == pytest.approx(0.5 * 1 + 0.5 * 2 / 3)
    assert average_precision([], 3) == 0.0
    with pytest.raises(UndefinedMetricError):
        average_precision([True], 0)


def test_threshold_is_inclusive():
    # IoU exactly 0.5: (0,0,2,2) vs (0,0,2,1) -> 2/4
    res = match_and_score([(0, det(0, (0, 0, 2, 1)))], [(0, det(0, (0, 0, 2, 2)))], 0.5)
    assert res.tp == 1


def test_perfect_detector_scores_one(rng):
    items = []
    for img in range(5):
        for n in range(3):
            x, y = rng.uniform(0, 500, size=2)
            kps = rng.uniform(0, 40, size=(4, 2)) + [x, y]
            items.append((img, det(0, (x, y, x + 40, y + 40), cls=GRASPER, kps=kps)))
            items.append((img, det(0, (x + 50, y, x + 58, y + 8))))
    for mode in ("iou", "oks"):
        rep = evaluate_detections(items, items, mode)
        assert (rep.precision, rep.recall, rep.map50, rep.map50_95) == (1.0, 1.0, 1.0, 1.0)


def test_empty_inputs():
    res = match_and_score([], [], 0.5)
    assert math.isnan(res.recall) and not res.recall_defined
    rep = evaluate_detections([], [], "iou")
    assert not rep.defined
    with pytest.raises(UndefinedMetricError):
        mean_average_precision([], [])
    res = match_and_score([(0, det(0, (0, 0, 1, 1)))], [], 0.5)
    assert res.fp == 1 and res.precision == 0.0
    with pytest.raises(ConfigError):
        match_and_score([], [], 0.5, mode="dice")


def test_oks_mode_excludes_unlabeled_gts():
    g = ToolDetection2D(0, BEAN, (0, 0, 8, 8), (Keypoint(4, 4, 0, 0.0),))
    rep = evaluate_detections([], [(0, g)], "oks")
    assert not rep.defined


# BPE ---------------------------------------------------------------------


def test_bpe_normalisation_known_values():
    acc = BpeAccumulator(640, 480)
    acc.add_distances(GRASPER, [5.153])
    acc.add_distances(BEAN, [3.568])
    rep = acc.report()
    g, b = rep.per_class[GRASPER], rep.per_class[BEAN]
    assert 100 * g.bpe_ppw == pytest.approx(0.805156, abs=1e-6)
    assert 100 * g.bpe_pph == pytest.approx(1.073542, abs=1e-6)
    assert 100 * b.bpe_ppw == pytest.approx(0.5575, abs=1e-9)
    assert 100 * b.bpe_pph == pytest.approx(0.743333, abs=1e-6)
    assert rep.class_mean.bpe_pd == pytest.approx((5.153 + 3.568) / 2)


@given(st.lists(st.floats(0.0, 20.0), min_size=1, max_size=30), st.lists(st.floats(0.0, 20.0), max_size=30))
def test_bpe_pooled_and_class_mean(g, b):
    acc = BpeAccumulator(640, 480)
    acc.add_distances(GRASPER, g)
    acc.add_distances(BEAN, b)
    rep = acc.report()
    assert rep.pooled.bpe_pd == pytest.approx(np.mean(g + b), rel=1e-12, abs=1e-12)
    assert rep.pooled.n_points == len(g) + len(b)
    assert rep.per_class[GRASPER].bpe_ppw * 640 == pytest.approx(rep.per_class[GRASPER].bpe_pd)
    if not b:
        assert math.isnan(rep.per_class[BEAN].bpe_pd)


def test_bpe_squared_variant_and_merge():
    a, b = BpeAccumulator(10, 10, squared=True), BpeAccumulator(10, 10, squared=True)
    a.add_pair(GRASPER, (3.0, 4.0), (0.0, 0.0))
    b.add_distances(GRASPER, [1.0])
    b.skip(2)
    a.merge(b)
    rep = a.report()
    assert rep.per_class[GRASPER].bpe_pd == pytest.approx(13.0)
    assert rep.skipped == 2 and "metric=squared" in rep.to_text()
    with pytest.raises(ValueError):
        a.add_distances(GRASPER, [-1.0])
    with pytest.raises(ConfigError):
        BpeAccumulator(0, 10)


def test_bpe_report_average():
    r1, r2 = BpeAccumulator(100, 50), BpeAccumulator(100, 50)
    r1.add_distances(GRASPER, [1.0, 3.0])
    r2.add_distances(GRASPER, [4.0])
    avg = BpeReport.average([r1.report(), r2.report()])
    assert avg.per_class[GRASPER].bpe_pd == pytest.approx(3.0)
    assert avg.per_class[GRASPER].n_points == 3
    with pytest.raises(UndefinedMetricError):
        BpeReport.average([])


def test_back_projection_error_zero_on_exact_pixels(rig5):
    from toolpose3d.camera import project_point
    from toolpose3d.types import Observation2D

    X = np.array([0.01, -0.01, 0.0])
    obs = [Observation2D(i, tuple(project_point(rig5[i], X))) for i in rig5.ids]
    rep = back_projection_error([(GRASPER, X, obs)], rig5)
    assert rep.pooled.bpe_pd < 1e-9 and rep.pooled.n_points == 5
