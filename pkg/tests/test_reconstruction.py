import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from toolpose3d.camera import Camera, Extrinsics, Intrinsics, Rig, project_point
from toolpose3d.errors import (
    AxisUnobservableError,
    BelowRecommendedViewsWarning,
    DegenerateGeometryError,
    InsufficientViewsError,
)
from toolpose3d.reconstruction import (
    SmootherState,
    estimate_arm_axis,
    grasper_rows,
    match_tips_across_views,
    orient_axis_sign,
    reconstruct_beans,
    reconstruct_grasper,
    triangulate_point,
    triangulation_system,
)
from toolpose3d.simulator import (
    GrasperParams,
    NoiseModel,
    RigSpec,
    make_rig,
    render_detections,
    simulate,
    trajectory,
)
from toolpose3d.types import ABSENT, BEAN, GRASPER, DetectionBatch, Keypoint, Observation2D, ToolDetection2D

from conftest import angle, unit

INTR = Intrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)
RIG10 = make_rig(RigSpec(arrays=2))
RIG12 = make_rig(RigSpec(arrays=2, cameras_per_array=6))


def _obs(rig, X, ids=None):
    ids = rig.ids if ids is None else ids
    return [Observation2D(i, tuple(project_point(rig[i], X))) for i in ids]


# Triangulation -----------------------------------------------------------

point = st.tuples(*[st.floats(-0.04, 0.04, allow_nan=False)] * 3).map(np.array)


@given(point, st.lists(st.integers(0, 9), min_size=2, max_size=10, unique=True))
def test_triangulation_exact_on_exact_pixels(X, ids):
    Y, rms = triangulate_point(_obs(RIG10, X, ids), RIG10)
    np.testing.assert_allclose(Y, X, atol=1e-9)
    assert rms < 1e-6


@given(point, st.permutations(list(range(10))))
def test_triangulation_ignores_view_order(X, order):
    obs = _obs(RIG10, X + 0.001, range(10))
    noisy = [Observation2D(o.view_id, (o.pixel[0] + (o.view_id % 3) * 0.7, o.pixel[1] - 0.4)) for o in obs]
    a, ra = triangulate_point(noisy, RIG10)
    b, rb = triangulate_point([noisy[i] for i in order], RIG10)
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert ra == pytest.approx(rb, rel=1e-9)


def test_unit_weights_match_unweighted(rng):
    X = rng.uniform(-0.02, 0.02, size=3)
    obs = [Observation2D(o.view_id, (o.pixel[0] + rng.normal(), o.pixel[1]), 1.0) for o in _obs(RIG10, X)]
    np.testing.assert_allclose(triangulate_point(obs, RIG10, weighted=True)[0], triangulate_point(obs, RIG10)[0])


def test_system_annihilates_true_point(rng):
    X = rng.uniform(-0.02, 0.02, size=3)
    G = triangulation_system(_obs(RIG10, X, [0, 3, 7]), RIG10)
    assert G.shape == (6, 4)
    assert np.abs(G @ np.append(X, 1.0)).max() < 1e-9 * np.abs(G).max()


def test_solution_minimizes_the_stacked_system(rng):
    X = rng.uniform(-0.02, 0.02, size=3)
    obs = [Observation2D(o.view_id, (o.pixel[0] + rng.normal(), o.pixel[1] + rng.normal()))
           for o in _obs(RIG10, X)]
    G = triangulation_system(obs, RIG10)
    est, _ = triangulate_point(obs, RIG10)
    h = np.append(est, 1.0)
    best = np.linalg.norm(G @ (h / np.linalg.norm(h)))
    v = rng.normal(size=(1000, 4))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    assert np.all(best <= np.linalg.norm(v @ G.T, axis=1) * (1 + 1e-9))


def test_triangulation_failures(rig5):
    X = np.array([0.01, 0.0, 0.0])
    with pytest.raises(InsufficientViewsError):
        triangulate_point(_obs(rig5, X, [0]), rig5)
    with pytest.raises(InsufficientViewsError):
        triangulate_point(_obs(rig5, X, [0]) * 2, rig5)
    # two cameras sharing an optical center: rank < 3
    R = np.eye(3)
    a = Camera(0, INTR, Extrinsics(R, [0.0, 0.0, 1.0]))
    yaw = np.array([[np.cos(0.1), 0, np.sin(0.1)], [0, 1, 0], [-np.sin(0.1), 0, np.cos(0.1)]])
    b = Camera(1, INTR, Extrinsics(yaw, yaw @ np.array([0.0, 0.0, 1.0])))
    same = Rig((a, b))
    with pytest.raises(DegenerateGeometryError):
        triangulate_point(_obs(same, np.array([0.05, 0.02, 0.3])), same)
    # pixels of a point behind every camera
    behind = np.array([0.0, 0.0, 0.3])
    obs = []
    for i in (0, 2):
        h = rig5[i].projection @ np.append(behind, 1.0)
        assert h[2] < 0
        obs.append(Observation2D(i, tuple(h[:2] / h[2])))
    with pytest.raises(DegenerateGeometryError):
        triangulate_point(obs, rig5)


# Arm axis ----------------------------------------------------------------


def _axis_obs(rig, wrist, u, rng, ids=None):
    ids = rig.ids if ids is None else ids
    w = [Observation2D(i, tuple(project_point(rig[i], wrist))) for i in ids]
    a = [
        Observation2D(i, tuple(project_point(rig[i], wrist - rng.uniform(0.01, 0.05) * u)))
        for i in ids
    ]
    return w, a


@given(st.integers(0, 2**32 - 1), st.sampled_from([2, 3, 4, 6, 10]))
def test_axis_exact_and_depth_invariant(seed, n):
    rng = np.random.default_rng(seed)
    ids = sorted(rng.choice(10, size=n, replace=False).tolist())
    wrist = rng.uniform(-0.02, 0.02, size=3)
    u = unit(rng.normal(size=3) + [0.0, 0.0, -2.0])
    w, a = _axis_obs(RIG10, wrist, u, rng, ids)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BelowRecommendedViewsWarning)
        est = estimate_arm_axis(w, a, RIG10)
    assert min(angle(est, u), angle(-est, u)) < 1e-8
    np.testing.assert_allclose(orient_axis_sign(est, wrist, w, a, RIG10), u, atol=1e-8)


def test_axis_view_count_warnings(rng):
    wrist, u = np.zeros(3), unit([0.2, 0.1, -1.0])
    w, a = _axis_obs(RIG10, wrist, u, rng, [0, 5, 7])
    with pytest.warns(BelowRecommendedViewsWarning):
        estimate_arm_axis(w, a, RIG10)
    w, a = _axis_obs(RIG10, wrist, u, rng, [0, 2, 5, 7])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        estimate_arm_axis(w, a, RIG10)
    with pytest.raises(InsufficientViewsError):
        estimate_arm_axis(w[:1], a[:1], RIG10)


def test_axis_unobservable_when_planes_coincide(rig5):
    wrist = np.array([0.0, 0.0, 0.0])
    c0, c1 = rig5[0].center, rig5[1].center
    u = unit((c0 - wrist) + (c1 - wrist))  # the arm lies in the plane of both centers
    w = [Observation2D(i, tuple(project_point(rig5[i], wrist))) for i in (0, 1)]
    a = [Observation2D(i, tuple(project_point(rig5[i], wrist - 0.03 * u))) for i in (0, 1)]
    with pytest.raises(AxisUnobservableError):
        estimate_arm_axis(w, a, rig5)


def test_axis_sign_tie_keeps_input_and_warns(rig5):
    w = [Observation2D(0, (320.0, 240.0))]
    with pytest.warns(RuntimeWarning):
        out = orient_axis_sign(np.array([0.0, 0.0, 1.0]), np.zeros(3), w, w, rig5)
    np.testing.assert_array_equal(out, [0.0, 0.0, 1.0])


# Grasper -----------------------------------------------------------------


def _frame(rig, t=0, **noise):
    return render_detections(trajectory(t), (), rig, NoiseModel(**noise), t)


def _tip_error(pose, gt):
    same = np.linalg.norm(pose.tip_a - gt.tip_a) + np.linalg.norm(pose.tip_b - gt.tip_b)
    cross = np.linalg.norm(pose.tip_a - gt.tip_b) + np.linalg.norm(pose.tip_b - gt.tip_a)
    return min(same, cross)


@pytest.mark.parametrize("rig", [make_rig(RigSpec()), RIG10, RIG12], ids=["5", "10", "12"])
def test_noiseless_grasper_exact(rig):
    for t in range(0, 60, 7):
        fr = _frame(rig, t, seed=t)
        pose = reconstruct_grasper(fr.all_detections(), rig)
        gt = fr.gt.pose
        np.testing.assert_allclose(pose.wrist, gt.wrist, atol=1e-9)
        assert _tip_error(pose, gt) < 1e-9
        assert angle(pose.arm_axis, gt.arm_axis) < 1e-8
        assert ("tips_greedy" in pose.flags) == (len(rig) > 10)


def test_tip_labeling_is_consistent_under_noise():
    for t in range(20):
        fr = _frame(RIG10, t, sigma_px=1.0, seed=t)
        pose = reconstruct_grasper(fr.all_detections(), RIG10)
        gt = fr.gt.pose
        # tips are 0.02 m from the wrist and apart; a wrong labeling costs centimetres
        assert _tip_error(pose, gt) < 2e-3
        m = match_tips_across_views(fr.all_detections(), RIG10)
        assert m.reference == 0 and not m.merged
        assert all(np.isfinite(m.residuals))


def _strip(det, absent):
    kps = tuple(Keypoint(0.0, 0.0, ABSENT, 0.0) if i in absent else k for i, k in enumerate(det.keypoints))
    return ToolDetection2D(det.view_id, det.cls, det.bbox, kps, det.score)


def test_tips_merged_when_no_view_has_both():
    fr = _frame(RIG10, 3, tip_swap_prob=0.0)
    dets = [_strip(d, {1} if d.view_id % 2 else {0}) for d in fr.all_detections()]
    pose = reconstruct_grasper(dets, RIG10)
    assert "tips_merged" in pose.flags
    np.testing.assert_array_equal(pose.tip_a, pose.tip_b)
    np.testing.assert_allclose(pose.wrist, fr.gt.pose.wrist, atol=1e-9)
    assert match_tips_across_views(dets, RIG10).merged


def test_wrist_needs_two_views_and_axis_flags():
    fr = _frame(RIG10, 5)
    dets = fr.all_detections()
    one_wrist = [d if d.view_id == 0 else _strip(d, {2}) for d in dets]
    with pytest.raises(InsufficientViewsError):
        reconstruct_grasper(one_wrist, RIG10)
    no_arm = [_strip(d, {3}) for d in dets]
    pose = reconstruct_grasper(no_arm, RIG10)
    assert "axis_unavailable" in pose.flags and not pose.valid["arm_axis"]
    assert np.all(np.isnan(pose.arm_axis))
    few_arm = [d if d.view_id < 3 else _strip(d, {3}) for d in dets]
    pose = reconstruct_grasper(few_arm, RIG10)
    assert "axis_below_recommended_views" in pose.flags and pose.valid["arm_axis"]


def test_single_tip_group_invalid_not_raised():
    fr = _frame(RIG10, 8, tip_swap_prob=0.0)
    dets = [d if d.view_id == 0 else _strip(d, {1}) for d in fr.all_detections()]
    pose = reconstruct_grasper(dets, RIG10)
    assert pose.valid["tip_a"] and not pose.valid["tip_b"]
    assert np.all(np.isnan(pose.tip_b)) and pose.support["tip_b"] == ()


def test_highest_score_detection_per_view_is_used():
    fr = _frame(RIG10, 2)
    dets = fr.all_detections()
    decoy = ToolDetection2D(0, GRASPER, dets[0].bbox, tuple(Keypoint(1.0, 1.0) for _ in range(4)), 0.5)
    pose = reconstruct_grasper([decoy] + dets, RIG10)
    np.testing.assert_allclose(pose.wrist, fr.gt.pose.wrist, atol=1e-9)
    batch = DetectionBatch.from_detections([decoy] + dets)
    rows = grasper_rows(batch)
    assert rows[0] == 1 and len(rows) == 10


def test_support_lists_views_and_keypoints():
    fr = _frame(RIG10, 4, tip_swap_prob=0.0)
    pose = reconstruct_grasper(fr.all_detections(), RIG10)
    assert pose.support["wrist"] == tuple((i, 2) for i in range(10))
    assert pose.support["tip_a"] == tuple((i, 0) for i in range(10))
    assert pose.views_used == tuple(range(10))


# Smoothing ---------------------------------------------------------------


def test_smoother_limits():
    poses = [reconstruct_grasper(_frame(RIG10, t).all_detections(), RIG10) for t in (0, 10)]
    sm0, sm1, smh = SmootherState(0.0), SmootherState(1.0), SmootherState(0.25)
    for p in poses:
        out0, out1, outh = sm0.apply("g", p), sm1.apply("g", p), smh.apply("g", p)
    np.testing.assert_array_equal(out0.wrist, poses[1].wrist)
    np.testing.assert_array_equal(out1.wrist, poses[0].wrist)
    np.testing.assert_allclose(outh.wrist, 0.25 * poses[0].wrist + 0.75 * poses[1].wrist)
    assert np.linalg.norm(outh.arm_axis) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        SmootherState(1.5)


# Beans -------------------------------------------------------------------


def test_noiseless_beans_exact():
    beans = [(0.03, 0.02, -0.01), (-0.025, 0.03, -0.012), (0.0, -0.035, -0.008)]
    fr = render_detections(None, beans, RIG10, NoiseModel(), 0)
    res = reconstruct_beans(fr.all_detections(), RIG10)
    assert len(res.points) == 3 and not res.leftovers and not res.ambiguous
    for b in beans:
        assert min(np.linalg.norm(p.position - b) for p in res.points) < 1e-9
    for p in res.points:
        assert sorted(v for v, _ in p.members) == list(range(10))


@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.floats(0.0, 1.5), st.floats(0.0, 0.4))
def test_bean_groups_partition_detections(seed, n, sigma, dropout):
    rng = np.random.default_rng(seed)
    beans = rng.uniform(-0.04, 0.04, size=(n, 3))
    fr = render_detections(None, beans, RIG10, NoiseModel(sigma, dropout, seed), 0)
    dets = fr.all_detections()
    res = reconstruct_beans(dets, RIG10, 4.0)
    used = [m for p in res.points for m in p.members] + list(res.leftovers)
    assert sorted(i for _, i in used) == list(range(len(dets)))
    for p in res.points:
        views = [v for v, _ in p.members]
        assert len(set(views)) == len(views) >= 2
        for v, i in p.members:
            q = project_point(RIG10[v], p.position)
            assert np.hypot(*(q - dets[i].keypoints[0].pixel)) <= 4.0 + 1e-6


def test_bean_ambiguity_flag():
    rig = RIG10.subset([0, 5])
    beans = [(0.0, 0.0, 0.0), (0.0005, 0.0, 0.0)]
    fr = render_detections(None, beans, rig, NoiseModel(), 0)
    assert reconstruct_beans(fr.all_detections(), rig).ambiguous
    far = [(0.0, 0.0, 0.0), (0.03, 0.02, 0.0)]
    fr = render_detections(None, far, rig, NoiseModel(), 0)
    assert not reconstruct_beans(fr.all_detections(), rig).ambiguous


def test_beans_ignore_graspers_and_hidden():
    fr = next(simulate(RIG10, 1))
    dets = fr.all_detections()
    hidden = [
        ToolDetection2D(d.view_id, BEAN, d.bbox, (Keypoint(d.keypoints[0].x, d.keypoints[0].y, 1),))
        for d in dets if d.cls == BEAN
    ]
    assert reconstruct_beans([d for d in dets if d.cls == GRASPER] + hidden, RIG10).points == []
    assert reconstruct_beans([], RIG10).points == []
