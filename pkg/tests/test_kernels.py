"""The compiled and numpy backends must agree on every kernel."""
import os
import subprocess
import sys

import numpy as np
import pytest

from toolpose3d import kernels
from toolpose3d.reconstruction import RANK_TOL, TIE_TOL_PX, W_TOL, _pick_labeling
from toolpose3d.simulator import NoiseModel, simulate

from conftest import random_rotation

ref = kernels.get_backend("numpy")
others = [kernels.get_backend(n) for n in sorted(kernels.BACKENDS) if n != "numpy"]
pytestmark = pytest.mark.skipif(not others, reason="compiled backend not built")


@pytest.fixture(params=others, ids=lambda b: b.NAME)
def fast(request):
    return request.param


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def _views(rng, n):
    P = []
    for _ in range(n):
        R = random_rotation(rng)
        c = rng.normal(size=3)
        c = 2.0 * c / np.linalg.norm(c)
        K = np.array([[600.0, 0, 320], [0, 600.0, 240], [0, 0, 1]])
        P.append(K @ np.hstack([R, (-R @ c)[:, None]]))
    return np.array(P)


def test_solve_dlt_agrees(fast, rng):
    for n in (2, 3, 5, 10):
        P = _views(rng, n)
        px = rng.uniform(0, 640, size=(n, 2))
        w = rng.uniform(0.1, 1.0, size=n)
        for weights in (None, w):
            x0, s0 = ref.solve_dlt(P, px, weights)
            x1, s1 = fast.solve_dlt(P, px, weights)
            np.testing.assert_allclose(s1, s0, rtol=1e-9, atol=1e-9 * s0[0])
            np.testing.assert_allclose(x1 * np.sign(x1 @ x0), x0, atol=1e-8)


def test_null_vector_agrees(fast, rng):
    A = rng.normal(size=(9, 4))
    x0, s0 = ref.null_vector(A)
    x1, s1 = fast.null_vector(A)
    np.testing.assert_allclose(s1, s0, rtol=1e-10)
    np.testing.assert_allclose(x1 * np.sign(x1 @ x0), x0, atol=1e-10)


def test_reprojection_and_point_distances_agree(fast, rng):
    P = _views(rng, 6)
    X = rng.normal(size=3) * 0.1
    px = rng.uniform(0, 640, size=(6, 2))
    for a, b in zip(ref.reprojection_errors(P, X, px), fast.reprojection_errors(P, X, px)):
        np.testing.assert_allclose(b, a, rtol=1e-12)
    pix = rng.uniform(0, 640, size=(6, 3, 2))
    np.testing.assert_allclose(fast.point_distances(P, X, pix), ref.point_distances(P, X, pix), rtol=1e-12)


def test_axis_kernels_agree(fast, rig10, rng):
    a = rig10.arrays
    R, t, f, pp = a.rotation, a.translation, a.focal, a.principal
    wpx = rng.uniform(0, 640, size=(10, 2))
    apx = wpx + rng.normal(size=(10, 2)) * 30
    apx[3] = wpx[3]  # a degenerate pair is dropped by both
    N0, k0 = ref.axis_normals(R, f, pp, wpx, apx, 1e-12)
    N1, k1 = fast.axis_normals(R, f, pp, wpx, apx, 1e-12)
    np.testing.assert_array_equal(k1, k0)
    assert not k0[3]
    np.testing.assert_allclose(N1, N0, atol=1e-12)
    u = rng.normal(size=3)
    u /= np.linalg.norm(u)
    X = rng.normal(size=3) * 0.01
    assert fast.axis_sign_votes(u, X, R, t, f, wpx, apx) == ref.axis_sign_votes(u, X, R, t, f, wpx, apx)


def _tip_problem(rig, frame_index, sigma, dropout):
    noise = NoiseModel(sigma_px=sigma, dropout_prob=dropout, seed=frame_index)
    fr = next(simulate(rig, 1, noise, start=frame_index))
    dets = [d for d in fr.all_detections() if d.cls == "grasper"]
    P = np.array([rig[d.view_id].projection for d in dets])
    tips = np.array([[(k.x, k.y) for k in d.keypoints[:2]] for d in dets])
    vis = np.array([[k.visibility == 2 for k in d.keypoints[:2]] for d in dets], dtype=np.uint8)
    both = np.flatnonzero(vis.all(axis=1))
    r = int(both[0])
    free = np.array([i for i in range(len(dets)) if i != r and vis[i].any()], dtype=np.intp)
    return P, tips, vis, r, free


@pytest.mark.parametrize("frame_index", range(12))
def test_tip_labeling_scores_agree(fast, rig10, frame_index):
    P, tips, vis, r, free = _tip_problem(rig10, frame_index, 1.0, 0.15)
    s0 = ref.tip_labeling_scores(P, tips, vis, r, free)
    s1 = fast.tip_labeling_scores(P, tips, vis, r, free)
    finite = np.isfinite(s0)
    np.testing.assert_array_equal(np.isfinite(s1), finite)
    np.testing.assert_allclose(s1[finite], s0[finite], rtol=1e-7, atol=1e-7)
    # pruning and seeding keep the winner and its score
    pruned = fast.tip_labeling_scores(P, tips, vis, r, free, TIE_TOL_PX, 3 % len(s0))
    assert np.min(pruned) == pytest.approx(np.min(s0), rel=1e-7, abs=1e-7)
    assert _pick_labeling(pruned) == _pick_labeling(s1)


@pytest.mark.parametrize("seed", range(10))
def test_bean_groups_agree(fast, rig10, seed):
    rng = np.random.default_rng(seed)
    beans = rng.uniform(-0.04, 0.04, size=(int(rng.integers(1, 7)), 3))
    fr = next(simulate(rig10, 1, NoiseModel(sigma_px=1.0, dropout_prob=0.2, seed=seed), beans=beans))
    by_view = {}
    for d in fr.all_detections():
        if d.cls == "bean":
            by_view.setdefault(d.view_id, []).append(d.keypoints[0])
    views = sorted(by_view)
    width = max(len(v) for v in by_view.values())
    pix = np.zeros((len(views), width, 2))
    free = np.zeros((len(views), width), dtype=bool)
    for r, v in enumerate(views):
        for k, kp in enumerate(by_view[v]):
            pix[r, k] = kp.x, kp.y
            free[r, k] = True
    P = rig10.arrays.projection[rig10.arrays.rows(views)]
    F = rig10.fundamental_stack(views)
    before = free.copy()
    g0, a0 = ref.bean_groups(P, F, pix, free, 4.0, 8, RANK_TOL, W_TOL)
    g1, a1 = fast.bean_groups(P, F, pix, free, 4.0, 8, RANK_TOL, W_TOL)
    np.testing.assert_array_equal(g1, g0)
    assert a1 == a0
    np.testing.assert_array_equal(free, before)
    assert set(np.unique(g0)) <= set(range(-1, int(free.sum())))


def test_environment_forces_numpy_backend():
    env = dict(os.environ, TOOLPOSE3D_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from toolpose3d import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True).stdout
    assert out.strip() == "numpy"
