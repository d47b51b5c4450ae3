"""Multi-view reconstruction of grasper poses and bean positions.

Points are triangulated with the homogeneous DLT system ``G X = 0`` built
from the per-view blocks ``H_i M_i``; the arm direction is the null vector
of the stacked unit plane normals, one plane per view through the optical
center, the wrist ray and the arm ray.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from ._fallback import build_system
from .camera import Rig
from .errors import (
    AxisUnobservableError,
    BelowRecommendedViewsWarning,
    ConfigError,
    DegenerateGeometryError,
    InsufficientViewsError,
    ToolPoseError,
)
from .types import (
    ARM,
    BEAN,
    CLASS_CODES,
    GRASPER,
    TIP_A,
    TIP_B,
    VISIBLE,
    WRIST,
    DetectionBatch,
    Observation2D,
    ToolDetection2D,
    ToolPose3D,
    as_batch,
)

log = logging.getLogger(__name__)

RANK_TOL = 1e-10
W_TOL = 1e-10
NORMAL_TOL = 1e-12
RECOMMENDED_AXIS_VIEWS = 4
EXHAUSTIVE_MAX_VIEWS = 10
TIE_TOL_PX = 1e-7
DEFAULT_TAU_EPI = 4.0

_NAN3 = np.full(3, np.nan)


def _stack(obs: Sequence[Observation2D], rig: Rig):
    obs = sorted(obs, key=lambda o: o.view_id)
    ids = [o.view_id for o in obs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate view ids in observations: {ids}")
    for i in ids:
        if i not in rig:
            raise ConfigError(f"unknown view id {i!r}")
    P = np.array([rig[i].projection for i in ids]).reshape(-1, 3, 4)
    px = np.array([o.pixel for o in obs], dtype=np.float64).reshape(-1, 2)
    conf = np.array([o.confidence for o in obs], dtype=np.float64)
    return ids, P, px, conf


def _solve_errors(P: np.ndarray, px: np.ndarray, weights=None) -> tuple[np.ndarray, np.ndarray]:
    if len(P) < 2:
        raise InsufficientViewsError(f"triangulation needs >= 2 views, got {len(P)}")
    x, sv = kernels.backend.solve_dlt(P, px, weights)
    if sv[2] <= RANK_TOL * sv[0]:
        raise DegenerateGeometryError("rays are parallel: triangulation system has rank < 3")
    if abs(x[3]) < W_TOL:
        raise DegenerateGeometryError("triangulated point is at infinity")
    X = x[:3] / x[3]
    err, depth = kernels.backend.reprojection_errors(P, X, px)
    if depth.min() <= 0:
        raise DegenerateGeometryError("triangulated point lies behind a camera")
    return X, err


def _solve(P: np.ndarray, px: np.ndarray, weights=None) -> tuple[np.ndarray, float]:
    X, err = _solve_errors(P, px, weights)
    return X, math.sqrt(float(err @ err) / len(err))


def triangulate_point(
    obs: Iterable[Observation2D], rig: Rig, weighted: bool = False
) -> tuple[np.ndarray, float]:
    """Triangulate one point from >= 2 views.

    Returns the dehomogenized null vector of ``G`` and the RMS reprojection
    error in pixels. With ``weighted`` each view's rows are scaled by the
    observation confidence.
    """
    obs = list(obs)
    if len({o.view_id for o in obs}) < 2:
        raise InsufficientViewsError(f"triangulation needs >= 2 distinct views, got {len(obs)}")
    _, P, px, conf = _stack(obs, rig)
    return _solve(P, px, conf if weighted else None)


def triangulation_system(obs: Iterable[Observation2D], rig: Rig) -> np.ndarray:
    """The stacked 2I x 4 matrix ``G`` (views in id order)."""
    _, P, px, _ = _stack(list(obs), rig)
    return build_system(P, px)


# Arm axis ---------------------------------------------------------------


def _cam_arrays(rig: Rig, ids: Sequence[int], rows=None):
    a = rig.arrays
    rows = a.rows(ids) if rows is None else rows
    return a.rotation[rows], a.translation[rows], a.focal[rows], a.principal[rows]


def _plane_normals(R, f, pp, wrist_px, arm_px, weights=None):
    N, keep = kernels.backend.axis_normals(R, f, pp, wrist_px, arm_px, NORMAL_TOL)
    if weights is not None:
        N = N * np.asarray(weights)[keep, None]
    return N, keep


def _axis_from_normals(N: np.ndarray, n_pairs: int) -> np.ndarray:
    if len(N) == 0:
        if n_pairs == 0:
            raise InsufficientViewsError("no view has both wrist and arm keypoints")
        raise AxisUnobservableError("wrist and arm pixels coincide in every view")
    if len(N) < 2:
        raise InsufficientViewsError(f"arm axis needs >= 2 usable views, got {len(N)}")
    # full V: with two rows the null direction is not among the thin factors
    _, sv, vt = np.linalg.svd(N, full_matrices=True)
    if sv[1] <= RANK_TOL * sv[0]:
        raise AxisUnobservableError("all view planes coincide; axis is not determined")
    u = vt[-1]
    k = int(np.argmax(np.abs(u)))
    return u if u[k] > 0 else -u


def _sign_votes(u, wrist3d, R, t, f, wrist_px, arm_px) -> tuple[int, int]:
    return kernels.backend.axis_sign_votes(u, wrist3d, R, t, f, wrist_px, arm_px)


def _pair_by_view(wrist_obs, arm_obs, rig: Rig):
    arm = {o.view_id: o for o in arm_obs}
    pairs = sorted(
        ((w, arm[w.view_id]) for w in wrist_obs if w.view_id in arm), key=lambda p: p[0].view_id
    )
    ids = [w.view_id for w, _ in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate view ids in wrist observations: {ids}")
    wpx = np.array([w.pixel for w, _ in pairs], dtype=np.float64).reshape(-1, 2)
    apx = np.array([a.pixel for _, a in pairs], dtype=np.float64).reshape(-1, 2)
    conf = np.array([min(w.confidence, a.confidence) for w, a in pairs])
    return ids, _cam_arrays(rig, ids), wpx, apx, conf


def axis_system(wrist_obs, arm_obs, rig: Rig, weighted: bool = False):
    """Stacked unit plane normals ``N`` and the view ids that produced them.

    Each normal is the cross product of the back-projected wrist and arm
    ray directions; rows whose rays coincide are dropped.
    """
    ids, (R, _, f, pp), wpx, apx, conf = _pair_by_view(list(wrist_obs), list(arm_obs), rig)
    N, keep = _plane_normals(R, f, pp, wpx, apx, conf if weighted else None)
    return N, [i for i, k in zip(ids, keep) if k]


def estimate_arm_axis(wrist_obs, arm_obs, rig: Rig, weighted: bool = False) -> np.ndarray:
    """Unit arm direction (sign undetermined) from per-view wrist/arm pixels.

    The arm keypoint may sit at a different depth along the arm in every
    view; only the plane it spans with the wrist ray matters.
    """
    ids, (R, _, f, pp), wpx, apx, conf = _pair_by_view(list(wrist_obs), list(arm_obs), rig)
    N, _ = _plane_normals(R, f, pp, wpx, apx, conf if weighted else None)
    u = _axis_from_normals(N, len(ids))
    if len(N) < RECOMMENDED_AXIS_VIEWS:
        warnings.warn(
            f"arm axis from {len(N)} views; at least {RECOMMENDED_AXIS_VIEWS} recommended",
            BelowRecommendedViewsWarning,
            stacklevel=2,
        )
    return u


def orient_axis_sign(u, wrist3d, wrist_obs, arm_obs, rig: Rig) -> np.ndarray:
    """Pick the sign of ``u`` so it points from the arm toward the wrist.

    Each view votes by comparing the projected direction of ``u`` at the
    wrist with the observed arm-to-wrist pixel direction. Ties keep ``+u``.
    """
    u = np.asarray(u, dtype=np.float64)
    _, (R, t, f, _), wpx, apx, _ = _pair_by_view(list(wrist_obs), list(arm_obs), rig)
    plus, minus = _sign_votes(u, np.asarray(wrist3d, dtype=np.float64), R, t, f, wpx, apx)
    if plus == 0 and minus == 0:
        warnings.warn("no view constrains the arm axis sign; keeping +u", RuntimeWarning, stacklevel=2)
    return -u if minus > plus else u.copy()


# Tip correspondence ------------------------------------------------------


@dataclass(frozen=True)
class TipMatch:
    """Cross-view tip labeling for one grasper.

    ``swapped[view_id]`` is True when that view's detected tip order must be
    reversed so its first tip corresponds to ``tip_a``.
    """

    swapped: dict
    reference: int | None
    residuals: tuple[float, float]
    merged: bool = False
    exhaustive: bool = True


def _pick_labeling(scores: np.ndarray) -> int:
    best = float(np.min(scores))
    if not math.isfinite(best):
        return 0
    return int(np.flatnonzero(scores <= best + TIE_TOL_PX)[0])


def grasper_rows(batch: DetectionBatch) -> np.ndarray:
    """Row of the highest-scoring grasper detection in each view, views in id order.

    Equal scores keep the earlier row.
    """
    g = np.flatnonzero(batch.cls == CLASS_CODES[GRASPER])
    if len(g) == 0:
        return g
    g = g[np.lexsort((g, -batch.score[g], batch.view_id[g]))]
    v = batch.view_id[g]
    first = np.ones(len(g), dtype=bool)
    first[1:] = v[1:] != v[:-1]
    return g[first]


def _grasper_per_view(dets: Iterable[ToolDetection2D]) -> list[ToolDetection2D]:
    best = {}
    for d in dets:
        if d.cls != GRASPER:
            continue
        cur = best.get(d.view_id)
        if cur is None or d.score > cur.score:
            best[d.view_id] = d
    return [best[k] for k in sorted(best)]


class _Frame:
    """One grasper's detections packed as (view, keypoint) arrays, views in id order."""

    def __init__(self, batch: DetectionBatch, rows: np.ndarray, rig: Rig):
        self.rows = rows
        self.ids = batch.view_id[rows].tolist()
        self.cam_rows = rig.arrays.rows(self.ids)
        self.kp = batch.kp[rows, :4]
        self.vis = batch.vis[rows, :4] == VISIBLE
        self.P = rig.arrays.projection[self.cam_rows]
        self.rig = rig

    @classmethod
    def from_detections(cls, dets, rig: Rig) -> "_Frame":
        batch = as_batch(dets)
        return cls(batch, grasper_rows(batch), rig)

    def guess_labeling(self, ref: int, free: np.ndarray) -> int:
        """Cheap labeling guess from epipolar distances to the reference tips."""
        F = self.rig.fundamental_stack(self.ids)[ref]  # (V, 3, 3): ref -> view
        ref_h = np.concatenate([self.kp[ref, :2], np.ones((2, 1))], axis=1)
        lines = np.einsum("vij,tj->vti", F, ref_h)  # line in view v of reference tip t
        lines /= np.maximum(np.hypot(lines[..., 0], lines[..., 1]), 1e-300)[..., None]
        tips_h = np.concatenate([self.kp[:, :2], np.ones((len(self.ids), 2, 1))], axis=2)
        d = np.abs(np.einsum("vti,vsi->vts", lines, tips_h))  # [v, ref tip, view tip]
        d = np.where(self.vis[:, None, :2], d, 0.0)
        keep = d[:, 0, 0] + d[:, 1, 1]
        swap = d[:, 0, 1] + d[:, 1, 0]
        bits = swap[free] < keep[free]
        return int(np.sum(bits.astype(np.int64) << np.arange(len(free), dtype=np.int64)))

    def tip_index(self, swapped: np.ndarray) -> np.ndarray:
        """(V, 2) keypoint index feeding tip_a / tip_b in each view."""
        s = swapped.astype(np.intp)
        return np.stack([s, 1 - s], axis=1)

    def solve(self, rows, kp_idx):
        rows = np.asarray(rows, dtype=np.intp)
        kp_idx = np.asarray(kp_idx, dtype=np.intp)
        return _solve(self.P[rows], self.kp[rows, kp_idx])

    def try_solve(self, rows, kp_idx):
        if len(rows) < 2:
            return _NAN3, math.inf, False
        try:
            X, res = self.solve(rows, kp_idx)
        except (DegenerateGeometryError, InsufficientViewsError):
            return _NAN3, math.inf, False
        return X, res, True

    def tip_groups(self, swapped):
        idx = self.tip_index(swapped)
        groups = []
        for g in range(2):
            rows = np.flatnonzero(self.vis[np.arange(len(self.ids)), idx[:, g]])
            groups.append((rows, idx[rows, g]))
        return groups

    def group_residual(self, rows, kp_idx) -> float:
        # a group seen once constrains nothing
        return 0.0 if len(rows) < 2 else self.try_solve(rows, kp_idx)[1]

    def match_tips(self):
        """``(swapped, ref_row, exhaustive)``; ``ref_row`` is None when no view has both tips."""
        n = len(self.ids)
        vis = self.vis[:, :2]
        both = np.flatnonzero(vis.all(axis=1))
        swapped = np.zeros(n, dtype=bool)
        if len(both) == 0:
            return swapped, None, True
        ref = int(both[0])
        free = np.array([i for i in range(n) if i != ref and vis[i].any()], dtype=np.intp)
        if len(free) + 1 <= EXHAUSTIVE_MAX_VIEWS:
            scores = kernels.backend.tip_labeling_scores(
                self.P, np.ascontiguousarray(self.kp[:, :2]), vis.astype(np.uint8), ref, free,
                TIE_TOL_PX, self.guess_labeling(ref, free),
            )
            best = _pick_labeling(scores)
            swapped[free] = (best >> np.arange(len(free))) & 1 == 1
            return swapped, ref, True
        chosen = np.zeros(n, dtype=bool)
        chosen[ref] = True
        for i in free:
            chosen[i] = True
            trial = []
            for flip in (False, True):
                swapped[i] = flip
                total = 0.0
                for rows, kp_idx in self.tip_groups(swapped):
                    keep = chosen[rows]
                    total += self.group_residual(rows[keep], kp_idx[keep])
                trial.append(total)
            swapped[i] = trial[1] < trial[0] - TIE_TOL_PX
        return swapped, ref, False


def match_tips_across_views(dets: Iterable[ToolDetection2D], rig: Rig) -> TipMatch:
    """Decide which detected tip is ``tip_a`` in every view.

    Exhaustive over the 2^(I-1) labelings relative to the first view (by id)
    with two visible tips when I <= 10, greedy view-by-view beyond that.
    The labeling minimizing the summed triangulation residual of both tips
    wins; near-ties go to the identity labeling. A tip group seen in a single
    view constrains nothing and adds 0 to the residual.
    """
    frame = _Frame.from_detections(dets, rig)
    swapped, ref, exhaustive = frame.match_tips()
    mapping = {i: bool(s) for i, s in zip(frame.ids, swapped)}
    if ref is None:
        return TipMatch(mapping, None, (math.inf, math.inf), merged=True)
    res = tuple(frame.try_solve(rows, k)[1] for rows, k in frame.tip_groups(swapped))
    return TipMatch(mapping, frame.ids[ref], res, exhaustive=exhaustive)


# Grasper ----------------------------------------------------------------


@dataclass
class SmootherState:
    """Exponential moving average over successive poses, keyed by instance.

    ``alpha = 0`` disables smoothing; ``alpha = 1`` freezes the first pose.
    """

    alpha: float = 0.0
    previous: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"smoothing factor must be in [0, 1], got {self.alpha}")

    def apply(self, key, pose: ToolPose3D) -> ToolPose3D:
        prev = self.previous.get(key)
        if self.alpha == 0.0 or prev is None:
            out = pose
        elif self.alpha == 1.0:
            out = prev
        else:
            a = self.alpha
            values = {}
            for name in ToolPose3D.POINTS:
                if pose.valid.get(name) and prev.valid.get(name):
                    values[name] = a * prev.point(name) + (1.0 - a) * pose.point(name)
            if pose.valid.get("arm_axis") and prev.valid.get("arm_axis"):
                u = a * prev.arm_axis + (1.0 - a) * pose.arm_axis
                values["arm_axis"] = u / np.linalg.norm(u)
            out = replace(pose, **values)
        self.previous[key] = out
        return out


def reconstruct_grasper(
    dets: Iterable[ToolDetection2D],
    rig: Rig,
    smoother: SmootherState | None = None,
    key="grasper",
) -> ToolPose3D:
    """Reconstruct one grasper from its per-view detections.

    With several grasper detections in a view the highest scoring one is
    used. The wrist must be triangulable; tips and axis degrade to invalid
    (NaN) entries with flags instead of raising.
    """
    fr = _Frame.from_detections(dets, rig)
    flags = set()
    wrist_rows = np.flatnonzero(fr.vis[:, WRIST])
    if len(wrist_rows) < 2:
        raise InsufficientViewsError(f"wrist visible in {len(wrist_rows)} view(s); need >= 2")
    wrist, wrist_res = fr.solve(wrist_rows, np.full(len(wrist_rows), WRIST))

    swapped, ref, exhaustive = fr.match_tips()
    if ref is None:
        flags.add("tips_merged")
        rows = np.flatnonzero(fr.vis[:, :2].any(axis=1))
        kp_idx = np.where(fr.vis[rows, TIP_A], TIP_A, TIP_B)
        merged = fr.try_solve(rows, kp_idx)
        groups = [(rows, kp_idx), (rows, kp_idx)]
        tips = [merged, merged]
    else:
        if not exhaustive:
            flags.add("tips_greedy")
        groups = fr.tip_groups(swapped)
        tips = [fr.try_solve(rows, kp_idx) for rows, kp_idx in groups]

    axis, axis_ok = _NAN3, False
    arm_rows = np.flatnonzero(fr.vis[:, WRIST] & fr.vis[:, ARM])
    R, t, f, pp = _cam_arrays(rig, None, fr.cam_rows[arm_rows])
    wpx, apx = fr.kp[arm_rows, WRIST], fr.kp[arm_rows, ARM]
    try:
        N, _ = _plane_normals(R, f, pp, wpx, apx)
        u = _axis_from_normals(N, len(arm_rows))
        if len(N) < RECOMMENDED_AXIS_VIEWS:
            flags.add("axis_below_recommended_views")
        plus, minus = _sign_votes(u, wrist, R, t, f, wpx, apx)
        if plus == minus == 0:
            flags.add("axis_sign_undetermined")
        axis, axis_ok = (-u if minus > plus else u), True
    except (InsufficientViewsError, AxisUnobservableError) as exc:
        flags.add("axis_unavailable")
        log.debug("arm axis unavailable: %s", exc)

    def support(rows, kp_idx):
        return tuple((fr.ids[r], int(k)) for r, k in zip(rows, kp_idx))

    sup = {
        "wrist": support(wrist_rows, np.full(len(wrist_rows), WRIST)),
        "tip_a": support(*groups[0]) if tips[0][2] else (),
        "tip_b": support(*groups[1]) if tips[1][2] else (),
    }
    pose = ToolPose3D(
        tip_a=tips[0][0],
        tip_b=tips[1][0],
        wrist=wrist,
        arm_axis=axis,
        residuals={"wrist": wrist_res, "tip_a": tips[0][1], "tip_b": tips[1][1]},
        views_used=tuple(sorted({v for pts in sup.values() for v, _ in pts})),
        valid={"wrist": True, "tip_a": tips[0][2], "tip_b": tips[1][2], "arm_axis": axis_ok},
        support=sup,
        flags=frozenset(flags),
    )
    if smoother is not None:
        pose = smoother.apply(key, pose)
    return pose


# Beans ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BeanPoint:
    position: np.ndarray
    residual: float
    members: tuple[tuple[int, int], ...]  # (view_id, index into the input sequence)


@dataclass(frozen=True)
class BeanReconstruction:
    points: list
    leftovers: list
    ambiguous: bool = False

    @property
    def positions(self) -> list[np.ndarray]:
        return [p.position for p in self.points]


_MAX_SEEDS = 8


def reconstruct_beans(
    dets: Sequence[ToolDetection2D], rig: Rig, tau_epi: float = DEFAULT_TAU_EPI
) -> BeanReconstruction:
    """Group single-keypoint bean detections across views and triangulate.

    Views are visited in id order; each unused bean anchors a group seeded
    by its closest epipolar partner and grown with the nearest unused bean
    in every other view. A group is kept only when every member reprojects
    within ``tau_epi`` pixels. Each detection is used at most once.
    """
    batch = as_batch(dets)
    b = np.flatnonzero((batch.cls == CLASS_CODES[BEAN]) & (batch.vis[:, 0] == VISIBLE))
    if len(b) == 0:
        return BeanReconstruction([], [], False)
    rows = b[np.lexsort((b, batch.view_id[b]))]
    view_ids, start, counts = np.unique(batch.view_id[rows], return_index=True, return_counts=True)
    views = view_ids.tolist()
    cam_rows = rig.arrays.rows(views)
    nv, width = len(views), int(counts.max())
    vrow = np.repeat(np.arange(nv), counts)
    slot = np.arange(len(rows)) - np.repeat(start, counts)
    # padded (view, slot) tables
    pix = np.zeros((nv, width, 2))
    src = np.full((nv, width), -1, dtype=np.intp)
    free = np.zeros((nv, width), dtype=bool)
    pix[vrow, slot] = batch.kp[rows, 0]
    src[vrow, slot] = rows
    free[vrow, slot] = True
    P = rig.arrays.projection[cam_rows]
    F = rig.fundamental_stack(views)
    group, ambiguous = kernels.backend.bean_groups(P, F, pix, free, tau_epi, _MAX_SEEDS, RANK_TOL, W_TOL)
    points = []
    for g in range(int(group.max()) + 1):
        r, k = np.nonzero(group == g)
        try:
            X, err = _solve_errors(P[r], pix[r, k])
        except ToolPoseError:  # accepted by the kernel, rejected on the exact re-solve
            continue
        free[r, k] = False
        members = tuple(zip(view_ids[r].tolist(), src[r, k].tolist()))
        points.append(BeanPoint(X, math.sqrt(float(err @ err) / len(err)), members))
    leftovers = [(views[r], int(src[r, k])) for r, k in zip(*np.nonzero(free))]
    return BeanReconstruction(points, leftovers, ambiguous)
