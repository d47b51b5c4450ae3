"""Synthetic camera rings, grasper/bean scenes, and noisy detection streams.

Every frame is a pure function of ``(scene, noise.seed, frame_index)``, so
streams are reproducible and frames can be generated in any order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .camera import Camera, Intrinsics, Rig
from .errors import ConfigError
from .types import BEAN, GRASPER, VISIBLE, ABSENT, Keypoint, ToolDetection2D, ToolPose3D

MAX_OPEN_HALF_ANGLE = math.pi / 3
BBOX_PAD = 0.10
MIN_BOX_HALF = 4.0

DEFAULT_BEANS = (
    (0.030, 0.020, -0.010),
    (-0.025, 0.030, -0.012),
    (0.000, -0.035, -0.008),
)


@dataclass(frozen=True)
class RigSpec:
    """Camera rings: each array is a ring of cameras looking at ``target``.

    Array ``a`` sits ``array_spacing * a`` above the first and is rotated by
    half the inter-camera angle so the two rings interleave.
    """

    arrays: int = 1
    cameras_per_array: int = 5
    radius: float = 0.08
    height: float = 0.12
    array_spacing: float = 0.03
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)
    width: int = 640
    image_height: int = 480
    focal: float = 600.0

    @classmethod
    def parse(cls, text: str) -> "RigSpec":
        """Parse ``"AxC"``, e.g. ``"2x5"`` for two arrays of five cameras."""
        try:
            a, c = text.lower().split("x")
            return cls(arrays=int(a), cameras_per_array=int(c))
        except ValueError:
            raise ConfigError(f"rig spec must look like '2x5', got {text!r}") from None


def make_rig(spec: RigSpec = RigSpec()) -> Rig:
    if spec.cameras_per_array < 2:
        raise ConfigError(f"cameras_per_array must be >= 2, got {spec.cameras_per_array}")
    if spec.arrays < 1:
        raise ConfigError(f"arrays must be >= 1, got {spec.arrays}")
    if spec.radius <= 0:
        raise ConfigError(f"ring radius must be positive, got {spec.radius}")
    intr = Intrinsics(
        spec.focal, spec.focal, spec.width / 2.0, spec.image_height / 2.0, spec.width, spec.image_height
    )
    target = np.asarray(spec.target, dtype=np.float64)
    n = spec.cameras_per_array
    cams = []
    for a in range(spec.arrays):
        z = spec.height + a * spec.array_spacing
        phase = a * math.pi / n
        for c in range(n):
            theta = phase + 2.0 * math.pi * c / n
            eye = target + np.array([spec.radius * math.cos(theta), spec.radius * math.sin(theta), z])
            cams.append(Camera.look_at(len(cams), eye, target, intr))
    return Rig(tuple(cams))


@dataclass(frozen=True)
class GrasperParams:
    wrist: tuple[float, float, float]
    axis: tuple[float, float, float]
    roll: float = 0.0
    open_half_angle: float = 0.3
    finger_length: float = 0.02
    arm_offset: float = 0.03

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=np.float64)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise ValueError("axis must be a unit vector")
        if not 0.0 <= self.open_half_angle <= MAX_OPEN_HALF_ANGLE:
            raise ValueError(f"open_half_angle {self.open_half_angle} outside [0, pi/3]")
        if self.finger_length <= 0 or self.arm_offset <= 0:
            raise ValueError("finger_length and arm_offset must be positive")


def _perpendicular_basis(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ref = np.zeros(3)
    ref[int(np.argmin(np.abs(u)))] = 1.0
    e1 = np.cross(u, ref)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(u, e1)


def grasper_skeleton(p: GrasperParams) -> dict[str, np.ndarray]:
    """3D keypoints of the grasper; the arm point sits ``arm_offset`` behind the wrist."""
    u = np.asarray(p.axis, dtype=np.float64)
    wrist = np.asarray(p.wrist, dtype=np.float64)
    e1, e2 = _perpendicular_basis(u)
    opening = math.cos(p.roll) * e1 + math.sin(p.roll) * e2
    c, s = math.cos(p.open_half_angle), math.sin(p.open_half_angle)
    return {
        "tip_a": wrist + p.finger_length * (c * u + s * opening),
        "tip_b": wrist + p.finger_length * (c * u - s * opening),
        "wrist": wrist.copy(),
        "arm_point": wrist - p.arm_offset * u,
    }


@dataclass(frozen=True)
class NoiseModel:
    """Pixel noise and keypoint dropout.

    ``tip_swap_prob`` randomizes the reported order of the two tips per
    view, since a detector cannot tell the fingers apart.
    """

    sigma_px: float = 0.0
    dropout_prob: float = 0.0
    seed: int = 0
    tip_swap_prob: float = 0.5

    def __post_init__(self):
        if self.sigma_px < 0:
            raise ValueError("sigma_px must be >= 0")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must be in [0, 1)")
        if not 0.0 <= self.tip_swap_prob <= 1.0:
            raise ValueError("tip_swap_prob must be in [0, 1]")


@dataclass(frozen=True, eq=False)
class GroundTruth:
    pose: ToolPose3D
    beans: tuple[np.ndarray, ...]


@dataclass(frozen=True, eq=False)
class SimFrame:
    frame_index: int
    gt: GroundTruth
    detections: dict  # view_id -> list[ToolDetection2D]
    labels: dict = field(default_factory=dict)  # view_id -> noiseless 2D annotations

    def all_labels(self) -> list[ToolDetection2D]:
        return [d for v in sorted(self.labels) for d in self.labels[v]]

    def all_detections(self) -> list[ToolDetection2D]:
        return [d for v in sorted(self.detections) for d in self.detections[v]]


def _project(cam: Camera, X: np.ndarray):
    h = cam.projection @ np.append(X, 1.0)
    if h[2] <= 1e-12:
        return None
    return h[:2] / h[2]


def _bbox(points: list[np.ndarray]) -> tuple[float, float, float, float]:
    pts = np.array(points)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    half = np.maximum((hi - lo) * (0.5 + BBOX_PAD), MIN_BOX_HALF)
    mid = (lo + hi) / 2.0
    return (mid[0] - half[0], mid[1] - half[1], mid[0] + half[0], mid[1] + half[1])


def _gt_pose(p: GrasperParams, sk: dict) -> ToolPose3D:
    return ToolPose3D(
        tip_a=sk["tip_a"],
        tip_b=sk["tip_b"],
        wrist=sk["wrist"],
        arm_axis=np.asarray(p.axis, dtype=np.float64),
        valid={"wrist": True, "tip_a": True, "tip_b": True, "arm_axis": True},
    )


def render_detections(
    params: GrasperParams | None,
    beans: Sequence[Sequence[float]],
    rig: Rig,
    noise: NoiseModel,
    frame_index: int,
) -> SimFrame:
    """Observe one scene with every camera of ``rig``.

    The arm keypoint of each view is projected from its own random depth,
    uniform in [0.5, 1.5] times ``arm_offset`` behind the wrist. Random
    draws happen in a fixed order regardless of dropout, so changing the
    dropout rate never reshuffles the pixel noise.
    """
    rng = np.random.default_rng([int(noise.seed) & 0xFFFFFFFFFFFFFFFF, int(frame_index)])
    beans = [np.asarray(b, dtype=np.float64) for b in beans]
    sk = grasper_skeleton(params) if params is not None else None
    u = np.asarray(params.axis, dtype=np.float64) if params is not None else None
    detections, labels = {}, {}
    for cam in rig.cameras:
        depth_scale = rng.uniform(0.5, 1.5)
        n_pts = 4 + len(beans)
        jitter = rng.normal(0.0, 1.0, size=(n_pts, 2)) * noise.sigma_px
        drop = rng.random(n_pts) < noise.dropout_prob
        swap = rng.random() < noise.tip_swap_prob
        view, truth = [], []
        if sk is not None:
            world = [
                sk["tip_a"],
                sk["tip_b"],
                sk["wrist"],
                sk["wrist"] - depth_scale * params.arm_offset * u,
            ]
            order = (1, 0, 2, 3) if swap else (0, 1, 2, 3)
            exact = [_project(cam, world[i]) for i in order]
            kps = []
            for slot, (i, px) in enumerate(zip(order, exact)):
                if px is None or drop[i]:
                    kps.append(Keypoint(0.0, 0.0, ABSENT, 0.0))
                else:
                    q = px + jitter[i]
                    kps.append(Keypoint(float(q[0]), float(q[1]), VISIBLE, 1.0))
            seen = [px for px in exact if px is not None]
            if seen and any(k.visibility for k in kps):
                view.append(ToolDetection2D(cam.id, GRASPER, _bbox(seen), tuple(kps), 1.0))
            if seen:
                true_px = [_project(cam, X) for X in world]
                true_kps = tuple(
                    Keypoint(0.0, 0.0, ABSENT, 0.0) if px is None else Keypoint(float(px[0]), float(px[1]))
                    for px in true_px
                )
                truth.append(ToolDetection2D(cam.id, GRASPER, _bbox(seen), true_kps, 1.0))
        for b, X in enumerate(beans):
            px = _project(cam, X)
            if px is None:
                continue
            truth.append(
                ToolDetection2D(cam.id, BEAN, _bbox([px]), (Keypoint(float(px[0]), float(px[1])),), 1.0)
            )
            if drop[4 + b]:
                continue
            q = px + jitter[4 + b]
            view.append(
                ToolDetection2D(
                    cam.id, BEAN, _bbox([px]), (Keypoint(float(q[0]), float(q[1]), VISIBLE, 1.0),), 1.0
                )
            )
        detections[cam.id] = view
        labels[cam.id] = truth
    gt_pose = _gt_pose(params, sk) if sk is not None else None
    return SimFrame(int(frame_index), GroundTruth(gt_pose, tuple(beans)), detections, labels)


@dataclass(frozen=True)
class MotionScript:
    """Circular wrist path with a wobbling arm axis and a sinusoidal opening.

    Angular rates are in radians per frame.
    """

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    path_radius: float = 0.015
    path_rate: float = 2.0 * math.pi / 200.0
    base_axis: tuple[float, float, float] = (0.3, 0.2, -1.0)
    wobble: float = 0.15
    wobble_rate: float = 2.0 * math.pi / 120.0
    open_mean: float = 0.35
    open_amplitude: float = 0.25
    open_rate: float = 2.0 * math.pi / 50.0
    roll_rate: float = 0.01
    finger_length: float = 0.02
    arm_offset: float = 0.03

    def __post_init__(self):
        lo = self.open_mean - abs(self.open_amplitude)
        hi = self.open_mean + abs(self.open_amplitude)
        if lo < 0 or hi > MAX_OPEN_HALF_ANGLE:
            raise ValueError("opening range leaves [0, pi/3]")
        if self.path_radius < 0:
            raise ValueError("path_radius must be >= 0")

    @property
    def max_wrist_step(self) -> float:
        """Upper bound on the wrist displacement between consecutive frames."""
        return self.path_radius * abs(self.path_rate)

    @property
    def max_open_step(self) -> float:
        return abs(self.open_amplitude * self.open_rate)

    @classmethod
    def constant(cls, **kw) -> "MotionScript":
        base = dict(path_radius=0.0, wobble=0.0, open_amplitude=0.0, roll_rate=0.0)
        base.update(kw)
        return cls(**base)


def trajectory(t: int, script: MotionScript = MotionScript()) -> GrasperParams:
    c = np.asarray(script.center, dtype=np.float64)
    phi = script.path_rate * t
    wrist = c + script.path_radius * np.array([math.cos(phi), math.sin(phi), 0.0])
    psi = script.wobble_rate * t
    axis = np.asarray(script.base_axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    axis = axis + script.wobble * np.array([math.cos(psi), math.sin(psi), 0.0])
    axis = axis / np.linalg.norm(axis)
    opening = script.open_mean + script.open_amplitude * math.sin(script.open_rate * t)
    return GrasperParams(
        wrist=tuple(wrist),
        axis=tuple(axis),
        roll=script.roll_rate * t,
        open_half_angle=min(max(opening, 0.0), MAX_OPEN_HALF_ANGLE),
        finger_length=script.finger_length,
        arm_offset=script.arm_offset,
    )


def simulate(
    rig: Rig,
    n_frames: int,
    noise: NoiseModel = NoiseModel(),
    script: MotionScript = MotionScript(),
    beans: Sequence[Sequence[float]] = DEFAULT_BEANS,
    start: int = 0,
) -> Iterator[SimFrame]:
    for t in range(start, start + n_frames):
        yield render_detections(trajectory(t, script), beans, rig, noise, t)
