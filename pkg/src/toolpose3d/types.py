"""Detection and pose value types shared by reconstruction, metrics and I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

GRASPER = "grasper"
BEAN = "bean"
CLASSES = (GRASPER, BEAN)
N_KEYPOINTS = {GRASPER: 4, BEAN: 1}

# Grasper keypoint order.
TIP_A, TIP_B, WRIST, ARM = 0, 1, 2, 3

ABSENT, LABELED_INVISIBLE, VISIBLE = 0, 1, 2


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visibility: int = VISIBLE
    confidence: float = 1.0

    def __post_init__(self):
        if self.visibility not in (ABSENT, LABELED_INVISIBLE, VISIBLE):
            raise ValueError(f"visibility must be 0, 1 or 2, got {self.visibility}")

    @property
    def pixel(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def visible(self) -> bool:
        return self.visibility == VISIBLE


@dataclass(frozen=True)
class Observation2D:
    view_id: int
    pixel: tuple[float, float]
    confidence: float = 1.0

    def __post_init__(self):
        px = (float(self.pixel[0]), float(self.pixel[1]))
        if not (np.isfinite(px[0]) and np.isfinite(px[1])):
            raise ValueError(f"non-finite pixel {px}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        object.__setattr__(self, "pixel", px)


@dataclass(frozen=True)
class ToolDetection2D:
    """One tool instance detected in one view."""

    view_id: int
    cls: str
    bbox: tuple[float, float, float, float]
    keypoints: tuple[Keypoint, ...]
    score: float = 1.0

    def __post_init__(self):
        if self.cls not in N_KEYPOINTS:
            raise ValueError(f"unknown class {self.cls!r}")
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate bbox {self.bbox}")
        kps = tuple(self.keypoints)
        if len(kps) != N_KEYPOINTS[self.cls]:
            raise ValueError(
                f"{self.cls} needs {N_KEYPOINTS[self.cls]} keypoints, got {len(kps)}"
            )
        object.__setattr__(self, "keypoints", kps)
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))

    def observation(self, index: int) -> Observation2D | None:
        kp = self.keypoints[index]
        if not kp.visible:
            return None
        return Observation2D(self.view_id, (kp.x, kp.y), min(max(kp.confidence, 0.0), 1.0))


@dataclass(frozen=True, eq=False)
class ToolPose3D:
    """Reconstructed grasper state.

    Points that could not be reconstructed are NaN and have ``valid[name]``
    set to False. ``support`` maps each point name to the
    ``(view_id, keypoint_index)`` observations it was solved from.
    """

    tip_a: np.ndarray
    tip_b: np.ndarray
    wrist: np.ndarray
    arm_axis: np.ndarray
    residuals: Mapping[str, float] = field(default_factory=dict)
    views_used: tuple[int, ...] = ()
    valid: Mapping[str, bool] = field(default_factory=dict)
    support: Mapping[str, tuple[tuple[int, int], ...]] = field(default_factory=dict)
    flags: frozenset[str] = frozenset()

    POINTS = ("tip_a", "tip_b", "wrist")

    def point(self, name: str) -> np.ndarray:
        return getattr(self, name)


CLASS_CODES = {name: i for i, name in enumerate(CLASSES)}
MAX_KEYPOINTS = max(N_KEYPOINTS.values())


@dataclass(frozen=True, eq=False)
class DetectionBatch:
    """Column-oriented detections of one frame.

    Row ``i`` is the ``i``-th detection; keypoint arrays are padded to
    ``MAX_KEYPOINTS`` with absent entries. ``cls`` holds indices into
    ``CLASSES``.
    """

    view_id: np.ndarray  # (n,) int
    cls: np.ndarray  # (n,) int
    score: np.ndarray  # (n,)
    bbox: np.ndarray  # (n, 4)
    kp: np.ndarray  # (n, MAX_KEYPOINTS, 2)
    vis: np.ndarray  # (n, MAX_KEYPOINTS) int
    conf: np.ndarray  # (n, MAX_KEYPOINTS)

    def __len__(self) -> int:
        return len(self.view_id)

    @classmethod
    def empty(cls) -> "DetectionBatch":
        m = MAX_KEYPOINTS
        return cls(np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros((0, 4)),
                   np.zeros((0, m, 2)), np.zeros((0, m), int), np.zeros((0, m)))

    @classmethod
    def from_detections(cls, dets) -> "DetectionBatch":
        dets = list(dets)
        if not dets:
            return cls.empty()
        m = MAX_KEYPOINTS
        n = len(dets)
        kp = np.zeros((n, m, 2))
        vis = np.zeros((n, m), dtype=int)
        conf = np.zeros((n, m))
        for i, d in enumerate(dets):
            for j, k in enumerate(d.keypoints):
                kp[i, j] = k.x, k.y
                vis[i, j] = k.visibility
                conf[i, j] = k.confidence
        return cls(
            np.array([d.view_id for d in dets], dtype=int),
            np.array([CLASS_CODES[d.cls] for d in dets], dtype=int),
            np.array([d.score for d in dets], dtype=np.float64),
            np.array([d.bbox for d in dets], dtype=np.float64),
            kp,
            vis,
            conf,
        )

    def detection(self, i: int) -> ToolDetection2D:
        name = CLASSES[int(self.cls[i])]
        kps = tuple(
            Keypoint(float(self.kp[i, j, 0]), float(self.kp[i, j, 1]), int(self.vis[i, j]),
                     float(self.conf[i, j]))
            for j in range(N_KEYPOINTS[name])
        )
        return ToolDetection2D(int(self.view_id[i]), name, tuple(float(v) for v in self.bbox[i]),
                               kps, float(self.score[i]))

    def detections(self) -> list[ToolDetection2D]:
        return [self.detection(i) for i in range(len(self))]

    def select(self, rows) -> "DetectionBatch":
        rows = np.asarray(rows, dtype=np.intp)
        return DetectionBatch(self.view_id[rows], self.cls[rows], self.score[rows], self.bbox[rows],
                              self.kp[rows], self.vis[rows], self.conf[rows])


def as_batch(dets) -> DetectionBatch:
    return dets if isinstance(dets, DetectionBatch) else DetectionBatch.from_detections(dets)
