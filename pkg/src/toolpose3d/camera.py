"""Pinhole cameras, projection matrices, and the rig configuration file.

World-to-camera convention is ``x_cam = R @ X + t``. No lens distortion is
modelled: detections are assumed to come from undistorted images.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    ConfigError,
    InvalidExtrinsicsError,
    PointAtInfinityError,
)

CONVENTION = "x_cam = R*X + t"
ORTHONORMAL_TOL = 1e-9


def _frozen_array(values, shape) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True, eq=False)
class Extrinsics:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen_array(self.rotation, (3, 3))
        t = _frozen_array(self.translation, (3,))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidExtrinsicsError("rotation and translation must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHONORMAL_TOL:
            raise InvalidExtrinsicsError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidExtrinsicsError("rotation determinant is not +1")


def projection_matrix(intr: Intrinsics, extr: Extrinsics) -> np.ndarray:
    """Return the 3x4 matrix ``K @ [R | t]``."""
    if not isinstance(extr, Extrinsics):
        extr = Extrinsics(*extr)
    Rt = np.hstack([extr.rotation, extr.translation[:, None]])
    return intr.matrix @ Rt


@dataclass(frozen=True, eq=False)
class Camera:
    """Immutable calibrated view with cached projection matrix and optical center."""

    id: int
    intrinsics: Intrinsics
    extrinsics: Extrinsics
    projection: np.ndarray = field(init=False, repr=False, compare=False)
    center: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        M = projection_matrix(self.intrinsics, self.extrinsics)
        M.setflags(write=False)
        O = -self.extrinsics.rotation.T @ self.extrinsics.translation
        O.setflags(write=False)
        object.__setattr__(self, "projection", M)
        object.__setattr__(self, "center", O)

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    @classmethod
    def from_params(cls, id, fx, fy, cx, cy, width, height, R, t) -> "Camera":
        return cls(int(id), Intrinsics(fx, fy, cx, cy, width, height), Extrinsics(R, t))

    @classmethod
    def look_at(cls, id, eye, target, intrinsics: Intrinsics, up=(0.0, 0.0, 1.0)) -> "Camera":
        """Camera at ``eye`` whose optical axis passes through ``target``."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        norm = np.linalg.norm(z)
        if norm == 0:
            raise ConfigError("look_at: eye and target coincide")
        z /= norm
        up = np.asarray(up, dtype=np.float64)
        x = np.cross(z, up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.vstack([x, y, z])
        return cls(int(id), intrinsics, Extrinsics(R, -R @ eye))


def project_point(cam: Camera, X) -> np.ndarray:
    """Project a world point to pixel coordinates."""
    u, v, w = cam.projection @ np.append(np.asarray(X, dtype=np.float64), 1.0)
    if abs(w) < 1e-12:
        raise PointAtInfinityError(f"point projects to infinity in camera {cam.id}")
    if w < 0:
        raise BehindCameraError(f"point is behind camera {cam.id}")
    return np.array([u / w, v / w])


def back_project_ray(cam: Camera, p) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(origin, unit direction)`` of the world ray through pixel ``p``."""
    intr = cam.intrinsics
    px, py = float(p[0]), float(p[1])
    d_cam = np.array([(px - intr.cx) / intr.fx, (py - intr.cy) / intr.fy, 1.0])
    d = cam.extrinsics.rotation.T @ d_cam
    return cam.center.copy(), d / np.linalg.norm(d)


@dataclass(frozen=True, eq=False)
class CameraArrays:
    """Stacked per-camera parameters in rig order, for vectorized kernels."""

    index: dict  # view id -> row
    projection: np.ndarray  # (n, 3, 4)
    rotation: np.ndarray  # (n, 3, 3)
    translation: np.ndarray  # (n, 3)
    focal: np.ndarray  # (n, 2)
    principal: np.ndarray  # (n, 2)

    def rows(self, ids) -> np.ndarray:
        try:
            return np.array([self.index[i] for i in ids], dtype=np.intp)
        except KeyError as exc:
            raise ConfigError(f"unknown view id {exc.args[0]!r}") from None


@dataclass(frozen=True, eq=False)
class Rig:
    cameras: tuple[Camera, ...]
    _by_id: dict = field(init=False, repr=False, compare=False)
    _fundamental: dict = field(init=False, repr=False, compare=False)
    arrays: CameraArrays = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cams = tuple(self.cameras)
        object.__setattr__(self, "cameras", cams)
        if len(cams) < 2:
            raise ConfigError(f"rig needs at least 2 cameras, got {len(cams)}")
        by_id = {}
        for cam in cams:
            if cam.id in by_id:
                raise ConfigError(f"duplicate camera id {cam.id}")
            by_id[cam.id] = cam
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_fundamental", {})
        arrays = CameraArrays(
            {c.id: n for n, c in enumerate(cams)},
            np.array([c.projection for c in cams]),
            np.array([c.extrinsics.rotation for c in cams]),
            np.array([c.extrinsics.translation for c in cams]),
            np.array([(c.intrinsics.fx, c.intrinsics.fy) for c in cams]),
            np.array([(c.intrinsics.cx, c.intrinsics.cy) for c in cams]),
        )
        for a in (arrays.projection, arrays.rotation, arrays.translation, arrays.focal, arrays.principal):
            a.setflags(write=False)
        object.__setattr__(self, "arrays", arrays)

    def __len__(self) -> int:
        return len(self.cameras)

    def __iter__(self):
        return iter(self.cameras)

    def __contains__(self, view_id) -> bool:
        return view_id in self._by_id

    def __getitem__(self, view_id) -> Camera:
        try:
            return self._by_id[view_id]
        except KeyError:
            raise ConfigError(f"unknown view id {view_id!r}") from None

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(cam.id for cam in self.cameras)

    def subset(self, ids: Iterable[int]) -> "Rig":
        return Rig(tuple(self[i] for i in ids))

    def image_size(self) -> tuple[int, int] | None:
        """Common ``(width, height)``, or None when cameras differ."""
        sizes = {(c.width, c.height) for c in self.cameras}
        return sizes.pop() if len(sizes) == 1 else None

    def fundamental(self, i: int, j: int) -> np.ndarray:
        """Fundamental matrix F with ``x_j^T F x_i = 0`` for corresponding pixels."""
        key = (i, j)
        F = self._fundamental.get(key)
        if F is None:
            ci, cj = self[i], self[j]
            Ri, ti = ci.extrinsics.rotation, ci.extrinsics.translation
            Rj, tj = cj.extrinsics.rotation, cj.extrinsics.translation
            R = Rj @ Ri.T
            t = tj - R @ ti
            tx = np.array([[0.0, -t[2], t[1]], [t[2], 0.0, -t[0]], [-t[1], t[0], 0.0]])
            F = np.linalg.inv(cj.intrinsics.matrix).T @ tx @ R @ np.linalg.inv(ci.intrinsics.matrix)
            F.setflags(write=False)
            self._fundamental[key] = F
        return F

    def fundamental_stack(self, ids: Sequence[int]) -> np.ndarray:
        """``(n, n, 3, 3)`` array with ``[a, b] = fundamental(ids[a], ids[b])``."""
        key = ("stack", tuple(ids))
        stack = self._fundamental.get(key)
        if stack is None:
            eye = np.zeros((3, 3))
            stack = np.array([[self.fundamental(i, j) if i != j else eye for j in ids] for i in ids])
            stack = stack.reshape(len(ids), len(ids), 3, 3)
            stack.setflags(write=False)
            self._fundamental[key] = stack
        return stack


_CAMERA_KEYS = {"id", "fx", "fy", "cx", "cy", "width", "height", "R", "t"}


def rig_from_dict(doc: dict) -> Rig:
    if not isinstance(doc, dict):
        raise ConfigError("rig document must be a JSON object")
    unknown = set(doc) - {"convention", "cameras"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    convention = doc.get("convention", CONVENTION)
    if convention != CONVENTION:
        raise ConfigError(f"unsupported convention {convention!r}, expected {CONVENTION!r}")
    if "cameras" not in doc or not isinstance(doc["cameras"], list):
        raise ConfigError("missing 'cameras' list")
    cams = []
    for n, entry in enumerate(doc["cameras"]):
        cam_id = entry.get("id", f"#{n}") if isinstance(entry, dict) else f"#{n}"
        try:
            if not isinstance(entry, dict):
                raise ConfigError("camera entry must be an object")
            missing = _CAMERA_KEYS - set(entry)
            extra = set(entry) - _CAMERA_KEYS
            if missing:
                raise ConfigError(f"missing fields {sorted(missing)}")
            if extra:
                raise ConfigError(f"unknown fields {sorted(extra)}")
            if len(entry["R"]) != 9 or len(entry["t"]) != 3:
                raise ConfigError("R needs 9 values and t needs 3")
            cams.append(
                Camera.from_params(
                    int(entry["id"]),
                    float(entry["fx"]),
                    float(entry["fy"]),
                    float(entry["cx"]),
                    float(entry["cy"]),
                    int(entry["width"]),
                    int(entry["height"]),
                    [float(v) for v in entry["R"]],
                    [float(v) for v in entry["t"]],
                )
            )
        except InvalidExtrinsicsError as exc:
            raise InvalidExtrinsicsError(f"camera {cam_id}: {exc}") from None
        except ConfigError as exc:
            raise ConfigError(f"camera {cam_id}: {exc}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"camera {cam_id}: {exc}") from None
    return Rig(tuple(cams))


def rig_to_dict(rig: Rig) -> dict:
    cams = []
    for cam in rig.cameras:
        intr = cam.intrinsics
        cams.append(
            {
                "id": cam.id,
                "fx": intr.fx,
                "fy": intr.fy,
                "cx": intr.cx,
                "cy": intr.cy,
                "width": intr.width,
                "height": intr.height,
                "R": [float(v) for v in cam.extrinsics.rotation.ravel()],
                "t": [float(v) for v in cam.extrinsics.translation],
            }
        )
    return {"convention": CONVENTION, "cameras": cams}


def load_rig(path) -> Rig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    try:
        return rig_from_dict(doc)
    except ConfigError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def save_rig(rig: Rig, path) -> None:
    Path(path).write_text(json.dumps(rig_to_dict(rig), indent=2) + "\n")


def rotation_about(axis: Sequence[float], angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)
