"""Line-oriented text formats for detections, ground truth and poses.

Detection stream::

    F <frame>
    D <view> <class> <score> <xmin> <ymin> <xmax> <ymax> <k> {<x> <y> <vis> <conf>}*k

Ground-truth sidecar::

    G <frame> <name> <x> <y> <z>        name: grasper.wrist | grasper.tip_a | grasper.tip_b | bean
    A <frame> <ux> <uy> <uz>

Pose stream: a ``P <frame> <flags>`` header per frame, then ``G`` records
with ``<residual> <n> <view:det:kp>*n`` appended and the ``A`` record; frames
that could not be parsed become ``S <frame> <reason>``. ``det`` indexes the
frame's ``D`` lines in order. All floats use six decimals.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .errors import StreamFormatError
from .types import (
    BEAN,
    CLASS_CODES,
    CLASSES,
    GRASPER,
    MAX_KEYPOINTS,
    N_KEYPOINTS,
    DetectionBatch,
    Keypoint,
    ToolDetection2D,
    ToolPose3D,
)

GRASPER_POINTS = ("wrist", "tip_a", "tip_b")


def _f(v: float) -> str:
    s = f"{float(v):.6f}"
    return "0.000000" if s == "-0.000000" else s


# Detections --------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DetectionFrame:
    """One frame of detections, stored column-wise; ``detections`` builds objects on demand."""

    frame_index: int
    batch: DetectionBatch

    @classmethod
    def of(cls, frame_index: int, detections: Iterable[ToolDetection2D]) -> "DetectionFrame":
        return cls(int(frame_index), DetectionBatch.from_detections(detections))

    @cached_property
    def detections(self) -> tuple[ToolDetection2D, ...]:
        return tuple(self.batch.detections())


@dataclass(frozen=True)
class CorruptFrame:
    frame_index: int | None
    lineno: int
    message: str


def format_detection(d: ToolDetection2D) -> str:
    fields = ["D", str(d.view_id), d.cls, _f(d.score)] + [_f(v) for v in d.bbox]
    fields.append(str(len(d.keypoints)))
    for k in d.keypoints:
        fields += [_f(k.x), _f(k.y), str(k.visibility), _f(k.confidence)]
    return " ".join(fields)


def parse_detection(line: str) -> ToolDetection2D:
    parts = line.split()
    if len(parts) < 9 or parts[0] != "D":
        raise StreamFormatError(f"malformed detection record: {line.strip()!r}")
    try:
        view, cls, score = int(parts[1]), parts[2], float(parts[3])
        bbox = tuple(float(v) for v in parts[4:8])
        k = int(parts[8])
        if cls not in N_KEYPOINTS:
            raise ValueError(f"unknown class {cls!r}")
        if len(parts) != 9 + 4 * k:
            raise ValueError(f"expected {k} keypoints, found {(len(parts) - 9) / 4:g}")
        kps = tuple(
            Keypoint(float(parts[9 + 4 * i]), float(parts[10 + 4 * i]), int(parts[11 + 4 * i]),
                     float(parts[12 + 4 * i]))
            for i in range(k)
        )
        values = (score,) + bbox + tuple(c for kp in kps for c in (kp.x, kp.y, kp.confidence))
        if not all(math.isfinite(v) for v in values):
            raise ValueError("non-finite value")
        return ToolDetection2D(view, cls, bbox, kps, score)
    except ValueError as exc:
        raise StreamFormatError(str(exc)) from None


_ROW = 5 + 4 * MAX_KEYPOINTS


def parse_detection_block(lines: Sequence[tuple[int, str]]) -> DetectionBatch:
    """Parse a frame's ``D`` lines straight into column arrays.

    Raises StreamFormatError naming the first offending line number.
    """
    if not lines:
        return DetectionBatch.empty()
    views, codes, rows = [], [], []
    lineno = 0
    try:
        for lineno, line in lines:
            parts = line.split()
            if len(parts) < 9 or parts[0] != "D":
                raise ValueError(f"malformed detection record: {line.strip()!r}")
            code = CLASS_CODES.get(parts[2])
            if code is None:
                raise ValueError(f"unknown class {parts[2]!r}")
            k = int(parts[8])
            need = N_KEYPOINTS[parts[2]]
            if k != need:
                raise ValueError(f"{parts[2]} needs {need} keypoints, got {k}")
            if len(parts) != 9 + 4 * k:
                raise ValueError(f"expected {k} keypoints, found {(len(parts) - 9) / 4:g}")
            row = [float(v) for v in parts[3:8]]
            row += [float(v) for v in parts[9:]]
            row += [0.0] * (_ROW - len(row))
            views.append(int(parts[1]))
            codes.append(code)
            rows.append(row)
    except ValueError as exc:
        raise StreamFormatError(f"line {lineno}: {exc}") from None
    data = np.array(rows)
    kp_block = data[:, 5:].reshape(-1, MAX_KEYPOINTS, 4)
    vis = kp_block[:, :, 2]
    bbox = data[:, 1:5]
    bad = ~np.all(np.isfinite(data), axis=1)
    bad |= ~((bbox[:, 0] < bbox[:, 2]) & (bbox[:, 1] < bbox[:, 3]))
    bad |= ~np.all((vis == 0) | (vis == 1) | (vis == 2), axis=1)
    if bad.any():
        i = int(np.argmax(bad))
        raise StreamFormatError(f"line {lines[i][0]}: invalid values in {lines[i][1].strip()!r}")
    return DetectionBatch(
        np.array(views),
        np.array(codes),
        data[:, 0].copy(),
        bbox.copy(),
        np.ascontiguousarray(kp_block[:, :, :2]),
        vis.astype(int),
        np.ascontiguousarray(kp_block[:, :, 3]),
    )


def format_detection_frame(frame_index: int, detections: Iterable[ToolDetection2D]) -> str:
    return "".join([f"F {int(frame_index)}\n"] + [format_detection(d) + "\n" for d in detections])


def write_detection_stream(frames: Iterable[tuple[int, Sequence[ToolDetection2D]]], path) -> None:
    with open(path, "w") as fh:
        for idx, dets in frames:
            fh.write(format_detection_frame(idx, dets))


def _open_text(source) -> tuple[IO[str], str, bool]:
    if isinstance(source, (str, Path)):
        return open(source), str(source), True
    return source, getattr(source, "name", "<stream>"), False


def _blocks(fh: IO[str]) -> Iterator[tuple[int, str, list[tuple[int, str]]]]:
    # (header lineno, header line, body lines); body before any header gets lineno 0
    header, body, start = None, [], 0
    for lineno, line in enumerate(fh, start=1):
        if not line.strip():
            continue
        if line.startswith("F"):
            if header is not None or body:
                yield start, header, body
            header, body, start = line, [], lineno
        else:
            body.append((lineno, line))
    if header is not None or body:
        yield start, header, body


def iter_detection_stream(source) -> Iterator[DetectionFrame | CorruptFrame]:
    """Yield parsed frames; frames with any malformed line come out as CorruptFrame.

    Frame indices must increase; a frame that repeats or goes back in time
    is reported as corrupt.
    """
    fh, name, close = _open_text(source)
    last = None
    try:
        for start, header, body in _blocks(fh):
            if header is None:
                yield CorruptFrame(None, body[0][0], f"{name}:{body[0][0]}: record before any frame header")
                continue
            parts = header.split()
            try:
                if len(parts) != 2 or parts[0] != "F":
                    raise ValueError
                idx = int(parts[1])
            except ValueError:
                yield CorruptFrame(None, start, f"{name}:{start}: malformed frame header {header.strip()!r}")
                continue
            if last is not None and idx <= last:
                yield CorruptFrame(idx, start, f"{name}:{start}: frame {idx} out of order after {last}")
                continue
            last = idx
            try:
                batch = parse_detection_block(body)
            except StreamFormatError as exc:
                yield CorruptFrame(idx, start, f"{name}: {exc}")
            else:
                yield DetectionFrame(idx, batch)
    finally:
        if close:
            fh.close()


def read_detection_stream(source) -> list[DetectionFrame | CorruptFrame]:
    return list(iter_detection_stream(source))


# Ground truth ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GtFrame:
    frame_index: int
    grasper: dict = field(default_factory=dict)  # point name -> (3,)
    beans: tuple = ()
    axis: np.ndarray | None = None


def format_gt_frame(frame_index: int, pose: ToolPose3D | None, beans: Sequence) -> str:
    out = []
    if pose is not None:
        for name in GRASPER_POINTS:
            X = pose.point(name)
            out.append(f"G {frame_index} grasper.{name} {_f(X[0])} {_f(X[1])} {_f(X[2])}\n")
    for X in beans:
        out.append(f"G {frame_index} bean {_f(X[0])} {_f(X[1])} {_f(X[2])}\n")
    if pose is not None:
        u = pose.arm_axis
        out.append(f"A {frame_index} {_f(u[0])} {_f(u[1])} {_f(u[2])}\n")
    return "".join(out)


def read_gt(source) -> dict[int, GtFrame]:
    fh, name, close = _open_text(source)
    grasper, beans, axis = {}, {}, {}
    try:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "G" and len(parts) == 6:
                    idx, token = int(parts[1]), parts[2]
                    X = np.array([float(v) for v in parts[3:6]])
                    if token == BEAN:
                        beans.setdefault(idx, []).append(X)
                    elif token.startswith(GRASPER + ".") and token.split(".", 1)[1] in GRASPER_POINTS:
                        grasper.setdefault(idx, {})[token.split(".", 1)[1]] = X
                    else:
                        raise ValueError(f"unknown point name {token!r}")
                elif parts[0] == "A" and len(parts) == 5:
                    axis[int(parts[1])] = np.array([float(v) for v in parts[2:5]])
                else:
                    raise ValueError(f"malformed record {line.strip()!r}")
            except ValueError as exc:
                raise StreamFormatError(f"{name}:{lineno}: {exc}") from None
    finally:
        if close:
            fh.close()
    frames = sorted(set(grasper) | set(beans) | set(axis))
    return {
        i: GtFrame(i, grasper.get(i, {}), tuple(beans.get(i, ())), axis.get(i)) for i in frames
    }


# Poses -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PoseRecord:
    name: str  # grasper.<point> or bean
    position: np.ndarray
    residual: float
    support: tuple[tuple[int, int, int], ...]  # (view_id, detection index, keypoint index)


@dataclass(frozen=True, eq=False)
class PoseFrame:
    frame_index: int
    flags: tuple[str, ...]
    points: tuple[PoseRecord, ...]
    axis: np.ndarray | None = None

    def grasper_point(self, name: str) -> PoseRecord | None:
        for p in self.points:
            if p.name == f"{GRASPER}.{name}":
                return p
        return None

    @property
    def beans(self) -> list[PoseRecord]:
        return [p for p in self.points if p.name == BEAN]


@dataclass(frozen=True)
class SkipRecord:
    frame_index: int | None
    reason: str


def _support_tokens(support) -> str:
    return " ".join([str(len(support))] + [f"{v}:{d}:{k}" for v, d, k in support])


def format_pose_frame(frame: PoseFrame) -> str:
    i = frame.frame_index
    out = [f"P {i} {','.join(frame.flags) if frame.flags else '-'}\n"]
    for p in frame.points:
        X = p.position
        out.append(
            f"G {i} {p.name} {_f(X[0])} {_f(X[1])} {_f(X[2])} {_f(p.residual)} {_support_tokens(p.support)}\n"
        )
    if frame.axis is not None:
        u = frame.axis
        out.append(f"A {i} {_f(u[0])} {_f(u[1])} {_f(u[2])}\n")
    return "".join(out)


def format_skip(record: SkipRecord) -> str:
    idx = "-" if record.frame_index is None else str(record.frame_index)
    reason = "_".join(record.reason.split()) or "unknown"
    return f"S {idx} {reason}\n"


def read_poses(source) -> list[PoseFrame | SkipRecord]:
    fh, name, close = _open_text(source)
    out: list = []
    cur = None

    def flush():
        if cur is not None:
            out.append(PoseFrame(cur["idx"], cur["flags"], tuple(cur["points"]), cur["axis"]))

    try:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                tag = parts[0]
                if tag == "P" and len(parts) == 3:
                    flush()
                    flags = () if parts[2] == "-" else tuple(parts[2].split(","))
                    cur = {"idx": int(parts[1]), "flags": flags, "points": [], "axis": None}
                elif tag == "S" and len(parts) == 3:
                    flush()
                    cur = None
                    out.append(SkipRecord(None if parts[1] == "-" else int(parts[1]), parts[2]))
                elif tag in ("G", "A"):
                    if cur is None or int(parts[1]) != cur["idx"]:
                        raise ValueError("record outside its frame block")
                    if tag == "A" and len(parts) == 5:
                        cur["axis"] = np.array([float(v) for v in parts[2:5]])
                    elif tag == "G" and len(parts) >= 8:
                        n = int(parts[7])
                        if len(parts) != 8 + n:
                            raise ValueError(f"expected {n} support tokens")
                        support = tuple(tuple(int(c) for c in tok.split(":")) for tok in parts[8:])
                        if any(len(s) != 3 for s in support):
                            raise ValueError("support tokens must be view:det:kp")
                        cur["points"].append(
                            PoseRecord(parts[2], np.array([float(v) for v in parts[3:6]]),
                                       float(parts[6]), support)
                        )
                    else:
                        raise ValueError(f"malformed record {line.strip()!r}")
                else:
                    raise ValueError(f"unknown record {line.strip()!r}")
            except ValueError as exc:
                raise StreamFormatError(f"{name}:{lineno}: {exc}") from None
        flush()
    finally:
        if close:
            fh.close()
    return out


def frames_to_text(frames: Iterable[PoseFrame | SkipRecord]) -> str:
    buf = io.StringIO()
    for f in frames:
        buf.write(format_skip(f) if isinstance(f, SkipRecord) else format_pose_frame(f))
    return buf.getvalue()
