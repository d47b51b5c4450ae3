"""Frame pipeline with per-stage timing, and the view-count ablation runner.

Each frame goes through four timed stages: ``read`` (pull and parse the
next frame from the source), ``detect_source`` (produce detections; a
pass-through for recorded streams, rendering for the simulator),
``reconstruct`` (grasper and beans) and ``emit`` (format and write).
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .camera import Rig
from .errors import ConfigError, DegenerateGeometryError, InsufficientViewsError
from .metrics import BpeAccumulator, BpeReport
from .reconstruction import (
    DEFAULT_TAU_EPI,
    SmootherState,
    grasper_rows,
    reconstruct_beans,
    reconstruct_grasper,
)
from .simulator import DEFAULT_BEANS, MotionScript, NoiseModel, render_detections, trajectory
from .streams import (
    GRASPER_POINTS,
    CorruptFrame,
    DetectionFrame,
    PoseFrame,
    PoseRecord,
    SkipRecord,
    format_pose_frame,
    format_skip,
    iter_detection_stream,
)
from .types import BEAN, GRASPER, DetectionBatch, ToolDetection2D, as_batch

log = logging.getLogger(__name__)

STAGES = ("read", "detect_source", "reconstruct", "emit")


@dataclass(frozen=True)
class PipelineOptions:
    alpha: float = 0.0
    tau_epi: float = DEFAULT_TAU_EPI

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.tau_epi > 0:
            raise ConfigError(f"tau_epi must be positive, got {self.tau_epi}")


# Sources -----------------------------------------------------------------


class StreamSource:
    """Recorded detection stream; parsing is part of the read stage."""

    def __init__(self, path):
        self.path = path

    def __iter__(self) -> Iterator[DetectionFrame | CorruptFrame]:
        return iter_detection_stream(self.path)

    def detect(self, item):
        return item


class FrameListSource:
    """Already-parsed frames, e.g. from ``read_detection_stream``."""

    def __init__(self, frames: Iterable[DetectionFrame | CorruptFrame]):
        self.frames = list(frames)

    def __iter__(self):
        return iter(self.frames)

    def detect(self, item):
        return item


class SimulatorSource:
    """Renders detections on demand; rendering is the detect_source stage."""

    def __init__(self, rig: Rig, n_frames: int, noise: NoiseModel = NoiseModel(),
                 script: MotionScript = MotionScript(), beans=DEFAULT_BEANS, start: int = 0):
        self.rig, self.n_frames, self.noise = rig, n_frames, noise
        self.script, self.beans, self.start = script, beans, start

    def __iter__(self):
        return iter(range(self.start, self.start + self.n_frames))

    def detect(self, t: int) -> DetectionFrame:
        frame = render_detections(trajectory(t, self.script), self.beans, self.rig, self.noise, t)
        return DetectionFrame.of(t, frame.all_detections())


# Timing ------------------------------------------------------------------


@dataclass(frozen=True)
class FrameTiming:
    frame_index: int | None
    stages: dict  # stage -> ms

    @property
    def total(self) -> float:
        return sum(self.stages.values())


@dataclass
class TimingReport:
    frames: list = field(default_factory=list)

    def mean(self, stage: str) -> float:
        if not self.frames:
            return math.nan
        return float(np.mean([f.stages[stage] for f in self.frames]))

    @property
    def aggregate(self) -> dict:
        return {s: self.mean(s) for s in STAGES}

    @property
    def total(self) -> float:
        if not self.frames:
            return math.nan
        return float(np.mean([f.total for f in self.frames]))

    def to_json(self) -> str:
        doc = {
            "unit": "ms",
            "frames": len(self.frames),
            "mean": self.aggregate,
            "total_mean": self.total,
            "per_frame": [
                {"frame": f.frame_index, **f.stages, "total": f.total} for f in self.frames
            ],
        }
        return json.dumps(doc, indent=1) + "\n"


# Reconstruction of one frame ---------------------------------------------


def check_views(dets, rig: Rig) -> None:
    batch = as_batch(dets)
    index = rig.arrays.index
    for v in np.unique(batch.view_id).tolist():
        if v not in index:
            raise ConfigError(f"detection references view {v}, not in rig {list(rig.ids)}")


def reconstruct_frame(
    frame_index: int,
    dets: DetectionBatch | Sequence[ToolDetection2D],
    rig: Rig,
    smoother: SmootherState | None = None,
    tau_epi: float = DEFAULT_TAU_EPI,
) -> PoseFrame:
    """Reconstruct the grasper and beans of one frame as a pose-stream frame.

    Points that could not be solved are left out and named in the flags.
    """
    batch = as_batch(dets)
    flags = set()
    records = []
    axis = None
    rows = grasper_rows(batch)
    if len(rows):
        det_index = dict(zip(batch.view_id[rows].tolist(), rows.tolist()))
        try:
            pose = reconstruct_grasper(batch, rig, smoother)
        except (InsufficientViewsError, DegenerateGeometryError) as exc:
            flags.add("grasper_unavailable")
            log.debug("frame %s: grasper not reconstructed: %s", frame_index, exc)
        else:
            flags |= set(pose.flags)
            for name in GRASPER_POINTS:
                if not pose.valid.get(name):
                    flags.add(f"{name}_unavailable")
                    continue
                support = tuple((v, det_index[v], k) for v, k in pose.support[name])
                records.append(
                    PoseRecord(f"{GRASPER}.{name}", pose.point(name), pose.residuals[name], support)
                )
            if pose.valid.get("arm_axis"):
                axis = pose.arm_axis
    beans = reconstruct_beans(batch, rig, tau_epi)
    if beans.ambiguous:
        flags.add("beans_ambiguous")
    for b in beans.points:
        records.append(PoseRecord(BEAN, b.position, b.residual, tuple((v, i, 0) for v, i in b.members)))
    return PoseFrame(frame_index, tuple(sorted(flags)), tuple(records), axis)


def accumulate_frame_bpe(acc: BpeAccumulator, frame: PoseFrame, dets, rig: Rig) -> None:
    """Add the back-projection distances of every supported point of ``frame``."""
    batch = as_batch(dets)
    for rec in frame.points:
        cls = GRASPER if rec.name.startswith(GRASPER) else BEAN
        if not rec.support:
            continue
        sup = np.array(rec.support, dtype=np.intp).reshape(-1, 3)
        v, d, k = sup[:, 0], sup[:, 1], sup[:, 2]
        ok = (d >= 0) & (d < len(batch)) & (k >= 0) & (k < batch.kp.shape[1])
        if not ok.all() or np.any(batch.view_id[d] != v):
            raise ConfigError(f"frame {frame.frame_index}: support tokens do not match the detections")
        h = rig.arrays.projection[rig.arrays.rows(v.tolist())] @ np.append(rec.position, 1.0)
        front = h[:, 2] > 0
        acc.skip(int(np.count_nonzero(~front)))
        proj = h[front, :2] / h[front, 2:3]
        obs = batch.kp[d[front], k[front]]
        acc.add_distances(cls, np.hypot(proj[:, 0] - obs[:, 0], proj[:, 1] - obs[:, 1]))


# Pipeline ----------------------------------------------------------------


@dataclass
class PipelineResult:
    frames: list  # PoseFrame | SkipRecord, in input order
    timing: TimingReport
    skipped: int = 0

    @property
    def poses(self) -> list[PoseFrame]:
        return [f for f in self.frames if isinstance(f, PoseFrame)]


def run_pipeline(source, rig: Rig, options: PipelineOptions = PipelineOptions(),
                 sink: IO[str] | None = None) -> PipelineResult:
    """Run every frame of ``source`` through reconstruction.

    Corrupt frames become skip records and are counted; a detection that
    names a view missing from the rig is a fatal configuration error.
    """
    smoother = SmootherState(options.alpha) if options.alpha > 0 else None
    timing = TimingReport()
    out, skipped = [], 0
    clock = time.perf_counter
    it = iter(source)
    while True:
        t0 = clock()
        try:
            item = next(it)
        except StopIteration:
            break
        t1 = clock()
        frame = source.detect(item)
        t2 = clock()
        if isinstance(frame, CorruptFrame):
            log.warning("skipping corrupt frame: %s", frame.message)
            skipped += 1
            result = SkipRecord(frame.frame_index, "corrupt")
            t3 = clock()
            text = format_skip(result)
        else:
            check_views(frame.batch, rig)
            result = reconstruct_frame(frame.frame_index, frame.batch, rig, smoother, options.tau_epi)
            t3 = clock()
            text = format_pose_frame(result)
        if sink is not None:
            sink.write(text)
        t4 = clock()
        out.append(result)
        ms = 1e3
        timing.frames.append(
            FrameTiming(
                result.frame_index,
                {"read": (t1 - t0) * ms, "detect_source": (t2 - t1) * ms,
                 "reconstruct": (t3 - t2) * ms, "emit": (t4 - t3) * ms},
            )
        )
    return PipelineResult(out, timing, skipped)


# Ablation ----------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    k: int
    n_subsets: int
    report: BpeReport


@dataclass(frozen=True)
class AblationTable:
    n_views: int
    n_frames: int
    rows: tuple[AblationRow, ...]
    evaluations: dict  # k -> subset reconstructions actually run

    def row(self, k: int) -> AblationRow:
        for r in self.rows:
            if r.k == k:
                return r
        raise KeyError(k)

    def to_text(self) -> str:
        lines = [
            f"# ablation views={self.n_views} frames={self.n_frames}",
            "k subsets row n_points bpe_pd bpe_ppw_pct bpe_pph_pct",
        ]
        for r in self.rows:
            rep = r.report
            items = [(c, rep.per_class[c]) for c in sorted(rep.per_class)]
            items += [("class_mean", rep.class_mean), ("pooled", rep.pooled)]
            for name, s in items:
                lines.append(
                    f"{r.k} {r.n_subsets} {name} {s.n_points} {s.bpe_pd:.6f} "
                    f"{100 * s.bpe_ppw:.6f} {100 * s.bpe_pph:.6f}"
                )
        return "\n".join(lines) + "\n"


def ablate_views(frames: Iterable[DetectionFrame | CorruptFrame], rig: Rig, k_min: int = 2,
                 k_max: int | None = None, options: PipelineOptions = PipelineOptions()) -> AblationTable:
    """Average BPE over every camera subset of each size in ``[k_min, k_max]``.

    Each subset re-runs reconstruction on detections from its own views
    only and measures BPE against those same detections.
    """
    frames = [f for f in frames if isinstance(f, DetectionFrame)]
    ids = sorted(rig.ids)
    k_max = len(ids) if k_max is None else k_max
    if k_min < 2:
        raise ConfigError(f"view subsets need k >= 2, got k_min={k_min}")
    if k_max > len(ids) or k_max < k_min:
        raise ConfigError(f"k range [{k_min}, {k_max}] invalid for a {len(ids)}-camera rig")
    size = rig.image_size()
    if size is None:
        raise ConfigError("ablation needs cameras with a common image size")
    for f in frames:
        check_views(f.batch, rig)
    rows, evaluations = [], {}
    for k in range(k_min, k_max + 1):
        reports = []
        for subset in combinations(ids, k):
            sub = rig.subset(subset)
            smoother = SmootherState(options.alpha) if options.alpha > 0 else None
            acc = BpeAccumulator(*size)
            for f in frames:
                dets = f.batch.select(np.flatnonzero(np.isin(f.batch.view_id, subset)))
                pose = reconstruct_frame(f.frame_index, dets, sub, smoother, options.tau_epi)
                accumulate_frame_bpe(acc, pose, dets, sub)
            reports.append(acc.report())
            evaluations[k] = evaluations.get(k, 0) + 1
        rows.append(AblationRow(k, len(reports), BpeReport.average(reports)))
    return AblationTable(len(ids), len(frames), tuple(rows), evaluations)
