"""Back-projection error, box/keypoint similarity and detection AP metrics.

Back-projection error (BPE) is the mean Euclidean pixel distance between a
reconstructed point re-projected into a view and the 2D detection it was
built from, reported in pixels and as a fraction of image width / height.

Detection metrics follow the COCO protocol: greedy matching in descending
confidence within each (image, class), IoU for boxes and OKS for keypoints,
all-points interpolated AP averaged over thresholds 0.50:0.95.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .camera import Rig
from .errors import ConfigError, UndefinedMetricError
from .types import BEAN, CLASSES, GRASPER, N_KEYPOINTS, Observation2D, ToolDetection2D

DEFAULT_OKS_K = 0.05
THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
PRIMARY_THRESHOLD = 0.5


# Back-projection error ---------------------------------------------------


@dataclass(frozen=True)
class BpeStats:
    bpe_pd: float
    bpe_ppw: float
    bpe_pph: float
    n_points: int

    @classmethod
    def from_pixels(cls, pd: float, n: int, width: int, height: int) -> "BpeStats":
        return cls(pd, pd / width, pd / height, n)


@dataclass(frozen=True)
class BpeReport:
    """Per-class BPE plus two aggregates.

    ``pooled`` averages every (point, view) pair regardless of class;
    ``class_mean`` is the unweighted mean of the per-class values, the way
    a two-row table's average column reads.
    """

    width: int
    height: int
    per_class: Mapping[str, BpeStats]
    pooled: BpeStats
    class_mean: BpeStats
    skipped: int = 0
    squared: bool = False

    @property
    def aggregate(self) -> BpeStats:
        return self.pooled

    def to_text(self) -> str:
        metric = "squared" if self.squared else "euclidean"
        lines = [
            f"# bpe width={self.width} height={self.height} metric={metric}",
            "row n_points bpe_pd bpe_ppw_pct bpe_pph_pct",
        ]
        rows = [(c, self.per_class[c]) for c in sorted(self.per_class)]
        rows += [("pooled", self.pooled), ("class_mean", self.class_mean)]
        for name, s in rows:
            lines.append(
                f"{name} {s.n_points} {s.bpe_pd:.6f} {100 * s.bpe_ppw:.6f} {100 * s.bpe_pph:.6f}"
            )
        lines.append(f"skipped {self.skipped}")
        return "\n".join(lines) + "\n"

    @classmethod
    def average(cls, reports: Sequence["BpeReport"]) -> "BpeReport":
        """Mean of several reports' per-class and aggregate values.

        Point counts are summed, so ``n_points`` keeps the total number of
        pairs behind the averaged row.
        """
        if not reports:
            raise UndefinedMetricError("cannot average zero BPE reports")
        w, h = reports[0].width, reports[0].height

        def mean_stats(items: list[BpeStats]) -> BpeStats:
            if not items:
                return BpeStats(math.nan, math.nan, math.nan, 0)
            pd = float(np.mean([s.bpe_pd for s in items]))
            return BpeStats.from_pixels(pd, sum(s.n_points for s in items), w, h)

        classes = sorted({c for r in reports for c in r.per_class})
        per_class = {
            c: mean_stats([r.per_class[c] for r in reports if r.per_class[c].n_points])
            for c in classes
        }
        return cls(
            w,
            h,
            per_class,
            mean_stats([r.pooled for r in reports if r.pooled.n_points]),
            mean_stats([r.class_mean for r in reports if r.class_mean.n_points]),
            sum(r.skipped for r in reports),
            reports[0].squared,
        )


@dataclass
class BpeAccumulator:
    """Running per-class sums of back-projection distances."""

    width: int
    height: int
    squared: bool = False
    sums: dict = field(default_factory=lambda: defaultdict(float))
    counts: dict = field(default_factory=lambda: defaultdict(int))
    skipped: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")

    def add_distances(self, cls: str, distances) -> None:
        d = np.asarray(distances, dtype=np.float64).ravel()
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise ValueError("distances must be finite and non-negative")
        self.sums[cls] += float(np.sum(d * d if self.squared else d))
        self.counts[cls] += len(d)

    def add_pair(self, cls: str, projected, observed) -> None:
        dx = float(projected[0]) - float(observed[0])
        dy = float(projected[1]) - float(observed[1])
        self.add_distances(cls, [math.hypot(dx, dy)])

    def skip(self, n: int = 1) -> None:
        self.skipped += n

    def merge(self, other: "BpeAccumulator") -> None:
        for c, s in other.sums.items():
            self.sums[c] += s
        for c, n in other.counts.items():
            self.counts[c] += n
        self.skipped += other.skipped

    def report(self) -> BpeReport:
        w, h = self.width, self.height
        per_class = {}
        for c in sorted(set(CLASSES) | set(self.counts)):
            n = self.counts.get(c, 0)
            pd = self.sums[c] / n if n else math.nan
            per_class[c] = BpeStats.from_pixels(pd, n, w, h)
        n_all = sum(self.counts.values())
        pooled = BpeStats.from_pixels(
            sum(self.sums.values()) / n_all if n_all else math.nan, n_all, w, h
        )
        seen = [s for s in per_class.values() if s.n_points]
        mean_pd = float(np.mean([s.bpe_pd for s in seen])) if seen else math.nan
        class_mean = BpeStats.from_pixels(mean_pd, n_all, w, h)
        return BpeReport(w, h, per_class, pooled, class_mean, self.skipped, self.squared)


def _image_size(rig: Rig, width, height) -> tuple[int, int]:
    if width is not None and height is not None:
        return int(width), int(height)
    size = rig.image_size()
    if size is None:
        raise ConfigError("cameras differ in image size; pass width and height explicitly")
    return size


def accumulate_bpe(acc: BpeAccumulator, cls: str, X, observations, rig: Rig) -> None:
    """Add the back-projection distances of one 3D point to ``acc``.

    ``observations`` holds ``Observation2D`` items or ``(view_id, (x, y))``
    pairs. Views that see the point behind the camera are counted as skipped.
    """
    obs = list(observations)
    if not obs:
        raise ValueError("a 3D point needs at least one 2D observation")
    Xh = np.append(np.asarray(X, dtype=np.float64), 1.0)
    dists = []
    for o in obs:
        view_id, px = (o.view_id, o.pixel) if isinstance(o, Observation2D) else o
        h = rig[view_id].projection @ Xh
        if h[2] <= 0:
            acc.skip()
            continue
        dists.append(math.hypot(h[0] / h[2] - float(px[0]), h[1] / h[2] - float(px[1])))
    acc.add_distances(cls, dists)


def back_projection_error(
    points: Iterable[tuple[str, Sequence[float], Iterable]],
    rig: Rig,
    squared: bool = False,
    width: int | None = None,
    height: int | None = None,
) -> BpeReport:
    """BPE over ``(class, X, [(view_id, (x, y)), ...])`` triples.

    With ``squared`` the mean of squared distances is reported instead.
    """
    w, h = _image_size(rig, width, height)
    acc = BpeAccumulator(w, h, squared=squared)
    for cls, X, obs in points:
        accumulate_bpe(acc, cls, X, obs, rig)
    return acc.report()


# Similarity --------------------------------------------------------------


def box_area(b) -> float:
    return max(0.0, float(b[2]) - float(b[0])) * max(0.0, float(b[3]) - float(b[1]))


def iou(a, b, return_flag: bool = False):
    """Intersection over union of two ``(xmin, ymin, xmax, ymax)`` boxes.

    A zero-area box gives 0; with ``return_flag`` the result is
    ``(value, degenerate)``.
    """
    degenerate = box_area(a) == 0.0 or box_area(b) == 0.0
    if degenerate:
        value = 0.0
    else:
        iw = min(a[2], b[2]) - max(a[0], b[0])
        ih = min(a[3], b[3]) - max(a[1], b[1])
        inter = max(0.0, iw) * max(0.0, ih)
        value = inter / (box_area(a) + box_area(b) - inter)
    return (value, degenerate) if return_flag else value


@dataclass(frozen=True)
class OksParams:
    """Per-keypoint falloff constants; a keypoint counts when ``visibility > min_visibility``."""

    k: tuple[float, ...]
    min_visibility: int = 0

    def __post_init__(self):
        k = tuple(float(v) for v in self.k)
        if not k or any(not v > 0 for v in k):
            raise ConfigError(f"OKS constants must be positive, got {k}")
        object.__setattr__(self, "k", k)

    @classmethod
    def for_class(cls, name: str, k: float = DEFAULT_OKS_K) -> "OksParams":
        return cls((k,) * N_KEYPOINTS[name])


def oks(pred, gt, gt_vis, gt_bbox, params: OksParams) -> float:
    """Object keypoint similarity of predicted vs ground-truth keypoints.

    ``pred`` and ``gt`` are ``(n, 2)`` pixel arrays; the scale is the square
    root of the ground-truth box area.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    vis = np.asarray(gt_vis).ravel() > params.min_visibility
    if len(pred) != len(gt) or len(gt) != len(vis) or len(params.k) != len(gt):
        raise ValueError(
            f"keypoint counts differ: pred {len(pred)}, gt {len(gt)}, "
            f"visibility {len(vis)}, constants {len(params.k)}"
        )
    if not vis.any():
        raise UndefinedMetricError("OKS is undefined with no labeled keypoints")
    s2 = box_area(gt_bbox)
    if s2 <= 0:
        raise UndefinedMetricError("OKS is undefined for a zero-area ground-truth box")
    d2 = np.sum((pred - gt) ** 2, axis=1)
    k = np.asarray(params.k)
    e = np.exp(-d2 / (2.0 * s2 * k * k))
    return float(np.sum(e[vis]) / np.count_nonzero(vis))


def detection_oks(pred: ToolDetection2D, gt: ToolDetection2D, params: OksParams | None = None) -> float:
    params = params or OksParams.for_class(gt.cls)
    return oks(
        [(k.x, k.y) for k in pred.keypoints],
        [(k.x, k.y) for k in gt.keypoints],
        [k.visibility for k in gt.keypoints],
        gt.bbox,
        params,
    )


# Matching ----------------------------------------------------------------

Item = tuple[Hashable, ToolDetection2D]  # (image key, detection)


@dataclass(frozen=True)
class MatchResult:
    precision: float
    recall: float
    tp: int
    fp: int
    n_gt: int
    pairs: tuple[tuple[int, int, float], ...]  # (pred index, gt index, similarity)
    recall_defined: bool = True


def _sim(mode: str, p: ToolDetection2D, g: ToolDetection2D, oks_params) -> float:
    if mode == "iou":
        return iou(p.bbox, g.bbox)
    params = (oks_params or {}).get(g.cls) if isinstance(oks_params, Mapping) else oks_params
    return detection_oks(p, g, params)


def _eligible_gts(gts: Sequence[Item], mode: str) -> list[int]:
    if mode == "iou":
        return list(range(len(gts)))
    # keypoint similarity needs at least one labeled keypoint on the gt
    return [i for i, (_, g) in enumerate(gts) if any(k.visibility > 0 for k in g.keypoints)]


def _check_mode(mode: str) -> str:
    mode = mode.lower()
    if mode not in ("iou", "oks"):
        raise ConfigError(f"unknown matching mode {mode!r}; expected 'iou' or 'oks'")
    return mode


def _score_order(preds: Sequence[Item]) -> list[int]:
    # stable: equal confidences keep input order
    return sorted(range(len(preds)), key=lambda i: -preds[i][1].score)


def _similarities(preds, gts, mode, oks_params, gt_ids):
    by_key = defaultdict(list)
    for j in gt_ids:
        img, g = gts[j]
        by_key[(img, g.cls)].append(j)
    sims = {}
    for i, (img, p) in enumerate(preds):
        for j in by_key.get((img, p.cls), ()):
            sims[i, j] = _sim(mode, p, gts[j][1], oks_params)
    return sims, by_key


def _greedy(preds, gts, thresholds, mode, oks_params):
    """TP flags per threshold for predictions in score order."""
    gt_ids = _eligible_gts(gts, mode)
    sims, by_key = _similarities(preds, gts, mode, oks_params, gt_ids)
    order = _score_order(preds)
    out = {}
    for thr in thresholds:
        taken = set()
        flags, pairs = [], []
        for i in order:
            img, p = preds[i]
            best, best_j = -1.0, None
            for j in by_key.get((img, p.cls), ()):
                if j in taken:
                    continue
                s = sims[i, j]
                if s >= thr and s > best:
                    best, best_j = s, j
            if best_j is None:
                flags.append(False)
            else:
                taken.add(best_j)
                flags.append(True)
                pairs.append((i, best_j, best))
        out[thr] = (order, flags, pairs)
    return out, len(gt_ids)


def match_and_score(
    preds: Sequence[Item],
    gts: Sequence[Item],
    threshold: float = PRIMARY_THRESHOLD,
    mode: str = "iou",
    oks_params=None,
) -> MatchResult:
    """Greedy single-match evaluation at one similarity threshold.

    Predictions are visited in descending confidence and each takes the
    most similar unmatched gt of the same image and class whose similarity
    is at least ``threshold``.
    """
    mode = _check_mode(mode)
    preds, gts = list(preds), list(gts)
    res, n_gt = _greedy(preds, gts, [threshold], mode, oks_params)
    _, flags, pairs = res[threshold]
    tp = sum(flags)
    fp = len(flags) - tp
    precision = tp / len(flags) if flags else (1.0 if n_gt == 0 else 0.0)
    if n_gt == 0:
        return MatchResult(precision if flags else math.nan, math.nan, tp, fp, 0, tuple(pairs), False)
    return MatchResult(precision, tp / n_gt, tp, fp, n_gt, tuple(pairs))


def average_precision(tp_flags: Sequence[bool], n_gt: int) -> float:
    """All-points interpolated area under the precision-recall curve."""
    if n_gt <= 0:
        raise UndefinedMetricError("average precision needs at least one ground truth")
    flags = np.asarray(tp_flags, dtype=bool)
    if len(flags) == 0:
        return 0.0
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, len(flags) + 1)
    recall = tp / n_gt
    # precision envelope, then sum over the recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


@dataclass(frozen=True)
class ClassEval:
    precision: float
    recall: float
    map50: float
    map50_95: float
    n_gt: int
    n_pred: int
    ap: Mapping[float, float]


@dataclass(frozen=True)
class EvalReport:
    """Detection (``OD``, IoU) or pose (``PE``, OKS) evaluation summary."""

    task: str
    precision: float
    recall: float
    map50: float
    map50_95: float
    per_class: Mapping[str, ClassEval]
    pr_points: tuple[tuple[float, float, float], ...]  # (threshold, precision, recall)
    defined: bool = True

    def to_text(self) -> str:
        lines = [
            f"# eval task={self.task} thresholds=0.50:0.95:0.05",
            "row n_gt n_pred precision recall map50 map50_95",
        ]
        for c in sorted(self.per_class):
            e = self.per_class[c]
            lines.append(
                f"{c} {e.n_gt} {e.n_pred} {e.precision:.6f} {e.recall:.6f} {e.map50:.6f} {e.map50_95:.6f}"
            )
        n_gt = sum(e.n_gt for e in self.per_class.values())
        n_pred = sum(e.n_pred for e in self.per_class.values())
        lines.append(
            f"all {n_gt} {n_pred} {self.precision:.6f} {self.recall:.6f} {self.map50:.6f} {self.map50_95:.6f}"
        )
        for thr, p, r in self.pr_points:
            lines.append(f"pr {thr:.2f} {p:.6f} {r:.6f}")
        return "\n".join(lines) + "\n"


def mean_average_precision(
    preds: Sequence[Item], gts: Sequence[Item], mode: str = "iou", oks_params=None
) -> tuple[float, float]:
    """``(map50, map50_95)`` averaged over classes that have ground truth."""
    report = evaluate_detections(preds, gts, mode, oks_params)
    if not report.defined:
        raise UndefinedMetricError("mAP is undefined without ground truth")
    return report.map50, report.map50_95


def evaluate_detections(
    preds: Sequence[Item], gts: Sequence[Item], mode: str = "iou", oks_params=None
) -> EvalReport:
    mode = _check_mode(mode)
    preds, gts = list(preds), list(gts)
    per_class = {}
    pooled = {thr: [0, 0, 0] for thr in THRESHOLDS}  # tp, n_pred, n_gt
    for cls in sorted({d.cls for _, d in gts} | {d.cls for _, d in preds}):
        cp = [x for x in preds if x[1].cls == cls]
        cg = [x for x in gts if x[1].cls == cls]
        res, n_gt = _greedy(cp, cg, THRESHOLDS, mode, oks_params)
        ap = {}
        for thr in THRESHOLDS:
            _, flags, _ = res[thr]
            pooled[thr][0] += sum(flags)
            pooled[thr][1] += len(flags)
            pooled[thr][2] += n_gt
            if n_gt:
                ap[thr] = average_precision(flags, n_gt)
        if not n_gt:
            continue
        flags = res[PRIMARY_THRESHOLD][1]
        tp = sum(flags)
        per_class[cls] = ClassEval(
            tp / len(flags) if flags else 0.0,
            tp / n_gt,
            ap[PRIMARY_THRESHOLD],
            float(np.mean([ap[t] for t in THRESHOLDS])),
            n_gt,
            len(cp),
            ap,
        )
    task = "OD" if mode == "iou" else "PE"
    pr_points = tuple(
        (thr, tp / n_pred if n_pred else 0.0, tp / n_gt if n_gt else math.nan)
        for thr, (tp, n_pred, n_gt) in pooled.items()
    )
    if not per_class:
        nan = math.nan
        return EvalReport(task, nan, nan, nan, nan, {}, pr_points, defined=False)
    _, p50, r50 = pr_points[0]
    return EvalReport(
        task,
        p50,
        r50,
        float(np.mean([e.map50 for e in per_class.values()])),
        float(np.mean([e.map50_95 for e in per_class.values()])),
        per_class,
        pr_points,
    )


__all__ = [
    "BEAN",
    "GRASPER",
    "THRESHOLDS",
    "BpeAccumulator",
    "BpeReport",
    "BpeStats",
    "ClassEval",
    "EvalReport",
    "MatchResult",
    "OksParams",
    "accumulate_bpe",
    "average_precision",
    "back_projection_error",
    "box_area",
    "detection_oks",
    "evaluate_detections",
    "iou",
    "match_and_score",
    "mean_average_precision",
    "oks",
]
