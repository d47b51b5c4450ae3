"""Brute-force reference implementations shared by the metric tests."""
import itertools
import math

from toolpose3d.types import BEAN, GRASPER, Keypoint, ToolDetection2D

def iou_raster(a, b):
    """IoU by counting unit cells of integer-aligned boxes."""
    def cells(box):
        x0, y0, x1, y1 = (int(v) for v in box)
        return {(x, y) for x in range(x0, x1) for y in range(y0, y1)}

    ca, cb = cells(a), cells(b)
    if not ca or not cb:
        return 0.0
    return len(ca & cb) / len(ca | cb)


def oks_loop(pred, gt, vis, area, k):
    num, den = 0.0, 0
    for (px, py), (gx, gy), v, kk in zip(pred, gt, vis, k):
        if v > 0:
            num += math.exp(-((px - gx) ** 2 + (py - gy) ** 2) / (2.0 * area * kk * kk))
            den += 1
    return num / den


def greedy_oracle(scores, sim, thr):
    """Visit predictions by descending score; each takes the best free gt with sim >= thr.

    ``sim[i][j]`` is None when prediction i and gt j may not match.
    """
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    taken, flags = [False] * (len(sim[0]) if sim else 0), []
    for i in order:
        best, pick = None, None
        for j, s in enumerate(sim[i]):
            if s is None or taken[j] or s < thr:
                continue
            if best is None or s > best:
                best, pick = s, j
        if pick is None:
            flags.append(False)
        else:
            taken[pick] = True
            flags.append(True)
    return flags


def ap_oracle(flags, n_gt):
    """Sum over recall levels m / n_gt of the best precision reaching that recall."""
    prec, rec, tp = [], [], 0
    for n, f in enumerate(flags, 1):
        tp += f
        prec.append(tp / n)
        rec.append(tp / n_gt)
    total = 0.0
    for m in range(1, n_gt + 1):
        reach = [p for p, r in zip(prec, rec) if r >= m / n_gt - 1e-12]
        total += max(reach) / n_gt if reach else 0.0
    return total


def det(view, box, score=1.0, cls=BEAN, kps=None):
    if kps is None:
        kps = [((box[0] + box[2]) / 2, (box[1] + box[3]) / 2)] * (4 if cls == GRASPER else 1)
    return ToolDetection2D(view, cls, box, tuple(Keypoint(x, y) for x, y in kps), score)


POOL = [(0, 0, 4, 4), (1, 1, 5, 5), (6, 0, 9, 3)]


def exhaustive_instances():
    """Every gt multiset and prediction sequence of up to four boxes drawn from POOL."""
    gt_sets = [c for n in range(5) for c in itertools.combinations_with_replacement(range(3), n)]
    pred_seqs = [p for n in range(5) for p in itertools.product(range(3), repeat=n)]
    for g in gt_sets:
        for p in pred_seqs:
            yield p, g
