"""Pure numpy implementations of the hot kernels.

Same call signatures and return conventions as the compiled ``_core``
module; used when the extension is unavailable or explicitly disabled.
"""
import numpy as np

NAME = "numpy"


def _rows(P, px):
    # (V, 2, 4) blocks H_i @ M_i
    P = np.asarray(P, dtype=np.float64)
    px = np.asarray(px, dtype=np.float64)
    r0 = P[:, 0, :] - px[:, 0, None] * P[:, 2, :]
    r1 = P[:, 1, :] - px[:, 1, None] * P[:, 2, :]
    return np.stack([r0, r1], axis=1)


def build_system(P, px, weights=None):
    """Stack the 2V x 4 homogeneous triangulation matrix."""
    blocks = _rows(P, px)
    if weights is not None:
        blocks = blocks * np.asarray(weights, dtype=np.float64)[:, None, None]
    return blocks.reshape(-1, 4)


def solve_dlt(P, px, weights=None):
    """Return ``(x, sv)``: unit null vector of G and its singular values (descending)."""
    G = build_system(P, px, weights)
    _, sv, vt = np.linalg.svd(G, full_matrices=False)
    return vt[-1].copy(), sv


def null_vector(A):
    """Right singular vector of ``A`` for its smallest singular value."""
    A = np.asarray(A, dtype=np.float64)
    _, sv, vt = np.linalg.svd(A, full_matrices=False)
    return vt[-1].copy(), sv


def reprojection_errors(P, X, px):
    """Per-view pixel distances and projective depths of world point ``X``."""
    P = np.asarray(P, dtype=np.float64)
    h = P @ np.append(np.asarray(X, dtype=np.float64), 1.0)
    w = h[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = h[:, :2] / w[:, None]
    err = np.hypot(proj[:, 0] - px[:, 0], proj[:, 1] - px[:, 1])
    return err, w


def tip_labeling_scores(P, tips, vis, ref, free_views, prune_tol=-1.0, first_label=-1):
    """Score every tip labeling relative to view ``ref``.

    Labeling ``L`` swaps the tips of ``free_views[f]`` when bit ``f`` of ``L`` is
    set. The score is the sum of the reprojection RMS of the two tip
    groups. A group seen in fewer than two views is unconstrained and adds
    0; a degenerate group makes the score ``inf``.

    ``prune_tol`` and ``first_label`` are accepted for parity with the
    compiled kernel; every labeling is scored exactly here, which satisfies
    the same contract.
    """
    P = np.asarray(P, dtype=np.float64)
    tips = np.asarray(tips, dtype=np.float64)
    vis = np.asarray(vis, dtype=bool)
    free = np.asarray(free_views, dtype=np.intp)
    views = np.concatenate([[ref], free]).astype(np.intp)
    n_free = len(free)
    n_lab = 1 << n_free
    bits = (np.arange(n_lab)[:, None] >> np.arange(n_free)[None, :]) & 1
    swap = np.concatenate([np.zeros((n_lab, 1), dtype=np.intp), bits], axis=1)

    Pv = P[views]
    blocks = np.stack([_rows(Pv, tips[views, 0]), _rows(Pv, tips[views, 1])], axis=1)
    vis_v = vis[views]
    cols = np.arange(len(views))[None, :]
    scores = np.zeros(n_lab)
    for group in (0, 1):
        tip_idx = swap ^ group
        mask = vis_v[cols, tip_idx]
        G = blocks[cols, tip_idx] * mask[:, :, None, None]
        G = G.reshape(n_lab, -1, 4)
        _, _, vt = np.linalg.svd(G, full_matrices=False)
        x = vt[:, -1, :]
        w4 = x[:, 3]
        count = mask.sum(axis=1)
        under = count < 2
        bad = np.abs(w4) < 1e-10
        safe_w = np.where(bad, 1.0, w4)
        X = np.concatenate([x[:, :3] / safe_w[:, None], np.ones((n_lab, 1))], axis=1)
        h = np.einsum("vij,lj->lvi", Pv, X)
        depth = h[:, :, 2]
        bad |= np.any(mask & (depth <= 0), axis=1)
        safe_d = np.where(mask, depth, 1.0)
        obs = tips[views][cols, tip_idx]
        d2 = (h[:, :, 0] / safe_d - obs[:, :, 0]) ** 2 + (h[:, :, 1] / safe_d - obs[:, :, 1]) ** 2
        rms = np.sqrt(np.where(mask, d2, 0.0).sum(axis=1) / np.maximum(count, 1))
        scores += np.where(under, 0.0, np.where(bad, np.inf, rms))
    return scores


def _ray_dirs(R, f, pp, px):
    d_cam = np.concatenate([(px - pp) / f, np.ones((len(px), 1))], axis=1)
    d = np.einsum("vji,vj->vi", R, d_cam)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def axis_normals(R, f, pp, wrist_px, arm_px, tol):
    """Unit normals of the planes spanned by each view's wrist and arm rays.

    Returns ``(N, keep)``; rows whose rays coincide (norm below ``tol``) are
    dropped from ``N`` and flagged False in ``keep``.
    """
    R = np.asarray(R, dtype=np.float64).reshape(-1, 3, 3)
    f, pp = np.asarray(f, dtype=np.float64), np.asarray(pp, dtype=np.float64)
    wrist_px = np.asarray(wrist_px, dtype=np.float64)
    arm_px = np.asarray(arm_px, dtype=np.float64)
    n = np.cross(_ray_dirs(R, f, pp, wrist_px), _ray_dirs(R, f, pp, arm_px))
    norm = np.linalg.norm(n, axis=1)
    keep = norm >= tol
    return n[keep] / norm[keep, None], keep


def axis_sign_votes(u, X, R, t, f, wrist_px, arm_px):
    """Count views whose projected axis direction agrees / disagrees with arm-to-wrist."""
    obs = np.asarray(wrist_px, dtype=np.float64) - np.asarray(arm_px, dtype=np.float64)
    usable = (obs[:, 0] != 0) | (obs[:, 1] != 0)
    xc = np.einsum("vij,j->vi", R, X) + t
    dc = np.einsum("vij,j->vi", R, u)
    z = xc[:, 2]
    usable &= z > 0
    z = np.where(usable, z, 1.0)
    du = f[:, 0] * (dc[:, 0] * z - xc[:, 0] * dc[:, 2]) / z**2
    dv = f[:, 1] * (dc[:, 1] * z - xc[:, 1] * dc[:, 2]) / z**2
    dot = du * obs[:, 0] + dv * obs[:, 1]
    return int(np.sum(usable & (dot > 0))), int(np.sum(usable & (dot < 0)))


def point_distances(P, X, pix):
    """Pixel distance from the projection of ``X`` to every ``pix[v, k]``.

    ``inf`` for every slot of a view that sees ``X`` behind (or at) its
    image plane.
    """
    h = np.asarray(P, dtype=np.float64) @ np.append(np.asarray(X, dtype=np.float64), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = h[:, :2] / h[:, 2:3]
        dist = np.linalg.norm(np.asarray(pix) - proj[:, None, :], axis=2)
    dist[h[:, 2] <= 0] = np.inf
    return dist


def _triangulate(P, px, rank_tol, w_tol):
    x, sv = solve_dlt(P, px)
    if sv[2] <= rank_tol * sv[0] or abs(x[3]) < w_tol:
        return None
    X = x[:3] / x[3]
    err, depth = reprojection_errors(P, X, px)
    if depth.min() <= 0:
        return None
    return X, err


def bean_groups(P, F, pix, free_slots, tau, max_seeds, rank_tol, w_tol):
    """Greedy cross-view grouping of single-point detections.

    ``pix[v, k]`` is slot ``k`` of view ``v``; ``free_slots`` marks filled slots and
    ``F[a, b]`` maps points of view ``a`` to epipolar lines in view ``b``.
    Returns ``(group, ambiguous)`` where ``group[v, k]`` is the index of the
    group using the slot (groups numbered in anchor order) or -1.
    """
    P = np.asarray(P, dtype=np.float64)
    pix = np.asarray(pix, dtype=np.float64)
    free = np.array(free_slots, dtype=bool)
    nv, width = free.shape
    group = np.full((nv, width), -1, dtype=np.intp)
    homog = np.concatenate([pix, np.ones((nv, width, 1))], axis=2)
    n_groups, ambiguous = 0, False

    def solve(members):
        rows = [r for r, _ in members]
        slots = [k for _, k in members]
        return _triangulate(P[rows], pix[rows, slots], rank_tol, w_tol)

    def grow(anchor, seed):
        members = [anchor, seed]
        found = solve(members)
        if found is None or found[1].max() > tau:
            return None
        dist = np.where(free, point_distances(P, found[0], pix), np.inf)
        nearest = np.argmin(dist, axis=1)
        best = dist[np.arange(nv), nearest]
        for r in np.flatnonzero(best <= tau):
            if r != anchor[0] and r != seed[0]:
                members.append((int(r), int(nearest[r])))
        while True:
            found = solve(members)
            if found is None:
                return None
            if found[1].max() <= tau:
                return members, found[0], found[1]
            if len(members) <= 2:
                return None
            members.pop(int(np.argmax(found[1][1:])) + 1)

    for ra in range(nv):
        for ka in range(width):
            if not free[ra, ka]:
                continue
            lines = F[ra] @ homog[ra, ka]
            norm = np.hypot(lines[:, 0], lines[:, 1])
            norm[ra] = np.inf
            with np.errstate(divide="ignore", invalid="ignore"):
                epi = np.abs(np.einsum("vkc,vc->vk", homog, lines)) / norm[:, None]
            cand = free & (epi <= 2.0 * tau)
            cand[ra] = False
            if not cand.any():
                continue
            rows, slots = np.nonzero(cand)
            order = np.lexsort((slots, rows, epi[rows, slots]))
            reachable = 1 + len(set(rows.tolist()))
            best = None
            for o in order[:max_seeds]:
                found = grow((ra, ka), (int(rows[o]), int(slots[o])))
                if found is None:
                    continue
                err = found[2]
                rank = (-len(found[0]), float(np.sqrt(err @ err / len(err))))
                if best is None or rank < best[0]:
                    best = (rank, found)
                if len(found[0]) == reachable:
                    break
            if best is None:
                continue
            members, X, _ = best[1]
            for r, k in members:
                free[r, k] = False
                group[r, k] = n_groups
            n_groups += 1
            rest = np.where(free, point_distances(P, X, pix), np.inf)
            if any(rest[r].min() <= tau for r, _ in members):
                ambiguous = True
    return group, ambiguous
