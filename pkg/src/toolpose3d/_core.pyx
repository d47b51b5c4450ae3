# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: DLT null vectors, reprojection errors, tip labeling,
axis normals and bean grouping.

Mirrors ``toolpose3d._fallback``; results agree to rounding.
"""
from libc.math cimport sqrt, fabs, INFINITY
from libc.stdlib cimport malloc, free

import numpy as np

NAME = "cython"

cdef enum:
    MAX_SWEEPS = 60


cdef void _one_sided_jacobi(double* A, Py_ssize_t m, double* V, double* sv) noexcept nogil:
    # Hestenes one-sided Jacobi on an m x 4 row-major matrix (overwritten).
    cdef Py_ssize_t i, p, q, sweep
    cdef int rotated
    cdef double alpha, beta, gamma, zeta, t, c, s, ap, aq
    for i in range(16):
        V[i] = 0.0
    for i in range(4):
        V[i * 5] = 1.0
    for sweep in range(MAX_SWEEPS):
        rotated = 0
        for p in range(3):
            for q in range(p + 1, 4):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    ap = A[i * 4 + p]
                    aq = A[i * 4 + q]
                    alpha += ap * ap
                    beta += aq * aq
                    gamma += ap * aq
                if gamma == 0.0 or fabs(gamma) <= 1e-15 * sqrt(alpha * beta):
                    continue
                rotated = 1
                zeta = (beta - alpha) / (2.0 * gamma)
                if zeta >= 0:
                    t = 1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                else:
                    t = -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                c = 1.0 / sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    ap = A[i * 4 + p]
                    aq = A[i * 4 + q]
                    A[i * 4 + p] = c * ap - s * aq
                    A[i * 4 + q] = s * ap + c * aq
                for i in range(4):
                    ap = V[i * 4 + p]
                    aq = V[i * 4 + q]
                    V[i * 4 + p] = c * ap - s * aq
                    V[i * 4 + q] = s * ap + c * aq
        if not rotated:
            break
    for p in range(4):
        alpha = 0.0
        for i in range(m):
            alpha += A[i * 4 + p] * A[i * 4 + p]
        sv[p] = sqrt(alpha)


cdef void _fill_rows(const double[:, :, ::1] P, Py_ssize_t v, double x, double y,
                     double wt, double* out) noexcept nogil:
    cdef Py_ssize_t j
    for j in range(4):
        out[j] = wt * (P[v, 0, j] - x * P[v, 2, j])
        out[4 + j] = wt * (P[v, 1, j] - y * P[v, 2, j])


cdef tuple _sorted_null(double* V, double* sv):
    order = sorted(range(4), key=lambda k: -sv[k])
    x = np.empty(4)
    s = np.empty(4)
    for n, k in enumerate(order):
        s[n] = sv[k]
    k = order[3]
    for n in range(4):
        x[n] = V[n * 4 + k]
    return x, s


def solve_dlt(P, px, weights=None):
    """Return ``(x, sv)``: unit null vector of G and its singular values (descending)."""
    cdef const double[:, :, ::1] Pm = np.ascontiguousarray(P, dtype=np.float64)
    cdef const double[:, ::1] pm = np.ascontiguousarray(px, dtype=np.float64)
    cdef Py_ssize_t nv = Pm.shape[0], v
    cdef const double[::1] wm
    cdef double* A = <double*> malloc(8 * nv * 4 * sizeof(double))
    cdef double V[16]
    cdef double sv[4]
    cdef double wt
    if A == NULL:
        raise MemoryError()
    try:
        if weights is None:
            for v in range(nv):
                _fill_rows(Pm, v, pm[v, 0], pm[v, 1], 1.0, A + 8 * v)
        else:
            wm = np.ascontiguousarray(weights, dtype=np.float64)
            for v in range(nv):
                _fill_rows(Pm, v, pm[v, 0], pm[v, 1], wm[v], A + 8 * v)
        with nogil:
            _one_sided_jacobi(A, 2 * nv, V, sv)
        return _sorted_null(V, sv)
    finally:
        free(A)


def null_vector(A_in):
    """Right singular vector of an m x 4 matrix for its smallest singular value."""
    a = np.array(A_in, dtype=np.float64, order="C", copy=True)
    if a.ndim != 2 or a.shape[1] != 4:
        raise ValueError("null_vector kernel expects an m x 4 matrix")
    cdef double[:, ::1] am = a
    cdef double V[16]
    cdef double sv[4]
    with nogil:
        _one_sided_jacobi(&am[0, 0], am.shape[0], V, sv)
    return _sorted_null(V, sv)


def reprojection_errors(P, X, px):
    """Per-view pixel distances and projective depths of world point ``X``."""
    cdef const double[:, :, ::1] Pm = np.ascontiguousarray(P, dtype=np.float64)
    cdef const double[::1] Xm = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] pm = np.ascontiguousarray(px, dtype=np.float64)
    cdef Py_ssize_t nv = Pm.shape[0], v
    err = np.empty(nv)
    depth = np.empty(nv)
    cdef double[::1] em = err
    cdef double[::1] dm = depth
    cdef double h0, h1, h2, du, dv
    for v in range(nv):
        h0 = Pm[v, 0, 0] * Xm[0] + Pm[v, 0, 1] * Xm[1] + Pm[v, 0, 2] * Xm[2] + Pm[v, 0, 3]
        h1 = Pm[v, 1, 0] * Xm[0] + Pm[v, 1, 1] * Xm[1] + Pm[v, 1, 2] * Xm[2] + Pm[v, 1, 3]
        h2 = Pm[v, 2, 0] * Xm[0] + Pm[v, 2, 1] * Xm[1] + Pm[v, 2, 2] * Xm[2] + Pm[v, 2, 3]
        dm[v] = h2
        du = h0 / h2 - pm[v, 0]
        dv = h1 / h2 - pm[v, 1]
        em[v] = sqrt(du * du + dv * dv)
    return err, depth


cdef int _solve(double* A, double* b, Py_ssize_t n, double floor, int strict) noexcept nogil:
    # Gaussian elimination with partial pivoting. Pivots below ``floor`` fail
    # when ``strict``, otherwise they are clamped so inverse iteration
    # survives an exactly singular matrix.
    cdef Py_ssize_t i, j, k, piv
    cdef double best, tmp, f
    for k in range(n):
        piv = k
        best = fabs(A[k * n + k])
        for i in range(k + 1, n):
            if fabs(A[i * n + k]) > best:
                best = fabs(A[i * n + k])
                piv = i
        if piv != k:
            for j in range(n):
                tmp = A[k * n + j]
                A[k * n + j] = A[piv * n + j]
                A[piv * n + j] = tmp
            tmp = b[k]
            b[k] = b[piv]
            b[piv] = tmp
        if fabs(A[k * n + k]) < floor:
            if strict:
                return 0
            A[k * n + k] = floor if A[k * n + k] >= 0 else -floor
        for i in range(k + 1, n):
            f = A[i * n + k] / A[k * n + k]
            for j in range(k, n):
                A[i * n + j] -= f * A[k * n + j]
            b[i] -= f * b[k]
    for k in range(n - 1, -1, -1):
        tmp = b[k]
        for j in range(k + 1, n):
            tmp -= A[k * n + j] * b[j]
        b[k] = tmp / A[k * n + k]
    return 1


cdef void _lu(double* A, Py_ssize_t* perm, Py_ssize_t n, double floor) noexcept nogil:
    # In-place LU with partial pivoting; tiny pivots are clamped to ``floor``
    # so an exactly singular Gram still yields a usable inverse iteration.
    cdef Py_ssize_t i, j, k, p
    cdef double best, tmp
    for k in range(n):
        p = k
        best = fabs(A[k * n + k])
        for i in range(k + 1, n):
            if fabs(A[i * n + k]) > best:
                best = fabs(A[i * n + k])
                p = i
        perm[k] = p
        if p != k:
            for j in range(n):
                tmp = A[k * n + j]
                A[k * n + j] = A[p * n + j]
                A[p * n + j] = tmp
        if fabs(A[k * n + k]) < floor:
            A[k * n + k] = floor if A[k * n + k] >= 0 else -floor
        for i in range(k + 1, n):
            A[i * n + k] /= A[k * n + k]
            for j in range(k + 1, n):
                A[i * n + j] -= A[i * n + k] * A[k * n + j]


cdef void _lu_solve(const double* A, const Py_ssize_t* perm, double* b, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j, k
    cdef double tmp
    for k in range(n):
        if perm[k] != k:
            tmp = b[k]
            b[k] = b[perm[k]]
            b[perm[k]] = tmp
    for i in range(1, n):
        for j in range(i):
            b[i] -= A[i * n + j] * b[j]
    for i in range(n - 1, -1, -1):
        for j in range(i + 1, n):
            b[i] -= A[i * n + j] * b[j]
        b[i] /= A[i * n + i]


cdef int _gram_null(const double* S, double* x) noexcept nogil:
    # Smallest eigenvector of a 4x4 PSD Gram matrix: inhomogeneous solve as
    # the starting point, then inverse iteration.
    cdef double A[16]
    cdef double b[4]
    cdef Py_ssize_t piv[4]
    cdef double scale = 0.0, nrm
    cdef Py_ssize_t i, j, it
    for i in range(16):
        if fabs(S[i]) > scale:
            scale = fabs(S[i])
    if scale == 0.0:
        return 0
    for i in range(3):
        for j in range(3):
            A[i * 3 + j] = S[i * 4 + j]
        b[i] = -S[i * 4 + 3]
    if _solve(A, b, 3, 1e-14 * scale, 1):
        x[0] = b[0]
        x[1] = b[1]
        x[2] = b[2]
        x[3] = 1.0
    else:
        x[0] = 0.0
        x[1] = 0.0
        x[2] = 0.0
        x[3] = 1.0
    for i in range(16):
        A[i] = S[i]
    _lu(A, piv, 4, 1e-15 * scale)
    for it in range(2):
        nrm = sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x[3] * x[3])
        for i in range(4):
            x[i] /= nrm
        _lu_solve(A, piv, x, 4)
    nrm = sqrt(x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x[3] * x[3])
    for i in range(4):
        x[i] /= nrm
    return 1


cdef double _group_rms(const double[:, :, ::1] Pm, const double[:, :, ::1] tm,
                      const unsigned char[:, ::1] vm, Py_ssize_t* views, Py_ssize_t n_views,
                      Py_ssize_t lab, Py_ssize_t g, Py_ssize_t count, const double* x) noexcept nogil:
    cdef Py_ssize_t k, v, tip
    cdef double X0, X1, X2, h0, h1, h2, du, dv, ssq = 0.0
    if fabs(x[3]) < 1e-10:
        return INFINITY
    X0 = x[0] / x[3]
    X1 = x[1] / x[3]
    X2 = x[2] / x[3]
    for k in range(n_views):
        tip = g
        if k > 0 and (lab >> (k - 1)) & 1:
            tip = 1 - g
        v = views[k]
        if not vm[v, tip]:
            continue
        h2 = Pm[v, 2, 0] * X0 + Pm[v, 2, 1] * X1 + Pm[v, 2, 2] * X2 + Pm[v, 2, 3]
        if h2 <= 0:
            return INFINITY
        h0 = Pm[v, 0, 0] * X0 + Pm[v, 0, 1] * X1 + Pm[v, 0, 2] * X2 + Pm[v, 0, 3]
        h1 = Pm[v, 1, 0] * X0 + Pm[v, 1, 1] * X1 + Pm[v, 1, 2] * X2 + Pm[v, 1, 3]
        du = h0 / h2 - tm[v, tip, 0]
        dv = h1 / h2 - tm[v, tip, 1]
        ssq += du * du + dv * dv
    return sqrt(ssq / count)


cdef void _half_sums(const double* C, const unsigned char* visk, Py_ssize_t first,
                     Py_ssize_t n, Py_ssize_t g, double* out, Py_ssize_t* counts) noexcept nogil:
    # Gram sums and member counts of group g for every labeling of views
    # first .. first + n - 1 (bit b of the sub-labeling flips view first + b).
    cdef Py_ssize_t sub, b, k, tip, i
    for sub in range(1 << n):
        for i in range(16):
            out[sub * 16 + i] = 0.0
        counts[sub] = 0
        for b in range(n):
            k = first + b
            tip = (1 - g) if (sub >> b) & 1 else g
            if visk[k * 2 + tip]:
                counts[sub] += 1
                for i in range(16):
                    out[sub * 16 + i] += C[(k * 2 + tip) * 16 + i]


cdef double _label_score(const double[:, :, ::1] Pm, const double[:, :, ::1] tm,
                         const unsigned char[:, ::1] vm, Py_ssize_t* views, Py_ssize_t n_views,
                         Py_ssize_t lab, Py_ssize_t n_lo, Py_ssize_t lo_mask,
                         const double* lo_sum, const double* hi_sum,
                         const Py_ssize_t* lo_cnt, const Py_ssize_t* hi_cnt, double bound) noexcept nogil:
    # inf once the running total passes ``bound``
    cdef double S[16]
    cdef double x[4]
    cdef double total = 0.0, rms
    cdef Py_ssize_t g, i, count
    cdef Py_ssize_t lo = lab & lo_mask
    cdef Py_ssize_t hi = lab >> n_lo
    cdef Py_ssize_t n_lo_sub = (<Py_ssize_t> 1) << n_lo
    cdef Py_ssize_t n_hi_sub = (<Py_ssize_t> 1) << (n_views - 1 - n_lo)
    for g in range(2):
        count = lo_cnt[g * n_lo_sub + lo] + hi_cnt[g * n_hi_sub + hi]
        if count < 2:
            continue
        for i in range(16):
            S[i] = lo_sum[(g * n_lo_sub + lo) * 16 + i] + hi_sum[(g * n_hi_sub + hi) * 16 + i]
        if not _gram_null(S, x):
            return INFINITY
        rms = _group_rms(Pm, tm, vm, views, n_views, lab, g, count, x)
        total += rms
        if rms == INFINITY or total > bound:
            return INFINITY
    return total


def tip_labeling_scores(P, tips, vis, Py_ssize_t ref, free_views, double prune_tol=-1.0,
                        Py_ssize_t first_label=-1):
    """Score every tip labeling relative to view ``ref``.

    Labeling ``L`` swaps the tips of ``free_views[f]`` when bit ``f`` of ``L`` is
    set. The score is the sum of the reprojection RMS of the two tip
    groups. A group seen in fewer than two views is unconstrained and adds
    0; a degenerate group makes the score ``inf``.

    With ``prune_tol >= 0`` a labeling whose first group alone already
    exceeds the best total so far by more than ``prune_tol`` is reported as
    ``inf`` without scoring its second group. Every labeling within
    ``prune_tol`` of the minimum keeps its exact score. ``first_label`` is
    scored first so a good guess tightens the pruning bound from the start.
    """
    cdef const double[:, :, ::1] Pm = np.ascontiguousarray(P, dtype=np.float64)
    cdef const double[:, :, ::1] tm = np.ascontiguousarray(tips, dtype=np.float64)
    cdef const unsigned char[:, ::1] vm = np.ascontiguousarray(vis, dtype=np.uint8)
    cdef const Py_ssize_t[::1] fm = np.ascontiguousarray(free_views, dtype=np.intp)
    cdef Py_ssize_t n_free = fm.shape[0]
    cdef Py_ssize_t n_views = n_free + 1
    cdef Py_ssize_t n_lab = (<Py_ssize_t> 1) << n_free
    # free views split into a low half (with the reference) and a high half
    cdef Py_ssize_t n_lo = n_free // 2
    cdef Py_ssize_t n_hi = n_free - n_lo
    cdef Py_ssize_t lo_mask = ((<Py_ssize_t> 1) << n_lo) - 1
    scores = np.empty(n_lab)
    cdef double[::1] sm = scores
    cdef double* C = <double*> malloc(n_views * 2 * 16 * sizeof(double))
    cdef Py_ssize_t* views = <Py_ssize_t*> malloc(n_views * sizeof(Py_ssize_t))
    cdef unsigned char* visk = <unsigned char*> malloc(n_views * 2)
    cdef double* lo_sum = <double*> malloc(2 * ((1 << n_lo) + 1) * 16 * sizeof(double))
    cdef double* hi_sum = <double*> malloc(2 * (1 << n_hi) * 16 * sizeof(double))
    cdef Py_ssize_t* lo_cnt = <Py_ssize_t*> malloc(2 * ((1 << n_lo) + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* hi_cnt = <Py_ssize_t*> malloc(2 * (1 << n_hi) * sizeof(Py_ssize_t))
    cdef double rows[8]
    cdef Py_ssize_t lab, g, k, v, tip, i, j, lo
    cdef double total, best = INFINITY
    cdef bint prune = prune_tol >= 0.0
    cdef Py_ssize_t n_lo_sub = (<Py_ssize_t> 1) << n_lo
    cdef Py_ssize_t n_hi_sub = (<Py_ssize_t> 1) << n_hi
    if (C == NULL or views == NULL or visk == NULL or lo_sum == NULL or hi_sum == NULL
            or lo_cnt == NULL or hi_cnt == NULL):
        free(C); free(views); free(visk); free(lo_sum); free(hi_sum); free(lo_cnt); free(hi_cnt)
        raise MemoryError()
    views[0] = ref
    for k in range(n_free):
        views[k + 1] = fm[k]
    try:
        with nogil:
            for k in range(n_views):
                v = views[k]
                visk[k * 2] = vm[v, 0]
                visk[k * 2 + 1] = vm[v, 1]
                for tip in range(2):
                    _fill_rows(Pm, v, tm[v, tip, 0], tm[v, tip, 1], 1.0, rows)
                    for i in range(4):
                        for j in range(4):
                            C[(k * 2 + tip) * 16 + i * 4 + j] = (
                                rows[i] * rows[j] + rows[4 + i] * rows[4 + j]
                            )
            for g in range(2):
                # low half: reference view (never flipped) plus free views 1 .. n_lo
                _half_sums(C, visk, 1, n_lo, g, lo_sum + g * n_lo_sub * 16, lo_cnt + g * n_lo_sub)
                for lo in range(n_lo_sub):
                    tip = g
                    if visk[tip]:
                        lo_cnt[g * n_lo_sub + lo] += 1
                        for i in range(16):
                            lo_sum[(g * n_lo_sub + lo) * 16 + i] += C[tip * 16 + i]
                _half_sums(C, visk, 1 + n_lo, n_hi, g, hi_sum + g * n_hi_sub * 16, hi_cnt + g * n_hi_sub)
            if 0 <= first_label < n_lab:
                sm[first_label] = _label_score(Pm, tm, vm, views, n_views, first_label, n_lo, lo_mask,
                                               lo_sum, hi_sum, lo_cnt, hi_cnt, INFINITY)
                best = sm[first_label]
            for lab in range(n_lab):
                if lab == first_label:
                    continue
                total = _label_score(Pm, tm, vm, views, n_views, lab, n_lo, lo_mask,
                                     lo_sum, hi_sum, lo_cnt, hi_cnt,
                                     best + prune_tol if prune else INFINITY)
                sm[lab] = total
                if total < best:
                    best = total
    finally:
        free(C); free(views); free(visk); free(lo_sum); free(hi_sum); free(lo_cnt); free(hi_cnt)
    return scores


def axis_normals(R, f, pp, wrist_px, arm_px, double tol):
    """Unit normals of the planes spanned by each view's wrist and arm rays.

    Returns ``(N, keep)``; rows whose rays coincide (norm below ``tol``) are
    dropped from ``N`` and flagged False in ``keep``.
    """
    cdef const double[:, :, ::1] Rm = np.ascontiguousarray(R, dtype=np.float64)
    cdef const double[:, ::1] fm = np.ascontiguousarray(f, dtype=np.float64)
    cdef const double[:, ::1] cm = np.ascontiguousarray(pp, dtype=np.float64)
    cdef const double[:, ::1] wm = np.ascontiguousarray(wrist_px, dtype=np.float64)
    cdef const double[:, ::1] am = np.ascontiguousarray(arm_px, dtype=np.float64)
    cdef Py_ssize_t n = Rm.shape[0], v, i, k = 0
    out = np.empty((n, 3))
    keep = np.zeros(n, dtype=bool)
    cdef double[:, ::1] om = out
    cdef unsigned char[::1] km = keep.view(np.uint8)
    cdef double dw[3]
    cdef double da[3]
    cdef double cw[3]
    cdef double ca[3]
    cdef double nx, ny, nz, nw, na, nrm
    with nogil:
        for v in range(n):
            cw[0] = (wm[v, 0] - cm[v, 0]) / fm[v, 0]
            cw[1] = (wm[v, 1] - cm[v, 1]) / fm[v, 1]
            cw[2] = 1.0
            ca[0] = (am[v, 0] - cm[v, 0]) / fm[v, 0]
            ca[1] = (am[v, 1] - cm[v, 1]) / fm[v, 1]
            ca[2] = 1.0
            for i in range(3):
                dw[i] = Rm[v, 0, i] * cw[0] + Rm[v, 1, i] * cw[1] + Rm[v, 2, i] * cw[2]
                da[i] = Rm[v, 0, i] * ca[0] + Rm[v, 1, i] * ca[1] + Rm[v, 2, i] * ca[2]
            nw = sqrt(dw[0] * dw[0] + dw[1] * dw[1] + dw[2] * dw[2])
            na = sqrt(da[0] * da[0] + da[1] * da[1] + da[2] * da[2])
            nx = (dw[1] * da[2] - dw[2] * da[1]) / (nw * na)
            ny = (dw[2] * da[0] - dw[0] * da[2]) / (nw * na)
            nz = (dw[0] * da[1] - dw[1] * da[0]) / (nw * na)
            nrm = sqrt(nx * nx + ny * ny + nz * nz)
            if nrm < tol:
                continue
            km[v] = 1
            om[k, 0] = nx / nrm
            om[k, 1] = ny / nrm
            om[k, 2] = nz / nrm
            k += 1
    return out[:k], keep


def axis_sign_votes(u, X, R, t, f, wrist_px, arm_px):
    """Count views whose projected axis direction agrees / disagrees with arm-to-wrist."""
    cdef const double[::1] um = np.ascontiguousarray(u, dtype=np.float64)
    cdef const double[::1] xm = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, :, ::1] Rm = np.ascontiguousarray(R, dtype=np.float64)
    cdef const double[:, ::1] tm = np.ascontiguousarray(t, dtype=np.float64)
    cdef const double[:, ::1] fm = np.ascontiguousarray(f, dtype=np.float64)
    cdef const double[:, ::1] wm = np.ascontiguousarray(wrist_px, dtype=np.float64)
    cdef const double[:, ::1] am = np.ascontiguousarray(arm_px, dtype=np.float64)
    cdef Py_ssize_t n = Rm.shape[0], v, i
    cdef int plus = 0, minus = 0
    cdef double xc[3]
    cdef double dc[3]
    cdef double ox, oy, z, du, dv, dot
    with nogil:
        for v in range(n):
            ox = wm[v, 0] - am[v, 0]
            oy = wm[v, 1] - am[v, 1]
            if ox == 0.0 and oy == 0.0:
                continue
            for i in range(3):
                xc[i] = Rm[v, i, 0] * xm[0] + Rm[v, i, 1] * xm[1] + Rm[v, i, 2] * xm[2] + tm[v, i]
                dc[i] = Rm[v, i, 0] * um[0] + Rm[v, i, 1] * um[1] + Rm[v, i, 2] * um[2]
            z = xc[2]
            if z <= 0:
                continue
            du = fm[v, 0] * (dc[0] * z - xc[0] * dc[2]) / (z * z)
            dv = fm[v, 1] * (dc[1] * z - xc[1] * dc[2]) / (z * z)
            dot = du * ox + dv * oy
            if dot > 0:
                plus += 1
            elif dot < 0:
                minus += 1
    return plus, minus


def point_distances(P, X, pix):
    """Pixel distance from the projection of ``X`` to every ``pix[v, k]``.

    ``inf`` for every slot of a view that sees ``X`` behind (or at) its
    image plane.
    """
    cdef const double[:, :, ::1] Pm = np.ascontiguousarray(P, dtype=np.float64)
    cdef const double[::1] xm = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, :, ::1] qm = np.ascontiguousarray(pix, dtype=np.float64)
    cdef Py_ssize_t n = qm.shape[0], w = qm.shape[1], v, k
    out = np.empty((n, w))
    cdef double[:, ::1] om = out
    cdef double h0, h1, h2, du, dv
    with nogil:
        for v in range(n):
            h2 = Pm[v, 2, 0] * xm[0] + Pm[v, 2, 1] * xm[1] + Pm[v, 2, 2] * xm[2] + Pm[v, 2, 3]
            if h2 <= 0:
                for k in range(w):
                    om[v, k] = INFINITY
                continue
            h0 = (Pm[v, 0, 0] * xm[0] + Pm[v, 0, 1] * xm[1] + Pm[v, 0, 2] * xm[2] + Pm[v, 0, 3]) / h2
            h1 = (Pm[v, 1, 0] * xm[0] + Pm[v, 1, 1] * xm[1] + Pm[v, 1, 2] * xm[2] + Pm[v, 1, 3]) / h2
            for k in range(w):
                du = h0 - qm[v, k, 0]
                dv = h1 - qm[v, k, 1]
                om[v, k] = sqrt(du * du + dv * dv)
    return out


cdef int _tri(const double[:, :, ::1] Pm, const double[:, :, ::1] qm, const Py_ssize_t* mr,
              const Py_ssize_t* mk, Py_ssize_t m, double rank_tol, double w_tol,
              double* A, double* X, double* err) noexcept nogil:
    # DLT over members (mr[i], mk[i]); 0 when rank-deficient, at infinity or behind a camera.
    cdef double V[16]
    cdef double sv[4]
    cdef double smax, third, w, h0, h1, h2, du, dv
    cdef Py_ssize_t i, j, imin = 0, r
    for i in range(m):
        _fill_rows(Pm, mr[i], qm[mr[i], mk[i], 0], qm[mr[i], mk[i], 1], 1.0, A + 8 * i)
    _one_sided_jacobi(A, 2 * m, V, sv)
    smax = sv[0]
    for i in range(1, 4):
        if sv[i] < sv[imin]:
            imin = i
        if sv[i] > smax:
            smax = sv[i]
    # third largest = smallest of the three remaining
    third = INFINITY
    for i in range(4):
        if i != imin and sv[i] < third:
            third = sv[i]
    if third <= rank_tol * smax:
        return 0
    w = V[12 + imin]
    if fabs(w) < w_tol:
        return 0
    for j in range(3):
        X[j] = V[j * 4 + imin] / w
    for i in range(m):
        r = mr[i]
        h2 = Pm[r, 2, 0] * X[0] + Pm[r, 2, 1] * X[1] + Pm[r, 2, 2] * X[2] + Pm[r, 2, 3]
        if h2 <= 0:
            return 0
        h0 = Pm[r, 0, 0] * X[0] + Pm[r, 0, 1] * X[1] + Pm[r, 0, 2] * X[2] + Pm[r, 0, 3]
        h1 = Pm[r, 1, 0] * X[0] + Pm[r, 1, 1] * X[1] + Pm[r, 1, 2] * X[2] + Pm[r, 1, 3]
        du = h0 / h2 - qm[r, mk[i], 0]
        dv = h1 / h2 - qm[r, mk[i], 1]
        err[i] = sqrt(du * du + dv * dv)
    return 1


cdef double _nearest(const double[:, :, ::1] Pm, const double[:, :, ::1] qm,
                     const unsigned char* fr, Py_ssize_t width, Py_ssize_t r,
                     const double* X, Py_ssize_t* slot) noexcept nogil:
    # Smallest distance from the projection of X to a free slot of view r.
    cdef double h0, h1, h2, du, dv, d, best = INFINITY
    cdef Py_ssize_t k
    slot[0] = -1
    h2 = Pm[r, 2, 0] * X[0] + Pm[r, 2, 1] * X[1] + Pm[r, 2, 2] * X[2] + Pm[r, 2, 3]
    if h2 <= 0:
        return INFINITY
    h0 = (Pm[r, 0, 0] * X[0] + Pm[r, 0, 1] * X[1] + Pm[r, 0, 2] * X[2] + Pm[r, 0, 3]) / h2
    h1 = (Pm[r, 1, 0] * X[0] + Pm[r, 1, 1] * X[1] + Pm[r, 1, 2] * X[2] + Pm[r, 1, 3]) / h2
    for k in range(width):
        if not fr[r * width + k]:
            continue
        du = h0 - qm[r, k, 0]
        dv = h1 - qm[r, k, 1]
        d = sqrt(du * du + dv * dv)
        if d < best:
            best = d
            slot[0] = k
    return best


cdef Py_ssize_t _grow(const double[:, :, ::1] Pm, const double[:, :, ::1] qm,
                      const unsigned char* fr, Py_ssize_t nv, Py_ssize_t width,
                      Py_ssize_t ra, Py_ssize_t ka, Py_ssize_t rs, Py_ssize_t ks, double tau,
                      double rank_tol, double w_tol, Py_ssize_t* mr, Py_ssize_t* mk,
                      double* A, double* X, double* err) noexcept nogil:
    # Member count of the grown group (0 when rejected); members left in mr/mk.
    cdef Py_ssize_t m = 2, i, r, k, worst
    cdef double d, emax
    mr[0] = ra
    mk[0] = ka
    mr[1] = rs
    mk[1] = ks
    if not _tri(Pm, qm, mr, mk, m, rank_tol, w_tol, A, X, err):
        return 0
    if err[0] > tau or err[1] > tau:
        return 0
    for r in range(nv):
        if r == ra or r == rs:
            continue
        d = _nearest(Pm, qm, fr, width, r, X, &k)
        if d <= tau:
            mr[m] = r
            mk[m] = k
            m += 1
    while True:
        if not _tri(Pm, qm, mr, mk, m, rank_tol, w_tol, A, X, err):
            return 0
        emax = err[0]
        for i in range(1, m):
            if err[i] > emax:
                emax = err[i]
        if emax <= tau:
            return m
        if m <= 2:
            return 0
        worst = 1
        for i in range(2, m):
            if err[i] > err[worst]:
                worst = i
        for i in range(worst, m - 1):
            mr[i] = mr[i + 1]
            mk[i] = mk[i + 1]
        m -= 1


def bean_groups(P, F, pix, free_slots, double tau, Py_ssize_t max_seeds, double rank_tol, double w_tol):
    """Greedy cross-view grouping of single-point detections.

    ``pix[v, k]`` is slot ``k`` of view ``v``; ``free_slots`` marks filled slots and
    ``F[a, b]`` maps points of view ``a`` to epipolar lines in view ``b``.
    Returns ``(group, ambiguous)`` where ``group[v, k]`` is the index of the
    group using the slot (groups numbered in anchor order) or -1.
    """
    cdef const double[:, :, ::1] Pm = np.ascontiguousarray(P, dtype=np.float64)
    cdef const double[:, :, :, ::1] Fm = np.ascontiguousarray(F, dtype=np.float64)
    cdef const double[:, :, ::1] qm = np.ascontiguousarray(pix, dtype=np.float64)
    free_arr = np.array(free_slots, dtype=np.uint8, order="C")
    cdef unsigned char[:, ::1] fm = free_arr
    cdef Py_ssize_t nv = qm.shape[0], width = qm.shape[1]
    group = np.full((nv, width), -1, dtype=np.intp)
    cdef Py_ssize_t[:, ::1] gm = group
    cdef Py_ssize_t n_slots = nv * width
    cdef double* A = <double*> malloc(8 * nv * sizeof(double))
    cdef double* epi = <double*> malloc(n_slots * sizeof(double))
    cdef Py_ssize_t* cand = <Py_ssize_t*> malloc(n_slots * sizeof(Py_ssize_t))
    cdef Py_ssize_t* mr = <Py_ssize_t*> malloc(4 * nv * sizeof(Py_ssize_t))
    cdef unsigned char* seen = <unsigned char*> malloc(nv)
    cdef Py_ssize_t* mk = mr + nv
    cdef Py_ssize_t* br = mr + 2 * nv
    cdef Py_ssize_t* bk = mr + 3 * nv
    cdef double* err = <double*> malloc(nv * sizeof(double))
    cdef double X[3]
    cdef double BX[3]
    cdef double l0, l1, l2, nrm, xa, ya, rms, best_rms, ssq
    cdef Py_ssize_t ra, ka, r, k, i, j, c, n_cand, reachable, m, best_m, n_groups = 0
    cdef Py_ssize_t tmp
    cdef int ambiguous = 0
    cdef unsigned char* fr = &fm[0, 0]
    if A == NULL or epi == NULL or cand == NULL or mr == NULL or seen == NULL or err == NULL:
        free(A); free(epi); free(cand); free(mr); free(seen); free(err)
        raise MemoryError()
    try:
        with nogil:
            for ra in range(nv):
                for ka in range(width):
                    if not fr[ra * width + ka]:
                        continue
                    xa = qm[ra, ka, 0]
                    ya = qm[ra, ka, 1]
                    n_cand = 0
                    for r in range(nv):
                        seen[r] = 0
                        if r == ra:
                            continue
                        l0 = Fm[ra, r, 0, 0] * xa + Fm[ra, r, 0, 1] * ya + Fm[ra, r, 0, 2]
                        l1 = Fm[ra, r, 1, 0] * xa + Fm[ra, r, 1, 1] * ya + Fm[ra, r, 1, 2]
                        l2 = Fm[ra, r, 2, 0] * xa + Fm[ra, r, 2, 1] * ya + Fm[ra, r, 2, 2]
                        nrm = sqrt(l0 * l0 + l1 * l1)
                        for k in range(width):
                            if not fr[r * width + k]:
                                continue
                            epi[r * width + k] = fabs(l0 * qm[r, k, 0] + l1 * qm[r, k, 1] + l2) / nrm
                            if epi[r * width + k] <= 2.0 * tau:
                                cand[n_cand] = r * width + k
                                n_cand += 1
                    if n_cand == 0:
                        continue
                    # insertion sort by (epipolar distance, view, slot); slot ids already ordered
                    for i in range(1, n_cand):
                        tmp = cand[i]
                        j = i - 1
                        while j >= 0 and epi[cand[j]] > epi[tmp]:
                            cand[j + 1] = cand[j]
                            j -= 1
                        cand[j + 1] = tmp
                    reachable = 1
                    for i in range(n_cand):
                        r = cand[i] // width
                        if not seen[r]:
                            seen[r] = 1
                            reachable += 1
                    best_m = 0
                    best_rms = INFINITY
                    for c in range(min(n_cand, max_seeds)):
                        m = _grow(Pm, qm, fr, nv, width, ra, ka, cand[c] // width, cand[c] % width,
                                  tau, rank_tol, w_tol, mr, mk, A, X, err)
                        if m == 0:
                            continue
                        ssq = 0.0
                        for i in range(m):
                            ssq += err[i] * err[i]
                        rms = sqrt(ssq / m)
                        if m > best_m or (m == best_m and rms < best_rms):
                            best_m = m
                            best_rms = rms
                            for i in range(m):
                                br[i] = mr[i]
                                bk[i] = mk[i]
                            BX[0] = X[0]
                            BX[1] = X[1]
                            BX[2] = X[2]
                        if m == reachable:
                            break
                    if best_m == 0:
                        continue
                    for i in range(best_m):
                        fr[br[i] * width + bk[i]] = 0
                        gm[br[i], bk[i]] = n_groups
                    n_groups += 1
                    for i in range(best_m):
                        if _nearest(Pm, qm, fr, width, br[i], BX, &k) <= tau:
                            ambiguous = 1
        return group, bool(ambiguous)
    finally:
        free(A); free(epi); free(cand); free(mr); free(seen); free(err)
