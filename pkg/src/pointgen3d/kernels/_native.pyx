# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled twin of kernels/pure.py; keep the two semantically identical."""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin, sqrt, fabs

cnp.import_array()

cdef double COLLINEAR_EPS = 1e-9


cdef void _bev_corners(const double* box, double* xs, double* ys) noexcept nogil:
    cdef double cx = box[0], cy = box[1], l = box[3], w = box[4], yaw = box[6]
    cdef double c = cos(yaw), s = sin(yaw)
    cdef double sx[4]
    cdef double sy[4]
    cdef int k
    sx[0] = 0.5; sy[0] = 0.5
    sx[1] = -0.5; sy[1] = 0.5
    sx[2] = -0.5; sy[2] = -0.5
    sx[3] = 0.5; sy[3] = -0.5
    for k in range(4):
        xs[k] = cx + c * (sx[k] * l) - s * (sy[k] * w)
        ys[k] = cy + s * (sx[k] * l) + c * (sy[k] * w)


cdef int _clip_halfplane(double* px, double* py, int n,
                         double ax, double ay, double bx, double by,
                         double* qx, double* qy) noexcept nogil:
    cdef double ex = bx - ax, ey = by - ay
    cdef double norm = sqrt(ex * ex + ey * ey)
    cdef int m = 0, i, j
    cdef double dp, dq, t, x0, y0, x1, y1
    if norm == 0.0:
        for i in range(n):
            qx[i] = px[i]; qy[i] = py[i]
        return n
    for i in range(n):
        j = i - 1 if i > 0 else n - 1
        x0 = px[j]; y0 = py[j]
        x1 = px[i]; y1 = py[i]
        dp = (ex * (y0 - ay) - ey * (x0 - ax)) / norm
        dq = (ex * (y1 - ay) - ey * (x1 - ax)) / norm
        if dq >= -COLLINEAR_EPS:
            if dp < -COLLINEAR_EPS:
                t = dp / (dp - dq)
                qx[m] = x0 + t * (x1 - x0); qy[m] = y0 + t * (y1 - y0)
                m += 1
            qx[m] = x1; qy[m] = y1
            m += 1
        elif dp >= -COLLINEAR_EPS:
            t = dp / (dp - dq)
            qx[m] = x0 + t * (x1 - x0); qy[m] = y0 + t * (y1 - y0)
            m += 1
    return m


cdef double _bev_intersection_area(const double* a, const double* b) noexcept nogil:
    cdef double bufx[2][24]
    cdef double bufy[2][24]
    cdef double cbx[4]
    cdef double cby[4]
    cdef int cur = 0, n = 4, i, j
    cdef double acc, ax, ay, bx, by
    _bev_corners(a, bufx[0], bufy[0])
    _bev_corners(b, cbx, cby)
    for i in range(4):
        j = i - 1 if i > 0 else 3
        ax = cbx[j]; ay = cby[j]
        bx = cbx[i]; by = cby[i]
        n = _clip_halfplane(bufx[cur], bufy[cur], n, ax, ay, bx, by,
                            bufx[1 - cur], bufy[1 - cur])
        cur = 1 - cur
        if n == 0:
            return 0.0
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        j = i - 1 if i > 0 else n - 1
        acc += bufx[cur][j] * bufy[cur][i] - bufx[cur][i] * bufy[cur][j]
    return 0.5 * fabs(acc)


cdef bint _pair_reject(const double* a, const double* b) noexcept nogil:
    cdef double dx = a[0] - b[0], dy = a[1] - b[1]
    cdef double ra = 0.5 * sqrt(a[3] * a[3] + a[4] * a[4])
    cdef double rb = 0.5 * sqrt(b[3] * b[3] + b[4] * b[4])
    return dx * dx + dy * dy > (ra + rb) * (ra + rb)


def iou_bev_matrix(boxes_a, boxes_b):
    """Pairwise BEV IoU of rotated boxes: (N, 7) x (M, 7) -> (N, M)."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a = np.ascontiguousarray(boxes_a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] b = np.ascontiguousarray(boxes_b, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, m))
    cdef double area_a, area_b, inter, union
    with nogil:
        for i in range(n):
            area_a = a[i, 3] * a[i, 4]
            for j in range(m):
                if _pair_reject(&a[i, 0], &b[j, 0]):
                    continue
                area_b = b[j, 3] * b[j, 4]
                inter = _bev_intersection_area(&a[i, 0], &b[j, 0])
                if inter > area_a: inter = area_a
                if inter > area_b: inter = area_b
                union = area_a + area_b - inter
                if union > 0.0 and inter > 0.0:
                    out[i, j] = inter / union
    return out


def iou_3d_matrix(boxes_a, boxes_b):
    """Pairwise 3D IoU: BEV intersection area times Z overlap over volume union."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] a = np.ascontiguousarray(boxes_a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] b = np.ascontiguousarray(boxes_b, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.zeros((n, m))
    cdef double vol_a, dz, lo, hi, inter_bev, area_a, area_b, inter, union
    with nogil:
        for i in range(n):
            vol_a = a[i, 3] * a[i, 4] * a[i, 5]
            area_a = a[i, 3] * a[i, 4]
            for j in range(m):
                if _pair_reject(&a[i, 0], &b[j, 0]):
                    continue
                hi = a[i, 2] + 0.5 * a[i, 5]
                if b[j, 2] + 0.5 * b[j, 5] < hi: hi = b[j, 2] + 0.5 * b[j, 5]
                lo = a[i, 2] - 0.5 * a[i, 5]
                if b[j, 2] - 0.5 * b[j, 5] > lo: lo = b[j, 2] - 0.5 * b[j, 5]
                dz = hi - lo
                if dz <= 0.0:
                    continue
                area_b = b[j, 3] * b[j, 4]
                inter_bev = _bev_intersection_area(&a[i, 0], &b[j, 0])
                if inter_bev > area_a: inter_bev = area_a
                if inter_bev > area_b: inter_bev = area_b
                inter = inter_bev * dz
                union = vol_a + b[j, 3] * b[j, 4] * b[j, 5] - inter
                if union > 0.0 and inter > 0.0:
                    out[i, j] = inter / union
    return out


def points_in_boxes_mask(points, boxes):
    """Boolean containment mask (N, M); box boundaries count as inside."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] b = np.ascontiguousarray(boxes, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], m = b.shape[0], i, j
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] out = np.zeros((n, m), dtype=np.uint8)
    cdef double c, s, dx, dy, dz, xc, yc
    with nogil:
        for j in range(m):
            c = cos(b[j, 6]); s = sin(b[j, 6])
            for i in range(n):
                dx = p[i, 0] - b[j, 0]
                dy = p[i, 1] - b[j, 1]
                dz = p[i, 2] - b[j, 2]
                xc = c * dx + s * dy
                yc = -s * dx + c * dy
                if (fabs(xc) <= 0.5 * b[j, 3] and fabs(yc) <= 0.5 * b[j, 4]
                        and fabs(dz) <= 0.5 * b[j, 5]):
                    out[i, j] = 1
    return out.view(bool)


def farthest_point_sampling(coords, k, start_index=0):
    """Greedy max-min sampling over squared Euclidean distance.

    Ties break toward the lowest index; if k >= N all indices are returned
    in selection order.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=2] c = np.ascontiguousarray(coords, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if n == 0:
        raise ValueError("cannot sample from an empty point set")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range for {n} points")
    cdef Py_ssize_t kk = min(<Py_ssize_t> k, n), i, j, best, last
    cdef cnp.ndarray[cnp.int64_t, ndim=1] selected = np.empty(kk, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] dist = np.full(n, np.inf)
    cdef double dx, dy, dz, d, best_d
    selected[0] = start_index
    with nogil:
        for i in range(1, kk):
            last = selected[i - 1]
            for j in range(n):
                dx = c[j, 0] - c[last, 0]
                dy = c[j, 1] - c[last, 1]
                dz = c[j, 2] - c[last, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < dist[j]:
                    dist[j] = d
            dist[last] = -1.0
            best = 0
            best_d = dist[0]
            for j in range(1, n):
                if dist[j] > best_d:
                    best_d = dist[j]
                    best = j
            selected[i] = best
    return selected
