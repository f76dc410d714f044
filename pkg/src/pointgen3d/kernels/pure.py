"""Reference numpy implementations of the hot geometry/sampling kernels.

The compiled twin in ``_native.pyx`` implements the same four entry points
with identical semantics; ``kernels/__init__.py`` picks one at import time.
Tests assert that both backends agree, so any change here must be mirrored
in the extension.

Box arrays are float64 with columns (cx, cy, cz, l, w, h, yaw).
"""

import numpy as np

# Tolerance for the half-plane inside test during polygon clipping,
# expressed as a signed distance in meters.
COLLINEAR_EPS = 1e-9


def _bev_corners(box):
    """Counterclockwise BEV corners (4, 2) of one box row."""
    cx, cy, _, l, w, _, yaw = box
    c, s = np.cos(yaw), np.sin(yaw)
    out = np.empty((4, 2))
    k = 0
    for sx, sy in ((0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5), (0.5, -0.5)):
        dx, dy = sx * l, sy * w
        out[k, 0] = cx + c * dx - s * dy
        out[k, 1] = cy + s * dx + c * dy
        k += 1
    return out


def _clip_halfplane(poly, ax, ay, bx, by):
    """Clip polygon by the half-plane left of the directed edge a->b."""
    ex, ey = bx - ax, by - ay
    norm = np.hypot(ex, ey)
    if norm == 0.0:
        return poly
    out = []
    n = len(poly)
    for i in range(n):
        px, py = poly[i - 1]
        qx, qy = poly[i]
        dp = (ex * (py - ay) - ey * (px - ax)) / norm
        dq = (ex * (qy - ay) - ey * (qx - ax)) / norm
        if dq >= -COLLINEAR_EPS:
            if dp < -COLLINEAR_EPS:
                t = dp / (dp - dq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
            out.append((qx, qy))
        elif dp >= -COLLINEAR_EPS:
            t = dp / (dp - dq)
            out.append((px + t * (qx - px), py + t * (qy - py)))
    return out


def _polygon_area(poly):
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        px, py = poly[i - 1]
        qx, qy = poly[i]
        acc += px * qy - qx * py
    return 0.5 * abs(acc)


def _bev_intersection_area(box_a, box_b):
    poly = [tuple(p) for p in _bev_corners(box_a)]
    cb = _bev_corners(box_b)
    for i in range(4):
        ax, ay = cb[i - 1]
        bx, by = cb[i]
        poly = _clip_halfplane(poly, ax, ay, bx, by)
        if not poly:
            return 0.0
    return _polygon_area(poly)


def _pair_reject(box_a, box_b):
    # Circumscribed-circle prefilter: skips the clipper for far-apart pairs.
    dx = box_a[0] - box_b[0]
    dy = box_a[1] - box_b[1]
    ra = 0.5 * np.hypot(box_a[3], box_a[4])
    rb = 0.5 * np.hypot(box_b[3], box_b[4])
    return dx * dx + dy * dy > (ra + rb) * (ra + rb)


def iou_bev_matrix(boxes_a, boxes_b):
    """Pairwise BEV IoU of rotated boxes: (N, 7) x (M, 7) -> (N, M)."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64)
    boxes_b = np.asarray(boxes_b, dtype=np.float64)
    out = np.zeros((boxes_a.shape[0], boxes_b.shape[0]))
    for i, a in enumerate(boxes_a):
        area_a = a[3] * a[4]
        for j, b in enumerate(boxes_b):
            if _pair_reject(a, b):
                continue
            inter = _bev_intersection_area(a, b)
            inter = min(inter, area_a, b[3] * b[4])
            union = area_a + b[3] * b[4] - inter
            if union > 0.0 and inter > 0.0:
                out[i, j] = inter / union
    return out


def iou_3d_matrix(boxes_a, boxes_b):
    """Pairwise 3D IoU: BEV intersection area times Z overlap over volume union."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64)
    boxes_b = np.asarray(boxes_b, dtype=np.float64)
    out = np.zeros((boxes_a.shape[0], boxes_b.shape[0]))
    for i, a in enumerate(boxes_a):
        vol_a = a[3] * a[4] * a[5]
        for j, b in enumerate(boxes_b):
            if _pair_reject(a, b):
                continue
            dz = min(a[2] + 0.5 * a[5], b[2] + 0.5 * b[5]) - max(
                a[2] - 0.5 * a[5], b[2] - 0.5 * b[5]
            )
            if dz <= 0.0:
                continue
            inter_bev = _bev_intersection_area(a, b)
            inter_bev = min(inter_bev, a[3] * a[4], b[3] * b[4])
            inter = inter_bev * dz
            union = vol_a + b[3] * b[4] * b[5] - inter
            if union > 0.0 and inter > 0.0:
                out[i, j] = inter / union
    return out


def points_in_boxes_mask(points, boxes):
    """Boolean containment mask (N, M); box boundaries count as inside."""
    points = np.asarray(points, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    out = np.zeros((points.shape[0], boxes.shape[0]), dtype=bool)
    for j, b in enumerate(boxes):
        dx = points[:, 0] - b[0]
        dy = points[:, 1] - b[1]
        dz = points[:, 2] - b[2]
        c, s = np.cos(b[6]), np.sin(b[6])
        xc = c * dx + s * dy
        yc = -s * dx + c * dy
        out[:, j] = (
            (np.abs(xc) <= 0.5 * b[3])
            & (np.abs(yc) <= 0.5 * b[4])
            & (np.abs(dz) <= 0.5 * b[5])
        )
    return out


def farthest_point_sampling(coords, k, start_index=0):
    """Greedy max-min sampling over squared Euclidean distance.

    Ties break toward the lowest index; if k >= N all indices are returned
    in selection order.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if n == 0:
        raise ValueError("cannot sample from an empty point set")
    if not 0 <= start_index < n:
        raise ValueError(f"start_index {start_index} out of range for {n} points")
    k = min(k, n)
    selected = np.empty(k, dtype=np.int64)
    selected[0] = start_index
    dist = np.full(n, np.inf)
    for i in range(1, k):
        last = coords[selected[i - 1]]
        d = coords - last
        np.minimum(dist, d[:, 0] ** 2 + d[:, 1] ** 2 + d[:, 2] ** 2, out=dist)
        dist[selected[i - 1]] = -1.0
        selected[i] = int(np.argmax(dist))
    return selected
