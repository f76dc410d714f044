"""Oriented-box geometry: corners, canonical transforms, containment, IoU.

Boxes live in the LiDAR world frame (X forward, Y left, Z up) and rotate
about Z. Batched operations use float64 arrays with columns
(cx, cy, cz, l, w, h, yaw); the hot pairwise kernels are delegated to
``pointgen3d.kernels``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

# Corner enumeration: bit 2 -> x sign, bit 1 -> y sign, bit 0 -> z sign,
# with + before -. Corner 0 is (+l/2, +w/2, +h/2) in the box frame.
CORNER_SIGNS = np.array(
    [
        [+1, +1, +1],
        [+1, +1, -1],
        [+1, -1, +1],
        [+1, -1, -1],
        [-1, +1, +1],
        [-1, +1, -1],
        [-1, -1, +1],
        [-1, -1, -1],
    ],
    dtype=np.float64,
)


def wrap_angle(angle):
    """Wrap an angle (scalar or array) to [-pi, pi)."""
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D bounding box: center, extents, yaw about world Z."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got {self.dims}")
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz], dtype=np.float64)

    @property
    def dims(self) -> tuple:
        return (self.l, self.w, self.h)

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr) -> "Box3D":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(*arr[:7])


@dataclass(frozen=True)
class CanonicalPoint:
    """Point in a box-local frame plus its pre-transform world depth."""

    xc: float
    yc: float
    zc: float
    d: float


def boxes_to_array(boxes) -> np.ndarray:
    """Stack Box3D instances into an (N, 7) float64 array."""
    if len(boxes) == 0:
        return np.zeros((0, 7), dtype=np.float64)
    return np.stack([b.to_array() for b in boxes])


def array_to_boxes(arr) -> list:
    return [Box3D.from_array(row) for row in np.asarray(arr)]


def _rotation_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def corners(box: Box3D) -> np.ndarray:
    """The 8 world-frame corners (8, 3) in the CORNER_SIGNS order."""
    local = CORNER_SIGNS * (0.5 * np.array([box.l, box.w, box.h]))
    return local @ _rotation_z(box.yaw).T + box.center


def canonical_xyz(points, box: Box3D) -> np.ndarray:
    """Transform world points (N, 3) into the box-local frame."""
    points = np.asarray(points, dtype=np.float64)
    return (points - box.center) @ _rotation_z(box.yaw)


def world_xyz(points_c, box: Box3D) -> np.ndarray:
    """Inverse of canonical_xyz."""
    points_c = np.asarray(points_c, dtype=np.float64)
    return points_c @ _rotation_z(box.yaw).T + box.center


def canonical_transform(p, box: Box3D) -> CanonicalPoint:
    """Canonical coordinates of one point; depth taken before the transform."""
    p = np.asarray(p, dtype=np.float64)
    d = float(np.linalg.norm(p))
    xc, yc, zc = canonical_xyz(p[None, :], box)[0]
    return CanonicalPoint(float(xc), float(yc), float(zc), d)


def points_in_box(points, box: Box3D) -> np.ndarray:
    """Boolean mask of points inside the box (boundary counts as inside)."""
    points = np.asarray(points, dtype=np.float64)
    return kernels.points_in_boxes_mask(points, box.to_array()[None, :])[:, 0]


def point_in_box(p, box: Box3D) -> bool:
    return bool(points_in_box(np.asarray(p, dtype=np.float64)[None, :], box)[0])


def iou_bev_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise BEV IoU over (N, 7) x (M, 7) box arrays."""
    return kernels.iou_bev_matrix(
        np.atleast_2d(np.asarray(boxes_a, dtype=np.float64)),
        np.atleast_2d(np.asarray(boxes_b, dtype=np.float64)),
    )


def iou_3d_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise 3D IoU over (N, 7) x (M, 7) box arrays."""
    return kernels.iou_3d_matrix(
        np.atleast_2d(np.asarray(boxes_a, dtype=np.float64)),
        np.atleast_2d(np.asarray(boxes_b, dtype=np.float64)),
    )


def iou_bev(a: Box3D, b: Box3D) -> float:
    return float(iou_bev_matrix(a.to_array()[None], b.to_array()[None])[0, 0])


def iou_3d(a: Box3D, b: Box3D) -> float:
    return float(iou_3d_matrix(a.to_array()[None], b.to_array()[None])[0, 0])


def mirror_points(points, box: Box3D) -> np.ndarray:
    """Original points plus their reflections across the box heading plane.

    Reflection negates the box-local Y coordinate; output is (2N, 3) with
    the originals first.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] == 0:
        return points.reshape(0, 3).copy()
    local = canonical_xyz(points, box)
    mirrored = local * np.array([1.0, -1.0, 1.0])
    return np.concatenate([points, world_xyz(mirrored, box)], axis=0)
