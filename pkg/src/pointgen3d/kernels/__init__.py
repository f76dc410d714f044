"""Kernel backend selection.

Imports the compiled extension when available, otherwise falls back to the
numpy reference implementation. Set POINTGEN3D_PURE=1 to force the fallback
(used by the benchmark and the backend-equivalence tests).
"""

import os

from . import pure

if os.environ.get("POINTGEN3D_PURE"):
    _impl = pure
    BACKEND = "pure"
else:
    try:
        from . import _native as _impl

        BACKEND = "native"
    except ImportError:
        _impl = pure
        BACKEND = "pure"

iou_bev_matrix = _impl.iou_bev_matrix
iou_3d_matrix = _impl.iou_3d_matrix
points_in_boxes_mask = _impl.points_in_boxes_mask
farthest_point_sampling = _impl.farthest_point_sampling

__all__ = [
    "BACKEND",
    "pure",
    "iou_bev_matrix",
    "iou_3d_matrix",
    "points_in_boxes_mask",
    "farthest_point_sampling",
]
