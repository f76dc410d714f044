import numpy as np
import pytest

from pointgen3d.geometry import (
    CORNER_SIGNS,
    Box3D,
    boxes_to_array,
    array_to_boxes,
    canonical_xyz,
    corners,
    iou_3d,
    iou_3d_matrix,
    iou_bev,
    iou_bev_matrix,
    mirror_points,
    point_in_box,
    points_in_box,
    world_xyz,
    wrap_angle,
)

from oracles import mc_iou


def random_box(rng, span=4.0):
    return np.array([
        rng.uniform(-span, span), rng.uniform(-span, span),
        rng.uniform(-1.0, 1.0),
        rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0),
        rng.uniform(-np.pi, np.pi),
    ])


def test_wrap_angle_scalar_and_array():
    assert wrap_angle(0.0) == 0.0
    assert wrap_angle(np.pi) == pytest.approx(-np.pi)
    assert wrap_angle(-np.pi) == pytest.approx(-np.pi)
    assert wrap_angle(2 * np.pi) == pytest.approx(0.0)
    vals = wrap_angle(np.linspace(-10.0, 10.0, 101))
    assert np.all(vals >= -np.pi) and np.all(vals < np.pi)
    # Wrapping is the identity on already-wrapped angles.
    inside = np.linspace(-np.pi, np.pi - 1e-9, 50)
    assert np.allclose(wrap_angle(inside), inside)


def test_box_validation_and_yaw_wrap():
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        Box3D(0, 0, 0, -1.0, 1.0, 1.0)
    b = Box3D(0, 0, 0, 1, 1, 1, yaw=3 * np.pi)
    assert b.yaw == pytest.approx(-np.pi)


def test_box_array_round_trip():
    rng = np.random.default_rng(0)
    arr = np.stack([random_box(rng) for _ in range(5)])
    boxes = array_to_boxes(arr)
    back = boxes_to_array(boxes)
    assert np.allclose(back, arr)


def test_corners_axis_aligned():
    b = Box3D(1.0, 2.0, 3.0, 4.0, 2.0, 6.0, yaw=0.0)
    c = corners(b)
    assert c.shape == (8, 3)
    expected = CORNER_SIGNS * np.array([2.0, 1.0, 3.0]) + np.array([1.0, 2.0, 3.0])
    assert np.allclose(c, expected)


def test_corners_quarter_turn():
    # After a +90 deg yaw the box x axis maps onto world y.
    b = Box3D(0, 0, 0, 2.0, 1.0, 1.0, yaw=np.pi / 2)
    c = corners(b)
    assert np.allclose(sorted(c[:, 1]), [-1, -1, -1, -1, 1, 1, 1, 1])
    assert np.allclose(sorted(c[:, 0]), [-0.5, -0.5, -0.5, -0.5, 0.5, 0.5, 0.5, 0.5])


def test_canonical_world_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(10):
        box = Box3D.from_array(random_box(rng))
        pts = rng.normal(size=(30, 3))
        local = canonical_xyz(pts, box)
        back = world_xyz(local, box)
        assert np.allclose(back, pts, atol=1e-12)


def test_canonical_of_corners_is_half_extents():
    rng = np.random.default_rng(2)
    box = Box3D.from_array(random_box(rng))
    local = canonical_xyz(corners(box), box)
    expected = CORNER_SIGNS * (0.5 * np.array([box.l, box.w, box.h]))
    assert np.allclose(local, expected, atol=1e-12)


def test_points_in_box_matches_canonical_check():
    rng = np.random.default_rng(3)
    for _ in range(10):
        box = Box3D.from_array(random_box(rng))
        pts = rng.uniform(-6, 6, size=(200, 3))
        got = points_in_box(pts, box)
        local = canonical_xyz(pts, box)
        half = 0.5 * np.array([box.l, box.w, box.h])
        want = np.all(np.abs(local) <= half + 1e-12, axis=1)
        assert np.array_equal(got, want)


def test_point_on_boundary_counts_inside():
    box = Box3D(0, 0, 0, 2, 2, 2)
    assert point_in_box([1.0, 0.0, 0.0], box)
    assert point_in_box([1.0, 1.0, 1.0], box)
    assert not point_in_box([1.0 + 1e-9, 0.0, 0.0], box)


def test_iou_identity_and_disjoint():
    rng = np.random.default_rng(4)
    box = Box3D.from_array(random_box(rng))
    assert iou_3d(box, box) == pytest.approx(1.0, abs=1e-9)
    assert iou_bev(box, box) == pytest.approx(1.0, abs=1e-9)
    far = Box3D(box.cx + 100, box.cy, box.cz, 1, 1, 1)
    assert iou_3d(box, far) == 0.0


def test_iou_shifted_cubes():
    # 2x2x2 cubes offset by one unit along x: intersection 4, union 12.
    a = Box3D(0, 0, 0, 2, 2, 2)
    b = Box3D(1, 0, 0, 2, 2, 2)
    assert iou_3d(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert iou_bev(a, b) == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_iou_axis_aligned_analytic():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a = random_box(rng)
        b = random_box(rng)
        a[6] = 0.0
        b[6] = 0.0
        inter = 1.0
        for axis, ext in ((0, 3), (1, 4), (2, 5)):
            lo = max(a[axis] - a[ext] / 2, b[axis] - b[ext] / 2)
            hi = min(a[axis] + a[ext] / 2, b[axis] + b[ext] / 2)
            inter *= max(hi - lo, 0.0)
        va = a[3] * a[4] * a[5]
        vb = b[3] * b[4] * b[5]
        expected = inter / (va + vb - inter)
        got = iou_3d_matrix(a[None], b[None])[0, 0]
        assert got == pytest.approx(expected, abs=1e-9)


def test_iou_rotation_invariance():
    rng = np.random.default_rng(6)
    a = random_box(rng)
    b = random_box(rng)
    base = iou_3d_matrix(a[None], b[None])[0, 0]
    for phi in (0.3, -1.2, 2.9):
        c, s = np.cos(phi), np.sin(phi)
        rot = np.array([[c, -s], [s, c]])
        a2, b2 = a.copy(), b.copy()
        a2[:2] = rot @ a[:2]
        b2[:2] = rot @ b[:2]
        a2[6] = wrap_angle(a[6] + phi)
        b2[6] = wrap_angle(b[6] + phi)
        got = iou_3d_matrix(a2[None], b2[None])[0, 0]
        assert got == pytest.approx(base, abs=1e-9)


def test_iou_3d_equals_bev_for_equal_z_extent():
    rng = np.random.default_rng(7)
    for _ in range(10):
        a = random_box(rng)
        b = random_box(rng)
        b[2] = a[2]
        b[5] = a[5]
        bev = iou_bev_matrix(a[None], b[None])[0, 0]
        full = iou_3d_matrix(a[None], b[None])[0, 0]
        assert full == pytest.approx(bev, abs=1e-9)


def test_iou_matrix_shape_and_symmetry():
    rng = np.random.default_rng(8)
    a = np.stack([random_box(rng) for _ in range(4)])
    b = np.stack([random_box(rng) for _ in range(6)])
    m = iou_3d_matrix(a, b)
    assert m.shape == (4, 6)
    mt = iou_3d_matrix(b, a)
    assert np.allclose(m, mt.T, atol=1e-12)
    assert np.all(m >= 0.0) and np.all(m <= 1.0 + 1e-12)


def test_iou_against_monte_carlo_sample():
    # Module-level smoke version; the acceptance suite runs the full grid.
    rng = np.random.default_rng(9)
    for _ in range(40):
        a = random_box(rng, span=1.5)
        b = random_box(rng, span=1.5)
        got_bev = iou_bev_matrix(a[None], b[None])[0, 0]
        got_3d = iou_3d_matrix(a[None], b[None])[0, 0]
        mc_bev, mc_3d = mc_iou(a, b, 20000, rng)
        assert abs(got_bev - mc_bev) <= 0.02
        assert abs(got_3d - mc_3d) <= 0.02


def test_mirror_points_originals_first():
    box = Box3D(1, 2, 0, 4, 2, 1.5, yaw=0.7)
    rng = np.random.default_rng(10)
    pts = rng.normal(size=(15, 3))
    out = mirror_points(pts, box)
    assert out.shape == (30, 3)
    assert np.allclose(out[:15], pts)
    local = canonical_xyz(out, box)
    assert np.allclose(local[15:, 0], local[:15, 0], atol=1e-12)
    assert np.allclose(local[15:, 1], -local[:15, 1], atol=1e-12)
    assert np.allclose(local[15:, 2], local[:15, 2], atol=1e-12)


def test_mirror_points_symmetric_set_is_involution():
    box = Box3D(0, 0, 0, 2, 2, 2, yaw=0.3)
    pts = world_xyz(np.array([[0.5, 0.4, 0.1], [0.5, -0.4, 0.1]]), box)
    out = mirror_points(pts, box)
    # The mirrored copies coincide with the originals as a set.
    d = np.linalg.norm(out[2:, None, :] - pts[None, :, :], axis=2)
    assert d.min(axis=1).max() < 1e-12


def test_mirror_points_empty():
    box = Box3D(0, 0, 0, 1, 1, 1)
    out = mirror_points(np.zeros((0, 3)), box)
    assert out.shape == (0, 3)
