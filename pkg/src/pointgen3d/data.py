"""Data layer: KITTI-format reading and writing, synthetic desk-scale scene
generation, train-time augmentation, and split handling.

Scenes carry LiDAR-frame boxes centered at the geometric center. KITTI labels
store camera-frame bottom-center boxes, so reading applies the rectification
and velo-to-cam transforms in reverse plus the half-height shift; writing
inverts that exactly, which the round-trip tests rely on.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .geometry import Box3D, wrap_angle
from .rpg import TargetBank, denormalize_instance

CLASS_NAMES = ("car", "pedestrian", "cyclist")
KITTI_TYPE_OF_CLASS = {"car": "Car", "pedestrian": "Pedestrian",
                       "cyclist": "Cyclist"}
CLASS_OF_KITTI_TYPE = {v: k for k, v in KITTI_TYPE_OF_CLASS.items()}


@dataclass
class Scene:
    frame_id: str
    points: np.ndarray  # (N, 4) x, y, z, intensity
    gt_boxes: np.ndarray  # (M, 7) cx, cy, cz, l, w, h, yaw
    gt_classes: np.ndarray  # (M,) class ids
    gt_keys: list = field(default_factory=list)
    difficulty: np.ndarray = None

    def __post_init__(self):
        if not self.gt_keys:
            self.gt_keys = [f"{self.frame_id}_{i}"
                            for i in range(self.gt_boxes.shape[0])]
        if self.difficulty is None:
            self.difficulty = np.zeros(self.gt_boxes.shape[0], dtype=np.int64)


def kitti_difficulty(bbox_height: float, occlusion: int, truncation: float) -> int:
    """0 easy / 1 moderate / 2 hard / -1 ignored, standard KITTI rules."""
    if bbox_height >= 40 and occlusion <= 0 and truncation <= 0.15:
        return 0
    if bbox_height >= 25 and occlusion <= 1 and truncation <= 0.30:
        return 1
    if bbox_height >= 25 and occlusion <= 2 and truncation <= 0.50:
        return 2
    return -1


def default_calib() -> dict:
    """Synthetic calibration: camera x right, y down, z forward."""
    tr = np.array([
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
    ])
    p2 = np.array([
        [700.0, 0.0, 600.0, 0.0],
        [0.0, 700.0, 180.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ])
    return {"P2": p2, "R0_rect": np.eye(3), "Tr_velo_to_cam": tr}


def read_calib(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if ":" not in line:
                continue
            name, vals = line.split(":", 1)
            out[name.strip()] = np.asarray(
                [float(v) for v in vals.split()], dtype=np.float64
            )
    calib = {
        "P2": out["P2"].reshape(3, 4),
        "R0_rect": out["R0_rect"].reshape(3, 3),
        "Tr_velo_to_cam": out["Tr_velo_to_cam"].reshape(3, 4),
    }
    return calib


def write_calib(path: str, calib: dict) -> None:
    def row(name, mat):
        return name + ": " + " ".join(f"{v:.12e}" for v in mat.reshape(-1))

    lines = [
        row("P0", calib["P2"]), row("P1", calib["P2"]), row("P2", calib["P2"]),
        row("P3", calib["P2"]), row("R0_rect", calib["R0_rect"]),
        row("Tr_velo_to_cam", calib["Tr_velo_to_cam"]),
        row("Tr_imu_to_velo", np.eye(3, 4)),
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _cam_from_velo(calib: dict):
    tr = np.eye(4)
    tr[:3, :] = calib["Tr_velo_to_cam"]
    r0 = np.eye(4)
    r0[:3, :3] = calib["R0_rect"]
    return r0 @ tr


def read_kitti_frame(velodyne_path: str, label_path: str, calib_path: str,
                     frame_id: str = None) -> Scene:
    """Parse one KITTI frame into a LiDAR-frame Scene.

    Point records are consecutive little-endian float32 (x, y, z, intensity).
    DontCare labels are skipped; camera-frame bottom-center boxes become
    geometric-center LiDAR boxes.
    """
    raw = np.fromfile(velodyne_path, dtype="<f4")
    if raw.size % 4:
        raise ValueError(
            f"{velodyne_path}: byte length is not a whole number of "
            "16-byte point records"
        )
    points = raw.reshape(-1, 4).astype(np.float64)
    calib = read_calib(calib_path)
    velo_from_cam = np.linalg.inv(_cam_from_velo(calib))
    boxes, classes, diffs = [], [], []
    with open(label_path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 15:
                raise ValueError(f"{label_path}:{ln}: expected 15 label fields")
            obj_type = parts[0]
            if obj_type == "DontCare":
                continue
            if obj_type not in CLASS_OF_KITTI_TYPE:
                continue
            trunc, occ = float(parts[1]), int(float(parts[2]))
            bbox = [float(v) for v in parts[4:8]]
            h, w, l = (float(v) for v in parts[8:11])
            loc_cam = np.asarray([float(v) for v in parts[11:14] + [1.0]])
            ry = float(parts[14])
            loc_velo = (velo_from_cam @ loc_cam)[:3]
            center = loc_velo + np.asarray([0.0, 0.0, h / 2.0])
            yaw = wrap_angle(-ry - np.pi / 2.0)
            boxes.append([*center, l, w, h, yaw])
            classes.append(CLASS_NAMES.index(CLASS_OF_KITTI_TYPE[obj_type]))
            diffs.append(kitti_difficulty(bbox[3] - bbox[1], occ, trunc))
    if frame_id is None:
        frame_id = os.path.splitext(os.path.basename(velodyne_path))[0]
    return Scene(
        frame_id=frame_id,
        points=points,
        gt_boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 7),
        gt_classes=np.asarray(classes, dtype=np.int64),
        difficulty=np.asarray(diffs, dtype=np.int64),
    )


def write_kitti_frame(root: str, scene: Scene, calib: dict = None) -> None:
    """Persist a scene in the KITTI directory layout (synthetic fixtures)."""
    calib = calib or default_calib()
    for sub in ("velodyne", "label_2", "calib"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    scene.points.astype("<f4").tofile(
        os.path.join(root, "velodyne", scene.frame_id + ".bin")
    )
    write_calib(os.path.join(root, "calib", scene.frame_id + ".txt"), calib)
    cam_from_velo = _cam_from_velo(calib)
    lines = []
    for box, ci in zip(scene.gt_boxes, scene.gt_classes):
        cx, cy, cz, l, w, h, yaw = box
        bottom = np.asarray([cx, cy, cz - h / 2.0, 1.0])
        loc_cam = (cam_from_velo @ bottom)[:3]
        ry = wrap_angle(-yaw - np.pi / 2.0)
        name = KITTI_TYPE_OF_CLASS[CLASS_NAMES[int(ci)]]
        lines.append(
            f"{name} 0.00 0 0.00 350.00 150.00 450.00 250.00 "
            f"{h:.6f} {w:.6f} {l:.6f} "
            f"{loc_cam[0]:.6f} {loc_cam[1]:.6f} {loc_cam[2]:.6f} {ry:.6f}"
        )
    with open(os.path.join(root, "label_2", scene.frame_id + ".txt"), "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_split(root: str, split: str) -> list:
    path = os.path.join(root, "ImageSets", split + ".txt")
    with open(path) as fh:
        return [line.strip() for line in fh if line.strip()]


def write_split(root: str, split: str, frame_ids) -> None:
    os.makedirs(os.path.join(root, "ImageSets"), exist_ok=True)
    with open(os.path.join(root, "ImageSets", split + ".txt"), "w") as fh:
        fh.write("\n".join(frame_ids) + "\n")


def load_frame(root: str, frame_id: str) -> Scene:
    """Load one frame; a missing label file yields a scene without GT."""
    label = os.path.join(root, "label_2", frame_id + ".txt")
    if not os.path.exists(label):
        raw = np.fromfile(
            os.path.join(root, "velodyne", frame_id + ".bin"), dtype="<f4"
        )
        if raw.size % 4:
            raise ValueError(f"{frame_id}: malformed point record length")
        return Scene(
            frame_id=frame_id,
            points=raw.reshape(-1, 4).astype(np.float64),
            gt_boxes=np.zeros((0, 7)),
            gt_classes=np.zeros(0, dtype=np.int64),
        )
    return read_kitti_frame(
        os.path.join(root, "velodyne", frame_id + ".bin"),
        label,
        os.path.join(root, "calib", frame_id + ".txt"),
        frame_id=frame_id,
    )


def filter_scene_to_range(scene: Scene, cfg) -> Scene:
    """Drop GT boxes whose centers fall outside the detection range."""
    lo = np.asarray(cfg.voxels.range_min)
    hi = np.asarray(cfg.voxels.range_max)
    c = scene.gt_boxes[:, :3]
    keep = ((c >= lo) & (c < hi)).all(axis=1)
    return replace(
        scene,
        gt_boxes=scene.gt_boxes[keep],
        gt_classes=scene.gt_classes[keep],
        gt_keys=[k for k, m in zip(scene.gt_keys, keep) if m],
        difficulty=scene.difficulty[keep],
    )


@dataclass
class SynthSpec:
    """Parameters of the synthetic scene generator."""

    n_objects: int = 3
    class_mix: tuple = (1.0, 0.0, 0.0)  # car, pedestrian, cyclist
    noise_sigma: float = 0.01
    occlusion_fraction: float = 0.0
    clutter_points: int = 200
    ground_z: float = -1.5
    surface_density: float = 60.0  # points per square meter at close range
    size_jitter: float = 0.08
    max_place_tries: int = 100


_BASE_SIZES = {
    0: (3.9, 1.6, 1.56),
    1: (0.8, 0.6, 1.73),
    2: (1.76, 0.6, 1.73),
}


def _sample_box_surface(box_arr: np.ndarray, class_id: int, density: float,
                        rng) -> np.ndarray:
    """Surface samples in the box frame, mapped to world. Cars and cyclists
    are cuboid shells (bottom face skipped); pedestrians are capsule-like."""
    cx, cy, cz, l, w, h, yaw = box_arr
    pts = []
    if class_id in (0, 2):
        faces = [
            (l * w, 2, h / 2.0),     # top
            (l * h, 1, w / 2.0),     # left / right
            (l * h, 1, -w / 2.0),
            (w * h, 0, l / 2.0),     # front / back
            (w * h, 0, -l / 2.0),
        ]
        half = np.asarray([l, w, h]) / 2.0
        for area, axis, offset in faces:
            n = max(2, int(area * density))
            p = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
            p[:, axis] = offset
            pts.append(p)
        local = np.concatenate(pts, axis=0)
    else:
        n = max(8, int(np.pi * w * h * density))
        ang = rng.uniform(-np.pi, np.pi, size=n)
        zz = rng.uniform(-h / 2.0, h / 2.0, size=n)
        r = (w / 2.0) * np.sqrt(np.maximum(0.0, 1.0 - (2.0 * zz / h) ** 4))
        local = np.stack([r * np.cos(ang) * (l / w), r * np.sin(ang), zz], axis=1)
    c, s = np.cos(yaw), np.sin(yaw)
    world = np.empty_like(local)
    world[:, 0] = local[:, 0] * c - local[:, 1] * s + cx
    world[:, 1] = local[:, 0] * s + local[:, 1] * c + cy
    world[:, 2] = local[:, 2] + cz
    return world


def synth_scene(spec: SynthSpec, cfg, seed: int, frame_id: str = None) -> Scene:
    """Deterministic synthetic scene: non-overlapping boxes, surface shells
    with range-dependent density, optional angular occlusion, ground clutter."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    lo = np.asarray(cfg.voxels.range_min, dtype=np.float64)
    hi = np.asarray(cfg.voxels.range_max, dtype=np.float64)
    mix = np.asarray(spec.class_mix, dtype=np.float64)
    mix = mix / mix.sum()
    boxes, classes = [], []
    for _ in range(spec.n_objects):
        ci = int(rng.choice(len(mix), p=mix))
        base = np.asarray(_BASE_SIZES[ci])
        placed = False
        for _ in range(spec.max_place_tries):
            dims = base * (1.0 + rng.uniform(-spec.size_jitter,
                                             spec.size_jitter, size=3))
            yaw = rng.uniform(-np.pi, np.pi)
            margin = 0.5 * float(np.hypot(dims[0], dims[1])) + 0.1
            cx = rng.uniform(lo[0] + margin, hi[0] - margin)
            cy = rng.uniform(lo[1] + margin, hi[1] - margin)
            cz = spec.ground_z + dims[2] / 2.0
            cand = np.asarray([cx, cy, cz, *dims, wrap_angle(yaw)])
            if boxes:
                iou = kernels.iou_bev_matrix(
                    cand.reshape(1, 7), np.asarray(boxes, dtype=np.float64)
                )
                if iou.max() > 0.0:
                    continue
            boxes.append(cand)
            classes.append(ci)
            placed = True
            break
        if not placed:
            raise RuntimeError(
                "could not place a non-overlapping object within retry budget"
            )
    cloud = []
    for box, ci in zip(boxes, classes):
        dist = float(np.hypot(box[0], box[1]))
        density = spec.surface_density / (1.0 + dist / 10.0)
        pts = _sample_box_surface(np.asarray(box), ci, density, rng)
        if spec.noise_sigma > 0:
            pts = pts + rng.normal(0.0, spec.noise_sigma, size=pts.shape)
        if spec.occlusion_fraction > 0:
            az = np.arctan2(pts[:, 1] - 0.0, pts[:, 0] - 0.0)
            a_min, a_max = az.min(), az.max()
            cut = a_min + spec.occlusion_fraction * (a_max - a_min)
            keep = az > cut if spec.occlusion_fraction < 1.0 else np.zeros(
                len(az), dtype=bool
            )
            pts = pts[keep]
        cloud.append(pts)
    n_cl = spec.clutter_points
    clutter = np.stack([
        rng.uniform(lo[0], hi[0], size=n_cl),
        rng.uniform(lo[1], hi[1], size=n_cl),
        spec.ground_z + rng.uniform(0.0, 0.05, size=n_cl),
    ], axis=1)
    cloud.append(clutter)
    xyz = np.concatenate(cloud, axis=0)
    inten = rng.uniform(0.0, 1.0, size=(xyz.shape[0], 1))
    if frame_id is None:
        frame_id = f"{seed:06d}"
    return Scene(
        frame_id=frame_id,
        points=np.concatenate([xyz, inten], axis=1),
        gt_boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 7),
        gt_classes=np.asarray(classes, dtype=np.int64),
    )


def augment(scene: Scene, cfg, rng, bank: TargetBank = None) -> Scene:
    """GT sampling, then global flip / rotation / scaling, all config-driven.

    Points and boxes transform jointly, so box membership is preserved.
    Sampled instances keep their bank keys for completion-target lookup.
    """
    a = cfg.augment
    points = scene.points.copy()
    boxes = scene.gt_boxes.copy()
    classes = scene.gt_classes.copy()
    keys = list(scene.gt_keys)
    diffs = scene.difficulty.copy()

    if a.gt_sampling and bank is not None and bank.records:
        all_keys = sorted(bank.records)
        lo = np.asarray(cfg.voxels.range_min)
        hi = np.asarray(cfg.voxels.range_max)
        for _ in range(a.gt_samples_per_class * len(cfg.rpn.anchors)):
            key = all_keys[int(rng.integers(len(all_keys)))]
            rec = bank.records[key]
            dims = rec.dims
            margin = 0.5 * float(np.hypot(dims[0], dims[1])) + 0.1
            cx = rng.uniform(lo[0] + margin, hi[0] - margin)
            cy = rng.uniform(lo[1] + margin, hi[1] - margin)
            cz = rng.uniform(lo[2] + dims[2] / 2.0, min(hi[2], lo[2] + dims[2]))
            yaw = rng.uniform(-np.pi, np.pi)
            cand = np.asarray([cx, cy, cz, *dims, wrap_angle(yaw)])
            if boxes.shape[0]:
                if kernels.iou_bev_matrix(
                    cand.reshape(1, 7), np.ascontiguousarray(boxes)
                ).max() > 0.0:
                    continue
            box = Box3D.from_array(cand)
            new_pts = denormalize_instance(rec.points.astype(np.float64), box)
            inten = rng.uniform(0.0, 1.0, size=(new_pts.shape[0], 1))
            points = np.concatenate(
                [points, np.concatenate([new_pts, inten], axis=1)], axis=0
            )
            boxes = np.concatenate([boxes, cand.reshape(1, 7)], axis=0)
            classes = np.concatenate([classes, [rec.class_id]])
            keys.append(key)
            diffs = np.concatenate([diffs, [0]])

    if rng.uniform() < a.flip_prob:
        points[:, 1] = -points[:, 1]
        boxes[:, 1] = -boxes[:, 1]
        boxes[:, 6] = wrap_angle(-boxes[:, 6])
    rot = rng.uniform(a.rotation_range[0], a.rotation_range[1])
    c, s = np.cos(rot), np.sin(rot)
    rmat = np.asarray([[c, -s], [s, c]])
    points[:, :2] = points[:, :2] @ rmat.T
    boxes[:, :2] = boxes[:, :2] @ rmat.T
    boxes[:, 6] = wrap_angle(boxes[:, 6] + rot)
    scale = rng.uniform(a.scale_range[0], a.scale_range[1])
    points[:, :3] *= scale
    boxes[:, :6] *= scale

    return Scene(
        frame_id=scene.frame_id,
        points=points,
        gt_boxes=boxes,
        gt_classes=classes,
        gt_keys=keys,
        difficulty=diffs,
    )


class FrameDataset:
    """KITTI-layout dataset over a split file, with optional augmentation."""

    def __init__(self, root: str, split: str, cfg, augment_enabled: bool = False,
                 bank: TargetBank = None):
        self.root = root
        self.cfg = cfg
        self.frame_ids = read_split(root, split)
        self.augment_enabled = augment_enabled and cfg.augment.enabled
        self.bank = bank

    def __len__(self) -> int:
        return len(self.frame_ids)

    def load(self, i: int, epoch: int = 0) -> Scene:
        scene = load_frame(self.root, self.frame_ids[i])
        if self.augment_enabled:
            rng = np.random.default_rng(
                np.random.SeedSequence([int(self.cfg.seed), int(epoch), int(i), 3])
            )
            scene = augment(scene, self.cfg, rng, self.bank)
        return filter_scene_to_range(scene, self.cfg)


def build_target_bank(root: str, split: str, cfg) -> TargetBank:
    """Instance bank + completion targets from every frame of a split."""
    bank = TargetBank([a.name for a in cfg.rpn.anchors])
    for frame_id in read_split(root, split):
        scene = filter_scene_to_range(load_frame(root, frame_id), cfg)
        bank.add_scene(
            scene.frame_id, scene.points[:, :3],
            [Box3D.from_array(b) for b in scene.gt_boxes],
            scene.gt_classes,
        )
    bank.build_targets(cfg)
    return bank
