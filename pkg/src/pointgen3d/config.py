"""Configuration tree for the detector, trainer, and data pipeline.

Defaults reproduce the full-scale reference setup; ``desk_config`` shrinks
everything to a scale that trains on a single CPU core. Configs round-trip
through YAML exactly (parse -> serialize -> parse is identity).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import yaml


@dataclass
class GeometryConfig:
    # Signed-distance tolerance for the BEV polygon clipper.
    collinear_eps: float = 1e-9


@dataclass
class VoxelConfig:
    range_min: tuple = (0.0, -40.0, -3.0)
    range_max: tuple = (70.4, 40.0, 1.0)
    voxel_size: tuple = (0.05, 0.05, 0.1)
    max_points_per_voxel: int = 5

    @property
    def spatial_shape(self) -> tuple:
        return tuple(
            int(round((hi - lo) / vs))
            for lo, hi, vs in zip(self.range_min, self.range_max, self.voxel_size)
        )


@dataclass
class BackboneConfig:
    stage_channels: tuple = (16, 32, 48, 64)
    bev_channels: tuple = (64, 128)
    bev_convs_per_block: int = 4


@dataclass
class AnchorClassConfig:
    name: str = "car"
    size: tuple = (3.9, 1.6, 1.56)
    z_center: float = -1.0
    fg_iou: float = 0.6
    bg_iou: float = 0.45


def _default_anchor_classes() -> list:
    return [
        AnchorClassConfig("car", (3.9, 1.6, 1.56), -1.0, 0.6, 0.45),
        AnchorClassConfig("pedestrian", (0.8, 0.6, 1.73), -0.6, 0.5, 0.35),
        AnchorClassConfig("cyclist", (1.76, 0.6, 1.73), -0.6, 0.5, 0.35),
    ]


@dataclass
class RPNConfig:
    anchors: list = field(default_factory=_default_anchor_classes)
    anchor_yaws: tuple = (0.0, math.pi / 2)
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0 / 9.0
    train_pre_nms: int = 512
    train_post_nms: int = 128
    infer_pre_nms: int = 1024
    infer_post_nms: int = 100
    nms_iou: float = 0.7

    def class_names(self) -> list:
        return [a.name for a in self.anchors]


@dataclass
class RoIPoolConfig:
    grid_size: int = 6
    neighbor_radius: int = 2
    neighbor_k: int = 16
    stage_out_channels: int = 32
    agg_hidden: int = 32

    @property
    def grid_feature_dim(self) -> int:
        # Three backbone stages are pooled and concatenated.
        return 3 * self.stage_out_channels


@dataclass
class RPGConfig:
    semantic_dim: int = 32
    use_transformer: bool = True
    transformer_heads: int = 4
    transformer_ff_dim: int = 384
    pos_hidden: int = 96
    gen_hidden: int = 96
    offset_center: str = "grid"  # grid | roi_center
    use_score_path: bool = True
    use_offset_path: bool = True
    score_gamma: float = 2.0
    score_points: int = 2048
    score_fps_start: str = "zero"  # zero | seeded
    fg_proposal_iou: float = 0.55
    target_points: int = 2048
    similarity_dim_weight: float = 1.0
    similarity_chamfer_weight: float = 1.0


@dataclass
class HeadConfig:
    spatial_dim: int = 64
    local_hidden: int = 32
    roi_feature_dim: int = 256
    sa_radii: tuple = (0.4, 0.8)
    sa_channels: tuple = (64, 128)
    sa_group_cap: int = 0  # 0 pools over every in-radius neighbor
    branch_hidden: int = 256
    branch_depth: int = 2
    conf_iou_lo: float = 0.25
    conf_iou_hi: float = 0.75
    reg_fg_iou: float = 0.55
    final_nms_iou: float = 0.1
    score_threshold: float = 0.1


@dataclass
class AugmentConfig:
    enabled: bool = True
    flip_prob: float = 0.5
    scale_range: tuple = (0.95, 1.05)
    rotation_range: tuple = (-math.pi / 4, math.pi / 4)
    gt_sampling: bool = True
    gt_samples_per_class: int = 8


@dataclass
class TrainConfig:
    optimizer: str = "adam_onecycle"
    lr: float = 0.01
    weight_decay: float = 0.01
    onecycle_pct_start: float = 0.3
    epochs: int = 80
    batch_size: int = 16
    grad_clip: float = 10.0
    checkpoint_every: int = 10  # epochs
    log_every: int = 1  # steps
    append_gt_proposals: bool = True  # feed GT boxes to stage 2 while training


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(
        default_factory=lambda: {"car": 0.7, "pedestrian": 0.5, "cyclist": 0.5}
    )
    recall_positions: int = 40


@dataclass
class ExportConfig:
    ply_score_threshold: float = 0.6


@dataclass
class Config:
    seed: int = 0
    deterministic: bool = False
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    voxels: VoxelConfig = field(default_factory=VoxelConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    rpn: RPNConfig = field(default_factory=RPNConfig)
    roi: RoIPoolConfig = field(default_factory=RoIPoolConfig)
    rpg: RPGConfig = field(default_factory=RPGConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    export: ExportConfig = field(default_factory=ExportConfig)

    def to_dict(self) -> dict:
        return _asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        return _from_dict(cls, data)

    @classmethod
    def from_yaml(cls, text: str) -> "Config":
        return cls.from_dict(yaml.safe_load(text) or {})

    @classmethod
    def load(cls, path) -> "Config":
        with open(path) as fh:
            return cls.from_yaml(fh.read())

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_yaml())


def _asdict(obj):
    if dataclasses.is_dataclass(obj):
        return {
            f.name: _asdict(getattr(obj, f.name)) for f in dataclasses.fields(obj)
        }
    if isinstance(obj, (list, tuple)):
        return [_asdict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _asdict(v) for k, v in obj.items()}
    return obj


def _from_dict(cls, data):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise TypeError(f"expected a mapping for {cls.__name__}, got {type(data)}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise KeyError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    template = cls()
    for name, value in data.items():
        current = getattr(template, name)
        if dataclasses.is_dataclass(current):
            kwargs[name] = _from_dict(type(current), value)
        elif name == "anchors":
            kwargs[name] = [_from_dict(AnchorClassConfig, v) for v in value]
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def full_config() -> Config:
    """Reference full-scale configuration (the dataclass defaults)."""
    return Config()


def desk_config(num_classes: int = 1) -> Config:
    """Small single-core configuration used by tests and the overfit runs."""
    cfg = Config()
    cfg.voxels.range_min = (0.0, -6.4, -2.0)
    cfg.voxels.range_max = (12.8, 6.4, 1.2)
    cfg.voxels.voxel_size = (0.1, 0.1, 0.2)
    cfg.backbone.stage_channels = (8, 16, 16, 16)
    cfg.backbone.bev_channels = (16, 32)
    cfg.backbone.bev_convs_per_block = 2
    cfg.rpn.anchors = _default_anchor_classes()[:num_classes]
    cfg.rpn.train_pre_nms = 256
    cfg.rpn.train_post_nms = 12
    cfg.rpn.infer_pre_nms = 512
    cfg.rpn.infer_post_nms = 24
    cfg.roi.grid_size = 4
    cfg.roi.stage_out_channels = 16
    cfg.roi.agg_hidden = 16
    cfg.rpg.semantic_dim = 16
    cfg.rpg.transformer_heads = 4
    cfg.rpg.transformer_ff_dim = 192
    cfg.rpg.pos_hidden = 48
    cfg.rpg.gen_hidden = 48
    cfg.rpg.score_points = 256
    # Match the generated-point budget (grid_size**3) so the symmetric
    # Chamfer target is fully coverable by the generator.
    cfg.rpg.target_points = 64
    cfg.head.spatial_dim = 16
    cfg.head.local_hidden = 16
    cfg.head.roi_feature_dim = 128
    cfg.head.sa_channels = (16, 32)
    cfg.head.branch_hidden = 64
    cfg.augment.gt_samples_per_class = 2
    cfg.train.batch_size = 4
    cfg.train.epochs = 40
    cfg.train.lr = 0.003
    # tiny model on tiny scenes: decay starves the head branches, and a
    # short warmup leaves more of the budget for annealing
    cfg.train.weight_decay = 0.0
    cfg.train.onecycle_pct_start = 0.1
    return cfg
