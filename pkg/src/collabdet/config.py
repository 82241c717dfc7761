"""Run configuration: one dataclass per pipeline stage, JSON round-trippable."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

CLASS_NAMES = ("car", "pedestrian", "truck")
NUM_CLASSES = len(CLASS_NAMES)
MAX_AGENTS = 4


@dataclass
class SceneConfig:
    n_agents: int = 4
    n_cars: int = 6
    n_pedestrians: int = 4
    n_trucks: int = 2
    hard_pedestrian_fraction: float = 0.5
    # share of hard pedestrians placed far away; the rest hide behind trucks
    hard_far_fraction: float = 0.5
    far_distance: float = 60.0
    scene_radius: float = 35.0
    agent_ring_radius: float = 25.0
    world_extent: float = 500.0
    points_per_m2_at_10m: float = 40.0
    ground_points: int = 1500
    sensor_range: float = 100.0
    vehicle_sensor_height: float = 1.8
    infrastructure_sensor_height: float = 5.0
    point_noise: float = 0.02
    size_jitter: float = 0.1
    agent_clearance: float = 3.0
    max_retries: int = 500


@dataclass
class VoxelConfig:
    voxel_size: tuple[float, float, float] = (0.2, 0.2, 0.4)
    range_xy: tuple[float, float] = (-100.0, 100.0)
    range_z: tuple[float, float] = (-10.0, 6.0)
    max_points_per_voxel: int = 20
    downsample: int = 8
    channels: int = 16
    voxel_channels: int = 16

    def __post_init__(self):
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        self.range_xy = tuple(float(v) for v in self.range_xy)
        self.range_z = tuple(float(v) for v in self.range_z)
        if self.max_points_per_voxel < 1:
            raise ValueError("max_points_per_voxel must be >= 1")
        spans = [
            (self.range_xy[1] - self.range_xy[0], self.voxel_size[0]),
            (self.range_xy[1] - self.range_xy[0], self.voxel_size[1]),
            (self.range_z[1] - self.range_z[0], self.voxel_size[2]),
        ]
        for span, vs in spans:
            n = span / vs
            if abs(n - round(n)) > 1e-9 * max(1.0, n):
                raise ValueError(f"range {span} not divisible by voxel size {vs}")
        if self.grid_voxels[0] % self.downsample:
            raise ValueError("voxel grid not divisible by downsample")

    @property
    def grid_voxels(self) -> tuple[int, int, int]:
        nx = int(round((self.range_xy[1] - self.range_xy[0]) / self.voxel_size[0]))
        ny = int(round((self.range_xy[1] - self.range_xy[0]) / self.voxel_size[1]))
        nz = int(round((self.range_z[1] - self.range_z[0]) / self.voxel_size[2]))
        return nx, ny, nz

    @property
    def bev_shape(self) -> tuple[int, int]:
        nx, ny, _ = self.grid_voxels
        return ny // self.downsample, nx // self.downsample

    @property
    def cell_size(self) -> float:
        return self.voxel_size[0] * self.downsample


@dataclass
class HimConfig:
    n_stages: int = 3
    tau: float = 0.4
    gamma: float = 2.0
    tau_iou: float = 0.5
    peak_kernel: int = 3
    # Flip to use the literal tau * gamma**s progression instead of decay.
    threshold_decay: bool = True
    max_predictions: int = 64

    def __post_init__(self):
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must be in (0, 1)")
        if self.gamma < 1.0:
            raise ValueError("gamma must be >= 1")


@dataclass
class QaffConfig:
    heads: int = 8
    model_dim: int = 256
    neighborhood: int = 3

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")


@dataclass
class HeadConfig:
    heads: int = 8
    model_dim: int = 256
    top_k: int = 64
    nms_iou: float = 0.2
    score_threshold: float = 0.05

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")


@dataclass
class LossConfig:
    lambdas: tuple[float, float, float, float] = (1.0, 2.0, 1.0, 0.5)
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    min_overlap: float = 0.1
    match_center_weight: float = 0.25

    def __post_init__(self):
        self.lambdas = tuple(float(v) for v in self.lambdas)


@dataclass
class EvalConfig:
    iou_thresholds: tuple[float, ...] = (0.3, 0.5)
    range_xy: tuple[float, float] = (-100.0, 100.0)
    classes: tuple[str, ...] = CLASS_NAMES
    interpolation: str = "all_point"

    def __post_init__(self):
        self.iou_thresholds = tuple(float(t) for t in self.iou_thresholds)
        self.range_xy = tuple(float(v) for v in self.range_xy)
        self.classes = tuple(self.classes)
        if any(not 0.0 < t <= 1.0 for t in self.iou_thresholds):
            raise ValueError("IoU thresholds must be in (0, 1]")


@dataclass
class TrainConfig:
    lr: float = 1e-2
    batch_size: int = 4
    grad_clip: float = 0.0


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    him: HimConfig = field(default_factory=HimConfig)
    qaff: QaffConfig = field(default_factory=QaffConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    him_enabled: bool = True
    qaff_enabled: bool = True
    collaboration: bool = True
    compression_ratio: int = 1
    max_agents: int = MAX_AGENTS

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        kwargs = dict(d)
        sub = {
            "scene": SceneConfig,
            "voxel": VoxelConfig,
            "him": HimConfig,
            "qaff": QaffConfig,
            "head": HeadConfig,
            "loss": LossConfig,
            "eval": EvalConfig,
            "train": TrainConfig,
        }
        for key, typ in sub.items():
            if key in kwargs:
                kwargs[key] = typ(**kwargs[key])
        unknown = set(kwargs) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def micro_config(seed: int = 0) -> RunConfig:
    """Small setup used for gradient checks and toy training (32x32 grid, C=8)."""
    return RunConfig(
        seed=seed,
        scene=SceneConfig(
            n_agents=2,
            n_cars=1,
            n_pedestrians=1,
            n_trucks=0,
            hard_pedestrian_fraction=0.0,
            far_distance=18.0,
            scene_radius=9.0,
            agent_ring_radius=10.0,
            points_per_m2_at_10m=25.0,
            ground_points=300,
            sensor_range=40.0,
        ),
        voxel=VoxelConfig(range_xy=(-25.6, 25.6), channels=8, voxel_channels=8),
        him=HimConfig(n_stages=2, max_predictions=16),
        qaff=QaffConfig(heads=2, model_dim=8),
        head=HeadConfig(heads=2, model_dim=8, top_k=16),
        eval=EvalConfig(range_xy=(-25.6, 25.6)),
        train=TrainConfig(lr=1e-2, batch_size=16),
        max_agents=2,
    )


def toy_config(seed: int = 0) -> RunConfig:
    """Toy benchmark setup: four agents, hard pedestrians hidden behind trucks."""
    return RunConfig(
        seed=seed,
        scene=SceneConfig(
            n_agents=4,
            n_cars=3,
            n_pedestrians=3,
            n_trucks=2,
            hard_pedestrian_fraction=0.67,
            hard_far_fraction=0.0,
            far_distance=18.0,
            scene_radius=13.0,
            agent_ring_radius=13.0,
            points_per_m2_at_10m=25.0,
            ground_points=400,
            sensor_range=40.0,
        ),
        voxel=VoxelConfig(range_xy=(-25.6, 25.6), channels=16, voxel_channels=8),
        him=HimConfig(n_stages=3, max_predictions=16),
        qaff=QaffConfig(heads=2, model_dim=16),
        head=HeadConfig(heads=2, model_dim=16, top_k=24),
        eval=EvalConfig(range_xy=(-25.6, 25.6)),
        train=TrainConfig(lr=0.2, batch_size=4, grad_clip=5.0),
    )


PRESETS = {"default": RunConfig, "micro": micro_config, "toy": toy_config}


def resolve_config(name: str | None) -> RunConfig:
    """A preset name ('default', 'micro', 'toy') or the path of a JSON config file."""
    if name is None:
        return RunConfig()
    if name in PRESETS:
        return PRESETS[name]()
    return RunConfig.load(name)
