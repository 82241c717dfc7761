"""Deterministic synthetic multi-agent LiDAR scenes.

Boxes are dropped on a flat ground plane around a scene centre, agents sit on a
ring facing the centre, and each agent's cloud is built by sampling box
surfaces and ground clutter with density falling off as 1/d^2, keeping only
samples whose sensor ray does not pass through another box first.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .config import CLASS_NAMES, SceneConfig
from .geometry import normalize_yaw, rotated_bev_iou, segment_box_entry

CAR, PEDESTRIAN, TRUCK = 0, 1, 2
ROLES = ("ego", "cav", "infrastructure")

SIZE_PRIORS = {
    CAR: (4.5, 1.9, 1.6),
    PEDESTRIAN: (0.6, 0.6, 1.7),
    TRUCK: (9.0, 2.6, 3.2),
}
_INTENSITY = {CAR: 0.55, PEDESTRIAN: 0.25, TRUCK: 0.8}
_GROUND_INTENSITY = 0.08


class SceneGenerationError(RuntimeError):
    pass


@dataclass
class GroundTruthBox:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    yaw: float
    class_id: int

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.size = tuple(float(v) for v in self.size)
        self.yaw = float(self.yaw)
        self.class_id = int(self.class_id)
        if min(self.size) <= 0:
            raise ValueError(f"box size must be positive, got {self.size}")
        if not 0 <= self.class_id < len(CLASS_NAMES):
            raise ValueError(f"class_id out of range: {self.class_id}")

    @property
    def bev(self) -> tuple[float, float, float, float, float]:
        return (self.center[0], self.center[1], self.size[0], self.size[1], self.yaw)


@dataclass
class AgentObservation:
    agent_id: int
    role: str
    pose: tuple[float, float, float]
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        self.pose = tuple(float(v) for v in self.pose)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)


@dataclass
class Scene:
    seed: int
    agents: list[AgentObservation]
    boxes: list[GroundTruthBox]

    @property
    def ego(self) -> AgentObservation:
        egos = [a for a in self.agents if a.role == "ego"]
        if len(egos) != 1:
            raise ValueError(f"scene must have exactly one ego, found {len(egos)}")
        return egos[0]

    def to_json(self) -> str:
        return scene_to_json(self)


# ---------------------------------------------------------------- generation

def generate_scene(seed: int, cfg: SceneConfig | None = None) -> Scene:
    cfg = cfg or SceneConfig()
    if cfg.n_agents < 1:
        raise ValueError("need at least one agent")
    if min(cfg.n_cars, cfg.n_pedestrians, cfg.n_trucks) < 0:
        raise ValueError("class counts must be >= 0")
    rng = np.random.default_rng(seed)

    center = rng.uniform(-cfg.world_extent, cfg.world_extent, size=2)
    agents = _place_agents(rng, cfg, center)
    ego_xy = np.array(agents[0].pose[:2])
    boxes: list[GroundTruthBox] = []
    agent_xy = [np.array(a.pose[:2]) for a in agents]

    n_hard = int(round(cfg.n_pedestrians * cfg.hard_pedestrian_fraction))
    n_far = int(round(n_hard * cfg.hard_far_fraction))
    n_hidden = n_hard - n_far
    if n_hidden and not cfg.n_trucks:
        n_far, n_hidden = n_hard, 0

    # trucks first so hidden pedestrians have something to hide behind; a truck
    # with no room behind it is placed again
    trucks: list[GroundTruthBox] = []
    for i in range(cfg.n_trucks):
        if i >= n_hidden:
            trucks.append(_place(rng, cfg, seed, TRUCK, center, boxes + trucks, agent_xy))
            continue
        for attempt in range(_TRUCK_ATTEMPTS):
            truck = _place(rng, cfg, seed, TRUCK, center, boxes + trucks, agent_xy, ego_xy)
            try:
                ped = _place_hidden(rng, cfg, seed, truck, ego_xy, boxes + trucks + [truck], agent_xy)
            except SceneGenerationError:
                if attempt == _TRUCK_ATTEMPTS - 1:
                    raise
                continue
            trucks.append(truck)
            boxes.append(ped)
            break
    boxes = trucks + boxes
    for i in range(cfg.n_trucks, n_hidden):
        boxes.append(_place_hidden(rng, cfg, seed, trucks[i % len(trucks)], ego_xy, boxes, agent_xy))
    for _ in range(n_far):
        boxes.append(_place_far(rng, cfg, seed, ego_xy, boxes, agent_xy))
    for _ in range(cfg.n_pedestrians - n_hard):
        boxes.append(_place(rng, cfg, seed, PEDESTRIAN, center, boxes, agent_xy))
    for _ in range(cfg.n_cars):
        boxes.append(_place(rng, cfg, seed, CAR, center, boxes, agent_xy))

    for agent in agents:
        agent.points = _scan(rng, cfg, agent, boxes)
    return Scene(seed=int(seed), agents=agents, boxes=boxes)


def _role(k: int) -> str:
    if k == 0:
        return "ego"
    return "infrastructure" if k % 2 == 0 else "cav"


def _place_agents(rng, cfg: SceneConfig, center) -> list[AgentObservation]:
    theta0 = rng.uniform(-math.pi, math.pi)
    agents = []
    for k in range(cfg.n_agents):
        theta = theta0 + 2.0 * math.pi * k / cfg.n_agents + rng.uniform(-0.15, 0.15)
        radius = cfg.agent_ring_radius * rng.uniform(0.9, 1.1)
        x = center[0] + radius * math.cos(theta)
        y = center[1] + radius * math.sin(theta)
        yaw = normalize_yaw(theta + math.pi + rng.uniform(-0.2, 0.2))
        agents.append(AgentObservation(agent_id=k, role=_role(k), pose=(x, y, yaw)))
    return agents


def _jittered_size(rng, cfg: SceneConfig, cls: int) -> tuple[float, float, float]:
    prior = np.array(SIZE_PRIORS[cls])
    return tuple(prior * (1.0 + rng.uniform(-cfg.size_jitter, cfg.size_jitter, size=3)))


def _fits(box: GroundTruthBox, boxes, agent_xy, clearance: float) -> bool:
    reach = 0.5 * math.hypot(box.size[0], box.size[1]) + clearance
    for a in agent_xy:
        if math.hypot(box.center[0] - a[0], box.center[1] - a[1]) < reach:
            return False
    return all(rotated_bev_iou(box.bev, other.bev) <= 0.0 for other in boxes)


def _place(rng, cfg, seed, cls, center, boxes, agent_xy, face_xy=None) -> GroundTruthBox:
    for _ in range(cfg.max_retries):
        size = _jittered_size(rng, cfg, cls)
        r = cfg.scene_radius * math.sqrt(rng.uniform())
        phi = rng.uniform(-math.pi, math.pi)
        x, y = center[0] + r * math.cos(phi), center[1] + r * math.sin(phi)
        if face_xy is None:
            yaw = rng.uniform(-math.pi, math.pi)
        else:
            # long side towards the viewer so it casts a wide shadow
            yaw = math.atan2(y - face_xy[1], x - face_xy[0]) + math.pi / 2.0
        box = GroundTruthBox((x, y, size[2] / 2.0), size, normalize_yaw(yaw), cls)
        if _fits(box, boxes, agent_xy, cfg.agent_clearance):
            return box
    raise SceneGenerationError(f"could not place {CLASS_NAMES[cls]} (seed={seed})")


_TRUCK_ATTEMPTS = 20
_HIDE_ATTEMPTS = 50


def _place_hidden(rng, cfg, seed, truck, ego_xy, boxes, agent_xy) -> GroundTruthBox:
    tx, ty = truck.center[0], truck.center[1]
    dx, dy = tx - ego_xy[0], ty - ego_xy[1]
    dist = math.hypot(dx, dy)
    ux, uy = dx / dist, dy / dist
    for _ in range(min(cfg.max_retries, _HIDE_ATTEMPTS)):
        size = _jittered_size(rng, cfg, PEDESTRIAN)
        back = truck.size[1] / 2.0 + rng.uniform(0.8, 1.8)
        lateral = rng.uniform(-1.0, 1.0)
        x = tx + back * ux - lateral * uy
        y = ty + back * uy + lateral * ux
        box = GroundTruthBox((x, y, size[2] / 2.0), size, rng.uniform(-math.pi, math.pi), PEDESTRIAN)
        if _fits(box, boxes, agent_xy, cfg.agent_clearance):
            return box
    raise SceneGenerationError(f"could not hide pedestrian behind truck (seed={seed})")


def _place_far(rng, cfg, seed, ego_xy, boxes, agent_xy) -> GroundTruthBox:
    for _ in range(cfg.max_retries):
        size = _jittered_size(rng, cfg, PEDESTRIAN)
        r = cfg.far_distance + rng.uniform(0.5, 5.0)
        phi = rng.uniform(-math.pi, math.pi)
        x, y = ego_xy[0] + r * math.cos(phi), ego_xy[1] + r * math.sin(phi)
        box = GroundTruthBox((x, y, size[2] / 2.0), size, rng.uniform(-math.pi, math.pi), PEDESTRIAN)
        if _fits(box, boxes, agent_xy, cfg.agent_clearance):
            return box
    raise SceneGenerationError(f"could not place far pedestrian (seed={seed})")


def sensor_origin(agent: AgentObservation, cfg: SceneConfig) -> np.ndarray:
    h = cfg.infrastructure_sensor_height if agent.role == "infrastructure" else cfg.vehicle_sensor_height
    return np.array([agent.pose[0], agent.pose[1], h])


def box_surface_samples(rng, box: GroundTruthBox, n_per_m2: float) -> np.ndarray:
    """Uniform samples on the four sides and the top of ``box`` (world frame)."""
    l, w, h = box.size
    faces = [
        # (normal axis, sign, extent_a, extent_b)
        (0, 1.0, w, h), (0, -1.0, w, h), (1, 1.0, l, h), (1, -1.0, l, h), (2, 1.0, l, w),
    ]
    half = np.array([l, w, h]) / 2.0
    pts = []
    for axis, sign, ea, eb in faces:
        n = rng.poisson(ea * eb * n_per_m2)
        if n == 0:
            continue
        local = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
        local[:, axis] = sign * half[axis]
        pts.append(local)
    if not pts:
        return np.zeros((0, 3))
    local = np.concatenate(pts)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + np.asarray(box.center)


def visible_mask(origin: np.ndarray, targets: np.ndarray, boxes, eps: float = 1e-6) -> np.ndarray:
    """True where the segment from ``origin`` reaches the target without entering any box first."""
    vis = np.ones(len(targets), dtype=bool)
    for box in boxes:
        if not vis.any():
            break
        t = segment_box_entry(origin, targets[vis], box.center, box.size, box.yaw)
        sub = vis.copy()
        sub[vis] = t >= 1.0 - eps
        vis = sub
    return vis


def _scan(rng, cfg: SceneConfig, agent: AgentObservation, boxes) -> np.ndarray:
    origin = sensor_origin(agent, cfg)
    clouds = []
    for box in boxes:
        d = max(math.dist(origin, box.center), 1.0)
        density = cfg.points_per_m2_at_10m * (10.0 / d) ** 2
        pts = box_surface_samples(rng, box, density)
        inten = np.clip(_INTENSITY[box.class_id] + rng.normal(0.0, 0.05, len(pts)), 0.0, 1.0)
        clouds.append(np.column_stack([pts, inten]))
    # ground clutter: areal density ~ 1/r^2 means radius log-uniform
    r_min = 2.0
    r = r_min * (cfg.sensor_range / r_min) ** rng.uniform(size=cfg.ground_points)
    phi = rng.uniform(-math.pi, math.pi, size=cfg.ground_points)
    ground = np.column_stack([
        origin[0] + r * np.cos(phi),
        origin[1] + r * np.sin(phi),
        np.zeros(cfg.ground_points),
        np.clip(_GROUND_INTENSITY + rng.normal(0.0, 0.03, cfg.ground_points), 0.0, 1.0),
    ])
    clouds.append(ground)
    cloud = np.concatenate(clouds)
    keep = np.linalg.norm(cloud[:, :3] - origin, axis=1) <= cfg.sensor_range
    cloud = cloud[keep]
    cloud = cloud[visible_mask(origin, cloud[:, :3], boxes)]
    cloud[:, :3] += rng.normal(0.0, cfg.point_noise, size=(len(cloud), 3))
    return cloud


# ---------------------------------------------------------------- frames

def _world_to_local(pose, xy: np.ndarray) -> np.ndarray:
    x0, y0, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    d = xy - np.array([x0, y0])
    return np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]])


def transform_scene(scene: Scene, pose) -> Scene:
    """Express every point, box and agent pose in the frame of ``pose``."""
    yaw0 = pose[2]
    agents = []
    for a in scene.agents:
        pts = a.points.copy()
        if len(pts):
            pts[:, :2] = _world_to_local(pose, pts[:, :2])
        ap = _world_to_local(pose, np.array([a.pose[:2]]))[0]
        agents.append(AgentObservation(a.agent_id, a.role, (ap[0], ap[1], normalize_yaw(a.pose[2] - yaw0)), pts))
    boxes = []
    for b in scene.boxes:
        c = _world_to_local(pose, np.array([b.center[:2]]))[0]
        boxes.append(GroundTruthBox((c[0], c[1], b.center[2]), b.size, normalize_yaw(b.yaw - yaw0), b.class_id))
    return Scene(scene.seed, agents, boxes)


def inverse_pose(pose) -> tuple[float, float, float]:
    x0, y0, yaw = pose
    c, s = math.cos(yaw), math.sin(yaw)
    return (-(c * x0 + s * y0), -(-s * x0 + c * y0), normalize_yaw(-yaw))


def to_ego_frame(scene: Scene) -> Scene:
    return transform_scene(scene, scene.ego.pose)


# ---------------------------------------------------------------- serialization

def _r9(v: float) -> float:
    return float(f"{float(v):.9g}")


def scene_to_dict(scene: Scene) -> dict:
    return {
        "seed": int(scene.seed),
        "agents": [
            {
                "id": int(a.agent_id),
                "role": a.role,
                "pose": [_r9(v) for v in a.pose],
                "points": [_r9(v) for v in a.points.reshape(-1)],
            }
            for a in scene.agents
        ],
        "boxes": [
            {
                "center": [_r9(v) for v in b.center],
                "size": [_r9(v) for v in b.size],
                "yaw": _r9(b.yaw),
                "class": int(b.class_id),
            }
            for b in scene.boxes
        ],
    }


def scene_to_json(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), separators=(",", ":")) + "\n"


def scene_from_dict(d: dict) -> Scene:
    agents = [
        AgentObservation(a["id"], a["role"], tuple(a["pose"]), np.asarray(a["points"], dtype=np.float64).reshape(-1, 4))
        for a in d["agents"]
    ]
    boxes = [GroundTruthBox(tuple(b["center"]), tuple(b["size"]), b["yaw"], b["class"]) for b in d["boxes"]]
    return Scene(int(d["seed"]), agents, boxes)


def scene_from_json(text: str) -> Scene:
    return scene_from_dict(json.loads(text))
