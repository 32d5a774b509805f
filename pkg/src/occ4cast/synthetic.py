"""Deterministic synthetic driving-world generator.

The world frame coincides with the current ego frame (offset 0).  A scene is
a flat ground plane plus axis-aligned world-frame boxes (static or moving at
constant velocity); the ego drives a smooth planar path through it.  Per
sequence we emit flat-shaded semantic camera renders for the past frames and
exact ego-centered occupancy rasterizations for the current and future
frames, so future grids rotate and shift with the chosen trajectory --
left-turn and right-turn paths diverge from the first heading change.

Everything is a pure function of (spec, seed).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import classes as cls_ids
from .classes import CLASS_COLORS, NUM_CLASSES
from .errors import ConfigError
from .geometry import CameraCalib, Pose, make_camera
from .grid import OccupancyGrid
from .sequence import SensorFrame, SequenceSample
from .trajectory import TrajectoryWaypoint

SKY_COLOR = np.array([0.70, 0.80, 0.92], dtype=np.float32)
_PALETTE01 = np.asarray(CLASS_COLORS, dtype=np.float32) / 255.0


@dataclass(frozen=True)
class CameraRigSpec:
    yaws_deg: tuple = (0.0, 55.0, -55.0)
    hfov_deg: float = 70.0
    width: int = 72
    height: int = 48
    cam_height: float = 1.6
    pitch_deg: float = 0.0

    def build(self, mirror: bool = False):
        yaws = [-y for y in self.yaws_deg] if mirror else list(self.yaws_deg)
        return [
            make_camera(np.radians(y), self.cam_height, self.hfov_deg,
                        self.width, self.height, self.pitch_deg)
            for y in yaws
        ]


@dataclass(frozen=True)
class SyntheticWorldSpec:
    """Knobs of the procedural world.

    The default grid is 64x64x8 at 0.5 m; the desk/steering presets in
    :mod:`occ4cast.config` use a coarser grid matched to the desk-scale
    anchor point budget.
    """

    bounds: tuple = ((-16.0, -16.0, 0.0), (16.0, 16.0, 4.0))
    grid_dims: tuple = (64, 64, 8)
    voxel_size: float = 0.5
    n_static: int = 6
    n_dynamic: int = 2
    static_xy_range: tuple = (1.6, 3.4)
    static_h_range: tuple = (1.4, 2.8)
    dynamic_len_range: tuple = (3.5, 5.0)
    dynamic_wid_range: tuple = (1.6, 2.2)
    dynamic_h_range: tuple = (1.4, 1.8)
    box_speed_range: tuple = (0.5, 3.0)
    ego_speed_range: tuple = (4.0, 7.0)
    yaw_rate_range: tuple = (0.15, 0.45)       # rad/s magnitude for turn families
    spline_yaw_rate: float = 0.35              # |omega0| bound for random-spline
    spline_yaw_accel: float = 0.20             # |omega slope| bound
    path_family: str = "random-spline"          # straight | left-turn | right-turn | random-spline
    frame_interval: float = 0.5
    n_past: int = 2                             # T': past offsets -n_past..0
    n_future: int = 4
    lateral_range: tuple = (2.5, 9.0)
    static_classes: tuple = (cls_ids.MANMADE, cls_ids.BARRIER)
    dynamic_class: int = cls_ids.CAR
    ground_class: int = cls_ids.DRIVABLE
    class_count: int = NUM_CLASSES
    rig: CameraRigSpec = field(default_factory=CameraRigSpec)
    mirror: bool = False

    def __post_init__(self):
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        if np.any(hi - lo <= 0):
            raise ConfigError(f"degenerate workspace bounds {self.bounds}")
        if self.n_static < 0 or self.n_dynamic < 0:
            raise ConfigError("box counts must be >= 0")
        if self.path_family not in ("straight", "left-turn", "right-turn", "random-spline"):
            raise ConfigError(f"unknown ego path family {self.path_family!r}")
        extent = hi - lo
        largest = max(self.static_xy_range[1], self.dynamic_len_range[1])
        tallest = max(self.static_h_range[1], self.dynamic_h_range[1])
        if largest > min(extent[0], extent[1]) or tallest > extent[2]:
            raise ConfigError(
                f"boxes up to {largest:.1f}x{tallest:.1f} m cannot fit inside bounds {self.bounds}"
            )

    def grid_origin(self) -> np.ndarray:
        return np.asarray(self.bounds[0], dtype=np.float64)

    def replace(self, **kw) -> "SyntheticWorldSpec":
        return dataclasses.replace(self, **kw)


@dataclass
class Box:
    center: np.ndarray      # world position at offset 0
    half: np.ndarray        # half extents
    velocity: np.ndarray    # m/s in world frame
    label: int

    def center_at(self, time_s: float) -> np.ndarray:
        return self.center + self.velocity * time_s


@dataclass
class World:
    boxes: list
    ego_speed: float
    yaw_rate0: float
    yaw_rate1: float        # linear drift of yaw rate (random-spline only)

    def mirrored(self) -> "World":
        boxes = [
            Box(b.center * np.array([1.0, -1.0, 1.0]),
                b.half.copy(),
                b.velocity * np.array([1.0, -1.0, 1.0]),
                b.label)
            for b in self.boxes
        ]
        return World(boxes, self.ego_speed, -self.yaw_rate0, -self.yaw_rate1)


_SUBSTEPS = 64  # fixed integration substeps per frame interval


def ego_pose_at(world: World, time_s: float) -> Pose:
    """Planar ego pose at a continuous time (seconds, 0 == current frame).

    Heading integrates the (possibly drifting) yaw rate; position integrates
    the heading with a fixed-substep trapezoid rule, which keeps generation
    deterministic and handles negative (past) times symmetrically.
    """
    def heading(t):
        return world.yaw_rate0 * t + 0.5 * world.yaw_rate1 * t * t

    if time_s == 0.0:
        return Pose.identity()
    n = max(1, int(round(abs(time_s) / 0.5 * _SUBSTEPS)))
    ts = np.linspace(0.0, time_s, n + 1)
    psi = heading(ts)
    vel = world.ego_speed * np.stack([np.cos(psi), np.sin(psi)], axis=-1)
    pos = np.trapezoid(vel, ts, axis=0)
    return Pose.from_planar(pos[0], pos[1], heading(time_s))


def _build_world(spec: SyntheticWorldSpec, rng: np.random.Generator) -> World:
    speed = rng.uniform(*spec.ego_speed_range)
    if spec.path_family == "straight":
        w0, w1 = 0.0, 0.0
    elif spec.path_family == "left-turn":
        w0, w1 = rng.uniform(*spec.yaw_rate_range), 0.0
    elif spec.path_family == "right-turn":
        w0, w1 = -rng.uniform(*spec.yaw_rate_range), 0.0
    else:
        w0 = rng.uniform(-spec.spline_yaw_rate, spec.spline_yaw_rate)
        w1 = rng.uniform(-spec.spline_yaw_accel, spec.spline_yaw_accel)
    world = World([], speed, w0, w1)

    horizon_s = spec.n_future * spec.frame_interval

    lo = np.asarray(spec.bounds[0])
    hi = np.asarray(spec.bounds[1])

    def spawn_center(half):
        t_path = rng.uniform(-0.5, horizon_s)
        anchor = ego_pose_at(world, t_path)
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        lateral = side * rng.uniform(*spec.lateral_range)
        along = rng.uniform(-2.0, 2.0)
        psi = anchor.yaw
        fwd = np.array([np.cos(psi), np.sin(psi)])
        left = np.array([-np.sin(psi), np.cos(psi)])
        xy = anchor.translation[:2] + along * fwd + lateral * left
        # keep the box volume inside the current-frame grid
        xy = np.clip(xy, lo[:2] + half[:2], hi[:2] - half[:2])
        return np.array([xy[0], xy[1], half[2]])

    for i in range(spec.n_static):
        hx = rng.uniform(*spec.static_xy_range) / 2.0
        hy = rng.uniform(*spec.static_xy_range) / 2.0
        hz = rng.uniform(*spec.static_h_range) / 2.0
        half = np.array([hx, hy, hz])
        label = spec.static_classes[i % len(spec.static_classes)]
        world.boxes.append(Box(spawn_center(half), half, np.zeros(3), label))

    for _ in range(spec.n_dynamic):
        hx = rng.uniform(*spec.dynamic_len_range) / 2.0
        hy = rng.uniform(*spec.dynamic_wid_range) / 2.0
        hz = rng.uniform(*spec.dynamic_h_range) / 2.0
        half = np.array([hx, hy, hz])
        heading = rng.uniform(-np.pi, np.pi)
        speed_b = rng.uniform(*spec.box_speed_range)
        vel = speed_b * np.array([np.cos(heading), np.sin(heading), 0.0])
        world.boxes.append(Box(spawn_center(half), half, vel, spec.dynamic_class))

    return world


def rasterize_world(spec: SyntheticWorldSpec, world: World, ego_pose: Pose,
                    time_s: float) -> OccupancyGrid:
    """Exact ego-centered rasterization: a voxel is occupied by a box iff its
    center lies inside the box volume at ``time_s``; later boxes win overlaps.
    The ground plane fills the z = 0 voxel layer."""
    dims = spec.grid_dims
    origin = spec.grid_origin()
    labels = np.full(dims, spec.class_count, dtype=np.uint8)
    labels[:, :, 0] = spec.ground_class

    ix, iy, iz = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")
    centers = origin + (np.stack([ix, iy, iz], axis=-1) + 0.5) * spec.voxel_size
    centers_world = ego_pose.apply(centers.reshape(-1, 3)).reshape(dims + (3,))

    for box in world.boxes:
        c = box.center_at(time_s)
        inside = np.all(np.abs(centers_world - c) <= box.half, axis=-1)
        labels[inside] = box.label
    return OccupancyGrid(dims, spec.voxel_size, origin, labels, spec.class_count)


def _safe_div_dirs(d: np.ndarray) -> np.ndarray:
    tiny = 1e-12
    return np.where(d >= 0, np.maximum(d, tiny), np.minimum(d, -tiny))


def render_view(spec: SyntheticWorldSpec, world: World, calib: CameraCalib,
                ego_pose: Pose, time_s: float) -> np.ndarray:
    """Flat-shaded semantic render: nearest hit among ground plane and boxes."""
    h, w = calib.height, calib.width
    u = (np.arange(w) + 0.5 - calib.cx) / calib.fx
    v = (np.arange(h) + 0.5 - calib.cy) / calib.fy
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)

    cam_to_world = ego_pose.matrix @ calib.cam_to_ego.matrix
    rot, origin = cam_to_world[:3, :3], cam_to_world[:3, 3]
    dirs = dirs_cam @ rot.T
    dsafe = _safe_div_dirs(dirs)

    t_best = np.full(dirs.shape[0], np.inf)
    hit_class = np.full(dirs.shape[0], -1, dtype=np.int64)

    tg = -origin[2] / dsafe[:, 2]
    ground = (dirs[:, 2] < 0) & (tg > 1e-3)
    t_best[ground] = tg[ground]
    hit_class[ground] = spec.ground_class

    for box in world.boxes:
        c = box.center_at(time_s)
        t1 = (c - box.half - origin) / dsafe
        t2 = (c + box.half - origin) / dsafe
        tmin = np.minimum(t1, t2).max(axis=-1)
        tmax = np.maximum(t1, t2).min(axis=-1)
        t_hit = np.where(tmin > 1e-3, tmin, tmax)
        hit = (tmax >= tmin) & (t_hit > 1e-3) & (t_hit < t_best)
        t_best[hit] = t_hit[hit]
        hit_class[hit] = box.label

    img = np.empty((dirs.shape[0], 3), dtype=np.float32)
    img[:] = SKY_COLOR
    hit = hit_class >= 0
    img[hit] = _PALETTE01[hit_class[hit]]
    return img.reshape(h, w, 3)


def generate_synthetic_sequence(spec: SyntheticWorldSpec, seed: int,
                                seq_id: str | None = None) -> SequenceSample:
    """Deterministic sequence: past renders, future grids, trajectory waypoints."""
    rng = np.random.default_rng(seed)
    world = _build_world(spec, rng)
    if spec.mirror:
        world = world.mirrored()
    cams = spec.rig.build(mirror=spec.mirror)
    dt = spec.frame_interval

    past = []
    for k in range(-spec.n_past, 1):
        time_s = k * dt
        pose = ego_pose_at(world, time_s)
        images = [render_view(spec, world, calib, pose, time_s) for calib in cams]
        past.append(SensorFrame(images=images, calibs=cams, ego_pose=pose,
                                timestamp=time_s, offset=k))

    current_grid = rasterize_world(spec, world, Pose.identity(), 0.0)

    future_grids, waypoints = [], []
    for t in range(1, spec.n_future + 1):
        time_s = t * dt
        pose = ego_pose_at(world, time_s)
        future_grids.append(rasterize_world(spec, world, pose, time_s))
        waypoints.append(TrajectoryWaypoint(pose.translation[0], pose.translation[1],
                                            pose.yaw, float(t)))

    return SequenceSample(
        past=past, future_grids=future_grids, trajectory=waypoints,
        current_grid=current_grid,
        seq_id=seq_id or f"seq{seed:06d}",
        frame_interval=dt,
        meta={"seed": int(seed), "path_family": spec.path_family,
              "mirror": bool(spec.mirror)},
    )


def generate_dataset(spec: SyntheticWorldSpec, count: int, base_seed: int = 0,
                     family_cycle=None) -> list:
    """Generate ``count`` sequences with seeds base_seed..base_seed+count-1.

    ``family_cycle`` optionally overrides the path family per sequence index
    (e.g. ("left-turn", "right-turn") for a steering-dependent split)."""
    samples = []
    for i in range(count):
        s = spec
        if family_cycle:
            s = spec.replace(path_family=family_cycle[i % len(family_cycle)])
        samples.append(generate_synthetic_sequence(s, base_seed + i, seq_id=f"seq{i:04d}"))
    return samples


def steering_dataset(spec: SyntheticWorldSpec, count: int, base_seed: int = 0) -> list:
    """Alternating left/right-turn sequences; the steering-dependent split."""
    return generate_dataset(spec, count, base_seed,
                            family_cycle=("left-turn", "right-turn"))
