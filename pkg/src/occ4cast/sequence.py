"""Sequence containers and the on-disk dataset layout.

A sequence couples past multi-camera sensor frames (current frame last, at
offset 0) with future ego-centered occupancy grids and the trajectory
waypoints that generated them.  On disk each sequence is a directory:

    <seq>/manifest.json       frame metadata, calibrations, poses, waypoints
    <seq>/images/*.png        8-bit renders, one file per (frame, camera)
    <seq>/grids/*.occ4        future grids plus the current-frame grid

A dataset directory holds ``dataset.json`` (index + generation metadata)
next to a ``sequences/`` tree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .geometry import CameraCalib, Pose
from .grid import OccupancyGrid, read_grid, write_grid
from .trajectory import TrajectoryWaypoint

MANIFEST_NAME = "manifest.json"


@dataclass
class SensorFrame:
    """All cameras of one timestamp: images in [0,1], calibs, ego->world pose."""

    images: list
    calibs: list
    ego_pose: Pose
    timestamp: float
    offset: int = 0

    def __post_init__(self):
        if len(self.images) < 1 or len(self.images) != len(self.calibs):
            raise ValueError("frame needs >= 1 camera and matching calib count")
        self.images = [np.asarray(im, dtype=np.float32) for im in self.images]


@dataclass
class SequenceSample:
    past: list               # T'+1 SensorFrame, current frame last (offset 0)
    future_grids: list       # up to T_max OccupancyGrid, each in its own ego frame
    trajectory: list         # TrajectoryWaypoint aligned with future_grids
    current_grid: OccupancyGrid | None = None
    seq_id: str = "seq"
    frame_interval: float = 0.5
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.trajectory) != len(self.future_grids):
            raise ValueError("trajectory length must equal future grid count")
        stamps = [f.timestamp for f in self.past]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise ValueError("past frame timestamps must be strictly increasing")

    @property
    def num_past(self) -> int:
        return len(self.past)

    @property
    def num_future(self) -> int:
        return len(self.future_grids)

    def current_frame(self) -> SensorFrame:
        return self.past[-1]


def _pose_to_list(pose: Pose) -> list:
    return [float(v) for v in pose.matrix.reshape(16)]


def _pose_from_list(values, where: str) -> Pose:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size != 16:
        raise DataError(f"{where}: ego pose needs 16 row-major values, got {arr.size}")
    return Pose.from_matrix(arr.reshape(4, 4))


def _save_image(path: Path, image: np.ndarray):
    arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path, format="PNG")


def _load_image(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_sequence(seq_dir, sample: SequenceSample):
    """Write one sequence in the manifest + OCC4 layout."""
    seq_dir = Path(seq_dir)
    (seq_dir / "images").mkdir(parents=True, exist_ok=True)
    (seq_dir / "grids").mkdir(parents=True, exist_ok=True)

    past_entries = []
    for k, frame in enumerate(sample.past):
        cams = []
        for c, (img, calib) in enumerate(zip(frame.images, frame.calibs)):
            rel = f"images/past{k}_cam{c}.png"
            _save_image(seq_dir / rel, img)
            cams.append({
                "image": rel,
                "fx": calib.fx, "fy": calib.fy, "cx": calib.cx, "cy": calib.cy,
                "width": calib.width, "height": calib.height,
                "cam_to_ego": _pose_to_list(calib.cam_to_ego),
            })
        past_entries.append({
            "offset": frame.offset,
            "timestamp": frame.timestamp,
            "ego_pose": _pose_to_list(frame.ego_pose),
            "cameras": cams,
        })

    future_entries = []
    for t, (grid, wp) in enumerate(zip(sample.future_grids, sample.trajectory), start=1):
        rel = f"grids/future_{t}.occ4"
        write_grid(seq_dir / rel, grid)
        future_entries.append({"offset": t, "grid": rel, "waypoint": wp.as_dict()})

    manifest = {
        "seq_id": sample.seq_id,
        "frame_interval": sample.frame_interval,
        "past_frames": past_entries,
        "future_frames": future_entries,
        "meta": sample.meta,
    }
    if sample.current_grid is not None:
        write_grid(seq_dir / "grids/current.occ4", sample.current_grid)
        manifest["current_grid"] = "grids/current.occ4"

    (seq_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_occ3d_sample(manifest_path) -> SequenceSample:
    """Load one sequence from its manifest; errors name the offending file."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent

    for key in ("past_frames", "future_frames"):
        if key not in manifest:
            raise DataError(f"{manifest_path}: missing '{key}' section")

    past = []
    for entry in manifest["past_frames"]:
        images, calibs = [], []
        for cam in entry["cameras"]:
            img_path = root / cam["image"]
            img = _load_image(img_path)
            if img.shape[:2] != (cam["height"], cam["width"]):
                raise DataError(
                    f"{img_path}: image is {img.shape[1]}x{img.shape[0]}, manifest "
                    f"declares {cam['width']}x{cam['height']}"
                )
            images.append(img)
            calibs.append(CameraCalib(
                fx=cam["fx"], fy=cam["fy"], cx=cam["cx"], cy=cam["cy"],
                width=cam["width"], height=cam["height"],
                cam_to_ego=_pose_from_list(cam["cam_to_ego"], str(manifest_path)),
            ))
        past.append(SensorFrame(
            images=images, calibs=calibs,
            ego_pose=_pose_from_list(entry["ego_pose"], str(manifest_path)),
            timestamp=float(entry["timestamp"]),
            offset=int(entry.get("offset", 0)),
        ))

    future_grids, waypoints = [], []
    for entry in manifest["future_frames"]:
        grid_path = root / entry["grid"]
        grid = read_grid(grid_path)
        wp = entry["waypoint"]
        future_grids.append(grid)
        waypoints.append(TrajectoryWaypoint(wp["x"], wp["y"], wp["theta"], wp["t"]))

    current_grid = None
    if "current_grid" in manifest:
        current_grid = read_grid(root / manifest["current_grid"])

    return SequenceSample(
        past=past, future_grids=future_grids, trajectory=waypoints,
        current_grid=current_grid, seq_id=manifest.get("seq_id", root.name),
        frame_interval=float(manifest.get("frame_interval", 0.5)),
        meta=manifest.get("meta", {}),
    )


def save_dataset(out_dir, samples, extra_meta=None):
    """Write samples under <out_dir>/sequences plus a dataset.json index."""
    out_dir = Path(out_dir)
    seq_root = out_dir / "sequences"
    seq_root.mkdir(parents=True, exist_ok=True)
    names = []
    for sample in samples:
        save_sequence(seq_root / sample.seq_id, sample)
        names.append(sample.seq_id)
    index = {"sequences": names, "meta": extra_meta or {}}
    (out_dir / "dataset.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return out_dir


def load_dataset(root) -> list:
    """Load every sequence listed by <root>/dataset.json (or scan the tree)."""
    root = Path(root)
    if not root.exists():
        raise DataError(f"dataset directory not found: {root}")
    index = root / "dataset.json"
    if index.exists():
        names = json.loads(index.read_text())["sequences"]
        dirs = [root / "sequences" / name for name in names]
    else:
        dirs = sorted(p.parent for p in root.glob("**/" + MANIFEST_NAME))
        if not dirs:
            raise DataError(f"no sequence manifests under {root}")
    return [load_occ3d_sample(d) for d in dirs]
