"""Rigid-body poses, pinhole cameras and 3D->pixel projection.

Conventions: right-handed ego frame with x forward, y left, z up.  A ``Pose``
maps points from its own frame into the parent frame (``ego_pose`` maps ego
coordinates to world coordinates).  Camera frames use the usual pinhole axes
(z forward through the lens, x right, y down); the conversion lives in each
camera's ``cam_to_ego`` pose.

All numpy math here is float64.  ``project_points_torch`` is the
differentiable twin used inside the sampling hot path; it consumes
precomputed 4x4 chains produced from these poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

ROT_TOL = 1e-6
DEFAULT_NEAR_PLANE = 0.1

# Columns are the camera axes (x right, y down, z forward) expressed in ego
# axes (x forward, y left, z up) for a camera looking along ego +x.
CAM_AXES_IN_EGO = np.array(
    [[0.0, 0.0, 1.0],
     [-1.0, 0.0, 0.0],
     [0.0, -1.0, 0.0]]
)


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation (3x3, det +1) plus translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > ROT_TOL or abs(np.linalg.det(rot) - 1.0) > ROT_TOL:
            raise ValueError(f"rotation is not orthonormal with det +1 (err={err:.2e})")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(mat: np.ndarray) -> "Pose":
        mat = np.asarray(mat, dtype=np.float64).reshape(4, 4)
        return Pose(mat[:3, :3], mat[:3, 3])

    @staticmethod
    def from_planar(x: float, y: float, yaw: float, z: float = 0.0) -> "Pose":
        """Planar pose (translation in the ground plane, rotation about z)."""
        c, s = np.cos(yaw), np.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return Pose(rot, np.array([x, y, z]))

    @property
    def matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    @property
    def yaw(self) -> float:
        return float(np.arctan2(self.rotation[1, 0], self.rotation[0, 0]))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (K,3) points from this frame into the parent frame."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.rotation.T + self.translation


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    rot = p.rotation.T
    return Pose(rot, -rot @ p.translation)


def relative_pose(frm: Pose, to: Pose) -> Pose:
    """Transform from ``frm`` coordinates into ``to`` coordinates.

    Satisfies compose(to, relative_pose(frm, to)) == frm.
    """
    return compose(inverse(to), frm)


@dataclass(frozen=True)
class CameraCalib:
    """Pinhole intrinsics plus the camera-to-ego extrinsic pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_to_ego: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def make_camera(yaw: float, height: float, hfov_deg: float, width: int, height_px: int,
                pitch_deg: float = 0.0, x: float = 0.0, y: float = 0.0) -> CameraCalib:
    """Build a rig camera: mounted at (x, y, height), yawed about ego z."""
    fx = (width / 2.0) / np.tan(np.radians(hfov_deg) / 2.0)
    c, s = np.cos(yaw), np.sin(yaw)
    yaw_rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    pr = np.radians(pitch_deg)
    cp, sp = np.cos(pr), np.sin(pr)
    # pitch about ego y (positive pitch looks down)
    pitch_rot = np.array([[cp, 0.0, -sp], [0.0, 1.0, 0.0], [sp, 0.0, cp]])
    rot = yaw_rot @ pitch_rot @ CAM_AXES_IN_EGO
    pose = Pose(rot, np.array([x, y, height]))
    return CameraCalib(fx=fx, fy=fx, cx=width / 2.0, cy=height_px / 2.0,
                       width=width, height=height_px, cam_to_ego=pose)


def project_points(points: np.ndarray, calib: CameraCalib, ego_target: Pose,
                   ego_source: Pose, near: float = DEFAULT_NEAR_PLANE):
    """Project points given in the target ego frame into a source-frame camera.

    Chain: target ego -> world -> source ego -> camera -> pixel.  A point is
    valid iff its camera depth exceeds ``near`` and the pixel falls inside
    [0,width) x [0,height).  Pixels of invalid points are finite but
    unspecified.

    Returns (pixels (K,2), depth (K,), valid (K,) bool).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    target_to_cam = compose(inverse(calib.cam_to_ego), compose(inverse(ego_source), ego_target))
    cam_pts = target_to_cam.apply(pts)
    depth = cam_pts[:, 2]
    z_safe = np.where(np.abs(depth) < 1e-9, 1e-9, depth)
    u = calib.fx * cam_pts[:, 0] / z_safe + calib.cx
    v = calib.fy * cam_pts[:, 1] / z_safe + calib.cy
    pixels = np.stack([u, v], axis=-1)
    valid = (
        (depth > near)
        & (u >= 0.0) & (u < calib.width)
        & (v >= 0.0) & (v < calib.height)
    )
    return pixels, depth, valid


def unproject_pixel(pixels: np.ndarray, depth: np.ndarray, calib: CameraCalib,
                    ego_source: Pose, ego_target: Pose) -> np.ndarray:
    """Inverse of project_points: recover target-ego 3D points from pixel+depth."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    x = (px[:, 0] - calib.cx) / calib.fx * d
    y = (px[:, 1] - calib.cy) / calib.fy * d
    cam_pts = np.stack([x, y, d], axis=-1)
    cam_to_target = compose(inverse(ego_target), compose(ego_source, calib.cam_to_ego))
    return cam_to_target.apply(cam_pts)


def target_to_camera_matrix(calib: CameraCalib, ego_target: Pose, ego_source: Pose) -> np.ndarray:
    """Precompute the 4x4 chain used by the torch projection twin."""
    return compose(inverse(calib.cam_to_ego), compose(inverse(ego_source), ego_target)).matrix


def project_points_torch(points: torch.Tensor, target_to_cam: torch.Tensor,
                         fx, fy, cx, cy, width, height, near: float = DEFAULT_NEAR_PLANE):
    """Differentiable projection through precomputed 4x4 chains.

    points: (P, 3); target_to_cam: (4, 4) or batched (m, 4, 4); the
    intrinsics may be scalars or (m,) tensors matching the batch.  Returns
    (pixels (..., P, 2), depth (..., P), valid (..., P) bool) with the
    leading camera dimension present iff the matrices were batched.
    """
    rot = target_to_cam[..., :3, :3]
    tra = target_to_cam[..., :3, 3]
    cam = points @ rot.transpose(-2, -1) + tra.unsqueeze(-2)

    def per_cam(v):
        t = torch.as_tensor(v, dtype=points.dtype, device=points.device)
        return t.unsqueeze(-1) if t.dim() == 1 else t

    fx, fy, cx, cy, width, height = (per_cam(v) for v in (fx, fy, cx, cy, width, height))
    depth = cam[..., 2]
    z_safe = torch.where(depth.abs() < 1e-9, torch.full_like(depth, 1e-9), depth)
    u = fx * cam[..., 0] / z_safe + cx
    v = fy * cam[..., 1] / z_safe + cy
    pixels = torch.stack([u, v], dim=-1)
    valid = (depth > near) & (u >= 0) & (u < width) & (v >= 0) & (v < height)
    return pixels, depth, valid
