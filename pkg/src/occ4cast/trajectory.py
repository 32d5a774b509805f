"""Trajectory waypoints and their spatiotemporal feature embedding.

A planned trajectory is a list of planar ego states (x, y, heading) tagged
with a frame offset t > 0 relative to the current frame.  Each waypoint is
turned into one conditioning vector: a sinusoidal time embedding and an
MLP position embedding (relative-pose coordinates plus the flattened 4x4
relative matrix) feed two linear layers that output a scale and a shift,
which modulate a learned per-frame base token (motion-aware layer
normalization style).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import geometry
from .geometry import Pose


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class TrajectoryWaypoint:
    """Planar ego state at frame offset ``t`` (in frames, may be fractional)."""

    x: float
    y: float
    theta: float
    t: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def pose(self) -> Pose:
        return Pose.from_planar(self.x, self.y, self.theta)

    def as_dict(self) -> dict:
        return {"x": float(self.x), "y": float(self.y),
                "theta": float(self.theta), "t": float(self.t)}


def time_embedding(frame_offsets, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Classic sinusoidal encoding of frame offsets; (T, dim), dim even.

    Dimension pair (2k, 2k+1) carries sin/cos of offset / 10000^(2k/dim).
    """
    if dim % 2 != 0:
        raise ValueError("time embedding dimension must be even")
    if isinstance(frame_offsets, torch.Tensor):
        offsets = frame_offsets.to(dtype)
    else:
        offsets = torch.as_tensor(np.asarray(frame_offsets, dtype=np.float64), dtype=dtype)
    offsets = offsets.reshape(-1, 1)
    k = torch.arange(0, dim, 2, dtype=dtype)
    inv_freq = torch.pow(torch.tensor(10000.0, dtype=dtype), k / dim)
    angles = offsets / inv_freq  # (T, dim/2)
    emb = torch.zeros(offsets.shape[0], dim, dtype=dtype)
    emb[:, 0::2] = torch.sin(angles)
    emb[:, 1::2] = torch.cos(angles)
    return emb


class PositionEmbedding(nn.Module):
    """Waypoint -> D feature: MLP(relative xyz) + MLP(flattened relative 4x4)."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.coord_mlp = nn.Sequential(nn.Linear(3, dim), nn.ReLU(), nn.Linear(dim, dim))
        self.matrix_mlp = nn.Sequential(nn.Linear(16, dim), nn.ReLU(), nn.Linear(dim, dim))

    def forward(self, waypoints, reference: Pose | None = None) -> torch.Tensor:
        if reference is None:
            reference = Pose.identity()
        dtype = self.coord_mlp[0].weight.dtype
        coords, mats = [], []
        for wp in waypoints:
            rel = geometry.relative_pose(wp.pose(), reference)
            coords.append(rel.translation)
            mats.append(rel.matrix.reshape(16))
        coords_t = torch.as_tensor(np.stack(coords), dtype=dtype)
        mats_t = torch.as_tensor(np.stack(mats), dtype=dtype)
        return self.coord_mlp(coords_t) + self.matrix_mlp(mats_t)

    def embed_tensors(self, coords: torch.Tensor, matrices: torch.Tensor) -> torch.Tensor:
        """Differentiable path for prebuilt relative coordinates/matrices."""
        return self.coord_mlp(coords) + self.matrix_mlp(matrices.reshape(-1, 16))


class SpatiotemporalModulation(nn.Module):
    """Scale/shift conditioning of normalized features (MLN-style).

    Two linear layers map the concatenated (position, time) embedding to a
    per-channel scale gamma and shift beta; output = gamma * LN(x) + beta.
    Initialized to the identity modulation (gamma = 1, beta = 0).
    """

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.scale = nn.Linear(2 * dim, dim)
        self.shift = nn.Linear(2 * dim, dim)
        nn.init.zeros_(self.scale.weight)
        nn.init.ones_(self.scale.bias)
        nn.init.zeros_(self.shift.weight)
        nn.init.zeros_(self.shift.bias)

    def forward(self, query: torch.Tensor, pos_emb: torch.Tensor,
                time_emb: torch.Tensor) -> torch.Tensor:
        cond = torch.cat([pos_emb, time_emb], dim=-1)
        gamma = self.scale(cond)
        beta = self.shift(cond)
        normed = nn.functional.layer_norm(query, (self.dim,))
        return gamma * normed + beta


def spatiotemporal_modulate(query: torch.Tensor, pos_emb: torch.Tensor,
                            time_emb: torch.Tensor, module: SpatiotemporalModulation) -> torch.Tensor:
    return module(query, pos_emb, time_emb)


class TrajectoryEncoder(nn.Module):
    """Full trajectory embedding: one conditioned token per future frame.

    Token t = modulate(base_token[t], position_embedding row t,
    time_embedding row t).  Base tokens are indexed by sequence position and
    bound the maximum forecast horizon.
    """

    def __init__(self, dim: int, max_frames: int):
        super().__init__()
        self.dim = dim
        self.max_frames = max_frames
        self.base_tokens = nn.Parameter(torch.randn(max_frames, dim) * 0.02)
        self.position = PositionEmbedding(dim)
        self.modulation = SpatiotemporalModulation(dim)

    def forward(self, waypoints, reference: Pose | None = None) -> torch.Tensor:
        if len(waypoints) > self.max_frames:
            raise ValueError(
                f"{len(waypoints)} waypoints exceed the encoder horizon {self.max_frames}"
            )
        dtype = self.base_tokens.dtype
        pos = self.position(waypoints, reference)  # (T, D)
        times = time_embedding([wp.t for wp in waypoints], self.dim, dtype=dtype)
        base = self.base_tokens[: len(waypoints)]
        return self.modulation(base, pos, times)

    def conditioning(self, waypoints, reference: Pose | None = None) -> torch.Tensor:
        """(T, 2D) concatenated pos/time rows, for per-query modulation."""
        dtype = self.base_tokens.dtype
        pos = self.position(waypoints, reference)
        times = time_embedding([wp.t for wp in waypoints], self.dim, dtype=dtype)
        return torch.cat([pos, times], dim=-1)
