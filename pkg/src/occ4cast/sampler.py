"""Deformable multi-view sampling of past image features.

Anchor centers (expressed in the current ego frame) are transported into
each past frame via the relative ego pose, perturbed by learned unit offsets
scaled with the per-axis anchor stds, projected into every camera, and
bilinearly sampled from each pyramid level.  Samples are averaged across the
views that see them and combined with query-conditioned softmax attention
weights over (levels x offsets).  Anchors invisible everywhere yield a zero
vector with validity false.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import geometry
from .backbone import STRIDES, BackboneConfig, ImageFeaturePyramid
from .geometry import Pose
from .trajectory import time_embedding


@dataclass(frozen=True)
class SamplerConfig:
    strides: tuple = STRIDES
    offsets_per_level: int = 4
    near_plane: float = 0.1
    backbone: BackboneConfig = BackboneConfig()


@dataclass
class SensorEmbedding:
    """Per-anchor, per-past-frame sampled features; invalid entries are zero."""

    vectors: torch.Tensor   # (N, P, D)
    valid: torch.Tensor     # (N, P) bool


def bilinear_sample(fmap: torch.Tensor, xy: torch.Tensor) -> torch.Tensor:
    """Border-clamped bilinear lookup.

    fmap (B, C, H, W), xy (B, Q, 2) in feature-grid coordinates where integer
    (x, y) hits cell centers exactly.  Returns (B, Q, C).
    """
    b, c, h, w = fmap.shape
    size = torch.tensor([w, h], dtype=fmap.dtype, device=fmap.device)
    grid = (2.0 * (xy + 0.5) / size - 1.0).unsqueeze(2)  # (B, Q, 1, 2) in [-1, 1]
    # clamp keeps far out-of-image queries finite for grid_sample; such
    # samples are masked invalid by the caller anyway
    grid = grid.clamp(-2.0, 2.0)
    out = torch.nn.functional.grid_sample(
        fmap, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out.squeeze(-1).transpose(1, 2)  # (B, Q, C)


class DeformableSampler(nn.Module):
    """Learned-offset multi-view sampler over one frame's pyramid."""

    def __init__(self, config: SamplerConfig, dim: int):
        super().__init__()
        self.config = config
        self.dim = dim
        n_levels = len(config.strides)
        k = config.offsets_per_level
        self.unit_offsets = nn.Parameter(torch.randn(n_levels, k, 3))
        self.weight_proj = nn.Linear(dim, n_levels * k)

    def sample_frame(self, centers: torch.Tensor, stds: torch.Tensor,
                     query: torch.Tensor, pyramid: ImageFeaturePyramid,
                     reference: Pose):
        """(N,3) centers -> ((N, D) features, (N,) valid) for one past frame."""
        emb = self.forward(centers, stds, query, [pyramid], reference)
        return emb.vectors[:, 0], emb.valid[:, 0]

    def forward(self, centers: torch.Tensor, stds: torch.Tensor, query: torch.Tensor,
                pyramids: list, reference: Pose) -> SensorEmbedding:
        """Sample every past frame at once.

        All (frame, camera) pairs are flattened into one projection batch and
        one bilinear pass per pyramid level; view averaging then reduces the
        camera axis within each frame.  Returns vectors (N, P, D) and
        validity (N, P).
        """
        cfg = self.config
        dtype = centers.dtype
        n = centers.shape[0]
        n_levels, k = self.unit_offsets.shape[0], self.unit_offsets.shape[1]
        p_frames = len(pyramids)
        m = len(pyramids[0].calibs)

        # sample points: center + unit_offset * per-axis std  -> (N, L, K, 3)
        pts = centers[:, None, None, :] + self.unit_offsets[None] * stds[:, None, None, :]

        calibs = [calib for pyr in pyramids for calib in pyr.calibs]
        mats = np.stack([
            geometry.target_to_camera_matrix(calib, reference, pyr.ego_pose)
            for pyr in pyramids for calib in pyr.calibs
        ])
        mats_t = torch.as_tensor(mats, dtype=dtype, device=centers.device)

        def intr(attr):
            return torch.tensor([float(getattr(c, attr)) for c in calibs],
                                dtype=dtype, device=centers.device)

        pixels, _, valid = geometry.project_points_torch(
            pts.reshape(-1, 3), mats_t, intr("fx"), intr("fy"), intr("cx"),
            intr("cy"), intr("width"), intr("height"), near=cfg.near_plane)
        pixels = pixels.reshape(p_frames * m, n, n_levels, k, 2)
        valid = valid.reshape(p_frames * m, n, n_levels, k)

        per_level = []
        for li, stride in enumerate(cfg.strides):
            fmap = torch.cat([pyr.levels[li] for pyr in pyramids], dim=0)
            xy = pixels[:, :, li].reshape(p_frames * m, n * k, 2) / stride - 0.5
            feats = bilinear_sample(fmap, xy)                  # (P*m, N*K, D)
            feats = feats.reshape(p_frames, m, n, k, self.dim)
            vmask = valid[:, :, li].reshape(p_frames, m, n, k, 1).to(dtype)
            summed = (feats * vmask).sum(dim=1)
            count = vmask.sum(dim=1).clamp(min=1.0)
            per_level.append(summed / count)                   # (P, N, K, D)
        sampled = torch.stack(per_level, dim=2)                # (P, N, L, K, D)

        weights = torch.softmax(self.weight_proj(query), dim=-1)          # (N, L*K)
        sampled = sampled.reshape(p_frames, n, n_levels * k, self.dim)
        out = torch.einsum("ns,pnsd->npd", weights, sampled)              # (N, P, D)
        anchor_valid = (valid.reshape(p_frames, m, n, n_levels * k)
                        .any(dim=1).any(dim=-1).permute(1, 0))            # (N, P)
        out = out * anchor_valid.to(dtype).unsqueeze(-1)
        return SensorEmbedding(vectors=out, valid=anchor_valid)


class TemporalEncoder(nn.Module):
    """Adds FC(sinusoidal age embedding) to the valid sensor vectors."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc = nn.Linear(dim, dim)

    def forward(self, embedding: SensorEmbedding, frame_offsets) -> SensorEmbedding:
        dtype = embedding.vectors.dtype
        ages = [float(-off) for off in frame_offsets]  # past offsets are <= 0
        enc = self.fc(time_embedding(ages, self.dim, dtype=dtype))      # (P, D)
        mask = embedding.valid.to(dtype).unsqueeze(-1)                  # (N, P, 1)
        return SensorEmbedding(vectors=embedding.vectors + mask * enc.unsqueeze(0),
                               valid=embedding.valid)


def add_temporal_encoding(embedding: SensorEmbedding, frame_offsets,
                          encoder: TemporalEncoder) -> SensorEmbedding:
    if len(list(frame_offsets)) != embedding.vectors.shape[1]:
        raise ValueError("need one frame offset per past frame")
    return encoder(embedding, frame_offsets)


class PyramidCache:
    """Optional on-disk cache of extracted pyramids.

    Files are .npz blobs keyed by sha1(sequence id, frame offset, backbone
    weights hash); each blob stores one array per level plus the strides.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, seq_id: str, frame_offset: int, backbone_hash: str) -> Path:
        key = hashlib.sha1(f"{seq_id}|{frame_offset}|{backbone_hash}".encode()).hexdigest()
        return self.root / f"{key}.npz"

    def put(self, seq_id: str, frame_offset: int, backbone_hash: str,
            pyramid: ImageFeaturePyramid):
        arrays = {f"level_{i}": lvl.detach().cpu().numpy()
                  for i, lvl in enumerate(pyramid.levels)}
        arrays["strides"] = np.asarray(pyramid.strides)
        np.savez(self._path(seq_id, frame_offset, backbone_hash), **arrays)

    def get(self, seq_id: str, frame_offset: int, backbone_hash: str,
            calibs, ego_pose: Pose, dtype=torch.float32):
        path = self._path(seq_id, frame_offset, backbone_hash)
        if not path.exists():
            return None
        blob = np.load(path)
        n_levels = sum(1 for k in blob.files if k.startswith("level_"))
        levels = [torch.as_tensor(blob[f"level_{i}"]).to(dtype) for i in range(n_levels)]
        return ImageFeaturePyramid(levels=levels, calibs=calibs, ego_pose=ego_pose,
                                   frame_offset=frame_offset,
                                   strides=tuple(int(s) for s in blob["strides"]))
