"""Fully attention-based occupancy world model.

Stacked refinement blocks turn randomly initialized anchor states into the
forecast: per future frame, recompute anchor statistics, sample past sensor
features deformably, cross-attend occupancy queries to them, self-attend the
occupancy tokens together with the frame's trajectory token, then run joint
self-attention across all future frames and decode per-point offsets and
logits.  Anchor centers enter the token stream through a small positional
MLP applied to queries and keys; the feature vectors themselves start at
zero, so this is what breaks the initial symmetry between anchors.

All future frames travel through the stack as one batched leading dimension
(the per-frame ops never mix frames until the temporal block), which keeps
the CPU dispatch count flat in the horizon length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .anchors import AnchorConfig, AnchorDecoder, DecodedFrame, anchor_statistics
from .backbone import ConvEncoder, extract_features
from .sampler import (DeformableSampler, SamplerConfig, SensorEmbedding,
                      TemporalEncoder, add_temporal_encoding)
from .trajectory import TrajectoryEncoder


@dataclass(frozen=True)
class WorldModelConfig:
    dim: int = 64
    heads: int = 4
    blocks: int = 2
    t_max: int = 4
    t_prime: int = 2                       # past frames besides the current one
    anchor: AnchorConfig = AnchorConfig()
    sampler: SamplerConfig = SamplerConfig()
    dropout: float = 0.0
    temporal_mode: str = "joint"           # joint | factorized
    share_initial_anchors: bool = False    # one anchor draw shared by all frames
    per_query_modulation: bool = False     # also modulate occupancy queries
    freeze_sensor_embedding: bool = False  # sample once instead of per block

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError("dim must be divisible by heads")
        if self.blocks < 1 or self.t_max < 1:
            raise ValueError("blocks and t_max must be >= 1")
        if self.temporal_mode not in ("joint", "factorized"):
            raise ValueError(f"unknown temporal mode {self.temporal_mode!r}")
        if self.anchor.feature_dim != self.dim:
            raise ValueError("anchor feature dim must match model dim")


@dataclass
class ForecastOutput:
    frames: list  # L DecodedFrame


def _batched(x: torch.Tensor, dims: int):
    """Add a leading batch axis when the input arrives unbatched."""
    if x.dim() == dims:
        return x.unsqueeze(0), True
    return x, False


class MultiheadAttention(nn.Module):
    """Plain batched multi-head attention with key-validity masking.

    query (B, Q, D), key/value (B, K, D), key_valid (B, K) bool or None.
    Queries whose key set is entirely invalid receive a zero update.
    """

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query, key, value, key_valid=None):
        b, q_len, _ = query.shape
        k_len = key.shape[1]

        def split(x):
            return x.reshape(b, -1, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.q_proj(query))
        k = split(self.k_proj(key))
        v = split(self.v_proj(value))
        scores = q @ k.transpose(-2, -1) / (self.head_dim ** 0.5)  # (B, h, Q, K)

        any_valid = None
        if key_valid is not None:
            mask = key_valid.reshape(b, 1, 1, k_len)
            scores = scores.masked_fill(~mask, float("-inf"))
            any_valid = key_valid.any(dim=-1).reshape(b, 1, 1, 1)
            # keep softmax finite for fully masked rows, zero them afterwards
            scores = torch.where(any_valid, scores, torch.zeros_like(scores))
            attn = torch.softmax(scores, dim=-1)
            attn = torch.where(any_valid, attn, torch.zeros_like(attn))
        else:
            attn = torch.softmax(scores, dim=-1)

        attn = self.dropout(attn)
        out = (attn @ v).transpose(1, 2).reshape(b, q_len, self.dim)
        out = self.out_proj(out)
        if any_valid is not None:
            # a fully masked key set must leave the residual stream untouched
            out = torch.where(any_valid.reshape(b, 1, 1), out, torch.zeros_like(out))
        return out


class FrameCrossAttention(nn.Module):
    """Occupancy queries attend to their frame's sensor embedding set."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads, dropout)

    def forward(self, occ: torch.Tensor, sensor: SensorEmbedding,
                query_pos=None, key_pos=None) -> torch.Tensor:
        occ, squeeze = _batched(occ, 2)
        vectors, valid = sensor.vectors, sensor.valid
        if vectors.dim() == 3:
            vectors = vectors.unsqueeze(0)
            valid = valid.unsqueeze(0)
        b, n, p, d = vectors.shape
        kv = self.norm_kv(vectors.reshape(b, n * p, d))
        k_in = kv if key_pos is None else kv + key_pos.reshape(b, n * p, d)
        q_in = self.norm_q(occ)
        if query_pos is not None:
            q_in = q_in + query_pos.reshape(b, n, d)
        update = self.attn(q_in, k_in, kv, key_valid=valid.reshape(b, n * p))
        out = occ + update
        return out.squeeze(0) if squeeze else out


class FrameSelfAttention(nn.Module):
    """Joint self-attention over the N occupancy tokens plus the trajectory token."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads, dropout)

    def forward(self, occ: torch.Tensor, traj: torch.Tensor, query_pos=None):
        occ, squeeze = _batched(occ, 2)
        traj, _ = _batched(traj, 1)
        tokens = torch.cat([occ, traj.unsqueeze(1)], dim=1)  # (B, N+1, D)
        normed = self.norm(tokens)
        x = normed
        if query_pos is not None:
            query_pos, _ = _batched(query_pos, 2)
            pad = torch.zeros_like(traj).unsqueeze(1)
            x = normed + torch.cat([query_pos, pad], dim=1)
        tokens = tokens + self.attn(x, x, normed)
        occ_out, traj_out = tokens[:, :-1], tokens[:, -1]
        if squeeze:
            return occ_out.squeeze(0), traj_out.squeeze(0)
        return occ_out, traj_out


class TemporalSelfAttention(nn.Module):
    """Self-attention across future frames with a learned frame-index encoding.

    joint mode attends over all N*L tokens; factorized mode attends over the
    L frames of each anchor index separately (cheaper for large N).
    """

    def __init__(self, dim: int, heads: int, t_max: int, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads, dropout)
        self.frame_encoding = nn.Parameter(torch.randn(t_max, dim) * 0.02)

    def forward(self, features: torch.Tensor, mode: str = "joint") -> torch.Tensor:
        l, n, d = features.shape
        enc = self.frame_encoding[:l].unsqueeze(1).expand(l, n, d)
        if mode == "joint":
            x = self.norm(features).reshape(1, l * n, d)
            qk = x + enc.reshape(1, l * n, d)
            update = self.attn(qk, qk, x).reshape(l, n, d)
        else:
            x = self.norm(features).permute(1, 0, 2)          # (N, L, D)
            qk = x + enc.permute(1, 0, 2)
            update = self.attn(qk, qk, x).permute(1, 0, 2)
        return features + update


class RefinementBlock(nn.Module):
    def __init__(self, config: WorldModelConfig):
        super().__init__()
        self.cross = FrameCrossAttention(config.dim, config.heads, config.dropout)
        self.self_attn = FrameSelfAttention(config.dim, config.heads, config.dropout)
        self.temporal = TemporalSelfAttention(config.dim, config.heads, config.t_max,
                                              config.dropout)


class CenterEncoder(nn.Module):
    """Anchor-center positional encoding: Fourier features -> linear map.

    Octave-spaced sinusoids resolve structure well below the workspace scale;
    the single orthogonally initialized linear layer keeps every frequency
    component linearly decodable from the token stream, so the decoding heads
    can always recover the anchor position precisely.
    """

    def __init__(self, dim: int, base_wavelength: float = 48.0, n_freqs: int = 8):
        super().__init__()
        freqs = 2.0 * torch.pi / base_wavelength * (2.0 ** torch.arange(n_freqs))
        self.register_buffer("freqs", freqs)
        self.proj = nn.Linear(6 * n_freqs, dim)
        nn.init.orthogonal_(self.proj.weight)

    def forward(self, centers: torch.Tensor) -> torch.Tensor:
        angles = centers.unsqueeze(-1) * self.freqs  # (..., 3, F)
        enc = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
        return self.proj(enc.flatten(-2))


class OccupancyWorldModel(nn.Module):
    """End-to-end trajectory-conditioned occupancy forecaster."""

    def __init__(self, config: WorldModelConfig):
        super().__init__()
        self.config = config
        d = config.dim
        self.encoder = ConvEncoder(config.sampler.backbone, d)
        self.sampler = DeformableSampler(config.sampler, d)
        self.temporal_encoder = TemporalEncoder(d)
        self.trajectory_encoder = TrajectoryEncoder(d, config.t_max)
        self.center_pos = CenterEncoder(d)
        self.blocks = nn.ModuleList(RefinementBlock(config) for _ in range(config.blocks))
        self.decoder = AnchorDecoder(config.anchor)

    def extract_pyramids(self, past_frames) -> list:
        return extract_features(past_frames, self.encoder)

    def forecast(self, anchor_states, past_frames, trajectory,
                 pyramids=None, return_intermediate: bool = False):
        """Run the refinement stack; returns ForecastOutput (and per-block
        outputs when ``return_intermediate`` is set)."""
        horizon = len(anchor_states)
        if not 1 <= horizon <= self.config.t_max:
            raise ValueError(f"horizon {horizon} outside [1, {self.config.t_max}]")
        if len(trajectory) != horizon:
            raise ValueError(
                f"trajectory length {len(trajectory)} != horizon {horizon}"
            )

        if pyramids is None:
            pyramids = self.extract_pyramids(past_frames)
        reference = next(p for p in pyramids if p.frame_offset == 0).ego_pose
        offsets = [p.frame_offset for p in pyramids]

        traj_tokens = self.trajectory_encoder(trajectory)            # (L, D)
        if self.config.per_query_modulation:
            conditioning = self.trajectory_encoder.conditioning(trajectory)

        cfg = self.config
        l, n, m = horizon, cfg.anchor.num_anchors, cfg.anchor.points_per_anchor
        points = torch.stack([st.points for st in anchor_states])   # (L, N, M, 3)
        feats = torch.stack([st.features for st in anchor_states])  # (L, N, D)
        cached_sensor = None

        intermediates = []
        for block in self.blocks:
            flat_points = points.reshape(l * n, m, 3)
            centers, stds = anchor_statistics(flat_points)
            if cfg.freeze_sensor_embedding and cached_sensor is not None:
                sensor = cached_sensor
            else:
                sensor = self.sampler(centers, stds, feats.reshape(l * n, cfg.dim),
                                      pyramids, reference)
                sensor = add_temporal_encoding(sensor, offsets, self.temporal_encoder)
                cached_sensor = sensor
            p_past = sensor.vectors.shape[1]

            qpos = self.center_pos(centers).reshape(l, n, cfg.dim)
            kpos = qpos.unsqueeze(2).expand(l, n, p_past, cfg.dim)
            frame_sensor = SensorEmbedding(
                vectors=sensor.vectors.reshape(l, n, p_past, cfg.dim),
                valid=sensor.valid.reshape(l, n, p_past),
            )
            # write the current center encoding into the feature stream: the
            # decoder sees features only, so position must travel inside them
            feats = feats + qpos
            feats = block.cross(feats, frame_sensor, qpos, kpos)
            if cfg.per_query_modulation:
                d = cfg.dim
                feats = self.trajectory_encoder.modulation(
                    feats, conditioning[:, None, :d], conditioning[:, None, d:])
            feats, traj_tokens = block.self_attn(feats, traj_tokens, qpos)
            feats = block.temporal(feats, mode=cfg.temporal_mode)

            dec = self.decoder(feats.reshape(l * n, cfg.dim), flat_points)
            points = dec.points.reshape(l, n, m, 3)
            logits = dec.logits.reshape(l, n, m, cfg.anchor.num_classes)
            intermediates.append(ForecastOutput(frames=[
                DecodedFrame(points=points[t], logits=logits[t], features=feats[t])
                for t in range(l)
            ]))

        final = intermediates[-1]
        if return_intermediate:
            return final, intermediates
        return final
