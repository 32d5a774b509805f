"""Sparse occupancy anchors: initialization, statistics, decoding heads.

An anchor is a bundle of M 3D points plus one D-dim feature vector; N
anchors form the mutable occupancy hypothesis for one future frame.  Points
start as Gaussian scatter around uniformly drawn centers, features start at
exactly zero, and two MLP heads decode a feature into per-point offsets and
per-point semantic logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .classes import NUM_CLASSES

SIGMA_MIN = 0.05  # meters; floor on per-axis anchor stds


@dataclass(frozen=True)
class AnchorConfig:
    num_anchors: int = 64          # N
    points_per_anchor: int = 16    # M
    feature_dim: int = 64          # D
    sigma: float = 1.0             # point scatter std, meters
    bounds: tuple = ((-12.0, -12.0, 0.0), (12.0, 12.0, 6.0))
    num_classes: int = NUM_CLASSES  # C (semantic only; FREE has no logit)

    def __post_init__(self):
        if min(self.num_anchors, self.points_per_anchor, self.feature_dim, self.num_classes) < 1:
            raise ValueError("N, M, D, C must all be >= 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        lo, hi = self.bounds
        if any(h - l <= 0 for l, h in zip(lo, hi)):
            raise ValueError(f"degenerate anchor bounds {self.bounds}")


@dataclass
class AnchorState:
    points: torch.Tensor    # (N, M, 3)
    features: torch.Tensor  # (N, D)


@dataclass
class DecodedFrame:
    points: torch.Tensor    # (N, M, 3) refined positions
    logits: torch.Tensor    # (N, M, C)
    features: torch.Tensor  # (N, D)


def init_anchor_state(config: AnchorConfig, seed: int, dtype=torch.float32) -> AnchorState:
    """Fresh random anchors: centers ~ U(bounds), points = center + N(0, sigma^2).

    Offsets are truncated at 4 sigma so every point stays inside the bounds
    box expanded by 4 sigma.  Features are exactly zero.  Deterministic per
    seed on a given platform.
    """
    gen = torch.Generator().manual_seed(int(seed))
    lo = torch.tensor(config.bounds[0], dtype=dtype)
    hi = torch.tensor(config.bounds[1], dtype=dtype)
    n, m = config.num_anchors, config.points_per_anchor
    centers = lo + (hi - lo) * torch.rand((n, 1, 3), generator=gen, dtype=dtype)
    eps = torch.randn((n, m, 3), generator=gen, dtype=dtype) * config.sigma
    eps = eps.clamp(-4.0 * config.sigma, 4.0 * config.sigma)
    features = torch.zeros((n, config.feature_dim), dtype=dtype)
    return AnchorState(points=centers + eps, features=features)


def anchor_statistics(points: torch.Tensor):
    """Per-anchor mean and per-axis population std of the point set.

    Stds are floored at SIGMA_MIN so degenerate anchors keep a usable
    sampling footprint.  Returns (centers (N,3), stds (N,3)).
    """
    centers = points.mean(dim=1)
    var = points.var(dim=1, unbiased=False)
    stds = torch.sqrt(var + 1e-12).clamp(min=SIGMA_MIN)
    return centers, stds


class AnchorDecoder(nn.Module):
    """Two 2-layer MLP heads: feature -> (M,3) offsets and (M,C) logits."""

    def __init__(self, config: AnchorConfig):
        super().__init__()
        d, m, c = config.feature_dim, config.points_per_anchor, config.num_classes
        self.config = config
        self.offset_head = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, m * 3))
        self.semantic_head = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, m * c))
        # start from the identity point update
        nn.init.zeros_(self.offset_head[-1].weight)
        nn.init.zeros_(self.offset_head[-1].bias)

    def forward(self, features: torch.Tensor, points: torch.Tensor) -> DecodedFrame:
        return decode_anchors(features, points, self)


def decode_anchors(features: torch.Tensor, points: torch.Tensor,
                   heads: AnchorDecoder) -> DecodedFrame:
    """Refine points by the offset head and classify them by the semantic head."""
    cfg = heads.config
    n = features.shape[0]
    if features.shape != (n, cfg.feature_dim):
        raise ValueError(f"features shape {tuple(features.shape)} != (N, {cfg.feature_dim})")
    if points.shape != (n, cfg.points_per_anchor, 3):
        raise ValueError(
            f"points shape {tuple(points.shape)} != ({n}, {cfg.points_per_anchor}, 3)"
        )
    offsets = heads.offset_head(features).reshape(n, cfg.points_per_anchor, 3)
    logits = heads.semantic_head(features).reshape(n, cfg.points_per_anchor, cfg.num_classes)
    return DecodedFrame(points=points + offsets, logits=logits, features=features)
