"""Small convolutional image backbone producing multi-scale feature pyramids.

The backbone is pluggable behind the pyramid contract (per past frame: one
feature map per stride level, all projected to the shared embedding width).
The default encoder is a 4-stage stride-2 conv stack sized for desk-scale
CPU training; heavier pretrained encoders can be dropped in behind the same
contract.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .geometry import Pose

STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple = (16, 24, 32, 48)   # channels at strides 4/8/16/32
    norm: str = "group"                # group | none
    act: str = "relu"                  # relu | none
    bias: bool = True

    def __post_init__(self):
        if len(self.widths) != 4:
            raise ValueError("backbone needs one width per pyramid level")
        if self.norm not in ("group", "none") or self.act not in ("relu", "none"):
            raise ValueError("unsupported backbone norm/act")


@dataclass
class ImageFeaturePyramid:
    """Per-frame multi-scale features: levels[l] has shape (m, D, H_l, W_l)."""

    levels: list
    calibs: list
    ego_pose: Pose
    frame_offset: int
    strides: tuple = STRIDES

    def __post_init__(self):
        dims = {lvl.shape[1] for lvl in self.levels}
        if len(dims) != 1:
            raise ValueError("pyramid levels must share the channel count")
        if list(self.strides) != sorted(self.strides):
            raise ValueError("strides must be increasing")


class ConvEncoder(nn.Module):
    """Stride-2 conv stack; lateral 1x1 convs project each stage to out_dim."""

    def __init__(self, config: BackboneConfig, out_dim: int):
        super().__init__()
        self.config = config
        self.out_dim = out_dim
        w = config.widths
        bias = config.bias

        def block(cin, cout):
            layers = [nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=bias)]
            if config.norm == "group":
                layers.append(nn.GroupNorm(math.gcd(8, cout), cout))
            if config.act == "relu":
                layers.append(nn.ReLU(inplace=True))
            return nn.Sequential(*layers)

        self.stage1 = nn.Sequential(block(3, w[0]), block(w[0], w[0]))  # stride 4
        self.stage2 = block(w[0], w[1])                                  # stride 8
        self.stage3 = block(w[1], w[2])                                  # stride 16
        self.stage4 = block(w[2], w[3])                                  # stride 32
        self.laterals = nn.ModuleList(
            [nn.Conv2d(c, out_dim, 1, bias=bias) for c in w]
        )

    def forward(self, images: torch.Tensor) -> list:
        """images (B, 3, H, W) -> [(B, D, ceil(H/s), ceil(W/s)) for s in STRIDES]."""
        x1 = self.stage1(images)
        x2 = self.stage2(x1)
        x3 = self.stage3(x2)
        x4 = self.stage4(x3)
        return [lat(x) for lat, x in zip(self.laterals, (x1, x2, x3, x4))]

    def weights_hash(self) -> str:
        """Stable digest of the parameter values, for pyramid cache keys."""
        digest = hashlib.sha1()
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().numpy().tobytes())
        return digest.hexdigest()[:16]


def extract_features(frames, encoder: ConvEncoder) -> list:
    """One ImageFeaturePyramid per SensorFrame.

    Rejects frames whose per-camera image sizes disagree across the sequence.
    """
    if not frames:
        raise ValueError("no frames to extract features from")
    ref_shapes = [im.shape for im in frames[0].images]
    for frame in frames:
        shapes = [im.shape for im in frame.images]
        if shapes != ref_shapes:
            raise ValueError(
                f"camera image sizes differ across frames: {shapes} vs {ref_shapes}"
            )
    dtype = next(encoder.parameters()).dtype
    counts = [len(frame.images) for frame in frames]
    stack = np.stack([im for frame in frames for im in frame.images])
    images = torch.as_tensor(stack.transpose(0, 3, 1, 2)).to(dtype)  # (sum m, 3, H, W)
    levels_all = encoder(images)

    pyramids = []
    start = 0
    for frame, count in zip(frames, counts):
        levels = [lvl[start:start + count] for lvl in levels_all]
        pyramids.append(ImageFeaturePyramid(
            levels=levels, calibs=list(frame.calibs), ego_pose=frame.ego_pose,
            frame_offset=frame.offset,
        ))
        start += count
    return pyramids
