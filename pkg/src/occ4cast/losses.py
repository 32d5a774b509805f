"""Chamfer-L1 geometry loss, nearest-point label matching, focal loss.

The Chamfer term averages, for both directions, the L1 distance of each
point to its nearest neighbor in the other set.  The matched target point
also donates its semantic label, which feeds a softmax focal classification
loss; the overall objective is simply their sum.

Nearest-neighbor search is exact and runs without autograd (a brute-force
torch.cdist path for small problems, a KD-tree path for large ones); the
loss then differentiates only through the gathered nearest pairs, which
keeps the backward pass linear in the number of points.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .grid import grid_to_points

BRUTE_FORCE_LIMIT = 4_000_000  # |P| * |G| above which the KD-tree path kicks in


@dataclass
class LossBreakdown:
    chamfer: torch.Tensor
    focal: torch.Tensor
    total: torch.Tensor
    per_frame: list  # (chamfer, focal, total) floats per frame

    def item(self) -> float:
        return float(self.total.detach())


class EmptyTargetError(ValueError):
    """Raised when a frame has no target points and the policy is 'error'."""


def _nn_indices(query: torch.Tensor, target: torch.Tensor, method: str = "auto"):
    """Exact L1 nearest-target index per query; ties -> lowest target index.

    Pure index computation, runs under no_grad.  When the brute path is
    taken the transposed search reuses the same distance matrix, so callers
    needing both directions get the second one for free via ``_nn_both``.
    """
    q, g = query.shape[0], target.shape[0]
    if method == "auto":
        method = "kdtree" if q * g > BRUTE_FORCE_LIMIT else "brute"
    if method == "brute":
        with torch.no_grad():
            dist = torch.cdist(query, target, p=1)
            return dist.argmin(dim=1)
    if method == "kdtree":
        return _kdtree_indices(query.detach().cpu().numpy(),
                               target.detach().cpu().numpy(), query.device)
    raise ValueError(f"unknown nearest-neighbor method {method!r}")


def _nn_both(query: torch.Tensor, target: torch.Tensor, method: str = "auto"):
    """(query->target indices, target->query indices) with one search."""
    q, g = query.shape[0], target.shape[0]
    if method == "auto":
        method = "kdtree" if q * g > BRUTE_FORCE_LIMIT else "brute"
    if method == "brute":
        with torch.no_grad():
            dist = torch.cdist(query, target, p=1)
            return dist.argmin(dim=1), dist.argmin(dim=0)
    return (_nn_indices(query, target, method), _nn_indices(target, query, method))


def _kdtree_indices(q_np: np.ndarray, g_np: np.ndarray, device):
    tree = cKDTree(g_np)
    d0, idx0 = tree.query(q_np, k=1, p=1)
    idx = np.asarray(idx0, dtype=np.int64)
    # resolve exact ties to the lowest index
    balls = tree.query_ball_point(q_np, r=d0 + 1e-12, p=1)
    for i, cand in enumerate(balls):
        if len(cand) > 1:
            cand = np.sort(np.asarray(cand))
            d = np.abs(g_np[cand] - q_np[i]).sum(axis=1)
            idx[i] = cand[d <= d.min()][0]
    return torch.as_tensor(idx, device=device)


def chamfer_l1(pred: torch.Tensor, target: torch.Tensor, method: str = "auto") -> torch.Tensor:
    """Symmetric mean nearest-neighbor L1 distance between two point sets."""
    if pred.shape[0] == 0:
        raise ValueError("predicted point set is empty")
    if target.shape[0] == 0:
        raise EmptyTargetError("target point set is empty")
    idx_pt, idx_tp = _nn_both(pred, target, method)
    d_pred = (pred - target[idx_pt]).abs().sum(dim=-1)
    d_target = (target - pred[idx_tp]).abs().sum(dim=-1)
    return d_pred.mean() + d_target.mean()


def match_labels(pred: torch.Tensor, target_points: torch.Tensor,
                 target_labels: torch.Tensor, method: str = "auto") -> torch.Tensor:
    """Label of the L1-nearest target point for each prediction."""
    if target_points.shape[0] == 0:
        raise EmptyTargetError("target point set is empty")
    idx = _nn_indices(pred, target_points, method)
    return target_labels[idx]


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0,
               alpha=0.25) -> torch.Tensor:
    """Mean softmax focal loss: -alpha_t * (1 - p_t)^gamma * log p_t.

    ``alpha`` may be None (no weighting), a scalar, or a per-class tensor.
    """
    c = logits.shape[-1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"targets must lie in [0, {c})")
    log_probs = torch.log_softmax(logits, dim=-1)
    log_pt = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    pt = log_pt.exp()
    loss = -((1.0 - pt) ** gamma) * log_pt
    if alpha is not None:
        if isinstance(alpha, torch.Tensor):
            loss = alpha.to(logits.dtype)[targets] * loss
        else:
            loss = alpha * loss
    return loss.mean()


def grid_targets(gt_grids, dtype, device, apply_mask: bool = True) -> list:
    """Per-frame (points, labels) tensors from ground-truth grids."""
    targets = []
    for grid in gt_grids:
        pts_np, labels_np = grid_to_points(grid, apply_mask=apply_mask)
        targets.append((
            torch.as_tensor(pts_np, dtype=dtype, device=device),
            torch.as_tensor(labels_np, device=device),
        ))
    return targets


def _frame_loss(frame, target, gamma, alpha, method):
    target_pts, target_labels = target
    pred = frame.points.reshape(-1, 3)
    logits = frame.logits.reshape(-1, frame.logits.shape[-1])
    idx_pt, idx_tp = _nn_both(pred, target_pts, method)
    cd = ((pred - target_pts[idx_pt]).abs().sum(-1).mean()
          + (target_pts - pred[idx_tp]).abs().sum(-1).mean())
    labels = target_labels[idx_pt]
    fl = focal_loss(logits, labels, gamma=gamma, alpha=alpha)
    return cd, fl


def _batched_frame_losses(frames, targets, frame_ids, gamma, alpha):
    """Chamfer + focal for many (frame, target) pairs in a few fused ops.

    Targets are padded to a common length; padded entries are pushed to +inf
    distance so they are never matched and are masked out of the
    target-to-pred mean.  Returns per-pair (chamfer, focal) 1-D tensors.
    """
    pred = torch.stack([f.points.reshape(-1, 3) for f in frames])      # (F, K, 3)
    logits = torch.stack([f.logits.reshape(-1, f.logits.shape[-1]) for f in frames])
    g_max = max(targets[t][0].shape[0] for t in frame_ids)
    f_count, k, _ = pred.shape
    dtype, device = pred.dtype, pred.device

    tgt = pred.new_zeros((f_count, g_max, 3))
    labels = torch.zeros((f_count, g_max), dtype=torch.long, device=device)
    tmask = torch.zeros((f_count, g_max), dtype=torch.bool, device=device)
    for i, t in enumerate(frame_ids):
        pts, labs = targets[t]
        g = pts.shape[0]
        tgt[i, :g] = pts
        labels[i, :g] = labs
        tmask[i, :g] = True

    with torch.no_grad():
        dist = torch.cdist(pred, tgt, p=1)                             # (F, K, G)
        for i, t in enumerate(frame_ids):
            g = targets[t][0].shape[0]
            if g < g_max:
                dist[i, :, g:] = float("inf")
        idx_pt = dist.argmin(dim=2)                                    # (F, K)
        idx_tp = dist.argmin(dim=1)                                    # (F, G)

    matched_tgt = torch.gather(tgt, 1, idx_pt.unsqueeze(-1).expand(-1, -1, 3))
    d_pred = (pred - matched_tgt).abs().sum(-1).mean(dim=1)            # (F,)
    matched_pred = torch.gather(pred, 1, idx_tp.unsqueeze(-1).expand(-1, -1, 3))
    d_tgt = ((tgt - matched_pred).abs().sum(-1) * tmask.to(dtype)).sum(dim=1)
    d_tgt = d_tgt / tmask.to(dtype).sum(dim=1)
    chamfer = d_pred + d_tgt

    point_labels = torch.gather(labels, 1, idx_pt)                     # (F, K)
    log_probs = torch.log_softmax(logits, dim=-1)
    log_pt = log_probs.gather(-1, point_labels.unsqueeze(-1)).squeeze(-1)
    pt = log_pt.exp()
    fl = -((1.0 - pt) ** gamma) * log_pt
    if alpha is not None:
        if isinstance(alpha, torch.Tensor):
            fl = alpha.to(dtype)[point_labels] * fl
        else:
            fl = alpha * fl
    return chamfer, fl.mean(dim=1)


def total_loss_multi(outputs: list, gt_grids, gamma: float = 2.0, alpha=0.25,
                     empty_target: str = "skip", method: str = "auto",
                     apply_mask: bool = True, targets: list | None = None) -> LossBreakdown:
    """Chamfer + focal averaged over frames and over the given forecast
    outputs (one per refinement block for intermediate supervision).

    Ground-truth voxel centers are extracted once and shared by all outputs;
    pass precomputed ``targets`` to skip the extraction.  Frames with an
    empty target set follow ``empty_target``: 'skip' (with a warning,
    reported as zero loss) or 'error'.
    """
    n_frames = len(gt_grids)
    for out in outputs:
        if len(out.frames) != n_frames:
            raise ValueError(f"{len(out.frames)} forecast frames vs {n_frames} GT grids")

    ref = outputs[0].frames[0].points
    if targets is None:
        targets = grid_targets(gt_grids, ref.dtype, ref.device, apply_mask)

    usable = []
    for t, (pts, _) in enumerate(targets):
        if pts.shape[0] == 0:
            if empty_target == "skip":
                warnings.warn(f"frame {t}: empty target point set, skipped")
            else:
                raise EmptyTargetError(f"frame {t}: empty target point set")
        else:
            usable.append(t)

    per_frame = [(0.0, 0.0, 0.0)] * n_frames
    if not usable:
        zero = ref.new_zeros(())
        return LossBreakdown(chamfer=zero, focal=zero, total=zero + zero,
                             per_frame=per_frame)

    frames = [out.frames[t] for out in outputs for t in usable]
    frame_ids = [t for _ in outputs for t in usable]
    pred_counts = {f.points.reshape(-1, 3).shape[0] for f in frames}
    if method == "auto" and len(pred_counts) == 1 and all(
        f.points.reshape(-1, 3).shape[0] * targets[t][0].shape[0] <= BRUTE_FORCE_LIMIT
        for f, t in zip(frames, frame_ids)
    ):
        cds, fls = _batched_frame_losses(frames, targets, frame_ids, gamma, alpha)
    else:
        pairs = [_frame_loss(f, targets[t], gamma, alpha, method)
                 for f, t in zip(frames, frame_ids)]
        cds = torch.stack([p[0] for p in pairs])
        fls = torch.stack([p[1] for p in pairs])

    # per-frame numbers report the last output (the final refinement block)
    tail = len(frames) - len(usable)
    for i, t in enumerate(usable):
        cd = float(cds[tail + i].detach())
        fl = float(fls[tail + i].detach())
        per_frame[t] = (cd, fl, cd + fl)

    chamfer = cds.mean()
    focal = fls.mean()
    return LossBreakdown(chamfer=chamfer, focal=focal, total=chamfer + focal,
                         per_frame=per_frame)


def total_loss(forecast, gt_grids, gamma: float = 2.0, alpha=0.25,
               empty_target: str = "skip", method: str = "auto",
               apply_mask: bool = True) -> LossBreakdown:
    """Chamfer + focal over every forecast frame, averaged across frames."""
    return total_loss_multi([forecast], gt_grids, gamma=gamma, alpha=alpha,
                            empty_target=empty_target, method=method,
                            apply_mask=apply_mask)
