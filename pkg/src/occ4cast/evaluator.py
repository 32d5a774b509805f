"""Voxelization of point forecasts and the occupancy metric suite.

Metrics: geometric IoU (occupied-vs-occupied, class-agnostic), semantic mIoU
(per-class voxel IoU averaged over classes present in either grid), and
ray-level IoU (first-hit class and depth agreement within distance
thresholds, which removes the depth-inconsistency penalty of plain voxel
metrics).  ``evaluate`` scores a forecaster over a dataset at several
horizons with a selectable trajectory source (gt / noisy / zero).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .classes import CLASS_NAMES
from .grid import OccupancyGrid, check_same_spec, grid_to_points
from .trajectory import TrajectoryWaypoint

RAY_THRESHOLDS = (1.0, 2.0, 4.0)
# millimeter-scale, deliberately unequal per axis so rays through voxel-center
# targets never graze voxel corners or edges exactly
_RAY_ORIGIN_JITTER = np.array([1.31e-3, 1.73e-3, 1.93e-3])


def voxelize_prediction(frame, grid_spec, threshold: float = 0.0) -> OccupancyGrid:
    """Bin predicted points into a grid; accumulate per-class softmax scores.

    A voxel is occupied iff it received at least one point and its best
    accumulated class score reaches ``threshold``; its label is the argmax
    class.  ``grid_spec`` is (dims, voxel_size, origin, class_count) or an
    OccupancyGrid to copy the spec from.  Out-of-bounds points are ignored.
    """
    if isinstance(grid_spec, OccupancyGrid):
        dims, voxel, origin, c = grid_spec.dims, grid_spec.voxel_size, grid_spec.origin, grid_spec.class_count
    else:
        dims, voxel, origin, c = grid_spec
    dims = tuple(dims)
    origin = np.asarray(origin, dtype=np.float64)

    points = frame.points
    logits = frame.logits
    if isinstance(points, torch.Tensor):
        points = points.detach().cpu().numpy()
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    logits = np.asarray(logits, dtype=np.float64).reshape(points.shape[0], -1)

    exp = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = exp / exp.sum(axis=1, keepdims=True)

    idx = np.floor((points - origin) / voxel).astype(np.int64)
    inb = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
    idx = idx[inb]
    probs = probs[inb]

    n_vox = dims[0] * dims[1] * dims[2]
    flat = np.ravel_multi_index((idx[:, 0], idx[:, 1], idx[:, 2]), dims)
    scores = np.zeros((n_vox, probs.shape[1]))
    np.add.at(scores, flat, probs)
    counts = np.bincount(flat, minlength=n_vox)

    labels = np.full(n_vox, c, dtype=np.uint8)
    occupied = (counts > 0) & (scores.max(axis=1) >= threshold)
    labels[occupied] = scores[occupied].argmax(axis=1).astype(np.uint8)
    return OccupancyGrid(dims, voxel, origin, labels.reshape(dims), class_count=c)


def _eval_mask(pred: OccupancyGrid, gt: OccupancyGrid, use_mask: bool):
    check_same_spec(pred, gt)
    if use_mask and gt.visibility_mask is not None:
        return gt.visibility_mask
    return np.ones(gt.dims, dtype=bool)


def geometric_iou(pred: OccupancyGrid, gt: OccupancyGrid, use_mask: bool = True) -> float:
    """Occupied-set IoU in percent; 100 when both sets are empty."""
    mask = _eval_mask(pred, gt, use_mask)
    p = pred.occupied() & mask
    g = gt.occupied() & mask
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 100.0
    return 100.0 * np.logical_and(p, g).sum() / union


def semantic_miou(pred: OccupancyGrid, gt: OccupancyGrid, use_mask: bool = True):
    """(mIoU percent, per-class IoUs with NaN for classes absent from both)."""
    mask = _eval_mask(pred, gt, use_mask)
    c = gt.class_count
    per_class = np.full(c, np.nan)
    for label in range(c):
        p = (pred.labels == label) & mask
        g = (gt.labels == label) & mask
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        per_class[label] = 100.0 * np.logical_and(p, g).sum() / union
    if np.all(np.isnan(per_class)):
        return 100.0, per_class
    return float(np.nanmean(per_class)), per_class


def surface_voxel_centers(grid: OccupancyGrid) -> np.ndarray:
    """Centers of occupied voxels with at least one FREE / out-of-grid face."""
    occ = grid.occupied()
    padded = np.pad(occ, 1, constant_values=False)
    interior = np.ones_like(occ)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    surface = occ & ~interior
    idx = np.argwhere(surface)
    if idx.size == 0:
        return np.zeros((0, 3))
    return grid.voxel_centers(idx)


def march_ray(grid: OccupancyGrid, origin, direction):
    """First occupied voxel along a ray: (hit, class, entry depth).

    Steps voxel-to-voxel through the grid; the depth is the distance from the
    ray origin to the point where the ray enters the hit voxel (0 when the
    origin already lies inside it).
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm == 0:
        return False, -1, np.inf
    d = d / norm

    gmin = grid.origin
    gmax = grid.origin + np.asarray(grid.dims) * grid.voxel_size
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(d != 0, 1.0 / d, np.inf)
    t1 = (gmin - o) * inv
    t2 = (gmax - o) * inv
    t1, t2 = np.minimum(t1, t2), np.maximum(t1, t2)
    axis_inside = (d != 0) | ((o >= gmin) & (o <= gmax))
    if not axis_inside.all():
        return False, -1, np.inf
    t_enter = np.max(np.where(d != 0, t1, -np.inf))
    t_exit = np.min(np.where(d != 0, t2, np.inf))
    t_enter = max(t_enter, 0.0)
    if t_exit < t_enter:
        return False, -1, np.inf

    pos = o + (t_enter + 1e-12) * d
    cell = np.floor((pos - gmin) / grid.voxel_size).astype(np.int64)
    cell = np.clip(cell, 0, np.asarray(grid.dims) - 1)

    step = np.sign(d).astype(np.int64)
    t_max = np.full(3, np.inf)
    t_delta = np.full(3, np.inf)
    for ax in range(3):
        if d[ax] > 0:
            nxt = gmin[ax] + (cell[ax] + 1) * grid.voxel_size
            t_max[ax] = (nxt - o[ax]) / d[ax]
        elif d[ax] < 0:
            nxt = gmin[ax] + cell[ax] * grid.voxel_size
            t_max[ax] = (nxt - o[ax]) / d[ax]
        if d[ax] != 0:
            t_delta[ax] = grid.voxel_size / abs(d[ax])

    t_cur = t_enter
    dims = grid.dims
    while True:
        if grid.labels[cell[0], cell[1], cell[2]] != grid.free_id:
            return True, int(grid.labels[cell[0], cell[1], cell[2]]), float(t_cur)
        ax = int(np.argmin(t_max))
        t_cur = t_max[ax]
        cell[ax] += step[ax]
        if not (0 <= cell[ax] < dims[ax]):
            return False, -1, np.inf
        t_max[ax] += t_delta[ax]


def ray_iou(pred: OccupancyGrid, gt: OccupancyGrid, ray_origins=None,
            class_count: int | None = None, thresholds=RAY_THRESHOLDS,
            ray_targets=None):
    """Ray-level mIoU at each depth threshold plus their mean.

    Default ray family: one origin at the ego origin (offset by a millimeter
    -scale epsilon to dodge voxel-boundary degeneracies), one ray through
    every GT-surface voxel center.  A ray is a true positive for class c at
    threshold tau iff both grids hit class c and the first-hit depths differ
    by at most tau.
    """
    check_same_spec(pred, gt)
    c = class_count or gt.class_count

    if ray_targets is None:
        ray_targets = surface_voxel_centers(gt)
    ray_targets = np.asarray(ray_targets, dtype=np.float64).reshape(-1, 3)
    if ray_origins is None:
        ray_origins = np.zeros(3) + _RAY_ORIGIN_JITTER * gt.voxel_size
    ray_origins = np.asarray(ray_origins, dtype=np.float64)
    if ray_origins.ndim == 1:
        ray_origins = np.broadcast_to(ray_origins, ray_targets.shape)
    if ray_targets.shape[0] == 0:
        raise ValueError("empty ray set")

    hits = []
    for o, tgt in zip(ray_origins, ray_targets):
        d = tgt - o
        g_hit, g_cls, g_depth = march_ray(gt, o, d)
        p_hit, p_cls, p_depth = march_ray(pred, o, d)
        hits.append((g_hit, g_cls, g_depth, p_hit, p_cls, p_depth))

    per_threshold = {}
    for tau in thresholds:
        tp = np.zeros(c)
        fp = np.zeros(c)
        fn = np.zeros(c)
        for g_hit, g_cls, g_depth, p_hit, p_cls, p_depth in hits:
            match = (g_hit and p_hit and g_cls == p_cls
                     and abs(p_depth - g_depth) <= tau)
            if match:
                tp[g_cls] += 1
                continue
            if p_hit:
                fp[p_cls] += 1
            if g_hit:
                fn[g_cls] += 1
        denom = tp + fp + fn
        present = denom > 0
        if not present.any():
            per_threshold[tau] = 100.0
        else:
            per_threshold[tau] = float(np.mean(100.0 * tp[present] / denom[present]))
    mean = float(np.mean(list(per_threshold.values())))
    return per_threshold, mean


@dataclass
class MetricReport:
    horizons: list
    geo_iou: dict                 # horizon -> percent
    miou: dict                    # horizon -> percent
    per_class: dict               # horizon -> list (NaN when absent)
    sample_count: int
    rayiou: dict | None = None    # horizon -> {"thresholds": {...}, "mean": p}
    recon: dict | None = None     # {"geo_iou": p, "miou": p}
    skipped: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def geo_avg(self) -> float:
        return float(np.mean([self.geo_iou[h] for h in self.horizons]))

    @property
    def miou_avg(self) -> float:
        return float(np.mean([self.miou[h] for h in self.horizons]))

    def to_dict(self) -> dict:
        def clean(x):
            return None if x is None or (isinstance(x, float) and np.isnan(x)) else float(x)

        return {
            "horizons": list(self.horizons),
            "sample_count": self.sample_count,
            "geo_iou": {str(h): clean(v) for h, v in self.geo_iou.items()},
            "miou": {str(h): clean(v) for h, v in self.miou.items()},
            "geo_iou_avg": clean(self.geo_avg),
            "miou_avg": clean(self.miou_avg),
            "per_class": {str(h): [clean(v) for v in row] for h, row in self.per_class.items()},
            "rayiou": None if self.rayiou is None else {
                str(h): {"thresholds": {str(t): clean(v) for t, v in entry["thresholds"].items()},
                         "mean": clean(entry["mean"])}
                for h, entry in self.rayiou.items()
            },
            "recon": self.recon,
            "skipped": {str(h): v for h, v in self.skipped.items()},
            "meta": self.meta,
        }

    def format_table(self) -> str:
        lines = []
        head = f"{'horizon':>8} | {'mIoU %':>8} | {'IoU %':>8}"
        lines.append(head)
        lines.append("-" * len(head))
        if self.recon is not None:
            lines.append(f"{'recon':>8} | {self.recon['miou']:>8.2f} | {self.recon['geo_iou']:>8.2f}")
        for h in self.horizons:
            lines.append(f"{h:>8} | {self.miou[h]:>8.2f} | {self.geo_iou[h]:>8.2f}")
        lines.append(f"{'avg':>8} | {self.miou_avg:>8.2f} | {self.geo_avg:>8.2f}")
        if self.rayiou is not None:
            lines.append("")
            taus = sorted(next(iter(self.rayiou.values()))["thresholds"])
            head = f"{'horizon':>8} | " + " | ".join(f"Ray@{t:g}m" for t in taus) + " |  RayIoU"
            lines.append(head)
            lines.append("-" * len(head))
            for h in self.horizons:
                entry = self.rayiou[h]
                row = " | ".join(f"{entry['thresholds'][t]:>7.2f}" for t in taus)
                lines.append(f"{h:>8} | {row} | {entry['mean']:>7.2f}")
        lines.append("")
        lines.append(f"{'class':>14} | " + " | ".join(f"{h:>7}" for h in self.horizons))
        for ci, name in enumerate(CLASS_NAMES[: len(next(iter(self.per_class.values())))]):
            vals = []
            for h in self.horizons:
                v = self.per_class[h][ci]
                vals.append("      -" if v is None or np.isnan(v) else f"{v:>7.2f}")
            lines.append(f"{name:>14} | " + " | ".join(vals))
        return "\n".join(lines)


def stable_seed(seq_id: str, base: int) -> int:
    return (zlib.crc32(seq_id.encode()) ^ (base * 0x9E3779B1)) % (2**31)


def apply_trajectory_source(waypoints, source: str, rng: np.random.Generator,
                            sigma_xy: float = 0.5, sigma_theta: float = 0.1):
    """gt: unchanged; zero: kinematic fields zeroed; noisy: Gaussian-perturbed."""
    if source == "gt":
        return list(waypoints)
    if source == "zero":
        return [TrajectoryWaypoint(0.0, 0.0, 0.0, wp.t) for wp in waypoints]
    if source == "noisy":
        out = []
        for wp in waypoints:
            out.append(TrajectoryWaypoint(
                wp.x + rng.normal(0.0, sigma_xy),
                wp.y + rng.normal(0.0, sigma_xy),
                wp.theta + rng.normal(0.0, sigma_theta),
                wp.t,
            ))
        return out
    raise ValueError(f"unknown trajectory source {source!r}")


class OracleForecaster:
    """Feeds ground truth back as the prediction; every metric scores 100."""

    def forecast_frames(self, sample, waypoints, horizon: int, seed: int) -> list:
        from .anchors import DecodedFrame

        frames = []
        for grid in sample.future_grids[:horizon]:
            pts, labels = grid_to_points(grid, apply_mask=False)
            if pts.shape[0] == 0:
                pts = np.zeros((1, 3))
                labels = np.zeros(1, dtype=np.int64)
            logits = np.full((pts.shape[0], grid.class_count), -6.0)
            logits[np.arange(pts.shape[0]), labels] = 6.0
            frames.append(DecodedFrame(
                points=torch.as_tensor(pts[:, None, :]),
                logits=torch.as_tensor(logits[:, None, :]),
                features=torch.zeros(pts.shape[0], 1),
            ))
        return frames


class ModelForecaster:
    """Runs a trained world model; anchors are drawn from the given seed."""

    def __init__(self, model):
        self.model = model

    def forecast_frames(self, sample, waypoints, horizon: int, seed: int) -> list:
        from .anchors import init_anchor_state

        cfg = self.model.config
        dtype = next(self.model.parameters()).dtype
        if cfg.share_initial_anchors:
            state = init_anchor_state(cfg.anchor, seed, dtype=dtype)
            states = [state] * horizon
        else:
            states = [init_anchor_state(cfg.anchor, seed + t, dtype=dtype)
                      for t in range(horizon)]
        with torch.no_grad():
            out = self.model.forecast(states, sample.past, waypoints[:horizon])
        return out.frames


def evaluate(forecaster, dataset, horizons, threshold: float = 0.0,
             use_mask: bool = True, rayiou: bool = False, traj_source: str = "gt",
             sigma_xy: float = 0.5, sigma_theta: float = 0.1, seed: int = 0,
             include_recon: bool = False) -> MetricReport:
    """Score a forecaster over a dataset.

    Each sample is forecast once at the maximum requested horizon and every
    horizon slice is scored against its ground-truth grid.  Aggregation is a
    fixed-order (seq-id sorted) mean of per-sample metrics, so the report is
    invariant to dataset order.  Samples lacking a horizon's ground truth
    are skipped for that horizon and counted in ``skipped``.
    """
    horizons = sorted(horizons)
    samples = sorted(dataset, key=lambda s: s.seq_id)
    per_sample = {h: [] for h in horizons}
    per_class_acc = {h: [] for h in horizons}
    ray_acc = {h: [] for h in horizons} if rayiou else None
    recon_acc = []
    skipped = {h: 0 for h in horizons}

    for sample in samples:
        sample_seed = stable_seed(sample.seq_id, seed)
        rng = np.random.default_rng(sample_seed)
        max_h = min(max(horizons), sample.num_future)
        if max_h < 1:
            for h in horizons:
                skipped[h] += 1
            continue
        waypoints = apply_trajectory_source(sample.trajectory[:max_h], traj_source,
                                            rng, sigma_xy, sigma_theta)
        frames = forecaster.forecast_frames(sample, waypoints, max_h, sample_seed)

        for h in horizons:
            if h > max_h:
                skipped[h] += 1
                continue
            gt = sample.future_grids[h - 1]
            pred = voxelize_prediction(frames[h - 1], gt, threshold)
            geo = geometric_iou(pred, gt, use_mask)
            miou, per_class = semantic_miou(pred, gt, use_mask)
            per_sample[h].append((geo, miou))
            per_class_acc[h].append(per_class)
            if rayiou:
                per_tau, mean = ray_iou(pred, gt)
                ray_acc[h].append((per_tau, mean))

        if include_recon and sample.current_grid is not None:
            recon_wp = TrajectoryWaypoint(0.0, 0.0, 0.0, 0.0)
            recon_frames = forecaster.forecast_frames(sample, [recon_wp], 1, sample_seed)
            gt0 = sample.current_grid
            pred0 = voxelize_prediction(recon_frames[0], gt0, threshold)
            m0, _ = semantic_miou(pred0, gt0, use_mask)
            recon_acc.append((geometric_iou(pred0, gt0, use_mask), m0))

    geo_iou_res, miou_res, per_class_res, ray_res = {}, {}, {}, {}
    for h in horizons:
        vals = per_sample[h]
        geo_iou_res[h] = float(np.mean([v[0] for v in vals])) if vals else float("nan")
        miou_res[h] = float(np.mean([v[1] for v in vals])) if vals else float("nan")
        if per_class_acc[h]:
            stacked = np.stack(per_class_acc[h])
            present = ~np.isnan(stacked)
            counts = present.sum(axis=0)
            sums = np.where(present, stacked, 0.0).sum(axis=0)
            per_class_res[h] = [
                float(sums[c] / counts[c]) if counts[c] else float("nan")
                for c in range(stacked.shape[1])
            ]
        else:
            per_class_res[h] = []
        if rayiou and ray_acc[h]:
            taus = sorted(ray_acc[h][0][0])
            ray_res[h] = {
                "thresholds": {t: float(np.mean([r[0][t] for r in ray_acc[h]])) for t in taus},
                "mean": float(np.mean([r[1] for r in ray_acc[h]])),
            }

    recon = None
    if recon_acc:
        recon = {"geo_iou": float(np.mean([r[0] for r in recon_acc])),
                 "miou": float(np.mean([r[1] for r in recon_acc]))}

    return MetricReport(
        horizons=horizons, geo_iou=geo_iou_res, miou=miou_res,
        per_class=per_class_res, sample_count=len(samples),
        rayiou=ray_res if rayiou else None, recon=recon, skipped=skipped,
        meta={"traj_source": traj_source, "threshold": threshold,
              "use_mask": use_mask, "seed": seed,
              "sigma_xy": sigma_xy, "sigma_theta": sigma_theta,
              "ray_family": "ego-origin rays through GT surface voxel centers"},
    )
