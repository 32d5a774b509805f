"""BEV occupancy renders and metric curve plots.

``bev_render`` is the exact-pixel primitive: each voxel column maps to a
``scale`` x ``scale`` block colored by the class of its top-most occupied
voxel (FREE columns are white).  Canvas orientation: ego +x (forward) points
up, ego +y (left) points left, so renders read like a map.  The figure
helpers wrap renders with legends and titles for the CLI.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.patches as mpatches
import matplotlib.pyplot as plt
import numpy as np

from .classes import CLASS_NAMES, FREE_COLOR, class_color
from .grid import OccupancyGrid


def bev_render(grid: OccupancyGrid, scale: int = 8) -> np.ndarray:
    """(X*scale, Y*scale, 3) uint8 top-down render.

    Pixel block [row, col] shows voxel column (ix = X-1-row, iy = Y-1-col);
    its color is the class color of the highest occupied voxel in the column.
    """
    x_dim, y_dim, z_dim = grid.dims
    occ = grid.occupied()
    # index of the top-most occupied voxel per column, -1 when empty
    heights = np.where(occ, np.arange(z_dim)[None, None, :], -1).max(axis=2)
    canvas = np.empty((x_dim, y_dim, 3), dtype=np.uint8)
    canvas[:] = FREE_COLOR
    for ix, iy in np.argwhere(heights >= 0):
        label = grid.labels[ix, iy, heights[ix, iy]]
        canvas[ix, iy] = class_color(int(label))
    canvas = canvas[::-1, ::-1]  # +x up, +y left
    return np.kron(canvas, np.ones((scale, scale, 1), dtype=np.uint8))


def _legend_handles(grids):
    present = set()
    for grid in grids:
        present.update(np.unique(grid.labels[grid.occupied()]).tolist())
    handles = [
        mpatches.Patch(color=np.asarray(class_color(int(c))) / 255.0,
                       label=CLASS_NAMES[int(c)])
        for c in sorted(present)
    ]
    if not handles:
        handles = [mpatches.Patch(color="white", label="free")]
    return handles


def save_bev_figure(path, gt: OccupancyGrid | None, pred: OccupancyGrid | None,
                    title: str = "", scale: int = 8):
    """GT / prediction pair (either may be None) with a class legend."""
    panels = [(g, n) for g, n in ((gt, "GT"), (pred, "Pred.")) if g is not None]
    fig, axes = plt.subplots(1, len(panels), figsize=(4 * len(panels), 4.6))
    if len(panels) == 1:
        axes = [axes]
    for ax, (grid, name) in zip(axes, panels):
        ax.imshow(bev_render(grid, scale))
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(title)
    fig.legend(handles=_legend_handles([g for g, _ in panels]),
               loc="lower center", ncol=4, fontsize=8)
    fig.tight_layout(rect=(0, 0.12, 1, 1))
    fig.savefig(path, dpi=100)
    plt.close(fig)


def save_metric_curves(path, report_dict: dict, title: str = ""):
    """mIoU / IoU (and RayIoU when present) as a function of the horizon."""
    horizons = [int(h) for h in report_dict["horizons"]]
    miou = [report_dict["miou"][str(h)] for h in horizons]
    geo = [report_dict["geo_iou"][str(h)] for h in horizons]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(horizons, miou, marker="o", label="semantic mIoU")
    ax.plot(horizons, geo, marker="s", label="geometric IoU")
    if report_dict.get("rayiou"):
        ray = [report_dict["rayiou"][str(h)]["mean"] for h in horizons]
        ax.plot(horizons, ray, marker="^", label="RayIoU")
    ax.set_xlabel("future frame")
    ax.set_ylabel("%")
    ax.set_ylim(0, 102)
    ax.set_xticks(horizons)
    ax.grid(alpha=0.3)
    ax.legend()
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
