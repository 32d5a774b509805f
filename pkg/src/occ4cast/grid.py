"""Dense semantic occupancy grids and their binary file format.

A grid stores one class id per voxel over an (X, Y, Z) lattice anchored at
``origin`` (the minimum corner in the ego frame).  The reserved FREE id
always equals the semantic class count.  The on-disk "OCC4" layout is
little-endian:

    magic   4 bytes  b"OCC4"
    version u32      (currently 1)
    X, Y, Z u32 each
    voxel   f32      edge length in meters
    origin  3 x f32  minimum corner
    C       u8       semantic class count (FREE id == C)
    mask    u8       1 if a visibility-mask block follows the labels
    labels  X*Y*Z u8 row-major with x fastest
    mask    X*Y*Z u8 (optional, same ordering, nonzero == visible)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classes import NUM_CLASSES
from .errors import DataError, GridSpecMismatch

OCC4_MAGIC = b"OCC4"
OCC4_VERSION = 1


@dataclass
class OccupancyGrid:
    """Voxel label grid; ``labels`` has shape (X, Y, Z) and dtype uint8."""

    dims: tuple
    voxel_size: float
    origin: np.ndarray
    labels: np.ndarray
    class_count: int = NUM_CLASSES
    visibility_mask: np.ndarray | None = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"bad grid dims {self.dims}")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.shape != self.dims:
            raise ValueError(f"labels shape {self.labels.shape} != dims {self.dims}")
        if self.labels.max(initial=0) > self.class_count:
            raise ValueError("labels exceed FREE id")
        if self.visibility_mask is not None:
            self.visibility_mask = np.asarray(self.visibility_mask, dtype=bool)
            if self.visibility_mask.shape != self.dims:
                raise ValueError("visibility mask shape mismatch")

    @property
    def free_id(self) -> int:
        return self.class_count

    def spec(self) -> tuple:
        return (self.dims, float(self.voxel_size), tuple(self.origin.tolist()), self.class_count)

    def same_spec(self, other: "OccupancyGrid") -> bool:
        return (
            self.dims == other.dims
            and abs(self.voxel_size - other.voxel_size) < 1e-9
            and np.allclose(self.origin, other.origin, atol=1e-9)
            and self.class_count == other.class_count
        )

    def occupied(self) -> np.ndarray:
        return self.labels != self.free_id

    def voxel_centers(self, indices: np.ndarray) -> np.ndarray:
        """Centers of voxels given integer indices (K, 3)."""
        idx = np.asarray(indices, dtype=np.float64).reshape(-1, 3)
        return self.origin + (idx + 0.5) * self.voxel_size

    @staticmethod
    def empty(dims, voxel_size, origin, class_count=NUM_CLASSES) -> "OccupancyGrid":
        labels = np.full(tuple(dims), class_count, dtype=np.uint8)
        return OccupancyGrid(tuple(dims), voxel_size, origin, labels, class_count)


def check_same_spec(a: OccupancyGrid, b: OccupancyGrid):
    if not a.same_spec(b):
        raise GridSpecMismatch(f"grid specs differ: {a.spec()} vs {b.spec()}")


def grid_to_points(grid: OccupancyGrid, apply_mask: bool = True):
    """Centers and labels of every non-FREE voxel.

    Voxels flagged invisible are excluded when a mask exists and
    ``apply_mask`` is set.  Returns (points (G,3) float64, labels (G,) int64).
    """
    occ = grid.occupied()
    if apply_mask and grid.visibility_mask is not None:
        occ = occ & grid.visibility_mask
    idx = np.argwhere(occ)
    if idx.size == 0:
        return np.zeros((0, 3)), np.zeros((0,), dtype=np.int64)
    points = grid.voxel_centers(idx)
    labels = grid.labels[idx[:, 0], idx[:, 1], idx[:, 2]].astype(np.int64)
    return points, labels


def write_grid(path, grid: OccupancyGrid):
    path = Path(path)
    has_mask = grid.visibility_mask is not None
    header = struct.pack(
        "<4sIIIIf3fBB",
        OCC4_MAGIC,
        OCC4_VERSION,
        grid.dims[0], grid.dims[1], grid.dims[2],
        float(grid.voxel_size),
        float(grid.origin[0]), float(grid.origin[1]), float(grid.origin[2]),
        grid.class_count,
        1 if has_mask else 0,
    )
    # x fastest on disk: serialize as (Z, Y, X) C-order
    body = grid.labels.transpose(2, 1, 0).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)
        if has_mask:
            fh.write(grid.visibility_mask.astype(np.uint8).transpose(2, 1, 0).tobytes(order="C"))


_HEADER_FMT = "<4sIIIIf3fBB"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)


def read_grid(path) -> OccupancyGrid:
    path = Path(path)
    if not path.exists():
        raise DataError(f"grid file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER_SIZE:
        raise DataError(f"grid file too short for OCC4 header: {path}")
    (magic, version, x, y, z, voxel, ox, oy, oz, class_count, mask_flag) = struct.unpack(
        _HEADER_FMT, raw[:_HEADER_SIZE]
    )
    if magic != OCC4_MAGIC:
        raise DataError(f"bad magic in {path}: {magic!r}")
    if version != OCC4_VERSION:
        raise DataError(f"unsupported OCC4 version {version} in {path}")
    count = x * y * z
    expected = _HEADER_SIZE + count * (2 if mask_flag else 1)
    if len(raw) != expected:
        raise DataError(
            f"grid payload size mismatch in {path}: dims ({x},{y},{z}) need "
            f"{expected} bytes, file has {len(raw)}"
        )
    labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=_HEADER_SIZE)
    labels = labels.reshape(z, y, x).transpose(2, 1, 0).copy()
    mask = None
    if mask_flag:
        mask = np.frombuffer(raw, dtype=np.uint8, count=count, offset=_HEADER_SIZE + count)
        mask = mask.reshape(z, y, x).transpose(2, 1, 0).astype(bool)
    return OccupancyGrid((x, y, z), voxel, np.array([ox, oy, oz]), labels,
                         class_count=class_count, visibility_mask=mask)
