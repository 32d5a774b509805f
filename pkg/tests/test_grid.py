import numpy as np
import pytest

from occ4cast.classes import FREE, NUM_CLASSES
from occ4cast.errors import DataError
from occ4cast.grid import OccupancyGrid, grid_to_points, read_grid, write_grid


def random_grid(rng, dims=(6, 5, 4), with_mask=False, class_count=NUM_CLASSES):
    labels = rng.integers(0, class_count + 1, size=dims).astype(np.uint8)
    mask = rng.uniform(size=dims) < 0.7 if with_mask else None
    return OccupancyGrid(dims, 0.5, np.array([-1.5, -1.25, 0.0]), labels,
                         class_count=class_count, visibility_mask=mask)


def test_grid_validation():
    with pytest.raises(ValueError):
        OccupancyGrid((2, 2, 2), 0.5, np.zeros(3), np.zeros((2, 2, 3), dtype=np.uint8))
    with pytest.raises(ValueError):
        OccupancyGrid((2, 2, 2), -0.5, np.zeros(3),
                      np.zeros((2, 2, 2), dtype=np.uint8))
    with pytest.raises(ValueError):
        OccupancyGrid((2, 2, 2), 0.5, np.zeros(3),
                      np.full((2, 2, 2), NUM_CLASSES + 1, dtype=np.uint8))


def test_grid_to_points_empty():
    grid = OccupancyGrid.empty((4, 4, 2), 0.5, np.zeros(3))
    pts, labels = grid_to_points(grid)
    assert pts.shape == (0, 3)
    assert labels.shape == (0,)


def test_grid_to_points_single_voxel_center():
    grid = OccupancyGrid.empty((4, 4, 2), 0.4, np.zeros(3))
    grid.labels[0, 0, 0] = 3
    pts, labels = grid_to_points(grid)
    assert pts.shape == (1, 3)
    assert np.allclose(pts[0], [0.2, 0.2, 0.2])
    assert labels[0] == 3


def test_grid_to_points_count_matches_counting_oracle(rng):
    for _ in range(10):
        grid = random_grid(rng)
        pts, labels = grid_to_points(grid)
        # independent counting pass
        count = 0
        for i in range(grid.dims[0]):
            for j in range(grid.dims[1]):
                for k in range(grid.dims[2]):
                    if grid.labels[i, j, k] != FREE:
                        count += 1
        assert pts.shape[0] == count
        assert (labels != FREE).all()


def test_grid_to_points_respects_visibility_mask(rng):
    grid = random_grid(rng, with_mask=True)
    pts_masked, _ = grid_to_points(grid, apply_mask=True)
    pts_all, _ = grid_to_points(grid, apply_mask=False)
    visible_occ = int((grid.occupied() & grid.visibility_mask).sum())
    assert pts_masked.shape[0] == visible_occ
    assert pts_all.shape[0] == int(grid.occupied().sum())


def test_rebinning_points_reproduces_voxel_set(rng):
    grid = random_grid(rng)
    pts, _ = grid_to_points(grid, apply_mask=False)
    idx = np.floor((pts - grid.origin) / grid.voxel_size).astype(int)
    rebuilt = np.zeros(grid.dims, dtype=bool)
    rebuilt[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    assert (rebuilt == grid.occupied()).all()


def test_occ4_roundtrip(tmp_path, rng):
    for i in range(20):
        grid = random_grid(rng, with_mask=bool(i % 2))
        path = tmp_path / f"g{i}.occ4"
        write_grid(path, grid)
        back = read_grid(path)
        assert back.dims == grid.dims
        assert abs(back.voxel_size - grid.voxel_size) < 1e-7
        assert np.allclose(back.origin, grid.origin, atol=1e-6)
        assert (back.labels == grid.labels).all()
        assert back.class_count == grid.class_count
        if grid.visibility_mask is None:
            assert back.visibility_mask is None
        else:
            assert (back.visibility_mask == grid.visibility_mask).all()


def test_occ4_x_fastest_layout(tmp_path):
    grid = OccupancyGrid.empty((2, 2, 1), 1.0, np.zeros(3))
    grid.labels[1, 0, 0] = 5  # x index varies fastest on disk
    path = tmp_path / "layout.occ4"
    write_grid(path, grid)
    raw = path.read_bytes()
    body = np.frombuffer(raw[-4:], dtype=np.uint8)
    assert body[1] == 5  # flat order: (x0,y0) (x1,y0) (x0,y1) (x1,y1)


def test_read_grid_errors(tmp_path):
    with pytest.raises(DataError):
        read_grid(tmp_path / "missing.occ4")
    bad = tmp_path / "bad.occ4"
    bad.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(DataError):
        read_grid(bad)
    # truncated payload names the file
    grid = OccupancyGrid.empty((4, 4, 4), 1.0, np.zeros(3))
    path = tmp_path / "trunc.occ4"
    write_grid(path, grid)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(DataError, match="trunc.occ4"):
        read_grid(path)
