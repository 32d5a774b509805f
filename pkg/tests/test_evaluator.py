import numpy as np
import pytest
import torch

from occ4cast.anchors import DecodedFrame
from occ4cast.classes import NUM_CLASSES
from occ4cast.errors import GridSpecMismatch
from occ4cast.evaluator import (MetricReport, ModelForecaster, OracleForecaster,
                                apply_trajectory_source, evaluate, geometric_iou,
                                march_ray, ray_iou, semantic_miou,
                                surface_voxel_centers, voxelize_prediction)
from occ4cast.grid import OccupancyGrid, grid_to_points
from occ4cast.synthetic import generate_dataset

from conftest import tiny_world_spec


def random_grid(rng, dims=(8, 8, 4), class_count=6, p_occupied=0.3, voxel=1.0,
                origin=(-4.0, -4.0, -2.0)):
    labels = np.full(dims, class_count, dtype=np.uint8)
    occ = rng.uniform(size=dims) < p_occupied
    labels[occ] = rng.integers(0, class_count, size=int(occ.sum())).astype(np.uint8)
    return OccupancyGrid(dims, voxel, np.array(origin), labels, class_count=class_count)


def frame_from_points(points, labels, class_count=NUM_CLASSES, hot=9.0):
    logits = np.full((len(points), class_count), -hot / 2)
    logits[np.arange(len(points)), labels] = hot
    return DecodedFrame(points=torch.as_tensor(points).unsqueeze(1),
                        logits=torch.as_tensor(logits).unsqueeze(1),
                        features=torch.zeros(len(points), 1))


# ---------------------------------------------------------------------------
# voxelize
# ---------------------------------------------------------------------------

def test_voxelize_no_points_all_free():
    frame = frame_from_points(np.full((4, 3), 99.0), np.zeros(4, dtype=int))
    grid = voxelize_prediction(frame, ((4, 4, 2), 1.0, np.zeros(3), NUM_CLASSES), 0.0)
    assert not grid.occupied().any()


def test_voxelize_single_point():
    frame = frame_from_points(np.array([[0.5, 1.5, 0.5]]), np.array([3]))
    grid = voxelize_prediction(frame, ((4, 4, 2), 1.0, np.zeros(3), NUM_CLASSES), 0.0)
    assert grid.labels[0, 1, 0] == 3
    assert grid.occupied().sum() == 1


def test_voxelize_matches_binning_oracle(rng):
    points = rng.uniform(-4, 4, size=(200, 3))
    labels = rng.integers(0, 6, size=200)
    frame = frame_from_points(points, labels, class_count=6)
    spec = ((8, 8, 4), 1.0, np.array([-4.0, -4.0, -2.0]), 6)
    grid = voxelize_prediction(frame, spec, 0.0)

    probs = torch.softmax(frame.logits.reshape(-1, 6), dim=-1).numpy()
    votes = {}
    for p, pr in zip(points, probs):
        idx = tuple(np.floor((p - spec[2]) / spec[1]).astype(int))
        if all(0 <= idx[a] < spec[0][a] for a in range(3)):
            votes.setdefault(idx, np.zeros(6))
            votes[idx] += pr
    expected_occ = set(votes)
    got_occ = set(map(tuple, np.argwhere(grid.occupied())))
    assert got_occ == expected_occ
    for idx, acc in votes.items():
        assert grid.labels[idx] == int(np.argmax(acc))


def test_voxelize_threshold_filters_weak_votes():
    points = np.array([[0.5, 0.5, 0.5]])
    frame = frame_from_points(points, np.array([2]), class_count=4, hot=0.0)
    # uniform logits: best accumulated score = 0.25
    grid = voxelize_prediction(frame, ((2, 2, 2), 1.0, np.zeros(3), 4), 0.3)
    assert not grid.occupied().any()
    grid = voxelize_prediction(frame, ((2, 2, 2), 1.0, np.zeros(3), 4), 0.2)
    assert grid.occupied().sum() == 1


def test_voxelize_grid_to_points_identity(rng):
    for _ in range(10):
        grid = random_grid(rng)
        pts, labels = grid_to_points(grid)
        if len(pts) == 0:
            continue
        frame = frame_from_points(pts, labels, class_count=grid.class_count)
        back = voxelize_prediction(frame, grid, 0.0)
        assert (back.labels == grid.labels).all()


# ---------------------------------------------------------------------------
# geometric IoU / semantic mIoU
# ---------------------------------------------------------------------------

def test_geometric_iou_identical(rng):
    grid = random_grid(rng)
    assert geometric_iou(grid, grid) == 100.0


def test_geometric_iou_disjoint():
    a = OccupancyGrid.empty((4, 4, 2), 1.0, np.zeros(3))
    b = OccupancyGrid.empty((4, 4, 2), 1.0, np.zeros(3))
    a.labels[0, 0, 0] = 1
    b.labels[3, 3, 1] = 1
    assert geometric_iou(a, b) == 0.0


def test_geometric_iou_half_overlap():
    a = OccupancyGrid.empty((8, 1, 1), 1.0, np.zeros(3))
    b = OccupancyGrid.empty((8, 1, 1), 1.0, np.zeros(3))
    a.labels[0:4, 0, 0] = 1   # n = 4 occupied each, overlap 2
    b.labels[2:6, 0, 0] = 1
    assert abs(geometric_iou(a, b) - 100.0 * 2 / 6) < 1e-9


def test_geometric_iou_both_empty_is_100():
    a = OccupancyGrid.empty((2, 2, 2), 1.0, np.zeros(3))
    assert geometric_iou(a, a) == 100.0


def test_geometric_iou_spec_mismatch():
    a = OccupancyGrid.empty((2, 2, 2), 1.0, np.zeros(3))
    b = OccupancyGrid.empty((2, 2, 2), 0.5, np.zeros(3))
    with pytest.raises(GridSpecMismatch):
        geometric_iou(a, b)


def test_geometric_iou_symmetric(rng):
    a, b = random_grid(rng), random_grid(rng)
    assert abs(geometric_iou(a, b) - geometric_iou(b, a)) < 1e-12


def test_semantic_miou_identical(rng):
    grid = random_grid(rng)
    miou, per_class = semantic_miou(grid, grid)
    assert miou == 100.0
    present = np.unique(grid.labels[grid.occupied()])
    for c in range(grid.class_count):
        if c in present:
            assert per_class[c] == 100.0
        else:
            assert np.isnan(per_class[c])


def test_semantic_miou_empty_prediction(rng):
    gt = random_grid(rng, p_occupied=0.5)
    pred = OccupancyGrid.empty(gt.dims, gt.voxel_size, gt.origin, gt.class_count)
    miou, _ = semantic_miou(pred, gt)
    assert miou == 0.0


def test_semantic_miou_matches_confusion_oracle(rng):
    for _ in range(10):
        a = random_grid(rng)
        b = random_grid(rng)
        miou, per_class = semantic_miou(a, b)
        ious = []
        for c in range(a.class_count):
            inter = union = 0
            for i in range(8):
                for j in range(8):
                    for k in range(4):
                        pa = a.labels[i, j, k] == c
                        pb = b.labels[i, j, k] == c
                        inter += pa and pb
                        union += pa or pb
            if union:
                ious.append(100.0 * inter / union)
        assert abs(miou - np.mean(ious)) < 1e-9


def test_metrics_respect_visibility_mask(rng):
    gt = random_grid(rng)
    gt.visibility_mask = rng.uniform(size=gt.dims) < 0.5
    pred = random_grid(rng)
    full = geometric_iou(pred, gt, use_mask=False)
    masked = geometric_iou(pred, gt, use_mask=True)
    # oracle for the masked value
    p = pred.occupied() & gt.visibility_mask
    g = gt.occupied() & gt.visibility_mask
    union = np.logical_or(p, g).sum()
    expected = 100.0 if union == 0 else 100.0 * np.logical_and(p, g).sum() / union
    assert abs(masked - expected) < 1e-12
    assert masked != full  # differs for this seed


# ---------------------------------------------------------------------------
# RayIoU
# ---------------------------------------------------------------------------

def march_ray_oracle(grid, origin, direction):
    """Boundary-interval marcher: enumerate crossing ts, inspect midpoints."""
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    gmin = grid.origin
    gmax = grid.origin + np.asarray(grid.dims) * grid.voxel_size
    ts = [0.0]
    for ax in range(3):
        if d[ax] == 0:
            continue
        for plane in range(grid.dims[ax] + 1):
            t = (gmin[ax] + plane * grid.voxel_size - o[ax]) / d[ax]
            if t > 0:
                ts.append(t)
    ts = sorted(set(ts))
    for a, b in zip(ts, ts[1:]):
        mid = o + 0.5 * (a + b) * d
        idx = np.floor((mid - gmin) / grid.voxel_size).astype(int)
        if np.any(idx < 0) or np.any(idx >= np.asarray(grid.dims)):
            continue
        label = grid.labels[idx[0], idx[1], idx[2]]
        if label != grid.free_id:
            return True, int(label), max(a, 0.0)
    return False, -1, np.inf


def test_march_ray_matches_interval_oracle(rng):
    for _ in range(5):
        grid = random_grid(rng, p_occupied=0.25)
        targets = surface_voxel_centers(grid)
        origin = np.array([0.00131, 0.00173, 0.00193])
        for tgt in targets[:40]:
            got = march_ray(grid, origin, tgt - origin)
            expect = march_ray_oracle(grid, origin, tgt - origin)
            assert got[0] == expect[0]
            if got[0]:
                assert got[1] == expect[1]
                assert abs(got[2] - expect[2]) < 1e-9


def test_ray_iou_identical_grids_100(rng):
    grid = random_grid(rng, p_occupied=0.3)
    per_tau, mean = ray_iou(grid, grid)
    assert mean == 100.0
    assert all(v == 100.0 for v in per_tau.values())


def test_ray_iou_empty_prediction_zero(rng):
    gt = random_grid(rng, p_occupied=0.4)
    pred = OccupancyGrid.empty(gt.dims, gt.voxel_size, gt.origin, gt.class_count)
    per_tau, mean = ray_iou(pred, gt)
    assert mean == 0.0
    assert all(v == 0.0 for v in per_tau.values())


def test_ray_iou_hand_placed_depth_thresholds():
    # gt wall at x in [4,5); pred wall (same class) one voxel deeper: the
    # first-hit depth gap is 1/cos(angle), i.e. just over 1 m for every ray
    # and at most ~1.4 m here, so tau=1 scores 0 and tau=2 scores 100
    dims = (8, 8, 4)
    gt = OccupancyGrid.empty(dims, 1.0, np.array([0.0, 0.0, 0.0]), class_count=3)
    pred = OccupancyGrid.empty(dims, 1.0, np.array([0.0, 0.0, 0.0]), class_count=3)
    gt.labels[4, :, :] = 1
    pred.labels[5, :, :] = 1
    origin = np.array([0.5, 4.1, 2.3])
    per_tau, mean = ray_iou(pred, gt, ray_origins=origin, thresholds=(1.0, 2.0, 4.0))
    assert per_tau[1.0] == 0.0
    assert per_tau[2.0] == 100.0
    assert per_tau[4.0] == 100.0
    assert abs(mean - (0.0 + 100.0 + 100.0) / 3) < 1e-9


def test_ray_iou_counts_match_manual_oracle(rng):
    for _ in range(6):
        gt = random_grid(rng, p_occupied=0.3, class_count=4)
        pred = random_grid(rng, p_occupied=0.3, class_count=4)
        origin = np.array([0.00131, 0.00173, 0.00193])
        targets = surface_voxel_centers(gt)
        if len(targets) == 0:
            continue
        per_tau, mean = ray_iou(pred, gt, ray_origins=origin, ray_targets=targets,
                                thresholds=(1.0, 2.0, 4.0))
        for tau in (1.0, 2.0, 4.0):
            tp = np.zeros(4)
            fp = np.zeros(4)
            fn = np.zeros(4)
            for tgt in targets:
                g = march_ray_oracle(gt, origin, tgt - origin)
                p = march_ray_oracle(pred, origin, tgt - origin)
                match = g[0] and p[0] and g[1] == p[1] and abs(p[2] - g[2]) <= tau
                if match:
                    tp[g[1]] += 1
                else:
                    if p[0]:
                        fp[p[1]] += 1
                    if g[0]:
                        fn[g[1]] += 1
            denom = tp + fp + fn
            present = denom > 0
            expected = float(np.mean(100.0 * tp[present] / denom[present]))
            assert abs(per_tau[tau] - expected) < 1e-9


def test_ray_iou_empty_ray_set_rejected():
    grid = OccupancyGrid.empty((4, 4, 2), 1.0, np.zeros(3))
    with pytest.raises(ValueError, match="empty ray set"):
        ray_iou(grid, grid)


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_dataset(tiny_world_spec(), 3, base_seed=0)


def test_evaluate_oracle_model_scores_100(tiny_dataset):
    report = evaluate(OracleForecaster(), tiny_dataset, horizons=[1, 2, 3],
                      rayiou=True)
    for h in (1, 2, 3):
        assert report.geo_iou[h] == 100.0
        assert report.miou[h] == 100.0
        assert report.rayiou[h]["mean"] == 100.0
    assert report.sample_count == 3


def test_evaluate_mean_of_per_sample_metrics(tiny_dataset):
    class HalfOracle(OracleForecaster):
        """Perfect on one sample, empty on the others."""

        def forecast_frames(self, sample, waypoints, horizon, seed):
            frames = super().forecast_frames(sample, waypoints, horizon, seed)
            if sample.seq_id != "seq0000":
                for f in frames:
                    f.points = f.points + 1e6  # push out of bounds
            return frames

    report = evaluate(HalfOracle(), tiny_dataset[:2], horizons=[1])
    # sample 0 scores 100; sample 1 scores 0 -> mean 50
    assert abs(report.geo_iou[1] - 50.0) < 1e-9


def test_evaluate_order_invariance(tiny_dataset):
    fwd = evaluate(OracleForecaster(), tiny_dataset, horizons=[1, 2])
    rev = evaluate(OracleForecaster(), list(reversed(tiny_dataset)), horizons=[1, 2])
    assert fwd.to_dict() == rev.to_dict()


def test_evaluate_skips_missing_horizons(tiny_dataset):
    report = evaluate(OracleForecaster(), tiny_dataset, horizons=[1, 5])
    assert report.skipped[5] == len(tiny_dataset)
    assert np.isnan(report.miou[5])


def test_evaluate_model_forecaster_runs(tiny_dataset, tiny_model):
    report = evaluate(ModelForecaster(tiny_model), tiny_dataset[:1], horizons=[1, 2])
    assert 0.0 <= report.geo_iou[1] <= 100.0
    assert report.meta["traj_source"] == "gt"


def test_evaluate_report_roundtrip_and_table(tiny_dataset):
    report = evaluate(OracleForecaster(), tiny_dataset, horizons=[1, 2], rayiou=True)
    data = report.to_dict()
    assert data["miou_avg"] == 100.0
    table = report.format_table()
    assert "mIoU" in table and "avg" in table and "RayIoU" in table


def test_trajectory_sources(tiny_dataset):
    rng = np.random.default_rng(0)
    wps = tiny_dataset[0].trajectory
    gt = apply_trajectory_source(wps, "gt", rng)
    assert [w.x for w in gt] == [w.x for w in wps]
    zero = apply_trajectory_source(wps, "zero", rng)
    assert all(w.x == 0 and w.y == 0 and w.theta == 0 for w in zero)
    assert [w.t for w in zero] == [w.t for w in wps]
    noisy = apply_trajectory_source(wps, "noisy", rng, sigma_xy=0.5, sigma_theta=0.1)
    assert any(abs(a.x - b.x) > 1e-6 for a, b in zip(noisy, wps))
    with pytest.raises(ValueError):
        apply_trajectory_source(wps, "warp", rng)
