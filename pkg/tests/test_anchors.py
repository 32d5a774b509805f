import numpy as np
import pytest
import torch

from occ4cast.anchors import (SIGMA_MIN, AnchorConfig, AnchorDecoder,
                              anchor_statistics, decode_anchors, init_anchor_state)

BOUNDS = ((-10.0, -10.0, 0.0), (10.0, 10.0, 5.0))


def make_config(**kw):
    base = dict(num_anchors=16, points_per_anchor=8, feature_dim=16, sigma=1.0,
                bounds=BOUNDS, num_classes=5)
    base.update(kw)
    return AnchorConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        make_config(num_anchors=0)
    with pytest.raises(ValueError):
        make_config(sigma=0.0)
    with pytest.raises(ValueError):
        make_config(bounds=((0, 0, 0), (0, 1, 1)))


def test_init_features_exactly_zero():
    state = init_anchor_state(make_config(), seed=0)
    assert (state.features == 0).all()
    assert state.points.shape == (16, 8, 3)


def test_init_degenerate_sigma_collapses_points():
    state = init_anchor_state(make_config(sigma=1e-9), seed=1)
    spread = state.points - state.points.mean(dim=1, keepdim=True)
    assert float(spread.abs().max()) < 1e-6


def test_init_seed_determinism():
    a = init_anchor_state(make_config(), seed=7)
    b = init_anchor_state(make_config(), seed=7)
    assert torch.equal(a.points, b.points)
    c = init_anchor_state(make_config(), seed=8)
    assert not torch.equal(a.points, c.points)


def test_init_empirical_std_matches_sigma():
    config = make_config(num_anchors=1000, points_per_anchor=64, sigma=1.0)
    state = init_anchor_state(config, seed=3)
    centers = state.points.mean(dim=1, keepdim=True)
    # per-axis std of the scatter over all N*M samples
    spread = (state.points - centers).reshape(-1, 3)
    stds = spread.std(dim=0, unbiased=False)
    assert ((stds > 0.95) & (stds < 1.05)).all()
    lo = torch.tensor(BOUNDS[0]) - 4.0
    hi = torch.tensor(BOUNDS[1]) + 4.0
    assert (state.points >= lo).all() and (state.points <= hi).all()


def test_statistics_repeated_point_floors_std():
    pts = torch.full((3, 5, 3), 2.5)
    centers, stds = anchor_statistics(pts)
    assert torch.allclose(centers, torch.full((3, 3), 2.5))
    assert torch.allclose(stds, torch.full((3, 3), SIGMA_MIN))


def test_statistics_symmetric_pair():
    pts = torch.tensor([[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]])
    centers, stds = anchor_statistics(pts)
    assert torch.allclose(centers[0], torch.zeros(3))
    assert abs(float(stds[0, 0]) - 1.0) < 1e-6       # population std
    assert abs(float(stds[0, 1]) - SIGMA_MIN) < 1e-6  # floored axes


def test_statistics_match_two_pass_oracle(rng):
    pts_np = rng.normal(size=(10, 16, 3)) * 2.0 + 1.0
    centers, stds = anchor_statistics(torch.as_tensor(pts_np))
    for i in range(10):
        mean = pts_np[i].sum(axis=0) / 16.0
        var = ((pts_np[i] - mean) ** 2).sum(axis=0) / 16.0
        assert np.abs(centers[i].numpy() - mean).max() < 1e-6
        expected = np.maximum(np.sqrt(var), SIGMA_MIN)
        assert np.abs(stds[i].numpy() - expected).max() < 1e-6


def test_decode_zero_heads_identity():
    config = make_config()
    heads = AnchorDecoder(config)
    with torch.no_grad():
        for p in heads.parameters():
            p.zero_()
    state = init_anchor_state(config, seed=0)
    frame = decode_anchors(state.features, state.points, heads)
    assert torch.equal(frame.points, state.points)
    assert (frame.logits == 0).all()


def test_decode_shapes_and_errors():
    config = make_config()
    heads = AnchorDecoder(config)
    state = init_anchor_state(config, seed=0)
    frame = decode_anchors(state.features, state.points, heads)
    assert frame.points.shape == (16, 8, 3)
    assert frame.logits.shape == (16, 8, 5)
    with pytest.raises(ValueError):
        decode_anchors(state.features[:, :4], state.points, heads)
    with pytest.raises(ValueError):
        decode_anchors(state.features, state.points[:, :3], heads)


def test_decode_gradient_matches_finite_differences():
    torch.manual_seed(0)
    config = make_config(num_anchors=2, points_per_anchor=3, feature_dim=4,
                         num_classes=2)
    heads = AnchorDecoder(config).double()
    with torch.no_grad():  # randomize the zero-initialized offset output layer
        for p in heads.parameters():
            p.uniform_(-0.5, 0.5)
    features = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
    points = torch.randn(2, 3, 3, dtype=torch.float64)

    def scalar(f):
        frame = decode_anchors(f, points, heads)
        return frame.points.sum() + frame.logits.sum()

    scalar(features).backward()
    analytic = features.grad.clone()
    h = 1e-6
    for idx in [(0, 0), (0, 3), (1, 2)]:
        fp = features.detach().clone()
        fm = features.detach().clone()
        fp[idx] += h
        fm[idx] -= h
        fd = float((scalar(fp) - scalar(fm)).detach()) / (2 * h)
        rel = abs(float(analytic[idx]) - fd) / max(abs(fd), 1e-8)
        assert rel < 1e-4


def test_decode_permutation_equivariance():
    torch.manual_seed(1)
    config = make_config()
    heads = AnchorDecoder(config)
    features = torch.randn(16, 16)
    points = torch.randn(16, 8, 3)
    perm = torch.randperm(16)
    direct = decode_anchors(features, points, heads)
    permuted = decode_anchors(features[perm], points[perm], heads)
    assert torch.allclose(direct.points[perm], permuted.points, atol=1e-6)
    assert torch.allclose(direct.logits[perm], permuted.logits, atol=1e-6)


def test_statistics_of_init_centers_within_bounds():
    config = make_config(sigma=0.3)
    state = init_anchor_state(config, seed=5)
    centers, _ = anchor_statistics(state.points)
    lo = torch.tensor(BOUNDS[0]) - 0.5
    hi = torch.tensor(BOUNDS[1]) + 0.5
    assert (centers >= lo).all() and (centers <= hi).all()
