import numpy as np
import pytest
import torch

from occ4cast import geometry
from occ4cast.geometry import CameraCalib, Pose, compose, inverse, relative_pose


def random_pose(rng):
    # random rotation via QR, fixed to det +1
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return Pose(q, rng.normal(scale=5.0, size=3))


def test_pose_validation_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 1.01, np.zeros(3))
    with pytest.raises(ValueError):
        Pose(-np.eye(3), np.zeros(3))  # det -1


def test_compose_identity(rng):
    p = random_pose(rng)
    q = compose(Pose.identity(), p)
    assert np.allclose(q.matrix, p.matrix, atol=1e-12)


def test_compose_inverse_cancellation(rng):
    p = random_pose(rng)
    ident = compose(inverse(p), p)
    assert np.abs(ident.matrix - np.eye(4)).max() < 1e-6


def test_compose_matches_homogeneous_matrix_oracle(rng):
    for _ in range(20):
        a, b = random_pose(rng), random_pose(rng)
        got = compose(a, b).matrix
        expected = a.matrix @ b.matrix  # independent 4x4 product
        assert np.abs(got - expected).max() < 1e-9


def test_relative_pose_self_is_identity(rng):
    p = random_pose(rng)
    rel = relative_pose(p, p)
    assert np.abs(rel.matrix - np.eye(4)).max() < 1e-6


def test_relative_pose_pure_translation():
    frm = Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
    rel = relative_pose(frm, Pose.identity())
    assert np.allclose(rel.translation, [1.0, 0.0, 0.0])
    assert np.allclose(rel.rotation, np.eye(3))


def test_relative_pose_roundtrip(rng):
    for _ in range(10):
        frm, to = random_pose(rng), random_pose(rng)
        rel = relative_pose(frm, to)
        back = compose(to, rel)
        assert np.abs(back.matrix - frm.matrix).max() < 1e-6


def make_calib(yaw=0.0):
    return geometry.make_camera(yaw=yaw, height=1.5, hfov_deg=70.0,
                                width=64, height_px=48)


def test_project_optical_axis_hits_principal_point():
    calib = make_calib()
    # one meter ahead of the camera along ego +x, at camera height
    point = np.array([[1.0, 0.0, 1.5]])
    pixels, depth, valid = geometry.project_points(
        point, calib, Pose.identity(), Pose.identity())
    assert valid[0]
    assert np.allclose(pixels[0], [calib.cx, calib.cy], atol=1e-9)
    assert abs(depth[0] - 1.0) < 1e-9


def test_project_behind_camera_invalid():
    calib = make_calib()
    pixels, depth, valid = geometry.project_points(
        np.array([[-1.0, 0.0, 1.5]]), calib, Pose.identity(), Pose.identity())
    assert not valid[0]
    assert np.isfinite(pixels).all()


def _oracle_project(points, calib, ego_target, ego_source):
    """Independent chain of explicit homogeneous matrices."""
    chain = (np.linalg.inv(calib.cam_to_ego.matrix)
             @ np.linalg.inv(ego_source.matrix) @ ego_target.matrix)
    hom = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    cam = (chain @ hom.T).T[:, :3]
    z = cam[:, 2]
    u = calib.fx * cam[:, 0] / z + calib.cx
    v = calib.fy * cam[:, 1] / z + calib.cy
    return np.stack([u, v], axis=1), z


def test_project_matches_matrix_chain_oracle(rng):
    calib = make_calib(yaw=0.3)
    for _ in range(20):
        ego_t, ego_s = random_pose(rng), random_pose(rng)
        pts = rng.normal(scale=8.0, size=(32, 3))
        pixels, depth, valid = geometry.project_points(pts, calib, ego_t, ego_s)
        o_pix, o_z = _oracle_project(pts, calib, ego_t, ego_s)
        front = o_z > 0.5
        assert np.abs(pixels[front] - o_pix[front]).max() < 1e-6
        assert np.abs(depth - o_z).max() < 1e-9


def test_projection_invariant_to_precomposed_transform(rng):
    calib = make_calib()
    ego_t, ego_s = random_pose(rng), random_pose(rng)
    pts = rng.normal(scale=5.0, size=(16, 3))
    pix_a, dep_a, val_a = geometry.project_points(pts, calib, ego_t, ego_s)
    # pre-compose: express points directly in the source ego frame
    rel = relative_pose(ego_t, ego_s)
    pix_b, dep_b, val_b = geometry.project_points(
        rel.apply(pts), calib, Pose.identity(), Pose.identity())
    assert np.abs(pix_a - pix_b).max() < 1e-6
    assert np.abs(dep_a - dep_b).max() < 1e-9
    assert (val_a == val_b).all()


def test_unproject_roundtrip(rng):
    calib = make_calib(yaw=-0.4)
    for _ in range(10):
        ego_t, ego_s = random_pose(rng), random_pose(rng)
        pts = rng.normal(scale=6.0, size=(40, 3))
        pixels, depth, valid = geometry.project_points(pts, calib, ego_t, ego_s)
        if not valid.any():
            continue
        rec = geometry.unproject_pixel(pixels[valid], depth[valid], calib, ego_s, ego_t)
        assert np.abs(rec - pts[valid]).max() < 1e-5


def test_torch_projection_matches_numpy(rng):
    calib = make_calib(yaw=0.2)
    ego_t, ego_s = random_pose(rng), random_pose(rng)
    pts = rng.normal(scale=6.0, size=(50, 3))
    pix_np, dep_np, val_np = geometry.project_points(pts, calib, ego_t, ego_s)
    mat = geometry.target_to_camera_matrix(calib, ego_t, ego_s)
    pix_t, dep_t, val_t = geometry.project_points_torch(
        torch.as_tensor(pts), torch.as_tensor(mat), calib.fx, calib.fy,
        calib.cx, calib.cy, calib.width, calib.height)
    assert np.abs(pix_t.numpy() - pix_np).max() < 1e-9
    assert (val_t.numpy() == val_np).all()


def test_camera_calib_validation():
    with pytest.raises(ValueError):
        CameraCalib(fx=-1.0, fy=1.0, cx=10, cy=10, width=20, height=20)
    with pytest.raises(ValueError):
        CameraCalib(fx=10.0, fy=10.0, cx=25, cy=10, width=20, height=20)
