import numpy as np
import pytest

from epf2 import geometry as G
from epf2 import numerics as N
from epf2.numerics import Tensor, grad_check


def make_camera(**kw):
    args = dict(fx=100.0, fy=100.0, cx=50.0, cy=50.0,
                rotation=np.eye(3), translation=np.zeros(3), width=100, height=100)
    args.update(kw)
    return G.Camera(**args)


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def test_project_principal_point():
    cam = make_camera()
    uv, valid = G.project(cam, [0.0, 0.0, 2.0])
    assert valid
    np.testing.assert_allclose(uv, [50.0, 50.0])


def test_project_behind_camera():
    cam = make_camera()
    uv, valid = G.project(cam, [0.0, 0.0, -1.0])
    assert not valid
    np.testing.assert_allclose(uv, [50.0, 50.0])


def test_project_hand_computed():
    cam = make_camera()
    uv, valid = G.project(cam, [0.1, 0.0, 1.0])
    assert valid
    np.testing.assert_allclose(uv, [60.0, 50.0], atol=1e-9)


def test_project_back_project_round_trip():
    rng = np.random.default_rng(0)
    cam = make_camera(rotation=random_rotation(rng), translation=rng.standard_normal(3) * 0.1)
    for _ in range(50):
        p = rng.uniform(-0.3, 0.3, 3)
        p_cam = cam.rotation @ p + cam.translation
        uv, valid = G.project(cam, p)
        if not valid:
            continue
        back = G.back_project(cam, uv, p_cam[2])
        assert np.abs(back - p).max() < 1e-6


def test_camera_invariants():
    with pytest.raises(G.ConfigurationError):
        make_camera(fx=-1.0)
    with pytest.raises(G.ConfigurationError):
        make_camera(rotation=2 * np.eye(3))


# ---------------------------------------------------------------------------
# 6D rotations
# ---------------------------------------------------------------------------

def test_rot6d_canonical_basis():
    m = G.rot6d_to_matrix(np.array([1.0, 0, 0, 0, 1.0, 0]))
    np.testing.assert_allclose(m.data, np.eye(3), atol=1e-12)


def test_rot6d_scale_invariance():
    m = G.rot6d_to_matrix(np.array([2.0, 0, 0, 0, 3.0, 0]))
    np.testing.assert_allclose(m.data, np.eye(3), atol=1e-12)


def test_rot6d_round_trip_100():
    rng = np.random.default_rng(1)
    for _ in range(100):
        r = random_rotation(rng)
        back = G.rot6d_to_matrix(G.matrix_to_rot6d(r))
        assert np.abs(back.data - r).max() < 1e-6


def test_rot6d_outputs_are_rotations():
    rng = np.random.default_rng(2)
    r6 = rng.standard_normal((32, 6))
    m = G.rot6d_to_matrix(r6).data
    eye = np.einsum("bij,bik->bjk", m, m)
    assert np.abs(eye - np.eye(3)).max() < 1e-6
    assert np.abs(np.linalg.det(m) - 1.0).max() < 1e-6


def test_rot6d_degenerate():
    with pytest.raises(G.DegenerateRotationError):
        G.rot6d_to_matrix(np.zeros(6))
    with pytest.raises(G.DegenerateRotationError):
        G.rot6d_to_matrix(np.array([1.0, 0, 0, 2.0, 0, 0]))


# ---------------------------------------------------------------------------
# forward kinematics
# ---------------------------------------------------------------------------

def identity_params(skel):
    canon = np.tile(np.array([1.0, 0, 0, 0, 1.0, 0]), (skel.joint_count, 1))
    return G.PoseParams(canon, 1.0, np.zeros(3), np.array([1.0, 0, 0, 0, 1.0, 0]))


def naive_fk(skel, rot_mats, scale, root_t, root_r):
    """Independent straightforward FK for cross-checking."""
    J = skel.joint_count
    wr = [None] * J
    wp = [None] * J
    for j in range(J):
        p = skel.parent[j]
        if p < 0:
            wr[j] = root_r @ rot_mats[j]
            wp[j] = root_t.copy()
        else:
            wr[j] = wr[p] @ rot_mats[j]
            wp[j] = wp[p] + wr[p] @ (scale * skel.rest_offset[j])
    return np.array(wp)


def test_fk_identity_prefix_sums():
    skel = G.default_skeleton()
    pose = G.fk_pose(skel, identity_params(skel))
    # prefix sums of rest offsets along each chain
    expect = np.zeros((skel.joint_count, 3))
    for j in range(skel.joint_count):
        p = skel.parent[j]
        expect[j] = (expect[p] if p >= 0 else 0) + (skel.rest_offset[j] if p >= 0 else 0)
    np.testing.assert_allclose(pose.positions, expect, atol=1e-12)


def test_fk_quarter_turn():
    skel = G.Skeleton(["a", "b"], np.array([-1, 0]), np.array([[0.0, 0, 0], [1.0, 0, 0]]))
    rz90 = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
    rots = np.stack([G.matrix_to_rot6d(rz90), np.array([1.0, 0, 0, 0, 1.0, 0])])
    params = G.PoseParams(rots, 1.0, np.zeros(3), np.array([1.0, 0, 0, 0, 1.0, 0]))
    pose = G.fk_pose(skel, params)
    np.testing.assert_allclose(pose.positions[1], [0.0, 1.0, 0.0], atol=1e-12)


def test_fk_scale_homogeneity():
    skel = G.default_skeleton()
    p1 = G.fk_pose(skel, identity_params(skel)).positions
    params2 = identity_params(skel)
    params2.body_scale = 2.0
    p2 = G.fk_pose(skel, params2).positions
    np.testing.assert_allclose(p2, 2.0 * p1, atol=1e-12)


def test_fk_vs_naive_oracle():
    skel = G.default_skeleton()
    rng = np.random.default_rng(3)
    mats = np.stack([random_rotation(rng) for _ in range(skel.joint_count)])
    root_r = random_rotation(rng)
    root_t = rng.standard_normal(3)
    with N.no_grad():
        got = G.forward_kinematics(
            skel, G.matrix_to_rot6d(mats), np.array([1.3]),
            root_t, G.matrix_to_rot6d(root_r)).data
    expect = naive_fk(skel, mats, 1.3, root_t, root_r)
    assert np.abs(got - expect).max() < 1e-10


def test_fk_dimension_mismatch():
    skel = G.default_skeleton()
    with pytest.raises(G.ConfigurationError):
        G.forward_kinematics(skel, np.zeros((3, 6)), np.array([1.0]),
                             np.zeros(3), np.array([1.0, 0, 0, 0, 1.0, 0]))


def test_fk_differentiable():
    skel = G.Skeleton(["a", "b", "c"], np.array([-1, 0, 1]),
                      np.array([[0.0, 0, 0], [0.3, 0.1, 0], [0.0, 0.4, 0.1]]))
    rng = np.random.default_rng(4)
    theta = Tensor(rng.standard_normal((3, 6)), requires_grad=True)

    def f(t):
        pos = G.forward_kinematics(
            skel, t, Tensor(np.array([1.0])), Tensor(np.zeros(3)),
            Tensor(np.array([1.0, 0, 0, 0, 1.0, 0])))
        return N.mean(pos)

    assert grad_check(f, theta) < 1e-5


# ---------------------------------------------------------------------------
# world transform
# ---------------------------------------------------------------------------

def test_to_world_identity():
    pose = G.KeypointSet(np.ones((4, 3)), "headset")
    out = G.to_world(pose, G.HeadsetPose(np.eye(3), np.zeros(3)))
    assert out.frame == "world"
    np.testing.assert_array_equal(out.positions, pose.positions)


def test_to_world_translation():
    pose = G.KeypointSet(np.zeros((4, 3)), "headset")
    out = G.to_world(pose, G.HeadsetPose(np.eye(3), np.array([0.0, 0, 1.0])))
    np.testing.assert_allclose(out.positions[:, 2], 1.0)


def test_to_world_round_trip():
    rng = np.random.default_rng(5)
    H = G.HeadsetPose(random_rotation(rng), rng.standard_normal(3))
    pose = G.KeypointSet(rng.standard_normal((6, 3)), "headset")
    back = G.to_headset(G.to_world(pose, H), H)
    assert np.abs(back.positions - pose.positions).max() < 1e-6


def test_to_world_frame_check():
    with pytest.raises(G.FrameError):
        G.to_world(G.KeypointSet(np.zeros((2, 3)), "world"), G.HeadsetPose(np.eye(3), np.zeros(3)))


# ---------------------------------------------------------------------------
# RoPE
# ---------------------------------------------------------------------------

def test_rope_zero_position():
    rng = np.random.default_rng(6)
    x = rng.standard_normal(16)
    out = G.rope_apply(x, 0)
    np.testing.assert_allclose(out.data, x, atol=1e-12)


def test_rope_norm_preserving():
    rng = np.random.default_rng(7)
    for m in (1, 5, 100, 1234):
        x = rng.standard_normal(32)
        out = G.rope_apply(x, m)
        assert abs(np.linalg.norm(out.data) - np.linalg.norm(x)) < 1e-6


def test_rope_relative_position_property():
    rng = np.random.default_rng(8)
    q = rng.standard_normal(16)
    k = rng.standard_normal(16)
    for m, n, s in [(3, 1, 4), (10, 2, 100), (0, 7, 13)]:
        a = G.rope_apply(q, m).data @ G.rope_apply(k, n).data
        b = G.rope_apply(q, m + s).data @ G.rope_apply(k, n + s).data
        assert abs(a - b) < 1e-5


def test_rope_odd_channels_rejected():
    with pytest.raises(G.ConfigurationError):
        G.rope_apply(np.zeros(7), 1)


# ---------------------------------------------------------------------------
# skeleton file
# ---------------------------------------------------------------------------

def test_skeleton_text_round_trip(tmp_path):
    skel = G.default_skeleton()
    path = tmp_path / "skel.txt"
    path.write_text(G.skeleton_to_text(skel))
    back = G.load_skeleton(path)
    assert back.names == skel.names
    np.testing.assert_array_equal(back.parent, skel.parent)
    np.testing.assert_array_equal(back.rest_offset, skel.rest_offset)


def test_skeleton_loader_validates_tree():
    with pytest.raises(G.ConfigurationError, match="parent"):
        G.skeleton_from_text("a b 0 0 0\nb - 0 0 0\n")
    with pytest.raises(G.ConfigurationError, match="root"):
        G.skeleton_from_text("a - 0 0 0\nb - 0 0 0\n")
