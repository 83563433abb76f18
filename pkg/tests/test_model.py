"""Network-level tests: encoder, attention modules, cost accounting, heads,
streaming cache equivalence, causality, and checkpointing."""

import numpy as np
import pytest

from epf2 import geometry as G
from epf2 import numerics as N
from epf2.numerics import Tensor
from epf2.model import (
    MICRO_CONFIG,
    ContractError,
    CostRow,
    KVCacheWindow,
    ModelConfig,
    OrderingError,
    PoseModel,
    StreamingSession,
    band_causal_mask,
    cholesky_factors,
    covariance_matrices,
    fusion_cost,
    headset_pose_features,
    linear_cost,
    load_checkpoint,
    model_table,
    multiview_attention_table,
    norm_cost,
    patchify,
    save_checkpoint,
    temporal_attention_table,
    totals,
    world_transform,
)
from epf2.model.network import rest_pose


# ---------------------------------------------------------------------------
# fixtures / helpers
# ---------------------------------------------------------------------------


def micro_cfg(**overrides):
    kw = dict(MICRO_CONFIG)
    kw.update(overrides)
    return ModelConfig(**kw)


def micro_cams(cfg):
    """Forward-looking cameras with slight baseline offsets."""
    cams = []
    for v in range(cfg.views):
        cams.append(G.Camera(fx=20.0, fy=20.0, cx=cfg.image_width / 2,
                             cy=cfg.image_height / 2, rotation=np.eye(3),
                             translation=np.array([0.05 * (v - 0.5), 0.0, 0.0]),
                             width=cfg.image_width, height=cfg.image_height))
    return cams


def micro_inputs(cfg, b, t, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.random((b, t, cfg.views, cfg.image_height, cfg.image_width))
    head_rot = np.broadcast_to(np.eye(3), (b, t, 3, 3)).copy()
    head_trans = 0.1 * rng.standard_normal((b, t, 3))
    return images, head_rot, head_trans


# ---------------------------------------------------------------------------
# patchify / encoder
# ---------------------------------------------------------------------------


def test_patchify_shape_and_content():
    img = np.arange(4 * 6, dtype=np.float64).reshape(4, 6)
    p = patchify(img, 2)
    assert p.shape == (6, 4)
    # top-left patch is rows 0:2, cols 0:2 in row-major order
    np.testing.assert_array_equal(p[0], img[0:2, 0:2].ravel())
    # patch index runs row-major over the patch grid
    np.testing.assert_array_equal(p[3], img[2:4, 0:2].ravel())


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError):
        patchify(np.zeros((5, 6)), 2)


def test_encoder_shape_and_determinism():
    cfg = micro_cfg()
    model = PoseModel(cfg, seed=1)
    images = np.random.default_rng(0).random((2, 3, cfg.views,
                                              cfg.image_height, cfg.image_width))
    f1 = model.encoder(images).data
    f2 = model.encoder(images).data
    assert f1.shape == (2, 3, cfg.views, cfg.token_count, cfg.channels)
    np.testing.assert_array_equal(f1, f2)


def test_encoder_weight_sharing_across_views():
    # identical pixels in two views must produce identical feature tokens
    cfg = micro_cfg()
    model = PoseModel(cfg, seed=1)
    img = np.random.default_rng(2).random((cfg.image_height, cfg.image_width))
    images = np.stack([img, img])[None, None]  # (1,1,V=2,H,W)
    feats = model.encoder(images).data
    np.testing.assert_array_equal(feats[0, 0, 0], feats[0, 0, 1])


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


def test_linear_cost_square_projection():
    assert linear_cost(128, 128) == (16512, 32768)


def test_fusion_cost_reference_row():
    # the 256 -> 128 fusion is charged at C x C per token
    assert fusion_cost(128, 2) == (32896, 32768)
    assert fusion_cost(128, 2, tokens=16) == (32896, 524288)


def test_norm_cost():
    assert norm_cost(128) == (256, 0)


def test_multiview_attention_reference_table():
    rows = {r.layer: (r.params, r.flops) for r in multiview_attention_table(128, 2)}
    assert rows["query projection"] == (16512, 32768)
    assert rows["key projection"] == (16512, 32768)
    assert rows["value projection"] == (16512, 32768)
    assert rows["output projection"] == (32896, 32768)
    assert rows["norm"] == (256, 0)
    assert totals(multiview_attention_table(128, 2)) == (82688, 131072)


def test_temporal_attention_table():
    p, f = totals(temporal_attention_table(128))
    assert p == 4 * 16512 + 256
    assert f == 4 * 32768


def test_attention_flops_independent_of_joint_count():
    def attention_flops(joints):
        cfg = micro_cfg(joints=joints)
        return sum(r.flops for r in model_table(cfg) if r.category == "attention")
    assert attention_flops(4) == attention_flops(20)


def test_model_table_params_match_network():
    cfg = micro_cfg()
    model = PoseModel(cfg, seed=0)
    counted = sum(int(np.prod(t.data.shape)) for t in model.parameters())
    tabulated = totals(model_table(cfg))[0]
    # the table excludes the non-linear extras: final norms, query embedding,
    # camera embeddings, validity embeddings
    extras = (2 * 2 * cfg.channels + cfg.channels + cfg.views * cfg.channels
              + cfg.joints * cfg.channels)
    assert counted == tabulated + extras


# ---------------------------------------------------------------------------
# query / condition construction
# ---------------------------------------------------------------------------


def test_headset_pose_features_layout():
    rot = np.eye(3)
    trans = np.array([1.0, 2.0, 3.0])
    feats = headset_pose_features(rot, trans)
    np.testing.assert_allclose(feats, [1, 2, 3, 1, 0, 0, 0, 1, 0])


def test_make_query_fallback_embedding():
    cfg = micro_cfg(use_auxiliary=False)
    model = PoseModel(cfg, seed=0)
    q = model.make_query(None, None, (2, 3)).data
    assert q.shape == (2, 3, cfg.channels)
    np.testing.assert_array_equal(q[0, 0], model.query_embed.data)
    np.testing.assert_array_equal(q[1, 2], model.query_embed.data)


def test_refinement_condition_contract():
    cfg = micro_cfg()
    model = PoseModel(cfg, seed=0)
    with pytest.raises(ContractError):
        model.refinement_condition(None, micro_cams(cfg))
    with pytest.raises(ContractError):
        model.refinement_condition(Tensor(np.zeros((1, 1, cfg.joints, 3))), None)


def test_refinement_condition_ablated_reduces_to_camera_embedding():
    cfg = micro_cfg(use_projection_condition=False)
    model = PoseModel(cfg, seed=0)
    prop = Tensor(np.zeros((2, 3, cfg.joints, 3), dtype=np.float32))
    cond = model.refinement_condition(prop, micro_cams(cfg)).data
    base = model.proposal_condition(2, 3).data
    np.testing.assert_array_equal(cond, base)


def test_forward_rejects_wrong_view_count():
    cfg = micro_cfg()
    model = PoseModel(cfg, seed=0)
    images, rot, trans = micro_inputs(cfg, 1, 2)
    bad = images[:, :, :1]  # drop a view
    with pytest.raises(ValueError):
        model.forward_sequence(bad, rot, trans, micro_cams(cfg))


# ---------------------------------------------------------------------------
# temporal attention / cache
# ---------------------------------------------------------------------------


def test_band_causal_mask():
    m = band_causal_mask(5, 2)
    assert m[0, 1] == -1e9          # no future
    assert m[3, 3] == 0.0           # self
    assert m[3, 1] == 0.0           # inside window
    assert m[3, 0] == -1e9          # beyond window
    assert (m[np.triu_indices(5, k=1)] == -1e9).all()


def test_cache_eviction_and_ordering():
    cache = KVCacheWindow(window=2)
    for t in range(4):
        cache.push(np.full((1, 1, 3), float(t)), np.zeros((1, 1, 3)), t)
    assert len(cache) == 2
    assert cache.positions == [2, 3]  # oldest evicted first
    with pytest.raises(OrderingError):
        cache.push(np.zeros((1, 1, 3)), np.zeros((1, 1, 3)), 3)
    with pytest.raises(OrderingError):
        cache.check_before(3)
    cache.check_before(4)  # strictly later is fine


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_streaming_matches_full_sequence(seed):
    cfg = micro_cfg()
    model = PoseModel(cfg, seed=seed)
    cams = micro_cams(cfg)
    frames = 12
    images, rot, trans = micro_inputs(cfg, 1, frames, seed=seed + 10)
    full = model.forward_sequence(images, rot, trans, cams)
    session = StreamingSession(model, cams)
    for t in range(frames):
        out = session.step(images[0, t], rot[0, t], trans[0, t])
        for key in ("proposal", "refined", "uncertainty"):
            diff = np.abs(out[key] - full[key].data[0, t]).max()
            assert diff < 1e-5, f"{key} frame {t}: {diff}"


def test_streaming_session_rejects_reuse_of_timestamp():
    cfg = micro_cfg()
    model = PoseModel(cfg, seed=0)
    session = StreamingSession(model, micro_cams(cfg))
    images, rot, trans = micro_inputs(cfg, 1, 1)
    session.step(images[0, 0], rot[0, 0], trans[0, 0])
    session.t = 0  # simulate an out-of-order feed
    with pytest.raises(OrderingError):
        session.step(images[0, 0], rot[0, 0], trans[0, 0])


def test_causality_is_bit_exact():
    # perturbing future frames must not change earlier outputs at all
    cfg = micro_cfg()
    model = PoseModel(cfg, seed=3)
    # break the zero-initialized heads so outputs depend on the inputs
    head_w = model.refine_head.mlp.fc2.w
    head_w.data = np.random.default_rng(1).standard_normal(
        head_w.data.shape).astype(head_w.data.dtype)
    cams = micro_cams(cfg)
    images, rot, trans = micro_inputs(cfg, 1, 6, seed=5)
    base = model.forward_sequence(images, rot, trans, cams)["refined"].data
    tampered = images.copy()
    tampered[:, 4:] = np.random.default_rng(99).random(tampered[:, 4:].shape)
    out = model.forward_sequence(tampered, rot, trans, cams)["refined"].data
    assert np.array_equal(base[:, :4], out[:, :4])
    assert not np.array_equal(base[:, 4:], out[:, 4:])


def test_temporal_attention_is_shift_invariant():
    # rotary encoding depends only on relative offsets
    cfg = micro_cfg()
    model = PoseModel(cfg, seed=4)
    layer = model.dec1[0].temporal
    x = Tensor(np.random.default_rng(0).random((1, 5, cfg.channels)).astype(np.float32))
    a = layer.full(x, np.arange(5)).data
    b = layer.full(x, np.arange(5) + 17).data
    np.testing.assert_allclose(a, b, atol=1e-5)


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def test_initial_proposal_is_rest_pose():
    cfg = micro_cfg()
    model = PoseModel(cfg, seed=0)
    images, rot, trans = micro_inputs(cfg, 1, 2)
    out = model.forward_sequence(images, rot, trans, micro_cams(cfg))
    rest = rest_pose(model.skeleton, cfg.joints)
    np.testing.assert_allclose(out["proposal"].data[0, 0], rest, atol=1e-6)
    # zero-initialized refinement delta: refined == proposal at init
    np.testing.assert_allclose(out["refined"].data, out["proposal"].data, atol=1e-7)
    # zero-initialized uncertainty: L == I
    L = cholesky_factors(out["uncertainty"].data)
    np.testing.assert_allclose(L, np.broadcast_to(np.eye(3), L.shape), atol=1e-7)


def test_parametric_head_respects_bone_lengths():
    names = ["head", "neck", "l_arm", "r_arm"]
    parent = [-1, 0, 1, 1]
    offsets = np.array([[0, 0, 0], [0, -0.1, 0], [0.3, 0, 0], [-0.3, 0, 0]])
    skel = G.Skeleton(names, parent, offsets)
    cfg = micro_cfg(head_mode="parametric")
    model = PoseModel(cfg, seed=0, skeleton=skel)
    images, rot, trans = micro_inputs(cfg, 1, 2)
    out = model.forward_sequence(images, rot, trans, micro_cams(cfg))
    kp = out["refined"].data
    for j in (1, 2, 3):
        bone = np.linalg.norm(kp[..., j, :] - kp[..., parent[j], :], axis=-1)
        expected = np.linalg.norm(offsets[j])
        np.testing.assert_allclose(bone, expected, rtol=1e-4)


def test_parametric_head_joint_count_mismatch():
    cfg = micro_cfg(head_mode="parametric")  # joints=4, default skeleton has 20
    with pytest.raises(ValueError):
        PoseModel(cfg, seed=0)


@pytest.mark.parametrize("seed", range(10))
def test_covariances_are_spd(seed):
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((100, 6)) * 3.0
    sigma = covariance_matrices(u)
    np.testing.assert_allclose(sigma, np.swapaxes(sigma, -1, -2), atol=1e-10)
    eig = np.linalg.eigvalsh(sigma)
    assert (eig > 0).all()


def test_covariance_logdet_identity():
    rng = np.random.default_rng(0)
    u = rng.standard_normal((50, 6)) * 4.0
    sigma = covariance_matrices(u)
    sign, logdet = np.linalg.slogdet(sigma)
    assert (sign > 0).all()
    expected = 2.0 * np.clip(u[:, 0:3], -6.0, 4.0).sum(axis=-1)
    np.testing.assert_allclose(logdet, expected, rtol=1e-5, atol=1e-6)


# ---------------------------------------------------------------------------
# frames
# ---------------------------------------------------------------------------


def test_world_transform_oracle():
    rng = np.random.default_rng(7)
    pts = Tensor(rng.standard_normal((2, 3, 4, 3)))
    rot6 = rng.standard_normal((2, 3, 6))
    rot = G.rot6d_to_matrix(Tensor(rot6)).data
    trans = rng.standard_normal((2, 3, 3))
    out = world_transform(pts, rot, trans).data
    for b in range(2):
        for t in range(3):
            for j in range(4):
                expected = rot[b, t] @ pts.data[b, t, j] + trans[b, t]
                np.testing.assert_allclose(out[b, t, j], expected, atol=1e-10)


# ---------------------------------------------------------------------------
# gradients through the full model
# ---------------------------------------------------------------------------


def _randomize_heads(model, seed=1):
    """The task heads are zero-initialized; give them weight so gradients
    propagate back into the decoders."""
    rng = np.random.default_rng(seed)
    for head in (model.proposal_head, model.refine_head, model.uncertainty_head):
        w = head.mlp.fc2.w
        w.data = (0.1 * rng.standard_normal(w.data.shape)).astype(w.data.dtype)


def test_refined_loss_reaches_first_decoder():
    # gradient from the refined output must flow back through both decoders
    cfg = micro_cfg(dtype="f64")
    model = PoseModel(cfg, seed=0)
    _randomize_heads(model)
    images, rot, trans = micro_inputs(cfg, 1, 3)
    tape = N.ComputationTape()
    with tape:
        out = model.forward_sequence(images, rot, trans, micro_cams(cfg))
        loss = N.mean(N.mul(out["refined"], out["refined"]))
    tape.backward(loss)
    w = model.dec1[0].mvca.wq.w
    assert w.grad is not None and np.abs(w.grad).max() > 0


def test_model_gradient_matches_finite_differences():
    from epf2.numerics import grad_check
    cfg = micro_cfg(dtype="f64")
    model = PoseModel(cfg, seed=0)
    _randomize_heads(model)
    images, rot, trans = micro_inputs(cfg, 1, 3)
    cams = micro_cams(cfg)
    theta = model.dec2[0].ffn.fc1.w

    def f(_):
        out = model.forward_sequence(images, rot, trans, cams)
        return N.mean(N.mul(out["refined"], out["refined"]))

    coords = [0, 53, 217, 511]  # flat indices into the weight matrix
    assert grad_check(f, theta, coords=coords) < 1e-5


# ---------------------------------------------------------------------------
# checkpointing / structure
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = micro_cfg()
    model = PoseModel(cfg, seed=11)
    path = tmp_path / "model.epf2"
    save_checkpoint(path, model)
    loaded = load_checkpoint(path)
    assert loaded.cfg == cfg
    images, rot, trans = micro_inputs(cfg, 1, 2)
    a = model.forward_sequence(images, rot, trans, micro_cams(cfg))["refined"].data
    b = loaded.forward_sequence(images, rot, trans, micro_cams(cfg))["refined"].data
    np.testing.assert_array_equal(a, b)


def test_decoder_stages_share_architecture():
    cfg = micro_cfg()
    model = PoseModel(cfg, seed=0)
    shapes1 = {n.split(".", 1)[1]: t.data.shape
               for n, t in model.named_parameters() if n.startswith("dec1_")}
    shapes2 = {n.split(".", 1)[1]: t.data.shape
               for n, t in model.named_parameters() if n.startswith("dec2_")}
    assert shapes1 == shapes2


def test_config_text_round_trip():
    cfg = micro_cfg(use_temporal=False, head_mode="parametric", dtype="f64")
    assert ModelConfig.from_text(cfg.to_text()) == cfg
