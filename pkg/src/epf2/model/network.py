"""The pose estimation network: per-view patch encoder, holistic query,
two stacked pose-decoding transformers, task heads, and streaming KV-cache."""

from __future__ import annotations

import numpy as np

from .. import geometry as G
from .. import numerics as N
from ..numerics import Tensor
from .config import ModelConfig
from .layers import (
    Linear,
    LayerNorm,
    MLP,
    Module,
    merge_heads,
    scaled_dot_attention,
    sinusoidal_grid_encoding,
    split_heads,
)

CANONICAL_ROT6D = np.array([1.0, 0, 0, 0, 1.0, 0])


class OrderingError(ValueError):
    """Raised when a cache is read or written out of temporal order."""


class ContractError(ValueError):
    """Raised when a stage is invoked without its required inputs."""


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W) -> (..., Hp*Wp, patch*patch), non-overlapping patches."""
    *lead, h, w = images.shape
    if h % patch or w % patch:
        raise ValueError(f"resolution {h}x{w} not divisible by patch size {patch}")
    hp, wp = h // patch, w // patch
    x = images.reshape(*lead, hp, patch, wp, patch)
    x = np.moveaxis(x, -3, -2)  # (..., hp, wp, patch, patch)
    return x.reshape(*lead, hp * wp, patch * patch)


class EncoderBlock(Module):
    """Pre-norm self-attention token mixing + FFN."""

    def __init__(self, rng, c, heads, ffn_mult, dtype):
        super().__init__()
        self.heads = heads
        self.ln1 = self.child("ln1", LayerNorm(c, dtype))
        self.qkv = self.child("qkv", Linear(rng, c, 3 * c, dtype))
        self.out = self.child("out", Linear(rng, c, c, dtype))
        self.ln2 = self.child("ln2", LayerNorm(c, dtype))
        self.ffn = self.child("ffn", MLP(rng, c, ffn_mult * c, c, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        c = x.shape[-1]
        h = self.ln1(x)
        qkv = self.qkv(h)
        q = split_heads(qkv[..., 0:c], self.heads)
        k = split_heads(qkv[..., c:2 * c], self.heads)
        v = split_heads(qkv[..., 2 * c:3 * c], self.heads)
        att = self.out(merge_heads(scaled_dot_attention(q, k, v)))
        x = N.add(x, att)
        return N.add(x, self.ffn(self.ln2(x)))


class ViewEncoder(Module):
    """Patchify + linear projection + residual token-mixing blocks.

    Weights are shared across views; views are processed independently by
    batching them into the leading dimensions.
    """

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        dtype = cfg.np_dtype
        c = cfg.channels
        self.cfg = cfg
        self.proj = self.child("proj", Linear(rng, cfg.patch_size ** 2, c, dtype))
        hp, wp = cfg.patch_grid
        self.pos = sinusoidal_grid_encoding(hp, wp, c, dtype)  # fixed, not learned
        self.blocks = [
            self.child(f"block{i}", EncoderBlock(rng, c, cfg.heads, cfg.encoder_ffn_mult, dtype))
            for i in range(cfg.encoder_blocks)
        ]

    def __call__(self, images: np.ndarray) -> Tensor:
        """images (..., V, H, W) -> feature tokens (..., V, N, C)."""
        patches = patchify(images.astype(self.cfg.np_dtype), self.cfg.patch_size)
        x = N.add(self.proj(Tensor(patches)), Tensor(self.pos))
        for blk in self.blocks:
            x = blk(x)
        return x


# ---------------------------------------------------------------------------
# attention modules
# ---------------------------------------------------------------------------


class MultiViewCrossAttention(Module):
    """Per-view multi-head attention without its own output linear; the V
    per-view outputs are concatenated and fused by one V*C -> C linear."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        dtype, c = cfg.np_dtype, cfg.channels
        self.heads = cfg.heads
        self.views = cfg.views
        self.wq = self.child("wq", Linear(rng, c, c, dtype))
        self.wk = self.child("wk", Linear(rng, c, c, dtype))
        self.wv = self.child("wv", Linear(rng, c, c, dtype))
        self.fuse = self.child("fuse", Linear(rng, cfg.views * c, c, dtype))

    def __call__(self, q: Tensor, feats: Tensor, pos_table: np.ndarray,
                 condition: Tensor) -> Tensor:
        """q (B,T,C); feats (B,T,V,N,C); condition (B,T,V,C) -> (B,T,C)."""
        b, t, c = q.shape
        v = feats.shape[2]
        if v != self.views:
            raise ValueError(f"expected {self.views} views, got {v}")
        qv = N.add(N.reshape(q, (b, t, 1, c)), condition)  # (B,T,V,C)
        qh = split_heads(N.reshape(self.wq(qv), (b, t, v, 1, c)), self.heads)
        kh = split_heads(self.wk(N.add(feats, Tensor(pos_table.astype(q.dtype)))), self.heads)
        vh = split_heads(self.wv(feats), self.heads)
        att = merge_heads(scaled_dot_attention(qh, kh, vh))  # (B,T,V,1,C)
        return self.fuse(N.reshape(att, (b, t, v * c)))


class KVCacheWindow:
    """Per-layer ring buffer of the last `window` raw (pre-RoPE) keys/values."""

    def __init__(self, window: int):
        self.window = window
        self.keys: list[np.ndarray] = []
        self.values: list[np.ndarray] = []
        self.positions: list[int] = []

    def __len__(self):
        return len(self.keys)

    def check_before(self, t: int):
        if self.positions and self.positions[-1] >= t:
            raise OrderingError(
                f"cache holds position {self.positions[-1]} >= current timestamp {t}")

    def push(self, k: np.ndarray, v: np.ndarray, pos: int):
        if self.positions and pos <= self.positions[-1]:
            raise OrderingError(f"cache positions must increase: {self.positions[-1]} -> {pos}")
        self.keys.append(k)
        self.values.append(v)
        self.positions.append(pos)
        if len(self.keys) > self.window:  # oldest-first eviction
            self.keys.pop(0)
            self.values.pop(0)
            self.positions.pop(0)


class TemporalAttention(Module):
    """Causal attention of the query token over its own history.

    Rotary encoding is applied per head at absolute timestamps, to the
    projected queries and keys; cached keys are stored raw and rotated at
    read time so window sliding never requires re-rotation.
    """

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        dtype, c = cfg.np_dtype, cfg.channels
        self.heads = cfg.heads
        self.window = cfg.window
        self.wq = self.child("wq", Linear(rng, c, c, dtype))
        self.wk = self.child("wk", Linear(rng, c, c, dtype))
        self.wv = self.child("wv", Linear(rng, c, c, dtype))
        self.wo = self.child("wo", Linear(rng, c, c, dtype))

    def full(self, x: Tensor, positions: np.ndarray) -> Tensor:
        """Training path: banded causal self-attention over (B,T,C)."""
        t = x.shape[1]
        q = G.rope_apply(split_heads(self.wq(x), self.heads), positions)
        k = G.rope_apply(split_heads(self.wk(x), self.heads), positions)
        v = split_heads(self.wv(x), self.heads)
        mask = band_causal_mask(t, self.window)
        return self.wo(merge_heads(scaled_dot_attention(q, k, v, mask)))

    def stream(self, x: Tensor, cache: KVCacheWindow, t: int) -> Tensor:
        """Streaming path: x (1,1,C), attends over the cache plus itself."""
        cache.check_before(t)
        k_new, v_new = self.wk(x), self.wv(x)
        ks = [Tensor(a) for a in cache.keys] + [k_new]
        vs = [Tensor(a) for a in cache.values] + [v_new]
        positions = np.asarray(cache.positions + [t])
        k = N.concat(ks, axis=1)  # (1, n, C)
        v = N.concat(vs, axis=1)
        q = G.rope_apply(split_heads(self.wq(x), self.heads), np.asarray([t]))
        kh = G.rope_apply(split_heads(k, self.heads), positions)
        vh = split_heads(v, self.heads)
        out = self.wo(merge_heads(scaled_dot_attention(q, kh, vh)))
        cache.push(k_new.data.copy(), v_new.data.copy(), t)
        return out


def band_causal_mask(t: int, window: int) -> np.ndarray:
    """(t, t) additive mask: position i attends to j in [i - window, i]."""
    i = np.arange(t)[:, None]
    j = np.arange(t)[None, :]
    allowed = (j <= i) & (j >= i - window)
    return np.where(allowed, 0.0, -1e9)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


class DecoderLayer(Module):
    """Pre-norm: conditioned multi-view cross-attention, causal temporal
    attention, FFN; residual around each sublayer."""

    def __init__(self, rng, cfg: ModelConfig):
        super().__init__()
        dtype, c = cfg.np_dtype, cfg.channels
        self.cfg = cfg
        self.ln1 = self.child("ln1", LayerNorm(c, dtype))
        self.mvca = self.child("mvca", MultiViewCrossAttention(rng, cfg))
        self.ln2 = self.child("ln2", LayerNorm(c, dtype))
        self.temporal = self.child("temporal", TemporalAttention(rng, cfg))
        self.ln3 = self.child("ln3", LayerNorm(c, dtype))
        self.ffn = self.child("ffn", MLP(rng, c, cfg.ffn_mult * c, c, dtype))

    def __call__(self, q, feats, pos_table, condition, temporal_ctx):
        q = N.add(q, self.mvca(self.ln1(q), feats, pos_table, condition))
        if self.cfg.use_temporal:
            mode = temporal_ctx[0]
            if mode == "full":
                q = N.add(q, self.temporal.full(self.ln2(q), temporal_ctx[1]))
            else:
                _, cache, t = temporal_ctx
                q = N.add(q, self.temporal.stream(self.ln2(q), cache, t))
        return N.add(q, self.ffn(self.ln3(q)))


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


class ProposalHead(Module):
    def __init__(self, rng, cfg, rest_pose: np.ndarray):
        super().__init__()
        c = cfg.channels
        # final layer zero-init with the rest pose as bias: the untrained
        # model proposes the identity pose
        self.mlp = self.child("mlp", MLP(rng, c, c, 3 * cfg.joints, cfg.np_dtype,
                                         zero_final=True, final_bias=rest_pose.ravel()))
        self.joints = cfg.joints

    def __call__(self, q: Tensor) -> Tensor:
        out = self.mlp(q)
        return N.reshape(out, out.shape[:-1] + (self.joints, 3))


class RefinementKeypointHead(Module):
    def __init__(self, rng, cfg):
        super().__init__()
        c = cfg.channels
        self.mlp = self.child("mlp", MLP(rng, c, c, 3 * cfg.joints, cfg.np_dtype,
                                         zero_final=True))
        self.joints = cfg.joints

    def __call__(self, q: Tensor, proposal: Tensor) -> Tensor:
        delta = self.mlp(q)
        return N.add(proposal, N.reshape(delta, delta.shape[:-1] + (self.joints, 3)))


_SOFTPLUS_INV_1 = float(np.log(np.e - 1.0))  # softplus(x + this) == 1 at x == 0


class ParametricHead(Module):
    """Joint 6D rotations, softplus body scale, head-to-headset transform;
    keypoints via forward kinematics."""

    def __init__(self, rng, cfg, skeleton: G.Skeleton):
        super().__init__()
        if skeleton.joint_count != cfg.joints:
            raise ValueError("parametric head: skeleton joint count disagrees with config")
        c, dtype = cfg.channels, cfg.np_dtype
        self.skeleton = skeleton
        self.joints = cfg.joints
        rot_bias = np.tile(CANONICAL_ROT6D, cfg.joints)
        self.rot = self.child("rot", MLP(rng, c, c, 6 * cfg.joints, dtype,
                                         zero_final=True, final_bias=rot_bias))
        self.scale = self.child("scale", MLP(rng, c, c, 1, dtype, zero_final=True))
        head_bias = np.concatenate([np.zeros(3), CANONICAL_ROT6D])
        self.head = self.child("head", MLP(rng, c, c, 9, dtype,
                                           zero_final=True, final_bias=head_bias))

    def __call__(self, q: Tensor, proposal: Tensor) -> Tensor:
        rot = self.rot(q)
        rot = N.reshape(rot, rot.shape[:-1] + (self.joints, 6))
        scale = N.add(N.softplus(N.add(self.scale(q), Tensor(
            np.asarray(_SOFTPLUS_INV_1, dtype=q.dtype)))), Tensor(np.zeros(1, dtype=q.dtype)))
        head = self.head(q)
        return G.forward_kinematics(self.skeleton, rot, scale, head[..., 0:3], head[..., 3:9])


class UncertaintyHead(Module):
    """Per-joint 6-vector: 3 log-diagonal pre-activations (clamped to
    [-6, 4] before exponentiation) + 3 lower-triangular off-diagonals."""

    LOG_DIAG_LO, LOG_DIAG_HI = -6.0, 4.0

    def __init__(self, rng, cfg):
        super().__init__()
        c = cfg.channels
        self.mlp = self.child("mlp", MLP(rng, c, c, 6 * cfg.joints, cfg.np_dtype,
                                         zero_final=True))
        self.joints = cfg.joints

    def __call__(self, q: Tensor) -> Tensor:
        u = self.mlp(q)
        return N.reshape(u, u.shape[:-1] + (self.joints, 6))


def cholesky_factors(u: np.ndarray) -> np.ndarray:
    """(..., 6) uncertainty vectors -> (..., 3, 3) lower-triangular factors."""
    u = np.asarray(u)
    diag = np.exp(np.clip(u[..., 0:3], UncertaintyHead.LOG_DIAG_LO, UncertaintyHead.LOG_DIAG_HI))
    L = np.zeros(u.shape[:-1] + (3, 3), dtype=u.dtype)
    L[..., 0, 0] = diag[..., 0]
    L[..., 1, 1] = diag[..., 1]
    L[..., 2, 2] = diag[..., 2]
    L[..., 1, 0] = u[..., 3]
    L[..., 2, 0] = u[..., 4]
    L[..., 2, 1] = u[..., 5]
    return L


def covariance_matrices(u: np.ndarray) -> np.ndarray:
    """Sigma = L L^T; symmetric positive definite by construction."""
    L = cholesky_factors(u)
    return L @ np.swapaxes(L, -1, -2)


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


def headset_pose_features(rot: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """(..., 3, 3) + (..., 3) -> (..., 9): translation + 6D rotation."""
    return np.concatenate([trans, G.matrix_to_rot6d(rot)], axis=-1)


class PoseModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, skeleton: G.Skeleton | None = None):
        super().__init__()
        rng = np.random.default_rng(seed)
        dtype, c = cfg.np_dtype, cfg.channels
        self.cfg = cfg
        self.skeleton = skeleton if skeleton is not None else G.default_skeleton()
        self.encoder = self.child("encoder", ViewEncoder(rng, cfg))
        self.query_mlp = self.child("query_mlp", MLP(rng, 9, c, c, dtype))
        self.query_embed = self.param("query_embed",
                                      (0.02 * rng.standard_normal(c)).astype(dtype))
        self.cam_embed = self.param("cam_embed",
                                    (0.02 * rng.standard_normal((cfg.views, c))).astype(dtype))
        self.cond_mlp = self.child("cond_mlp", MLP(rng, 2 * cfg.joints, c, c, dtype))
        self.validity_embed = self.param(
            "validity_embed", (0.02 * rng.standard_normal((cfg.joints, c))).astype(dtype))
        self.dec1 = [self.child(f"dec1_{i}", DecoderLayer(rng, cfg)) for i in range(cfg.layers)]
        self.dec2 = [self.child(f"dec2_{i}", DecoderLayer(rng, cfg)) for i in range(cfg.layers)]
        self.norm1 = self.child("norm1", LayerNorm(c, dtype))
        self.norm2 = self.child("norm2", LayerNorm(c, dtype))
        rest = rest_pose(self.skeleton, cfg.joints)
        self.proposal_head = self.child("proposal_head", ProposalHead(rng, cfg, rest))
        if cfg.head_mode == "parametric":
            self.refine_head = self.child("refine_head", ParametricHead(rng, cfg, self.skeleton))
        else:
            self.refine_head = self.child("refine_head", RefinementKeypointHead(rng, cfg))
        self.uncertainty_head = self.child("uncertainty_head", UncertaintyHead(rng, cfg))
        hp, wp = cfg.patch_grid
        self.pos_table = sinusoidal_grid_encoding(hp, wp, c, dtype)

    # -- query --------------------------------------------------------------
    def make_query(self, head_rot: np.ndarray | None, head_trans: np.ndarray | None,
                   lead_shape: tuple) -> Tensor:
        if self.cfg.use_auxiliary and head_rot is not None:
            feats = headset_pose_features(head_rot, head_trans).astype(self.cfg.np_dtype)
            return self.query_mlp(Tensor(feats))
        c = self.cfg.channels
        tiled = np.broadcast_to(np.zeros(lead_shape + (c,), dtype=self.cfg.np_dtype)
                                + 0.0, lead_shape + (c,))
        return N.add(self.query_embed, Tensor(tiled.copy()))

    # -- conditions ---------------------------------------------------------
    def proposal_condition(self, b: int, t: int) -> Tensor:
        """sigma = camera embedding only (proposal stage)."""
        cam = N.reshape(self.cam_embed, (1, 1, self.cfg.views, self.cfg.channels))
        zeros = Tensor(np.zeros((b, t, self.cfg.views, self.cfg.channels),
                                dtype=self.cfg.np_dtype))
        return N.add(cam, zeros)

    def refinement_condition(self, proposal: Tensor | None, cams) -> Tensor:
        """sigma = camera embedding + MLP over concatenated normalized 2D
        projections of the proposal keypoints, with per-joint validity
        embeddings added for joints outside the view."""
        if proposal is None or cams is None:
            raise ContractError("refinement stage requires proposals and cameras")
        if not self.cfg.use_projection_condition:
            b, t = proposal.shape[0], proposal.shape[1]
            return self.proposal_condition(b, t)
        b, t, j, _ = proposal.shape
        per_view = []
        for v, cam in enumerate(cams):
            uv, valid = G.project_normalized(cam, proposal)  # (B,T,J,2), (B,T,J)
            flat = N.reshape(uv, (b, t, 2 * j))
            cond = self.cond_mlp(flat)  # (B,T,C)
            invalid = (~valid).astype(self.cfg.np_dtype)  # (B,T,J)
            vis = N.matmul(Tensor(invalid), self.validity_embed)  # (B,T,C)
            sig = N.add(N.add(cond, vis), self.cam_embed[v])
            per_view.append(N.reshape(sig, (b, t, 1, self.cfg.channels)))
        return N.concat(per_view, axis=2)

    # -- sequence forward (training / full-sequence inference) --------------
    def forward_sequence(self, images: np.ndarray, head_rot: np.ndarray,
                         head_trans: np.ndarray, cams, positions: np.ndarray | None = None):
        """images (B,T,V,H,W); head_rot (B,T,3,3); head_trans (B,T,3).

        Returns dict of Tensors: proposal/refined keypoints in headset and
        world frames, and per-joint uncertainty vectors.
        """
        b, t = images.shape[0], images.shape[1]
        if images.shape[2] != self.cfg.views:
            raise ValueError(f"expected {self.cfg.views} views, got {images.shape[2]}")
        if positions is None:
            positions = np.arange(t)
        feats = self.encoder(images)  # (B,T,V,N,C)
        q = self.make_query(head_rot, head_trans, (b, t))
        cond1 = self.proposal_condition(b, t)
        tctx = ("full", positions)
        for layer in self.dec1:
            q = layer(q, feats, self.pos_table, cond1, tctx)
        proposal = self.proposal_head(self.norm1(q))  # (B,T,J,3) headset frame
        cond2 = self.refinement_condition(proposal, cams)
        for layer in self.dec2:
            q = layer(q, feats, self.pos_table, cond2, tctx)
        q2 = self.norm2(q)
        refined = self.refine_head(q2, proposal)
        u = self.uncertainty_head(q2)
        out = {"proposal": proposal, "refined": refined, "uncertainty": u}
        out["proposal_world"] = world_transform(proposal, head_rot, head_trans)
        out["refined_world"] = world_transform(refined, head_rot, head_trans)
        return out


def rest_pose(skel: G.Skeleton, joints: int) -> np.ndarray:
    """Identity-pose keypoints used to seed the proposal head bias."""
    if skel.joint_count == joints:
        canon = np.tile(CANONICAL_ROT6D, (joints, 1))
        params = G.PoseParams(canon, 1.0, np.zeros(3), CANONICAL_ROT6D.copy())
        return G.fk_pose(skel, params).positions
    return np.zeros((joints, 3))


def world_transform(pts: Tensor, head_rot: np.ndarray, head_trans: np.ndarray) -> Tensor:
    """Headset-frame (B,T,J,3) -> world frame via the per-frame headset pose."""
    dt = pts.dtype
    rt = Tensor(np.swapaxes(head_rot, -1, -2).astype(dt))  # (B,T,3,3)
    moved = N.matmul(pts, rt)
    return N.add(moved, Tensor(head_trans.astype(dt)[..., None, :]))


# ---------------------------------------------------------------------------
# streaming inference
# ---------------------------------------------------------------------------


class StreamingSession:
    """Frame-by-frame inference with per-layer KV-cache windows.

    Owns exclusive mutable state (the caches and the frame counter); the
    underlying model weights are only read.
    """

    def __init__(self, model: PoseModel, cams):
        self.model = model
        self.cams = cams
        self.t = 0
        layers = model.dec1 + model.dec2
        self.caches = [KVCacheWindow(model.cfg.window) for _ in layers]

    def step(self, images: np.ndarray, head_rot: np.ndarray, head_trans: np.ndarray):
        """images (V,H,W); returns per-frame numpy outputs."""
        m = self.model
        with N.no_grad():
            feats = m.encoder(images[None, None])  # (1,1,V,N,C)
            q = m.make_query(head_rot[None, None], head_trans[None, None], (1, 1))
            cond1 = m.proposal_condition(1, 1)
            ci = 0
            for layer in m.dec1:
                q = layer(q, feats, m.pos_table, cond1, ("stream", self.caches[ci], self.t))
                ci += 1
            proposal = m.proposal_head(m.norm1(q))
            cond2 = m.refinement_condition(proposal, self.cams)
            for layer in m.dec2:
                q = layer(q, feats, m.pos_table, cond2, ("stream", self.caches[ci], self.t))
                ci += 1
            q2 = m.norm2(q)
            refined = m.refine_head(q2, proposal)
            u = m.uncertainty_head(q2)
            refined_world = world_transform(refined, head_rot[None, None], head_trans[None, None])
        self.t += 1
        return {
            "proposal": proposal.data[0, 0],
            "refined": refined.data[0, 0],
            "refined_world": refined_world.data[0, 0],
            "uncertainty": u.data[0, 0],
        }
