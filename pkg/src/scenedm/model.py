"""Scene encoder and the factorised temporal/agent attention denoiser."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tn
from .nn import MLP, LayerNorm, Module, MultiHeadAttention, sinusoid
from .scene import SceneFeatures, hist_feature_dim
from .tensor import Tensor


@dataclass
class DenoiserConfig:
    D: int = 64
    blocks: int = 2
    heads: int = 4
    K: int = 100
    T: int = 16
    H: int = 3
    n_max: int = 8
    t_hist: int = 3
    n_polylines: int = 4
    poly_points: int = 8
    agent_attention: bool = True
    augment: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.D % self.heads:
            raise ValueError(f"D={self.D} must be divisible by heads={self.heads}")
        if self.D % 2:
            raise ValueError("D must be even")
        if self.T < 2:
            raise ValueError("T must be >= 2")

    @property
    def seq_len(self) -> int:
        return self.T - 1 if self.augment else self.T

    @property
    def state_dim(self) -> int:
        return 2 * self.H if self.augment else self.H

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def to_dict(self) -> dict:
        return asdict(self)


PAPER_SCALE = dict(D=512, blocks=3, heads=8, T=80, K=500, n_max=128, t_hist=11)


def step_embedding_base(k, D: int) -> np.ndarray:
    """Sinusoidal features of the diffusion step, before the MLP."""
    return sinusoid(np.asarray(k, dtype=np.float64), D)


class SceneEncoder(Module):
    """Per-agent condition from history, type, box size and nearby polylines."""

    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        D = cfg.D
        self.dtype = dt
        self.hist_mlp = MLP(hist_feature_dim(cfg.t_hist), D, D, rng, dt)
        self.point_mlp = MLP(3, D, D, rng, dt)
        self.fuse = MLP(2 * D, D, D, rng, dt)
        self.norm = LayerNorm(D, dt)

    def __call__(self, hist: np.ndarray, poly: np.ndarray, poly_mask: np.ndarray, agent_mask: np.ndarray) -> Tensor:
        """Batched inputs: hist (B,N,F), poly (B,N,A,P,3), masks (B,N,A), (B,N)."""
        B, N, A, P, _ = poly.shape
        h = self.hist_mlp(Tensor(hist, dtype=self.dtype))
        pts = self.point_mlp(Tensor(poly, dtype=self.dtype))  # B,N,A,P,D
        pooled = tn.max_axis(pts, axis=3)  # B,N,A,D
        counts = poly_mask.sum(axis=-1, keepdims=True)
        weights = np.where(counts > 0, poly_mask / np.maximum(counts, 1), 0.0)
        m = tn.matmul(Tensor(weights[:, :, None, :].astype(h.data.dtype)), pooled)  # B,N,1,D
        m = tn.reshape(m, (B, N, h.shape[-1]))
        c = self.norm(self.fuse(tn.concat_last_axis([h, m])))
        return tn.mul(c, Tensor(np.broadcast_to(agent_mask[..., None], c.shape).astype(c.data.dtype)))


class AttentionBlock(Module):
    """Pre-norm residual self-attention followed by a feed-forward layer."""

    def __init__(self, D: int, heads: int, rng: np.random.Generator, dtype):
        self.ln_attn = LayerNorm(D, dtype)
        self.attn = MultiHeadAttention(D, heads, rng, dtype)
        self.ln_ff = LayerNorm(D, dtype)
        self.ff = MLP(D, 2 * D, D, rng, dtype, out_scale=0.5)

    def __call__(self, x: Tensor, key_invalid: np.ndarray | None = None) -> Tensor:
        x = tn.add(x, self.attn(self.ln_attn(x), key_invalid))
        return tn.add(x, self.ff(self.ln_ff(x)))


class Denoiser(Module):
    def __init__(self, cfg: DenoiserConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        D = cfg.D
        self.cfg = cfg
        self.state_mlp = MLP(cfg.state_dim, D, D, rng, dt)
        self.step_mlp = MLP(D, D, D, rng, dt)
        self.temporal = [AttentionBlock(D, cfg.heads, rng, dt) for _ in range(cfg.blocks)]
        self.spatial = [AttentionBlock(D, cfg.heads, rng, dt) for _ in range(cfg.blocks)]
        self.out_norm = LayerNorm(D, dt)
        self.out_mlp = MLP(D, D, cfg.state_dim, rng, dt)
        self._pos = sinusoid(np.arange(1, cfg.seq_len + 1), D).astype(dt)

    def __call__(self, S_k: np.ndarray, k, c: Tensor, agent_mask: np.ndarray) -> Tensor:
        """Predict the noise in ``S_k`` (B, N, L, C) at steps ``k`` (B,)."""
        cfg = self.cfg
        B, N, L, C = S_k.shape
        if (L, C) != (cfg.seq_len, cfg.state_dim):
            raise tn.ShapeError(f"denoise: expected (*, *, {cfg.seq_len}, {cfg.state_dim}), got {S_k.shape}")
        k = np.broadcast_to(np.asarray(k), (B,))
        if k.min() < 1 or k.max() > cfg.K:
            raise ValueError(f"diffusion step outside [1, {cfg.K}]")
        D = cfg.D
        dtype = cfg.np_dtype
        valid = agent_mask[:, :, None, None]
        x = Tensor(np.where(valid, S_k, 0.0).astype(dtype))

        feat = self.state_mlp(x)
        step = self.step_mlp(Tensor(step_embedding_base(k, D).astype(dtype)))  # B,D
        step = tn.broadcast_to(tn.reshape(step, (B, 1, 1, D)), (B, N, L, D))
        cond = tn.broadcast_to(tn.reshape(c, (B, N, 1, D)), (B, N, L, D))
        h = tn.add(tn.add(feat, step), cond)
        h = tn.add(h, tn.broadcast_to(Tensor(self._pos), (B, N, L, D)))

        for tblock, sblock in zip(self.temporal, self.spatial):
            h = self.over_time(tblock, h)
            if cfg.agent_attention:
                h = self.over_agents(sblock, h, agent_mask)
            else:
                # same depth, but the second layer also attends over time only
                h = self.over_time(sblock, h)
        out = self.out_mlp(self.out_norm(h))
        return tn.mul(out, Tensor(np.broadcast_to(valid, out.shape).astype(dtype)))

    @staticmethod
    def over_time(block: AttentionBlock, h: Tensor) -> Tensor:
        """Each agent attends across its own sequence elements."""
        B, N, L, D = h.shape
        return tn.reshape(block(tn.reshape(h, (B * N, L, D))), (B, N, L, D))

    @staticmethod
    def over_agents(block: AttentionBlock, h: Tensor, agent_mask: np.ndarray) -> Tensor:
        """Each sequence element attends across the valid agents at that index."""
        B, N, L, D = h.shape
        invalid = np.repeat(~agent_mask[:, None, :], L, axis=1).reshape(B * L, N)
        h = tn.transpose(h, (0, 2, 1, 3))
        h = tn.reshape(block(tn.reshape(h, (B * L, N, D)), invalid), (B, L, N, D))
        return tn.transpose(h, (0, 2, 1, 3))


class SceneDM(Module):
    """Encoder and denoiser trained jointly."""

    def __init__(self, cfg: DenoiserConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = SceneEncoder(cfg, rng)
        self.denoiser = Denoiser(cfg, rng)

    def encode(self, feats: "BatchFeatures") -> Tensor:
        return self.encoder(feats.hist, feats.poly, feats.poly_mask, feats.agent_mask)

    def __call__(self, S_k: np.ndarray, k, feats: "BatchFeatures", c: Tensor | None = None) -> Tensor:
        if c is None:
            c = self.encode(feats)
        return self.denoiser(S_k, k, c, feats.agent_mask)


@dataclass
class BatchFeatures:
    hist: np.ndarray
    poly: np.ndarray
    poly_mask: np.ndarray
    agent_mask: np.ndarray
    last_pose: np.ndarray

    @classmethod
    def stack(cls, items: list[SceneFeatures]) -> "BatchFeatures":
        return cls(
            hist=np.stack([f.hist for f in items]),
            poly=np.stack([f.poly for f in items]),
            poly_mask=np.stack([f.poly_mask for f in items]),
            agent_mask=np.stack([f.agent_mask for f in items]),
            last_pose=np.stack([f.last_pose for f in items]),
        )

    def repeat(self, m: int) -> "BatchFeatures":
        """Tile a single-scene batch ``m`` times along the batch axis."""
        return BatchFeatures(*(np.repeat(a, m, axis=0) for a in (self.hist, self.poly, self.poly_mask, self.agent_mask, self.last_pose)))


def encode_scene(model: SceneDM, feats: SceneFeatures) -> np.ndarray:
    """Condition embedding (N, D) for one scene."""
    with tn.no_grad():
        return model.encode(BatchFeatures.stack([feats])).data[0]


def denoise(model: SceneDM, S_k: np.ndarray, k: int, feats: SceneFeatures) -> np.ndarray:
    """Predicted noise for one scene's augmented sequence (N, L, C)."""
    with tn.no_grad():
        batch = BatchFeatures.stack([feats])
        return model(S_k[None], np.array([k]), batch).data[0]
