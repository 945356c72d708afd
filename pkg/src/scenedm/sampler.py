"""Deterministic guided sampling of joint scene futures."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tn
from .augment import augment_noise, de_augment, overlap_gap, split_halves
from .model import BatchFeatures, SceneDM
from .scene import Scene, integrate_velocities, scene_features, to_scene_frame
from .schedule import NoiseSchedule

GUIDANCE_MODES = ("noise", "state", "off")


@dataclass
class SamplerConfig:
    K: int = 100
    M: int = 8
    guidance: str = "noise"  # noise | state | off
    noise: str = "consistent"  # consistent | independent
    stride: int = 1
    clip_x0: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.guidance not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode {self.guidance!r}")
        if self.noise not in ("consistent", "independent"):
            raise ValueError(f"unknown noise mode {self.noise!r}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def guidance_enabled(self) -> bool:
        return self.guidance != "off"


@dataclass
class RolloutSet:
    """M sampled futures of one scene, in the scene-centric frame."""

    scene_id: str
    poses: np.ndarray  # (M, N, T, 4) x, y, heading, speed
    velocities: np.ndarray | None  # (M, N, T, 3); absent when read from file
    overlap_gap: np.ndarray  # (M,) max |rear - front| before de-augmentation
    rollout_ids: list[int] = field(default_factory=list)
    scores: list[dict] | None = None

    def __post_init__(self):
        if not self.rollout_ids:
            self.rollout_ids = list(range(len(self.poses)))

    @property
    def M(self) -> int:
        return self.poses.shape[0]

    def subset(self, keep: list[int]) -> "RolloutSet":
        return RolloutSet(
            self.scene_id,
            self.poses[keep],
            None if self.velocities is None else self.velocities[keep],
            self.overlap_gap[keep],
            [self.rollout_ids[i] for i in keep],
            None if self.scores is None else [self.scores[i] for i in keep],
        )


def rollout_rng(seed: int, scene_index: int, rollout_index: int) -> np.random.Generator:
    """Per-rollout generator; independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence([seed, scene_index, rollout_index]))


def init_noise(N: int, T: int, H: int, seed=None, rng: np.random.Generator | None = None) -> np.ndarray:
    """Shift-and-concatenated standard normal noise of shape (N, T-1, 2H)."""
    if rng is None:
        rng = np.random.default_rng(seed)
    return augment_noise(rng.standard_normal((N, T, H)))


def guide(eps: np.ndarray) -> np.ndarray:
    """Replace both copies of every shared state by their mean."""
    eps = np.asarray(eps)
    front, rear = split_halves(eps)
    h = front.shape[-1]
    out = eps.copy()
    avg = 0.5 * (rear[..., :-1, :] + front[..., 1:, :])
    out[..., :-1, h:] = avg
    out[..., 1:, :h] = avg
    return out


def ddim_step(S_k: np.ndarray, k: int, eps: np.ndarray, sched: NoiseSchedule, k_prev: int | None = None) -> np.ndarray:
    """Deterministic transition from step ``k`` to ``k_prev`` (default k-1)."""
    if not 1 <= k <= sched.K:
        raise ValueError(f"diffusion step {k} outside [1, {sched.K}]")
    k_prev = k - 1 if k_prev is None else k_prev
    if not 0 <= k_prev < k:
        raise ValueError(f"target step {k_prev} must lie in [0, {k})")
    a_k = sched.alpha_bar[k]
    a_p = sched.alpha_bar[k_prev]
    return (
        math.sqrt(a_p / a_k) * S_k
        + math.sqrt(1.0 - a_p) * eps
        - math.sqrt(a_p * (1.0 - a_k) / a_k) * eps
    )


def step_sequence(K: int, stride: int = 1) -> list[tuple[int, int]]:
    """(k, k_prev) pairs from K down to 0."""
    ks = list(range(K, 0, -stride))
    return [(k, ks[i + 1] if i + 1 < len(ks) else 0) for i, k in enumerate(ks)]


EpsFn = Callable[[np.ndarray, int], np.ndarray]


def clip_eps(S_k: np.ndarray, k: int, eps: np.ndarray, sched: NoiseSchedule, bound: np.ndarray) -> np.ndarray:
    """Noise consistent with the clean estimate clipped to [-bound, bound].

    Where the clip does not bind the input noise is returned unchanged, so
    the following transition is the plain deterministic one.
    """
    a = sched.alpha_bar[k]
    x0 = (S_k - math.sqrt(1.0 - a) * eps) / math.sqrt(a)
    xc = np.clip(x0, -bound, bound)
    hit = xc != x0
    if not hit.any():
        return eps
    return np.where(hit, (S_k - math.sqrt(a) * xc) / math.sqrt(1.0 - a), eps)


def run_reverse(S_K: np.ndarray, eps_fn: EpsFn, sched: NoiseSchedule, guidance: str = "noise", stride: int = 1,
                augmented: bool = True, on_step: Callable[[int, np.ndarray, np.ndarray], None] | None = None,
                clip_bound: np.ndarray | None = None) -> np.ndarray:
    """Iterate deterministic transitions from S_K to S_0.

    ``clip_bound`` (per last-axis coordinate) limits the implied clean
    estimate at every step.
    """
    S = S_K
    for k, k_prev in step_sequence(sched.K, stride):
        eps = eps_fn(S, k)
        if augmented and guidance == "noise":
            eps = guide(eps)
        if clip_bound is not None:
            eps = clip_eps(S, k, eps, sched, clip_bound)
        if on_step is not None:
            on_step(k, S, eps)
        S = ddim_step(S, k, eps, sched, k_prev)
        if augmented and guidance == "state":
            S = guide(S)
        if not np.all(np.isfinite(S)):
            raise tn.NonFiniteError(f"non-finite state at diffusion step {k_prev}")
    return S


def model_eps_fn(model: SceneDM, feats: BatchFeatures) -> EpsFn:
    c_cache: dict[str, tn.Tensor] = {}

    def fn(S: np.ndarray, k: int) -> np.ndarray:
        with tn.no_grad():
            if "c" not in c_cache:
                c_cache["c"] = model.encode(feats)
            kk = np.full(S.shape[0], k)
            return model(S, kk, feats, c=c_cache["c"]).data.astype(np.float64)

    return fn


def sample_scene(scene: Scene, model: SceneDM, sched: NoiseSchedule, cfg: SamplerConfig, normalizer,
                 scene_index: int = 0, eps_fn: EpsFn | None = None) -> RolloutSet:
    """Draw ``cfg.M`` joint futures for every agent in ``scene``.

    All rollouts of a scene are denoised together as one batch; each one
    starts from noise drawn with its own seed-derived generator.
    """
    mcfg = model.cfg
    sc = to_scene_frame(scene)
    feats = scene_features(sc, mcfg.n_max, mcfg.t_hist, mcfg.n_polylines, mcfg.poly_points)
    batch = BatchFeatures.stack([feats]).repeat(cfg.M)
    N, T, H = mcfg.n_max, mcfg.T, mcfg.H
    inits = []
    for m in range(cfg.M):
        rng = rollout_rng(cfg.seed, scene_index, m)
        if not mcfg.augment:
            inits.append(rng.standard_normal((N, T, H)))
        elif cfg.noise == "consistent":
            inits.append(init_noise(N, T, H, rng=rng))
        else:
            inits.append(rng.standard_normal((N, T - 1, 2 * H)))
    S_K = np.stack(inits)
    S_K = np.where(batch.agent_mask[:, :, None, None], S_K, 0.0)
    if eps_fn is None:
        eps_fn = model_eps_fn(model, batch)
    bound = None
    if cfg.clip_x0 and normalizer.bound is not None:
        bound = np.concatenate([normalizer.bound] * (2 if mcfg.augment else 1))
    S0 = run_reverse(S_K, eps_fn, sched, cfg.guidance, cfg.stride, mcfg.augment, clip_bound=bound)
    return finish_rollouts(sc, S0, batch, normalizer, mcfg.augment)


def finish_rollouts(sc: Scene, S0: np.ndarray, batch: BatchFeatures, normalizer, augmented: bool) -> RolloutSet:
    n = sc.n_agents
    if augmented:
        gaps = np.array([overlap_gap(S0[m, :n]) for m in range(S0.shape[0])])
        z = de_augment(S0)
    else:
        gaps = np.zeros(S0.shape[0])
        z = S0
    vel = normalizer.denormalize(z)[:, :n]
    if not np.all(np.isfinite(vel)):
        raise tn.NonFiniteError(f"scene {sc.scene_id}: non-finite rollout")
    poses = integrate_velocities(vel, batch.last_pose[:, :n], sc.dt)
    return RolloutSet(sc.scene_id, poses, vel, gaps)
