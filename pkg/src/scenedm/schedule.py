"""Noise schedules and the closed-form forward diffusion."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """``alpha_bar[k]`` is the cumulative signal level after k steps; index 0 is 1."""

    K: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def to_dict(self) -> dict:
        return {"K": self.K, "beta": self.beta.tolist()}


def default_beta_range(K: int) -> tuple[float, float]:
    # DDPM's (1e-4, 0.02) at K=1000, rescaled so alpha_bar[K] stays near zero for small K
    scale = 1000.0 / K
    return min(1e-4 * scale, 0.5), min(0.02 * scale, 0.999)


def make_schedule(kind: str = "linear", K: int = 100, beta_range: tuple[float, float] | None = None) -> NoiseSchedule:
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if kind == "linear":
        lo, hi = beta_range if beta_range is not None else default_beta_range(K)
        if not 0 < lo < hi < 1:
            raise ValueError(f"invalid beta range ({lo}, {hi})")
        beta = np.linspace(lo, hi, K, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        ks = np.arange(K + 1, dtype=np.float64)
        f = np.cos((ks / K + s) / (1 + s) * math.pi / 2) ** 2
        ab = f / f[0]
        beta = np.clip(1.0 - ab[1:] / ab[:-1], 1e-8, 0.999)
        if beta_range is not None:
            lo, hi = beta_range
            if not 0 < lo < hi < 1:
                raise ValueError(f"invalid beta range ({lo}, {hi})")
            beta = np.clip(beta, lo, hi)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - beta)])
    return NoiseSchedule(K=K, beta=beta, alpha_bar=alpha_bar)


def _check_k(k: int, sched: NoiseSchedule, lo: int = 1) -> None:
    if not lo <= k <= sched.K:
        raise ValueError(f"diffusion step {k} outside [{lo}, {sched.K}]")


def diffuse(s0: np.ndarray, k: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(ab_k) * s0 + sqrt(1 - ab_k) * eps``. ``k`` may also be an integer
    array with one step per leading batch row."""
    s0 = np.asarray(s0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if s0.shape != eps.shape:
        raise ValueError(f"diffuse: s0 shape {s0.shape} != eps shape {eps.shape}")
    k = np.asarray(k)
    if k.ndim == 0:
        _check_k(int(k), sched, lo=0)
        ab = sched.alpha_bar[int(k)]
    else:
        if k.min() < 0 or k.max() > sched.K:
            raise ValueError(f"diffusion steps outside [0, {sched.K}]")
        ab = sched.alpha_bar[k].reshape(k.shape + (1,) * (s0.ndim - k.ndim))
    return np.sqrt(ab) * s0 + np.sqrt(1.0 - ab) * eps


def diffuse_augmented(S0: np.ndarray, k, eps_aug: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward process on an augmented sequence with shared-overlap noise."""
    from .augment import overlap_gap

    if overlap_gap(eps_aug) != 0.0:
        raise ValueError("diffuse_augmented: noise halves do not overlap consistently")
    return diffuse(S0, k, eps_aug, sched)
