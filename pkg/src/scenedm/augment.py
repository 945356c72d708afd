"""Adjacent-state augmentation of trajectory sequences.

A trajectory ``s0`` of shape (..., T, H) becomes an augmented sequence of
shape (..., T-1, 2H) whose element t holds ``concat(y[t], y[t+1])``. Adjacent
elements therefore overlap: the rear half of element t and the front half of
element t+1 both describe state t+1.
"""
from __future__ import annotations

import numpy as np

from . import tensor as tn


def augment(s0: np.ndarray) -> np.ndarray:
    s0 = np.asarray(s0)
    if s0.ndim < 2 or s0.shape[-2] < 2:
        raise ValueError(f"augment needs at least 2 time steps, got shape {s0.shape}")
    return np.concatenate([s0[..., :-1, :], s0[..., 1:, :]], axis=-1)


# the noise is augmented exactly like the data; the separate name documents intent
def augment_noise(eps0: np.ndarray) -> np.ndarray:
    """Shift-and-concatenate base noise so overlapping halves share values."""
    return augment(eps0)


def split_halves(S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    S = np.asarray(S)
    if S.shape[-1] % 2:
        raise ValueError(f"last extent must be even, got {S.shape[-1]}")
    h = S.shape[-1] // 2
    return S[..., :h], S[..., h:]


def de_augment(S: np.ndarray) -> np.ndarray:
    """Recover (..., T, H) from (..., T-1, 2H) by averaging the two copies of
    every interior state."""
    front, rear = split_halves(S)
    first = front[..., :1, :]
    last = rear[..., -1:, :]
    interior = 0.5 * (rear[..., :-1, :] + front[..., 1:, :])
    return np.concatenate([first, interior, last], axis=-2)


def half_difference(S):
    """Rear half minus front half of every element. Works on arrays and on
    autodiff tensors."""
    if isinstance(S, tn.Tensor):
        n = S.shape[-1]
        if n % 2:
            raise ValueError(f"last extent must be even, got {n}")
        h = n // 2
        return tn.sub(tn.slice_last_axis(S, h, n), tn.slice_last_axis(S, 0, h))
    front, rear = split_halves(S)
    return rear - front


def overlap_gap(S: np.ndarray) -> float:
    """Largest |rear(t) - front(t+1)| over all overlapping pairs."""
    front, rear = split_halves(S)
    if S.shape[-2] < 2:
        return 0.0
    return float(np.max(np.abs(rear[..., :-1, :] - front[..., 1:, :]), initial=0.0))
