"""Rotary position embeddings on adjacent coordinate pairs.

Subspace ``j`` holds coordinates ``(2j, 2j+1)`` and rotates at frequency
``base ** (-2j / head_dim)``, so ``j = 0`` turns at unit rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dipe.errors import DipeError

ADJACENT_PAIRS = "adjacent_pairs"


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 10000.0
    pair_convention: str = ADJACENT_PAIRS

    def __post_init__(self):
        if int(self.head_dim) != self.head_dim or self.head_dim < 2 or self.head_dim % 2:
            raise DipeError("bad_config", f"head_dim must be an even integer >= 2, got {self.head_dim}")
        if not self.base > 1:
            raise DipeError("bad_config", f"base must be > 1, got {self.base}")
        if self.pair_convention != ADJACENT_PAIRS:
            raise DipeError("bad_config", f"unsupported pair convention {self.pair_convention!r}")

    @property
    def n_pairs(self) -> int:
        return self.head_dim // 2


def frequencies(cfg: RopeConfig) -> np.ndarray:
    """Per-subspace rotation rates ``theta_j = base^(-2j/d)``, ``j = 0 .. d/2-1``."""
    j = np.arange(cfg.n_pairs, dtype=np.float64)
    return cfg.base ** (-2.0 * j / cfg.head_dim)


def rotation_angles(position, cfg: RopeConfig) -> np.ndarray:
    """Angles ``position * theta_j``; shape ``np.shape(position) + (d/2,)``."""
    return np.multiply.outer(np.asarray(position, dtype=np.float64), frequencies(cfg))


def apply_rotation(x: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rotate every adjacent pair of ``x`` (last axis) by the matching angle.

    ``angles`` must broadcast against ``x[..., ::2]``. Trig is evaluated in
    float64 and the result is cast back to ``x``'s float dtype.
    """
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    cos = np.cos(angles)
    sin = np.sin(angles)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    pairs = np.stack([even * cos - odd * sin, even * sin + odd * cos], axis=-1)
    return pairs.reshape(pairs.shape[:-2] + (-1,)).astype(dtype, copy=False)


def rotate(vec, position, cfg: RopeConfig) -> np.ndarray:
    """Apply ``R_position`` to ``vec`` (last axis of length ``head_dim``).

    ``position`` is a scalar or an array broadcasting against
    ``vec.shape[:-1]``; integers and reals are both accepted.
    """
    vec = np.asarray(vec)
    if vec.shape[-1:] != (cfg.head_dim,):
        raise DipeError("dim_mismatch", f"expected last axis {cfg.head_dim}, got shape {vec.shape}")
    return apply_rotation(vec, rotation_angles(position, cfg))


def decay_bound(distance, cfg: RopeConfig) -> float:
    """Long-range bound on ``|q^T R_distance k|`` with the bounding constant set to 1.

    Sum over ``j`` of the magnitude of the partial phase sum
    ``sum_{l<=j} exp(i * theta_l * distance)``.
    """
    if distance < 0:
        raise DipeError("bad_distance", f"distance must be >= 0, got {distance}")
    phases = np.exp(1j * frequencies(cfg) * float(distance))
    return float(np.abs(np.cumsum(phases)).sum())
