"""Three-component (temporal, height, width) rotary encoding.

The head dimension is cut into three contiguous chunks. Chunk ``c`` with
``s`` pairs rotates by its own position component, using frequencies
computed on the chunk's local dimension: ``base ** (-2j / (2s))``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from dipe.errors import DipeError
from dipe.rope import RopeConfig, apply_rotation


class PositionTuple(NamedTuple):
    t: int
    h: int
    w: int


@dataclass(frozen=True)
class ChunkPartition:
    """Number of 2D rotation subspaces given to t, h and w."""

    t_pairs: int
    h_pairs: int
    w_pairs: int

    def __post_init__(self):
        if min(self.t_pairs, self.h_pairs, self.w_pairs) < 1:
            raise DipeError("bad_partition", f"every chunk needs at least one pair: {self}")

    @property
    def pairs(self) -> tuple[int, int, int]:
        return (self.t_pairs, self.h_pairs, self.w_pairs)

    def check(self, cfg: RopeConfig) -> None:
        if sum(self.pairs) != cfg.n_pairs:
            raise DipeError(
                "bad_partition",
                f"partition {self.pairs} covers {sum(self.pairs)} pairs, head_dim {cfg.head_dim} has {cfg.n_pairs}",
            )


def default_partition(cfg: RopeConfig) -> ChunkPartition:
    """Equal thirds of the ``head_dim / 2`` subspaces."""
    if cfg.n_pairs % 3:
        raise DipeError("bad_partition", f"head_dim/2 = {cfg.n_pairs} is not divisible by 3; pass a partition")
    s = cfg.n_pairs // 3
    return ChunkPartition(s, s, s)


def chunk_schedule(cfg: RopeConfig, part: ChunkPartition) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair frequency and the position component (0=t, 1=h, 2=w) driving it."""
    part.check(cfg)
    freqs = []
    component = []
    for c, s in enumerate(part.pairs):
        j = np.arange(s, dtype=np.float64)
        freqs.append(cfg.base ** (-2.0 * j / (2 * s)))
        component.append(np.full(s, c))
    return np.concatenate(freqs), np.concatenate(component)


def mrope_angles(pos, cfg: RopeConfig, part: ChunkPartition) -> np.ndarray:
    """Rotation angles for position triples ``pos`` of shape ``(..., 3)``."""
    freqs, component = chunk_schedule(cfg, part)
    pos = np.asarray(pos, dtype=np.float64)
    if pos.shape[-1:] != (3,):
        raise DipeError("dim_mismatch", f"position triples need a trailing axis of 3, got {pos.shape}")
    return pos[..., component] * freqs


def mrope_rotate(vec, pos, cfg: RopeConfig, part: ChunkPartition) -> np.ndarray:
    """Rotate ``vec`` (last axis ``head_dim``) by the triple(s) ``pos``.

    ``pos[..., :]`` must broadcast against ``vec.shape[:-1]`` once its
    trailing 3-axis is consumed, e.g. ``vec`` of shape ``(n, heads, d)`` with
    ``pos`` of shape ``(n, 1, 3)``.
    """
    vec = np.asarray(vec)
    if vec.shape[-1:] != (cfg.head_dim,):
        raise DipeError("dim_mismatch", f"expected last axis {cfg.head_dim}, got shape {vec.shape}")
    return apply_rotation(vec, mrope_angles(pos, cfg, part))


def mrope_text_indices(start: int, length: int) -> list[PositionTuple]:
    return [PositionTuple(start + i, start + i, start + i) for i in range(length)]


def mrope_image_indices(start: int, rows: int, cols: int) -> list[PositionTuple]:
    """Row-major patch triples ``(start, start + r, start + c)``."""
    if rows < 1 or cols < 1:
        raise DipeError("bad_grid", f"grid must be at least 1x1, got {rows}x{cols}")
    return [PositionTuple(start, start + r, start + c) for r in range(rows) for c in range(cols)]


def vanilla_rope_indices(start: int, length: int) -> list[PositionTuple]:
    """1D RoPE baseline: every token, visual or text, gets the running index."""
    return mrope_text_indices(start, length)
