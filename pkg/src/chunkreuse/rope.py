"""Rotary position embeddings in the interleaved-pair layout.

Keys are cached post-rotation, so relocating a cached key to a new offset is a
single extra rotation by the position delta (rotations compose additively).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RotationFrequencies:
    """Per-dimension rotation frequencies ``[t1, t1, t2, t2, ...]``."""

    head_dim: int
    base: float = 10000.0
    theta: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.head_dim <= 0 or self.head_dim % 2:
            raise ValueError(f"head_dim must be a positive even integer, got {self.head_dim}")
        if self.base <= 0:
            raise ValueError("base must be positive")
        i = np.arange(1, self.head_dim // 2 + 1, dtype=np.float64)
        pair_theta = self.base ** (-2.0 * i / self.head_dim)
        object.__setattr__(self, "theta", np.repeat(pair_theta, 2))

    def cos_sin(self, positions) -> tuple[np.ndarray, np.ndarray]:
        # angles in float64 so large positions do not lose phase; tables are stored as float32
        ang = np.asarray(positions, dtype=np.float64)[..., None] * self.theta
        return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def rotate_pairs(x: np.ndarray) -> np.ndarray:
    """``[-x2, x1, -x4, x3, ...]`` along the last axis."""
    out = np.empty_like(x)
    out[..., 0::2] = -x[..., 1::2]
    out[..., 1::2] = x[..., 0::2]
    return out


def _check_dim(x: np.ndarray, freqs: RotationFrequencies) -> None:
    if x.shape[-1] != freqs.head_dim:
        raise ValueError(f"last dimension {x.shape[-1]} does not match head_dim {freqs.head_dim}")


def apply_rope(x: np.ndarray, positions, freqs: RotationFrequencies) -> np.ndarray:
    """Rotate ``x`` to ``positions``.

    ``x`` has shape ``(..., head_dim)``. ``positions`` broadcasts against the
    leading axes, or against the token axis when ``x`` is ``(tokens, heads, head_dim)``
    and ``positions`` is ``(tokens,)``. Negative positions rotate backwards, which is
    what ``shift_rope`` relies on.
    """
    x = np.asarray(x, dtype=np.float32)
    _check_dim(x, freqs)
    pos = np.asarray(positions)
    cos, sin = freqs.cos_sin(pos)
    if x.ndim == cos.ndim + 1:
        # (tokens,) positions against (tokens, heads, d): insert the heads axis
        cos = cos[..., None, :]
        sin = sin[..., None, :]
    return (x * cos + rotate_pairs(x) * sin).astype(np.float32)


def shift_rope(x: np.ndarray, old_pos, new_pos, freqs: RotationFrequencies) -> np.ndarray:
    """Move an already-rotated vector from ``old_pos`` to ``new_pos``."""
    old = np.asarray(old_pos)
    new = np.asarray(new_pos)
    if np.any(old < 0) or np.any(new < 0):
        raise ValueError("positions must be non-negative")
    delta = new.astype(np.int64) - old.astype(np.int64)
    if not np.any(delta):
        return np.asarray(x, dtype=np.float32).copy()
    return apply_rope(x, delta, freqs)
