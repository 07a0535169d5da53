"""Counter-based Gaussian streams.

Paths are grouped in blocks of ``RNG_BLOCK`` consecutive indices; each block
owns a Philox stream keyed by ``(seed, block)``.  Draws are laid out step-major
(step, lane, coordinate), so the k-th Gaussian vector of path j depends only on
``(seed, j, k)`` and the dimension, never on how many paths or steps a caller
requests or on which worker evaluates them.
"""

from __future__ import annotations

import numpy as np

RNG_BLOCK = 256
_SEED_MASK = (1 << 64) - 1


def _block_stream(seed: int, block: int) -> np.random.Generator:
    key = np.array([int(seed) & _SEED_MASK, int(block)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def gaussian_increments(seed: int, path_index, steps: int, n: int) -> np.ndarray:
    """Standard normal draws of shape (steps, len(path_index), n)."""
    idx = np.asarray(path_index, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("path_index must be one-dimensional")
    if np.any(idx < 0):
        raise ValueError("path indices must be non-negative")
    out = np.empty((steps, len(idx), n))
    blocks = idx // RNG_BLOCK
    for block in np.unique(blocks):
        sel = np.nonzero(blocks == block)[0]
        draws = _block_stream(seed, int(block)).standard_normal((steps, RNG_BLOCK, n))
        out[:, sel, :] = draws[:, idx[sel] % RNG_BLOCK, :]
    return out


def uniform_draws(seed: int, path_index, count: int) -> np.ndarray:
    """Independent uniforms per path from a stream disjoint from the Gaussians."""
    idx = np.asarray(path_index, dtype=np.int64)
    out = np.empty((count, len(idx)))
    blocks = idx // RNG_BLOCK
    for block in np.unique(blocks):
        sel = np.nonzero(blocks == block)[0]
        # the high bit of the block word separates this stream from the Gaussian one
        gen = _block_stream(seed, int(block) | (1 << 63))
        draws = gen.random((count, RNG_BLOCK))
        out[:, sel] = draws[:, idx[sel] % RNG_BLOCK]
    return out
