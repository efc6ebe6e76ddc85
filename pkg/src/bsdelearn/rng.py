"""Counter-based random numbers for reproducible Monte Carlo.

The generator is Philox4x32-10 (Salmon et al., "Parallel random numbers:
as easy as 1, 2, 3", SC'11) evaluated in vectorized numpy integer
arithmetic, so streams are bit-identical across platforms and numpy
versions. Standard normals are produced by the Box-Muller transform on
53-bit uniforms.

Substream layout: the 64-bit seed is the Philox key; the counter words
carry (block index, path index, stream id lo, stream id hi). Every
(seed, stream, path) triple therefore owns a disjoint counter range, and
parallel generation path-by-path agrees bit-exactly with batched
generation.
"""

from __future__ import annotations

import hashlib

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)

_TWO_POW_26 = float(1 << 26)
_INV_TWO_POW_53 = 1.0 / float(1 << 53)


def philox4x32_10(counter: np.ndarray, key: tuple[int, int]) -> np.ndarray:
    """Apply 10 Philox4x32 rounds to an (n, 4) uint32 counter block."""
    x0 = counter[:, 0].astype(np.uint64)
    x1 = counter[:, 1].astype(np.uint64)
    x2 = counter[:, 2].astype(np.uint64)
    x3 = counter[:, 3].astype(np.uint64)
    k0 = np.uint64(key[0] & 0xFFFFFFFF)
    k1 = np.uint64(key[1] & 0xFFFFFFFF)
    for r in range(10):
        if r > 0:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * x0
        p1 = _M1 * x2
        hi0, lo0 = p0 >> np.uint64(32), p0 & _MASK32
        hi1, lo1 = p1 >> np.uint64(32), p1 & _MASK32
        x0, x1, x2, x3 = hi1 ^ x1 ^ k0, lo1, hi0 ^ x3 ^ k1, lo0
    out = np.empty((counter.shape[0], 4), dtype=np.uint32)
    out[:, 0] = x0.astype(np.uint32)
    out[:, 1] = x1.astype(np.uint32)
    out[:, 2] = x2.astype(np.uint32)
    out[:, 3] = x3.astype(np.uint32)
    return out


def derive_stream(*parts) -> int:
    """Map a tuple of ints/strings to a stable 64-bit stream id (SHA-256)."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _raw_blocks(seed: int, stream: int, paths: np.ndarray, n_blocks: int) -> np.ndarray:
    """Philox output words, shape (len(paths), n_blocks, 4)."""
    n_paths = paths.shape[0]
    counter = np.zeros((n_paths * n_blocks, 4), dtype=np.uint32)
    counter[:, 0] = np.tile(np.arange(n_blocks, dtype=np.uint32), n_paths)
    counter[:, 1] = np.repeat(paths.astype(np.uint32), n_blocks)
    counter[:, 2] = np.uint32(stream & 0xFFFFFFFF)
    counter[:, 3] = np.uint32((stream >> 32) & 0xFFFFFFFF)
    key = (seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF)
    return philox4x32_10(counter, key).reshape(n_paths, n_blocks, 4)


def uniforms(seed: int, stream: int, n_paths: int, count: int) -> np.ndarray:
    """Uniforms on [0, 1) with 53-bit resolution, shape (n_paths, count).

    Each double consumes two 32-bit words: u = (hi >> 5, lo >> 6) packed
    into 53 bits (the classic genrand_res53 construction).
    """
    n_blocks = (count + 1) // 2  # one block = 4 words = 2 doubles
    paths = np.arange(n_paths, dtype=np.uint32)
    words = _raw_blocks(seed, stream, paths, n_blocks).reshape(n_paths, -1)
    hi = (words[:, 0::2] >> np.uint32(5)).astype(np.float64)
    lo = (words[:, 1::2] >> np.uint32(6)).astype(np.float64)
    u = (hi * _TWO_POW_26 + lo) * _INV_TWO_POW_53
    return u[:, :count]


def standard_normals(seed: int, stream: int, n_paths: int, count: int) -> np.ndarray:
    """Standard normal draws via Box-Muller, shape (n_paths, count)."""
    pairs = (count + 1) // 2
    u = uniforms(seed, stream, n_paths, 2 * pairs)
    u1 = u[:, 0::2]
    u2 = u[:, 1::2]
    # 1 - u1 lies in (0, 1], so the log is finite.
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    angle = 2.0 * np.pi * u2
    z = np.empty((n_paths, 2 * pairs))
    z[:, 0::2] = radius * np.cos(angle)
    z[:, 1::2] = radius * np.sin(angle)
    return z[:, :count]


def glorot_uniform(seed: int, stream: int, fan_out: int, fan_in: int) -> np.ndarray:
    """Glorot-uniform matrix on +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    u = uniforms(seed, stream, 1, fan_out * fan_in).reshape(fan_out, fan_in)
    return limit * (2.0 * u - 1.0)
