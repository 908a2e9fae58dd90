"""Counter-based Gaussian streams (Philox4x32-10).

Every normal variate is a pure function of ``(seed, path, step, dim, stream)``,
so an ensemble can be generated in any partition of paths and still be
bit-identical.  Two steps share one Philox block: the Box-Muller pair gives
the even step the cosine branch and the odd step the sine branch.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)

ROUNDS = 10

# stream tags (fourth counter word)
STREAM_INCREMENTS = 0
STREAM_BRIDGE = 1 << 16


def philox4x32(counter, key, rounds: int = ROUNDS):
    """Philox4x32 block function on arrays of counters.

    ``counter`` is a sequence of four uint32-valued arrays (broadcastable),
    ``key`` a pair of ints.  Returns four uint64 arrays holding 32-bit words.
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) for c in counter)
    k0 = np.uint64(int(key[0]) & 0xFFFFFFFF)
    k1 = np.uint64(int(key[1]) & 0xFFFFFFFF)
    for _ in range(rounds):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (p1 >> _S32) ^ c1 ^ k0, p1 & _MASK, (p0 >> _S32) ^ c3 ^ k1, p0 & _MASK
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


def _seed_key(seed: int) -> tuple[int, int]:
    seed = int(seed)
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must lie in [0, 2**64), got {seed}")
    return seed & 0xFFFFFFFF, seed >> 32


def _unit_open(hi, lo) -> np.ndarray:
    # 53-bit mantissa, strictly inside (0, 1)
    m = (hi << np.uint64(21)) | (lo >> np.uint64(11))
    return (m.astype(np.float64) + 0.5) * 2.0**-53


def normals(seed: int, paths: np.ndarray, steps: int, dims: int, stream: int = 0) -> np.ndarray:
    """Standard normals with shape ``(len(paths), steps, dims)``.

    ``paths`` holds absolute path indices; generating ``paths[:k]`` and
    ``paths[k:]`` separately gives the same numbers as one call.
    """
    paths = np.asarray(paths, dtype=np.uint64)
    if paths.size and int(paths.max()) >= 2**32:
        raise ValueError("path index exceeds 32 bits")
    half = (steps + 1) // 2
    key = _seed_key(seed)
    p = paths[:, None, None]
    s = np.arange(half, dtype=np.uint64)[None, :, None]
    d = np.arange(dims, dtype=np.uint64)[None, None, :]
    tag = np.uint64(stream & 0xFFFFFFFF)
    x0, x1, x2, x3 = philox4x32(np.broadcast_arrays(p, s, d, tag), key)
    u1 = _unit_open(x0, x1)
    u2 = _unit_open(x2, x3)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty((paths.size, 2 * half, dims))
    out[:, 0::2, :] = r * np.cos(theta)
    out[:, 1::2, :] = r * np.sin(theta)
    return out[:, :steps, :]
