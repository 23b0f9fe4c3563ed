"""Counter-based deterministic data generation.

Every value is a pure function of (seed, row, col, tag), so any shard of any
array can be regenerated on any platform without carrying generator state.
The mixer is SplitMix64; the 53 high bits of the mixed word become a float in
[-1, 1). Golden first values are pinned in the test suite.
"""
from __future__ import annotations

import hashlib

import numpy as np

_U64 = np.uint64
_GAMMA = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer; uint64 arithmetic wraps mod 2**64.
    z = (z + _GAMMA) & _U64(0xFFFFFFFFFFFFFFFF)
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def _tag_word(tag: str) -> np.uint64:
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    return _U64(int.from_bytes(digest, "little"))


def gen_data(seed: int, rows: int, cols: int, tag: str = "", dtype=np.float64) -> np.ndarray:
    """Deterministic (rows, cols) matrix with entries uniform in [-1, 1).

    Args:
        seed: stream seed; different seeds give unrelated matrices.
        rows: row count.
        cols: column count.
        tag: stream label separating e.g. q/k/v drawn from one seed.
        dtype: float64 (default) or float32; float32 is the float64 value
            rounded once at the end, so both precisions share structure.

    Returns:
        The matrix; identical bits for identical arguments on any platform.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"shape must be positive, got ({rows}, {cols})")
    with np.errstate(over="ignore"):
        h0 = _mix64(_U64(seed % (1 << 64)) ^ _tag_word(tag))
        r = np.arange(rows, dtype=np.uint64)[:, None]
        c = np.arange(cols, dtype=np.uint64)[None, :]
        h = _mix64(h0 ^ r)
        h = _mix64(h ^ c)
    u = (h >> _U64(11)).astype(np.float64) * 2.0**-53
    out = 2.0 * u - 1.0
    return out.astype(dtype, copy=False)


def gen_slots(seed: int, batch: int, heads: int, rows: int, cols: int, tag: str,
              dtype=np.float64) -> np.ndarray:
    """Stacked per-(batch, head) matrices, shape (batch, heads, rows, cols).

    Slot (b, h) is gen_data under tag "{tag}/b{b}/h{h}", so a slot's values do
    not depend on how many other slots exist.
    """
    out = np.empty((batch, heads, rows, cols), dtype=dtype)
    for b in range(batch):
        for h in range(heads):
            out[b, h] = gen_data(seed, rows, cols, tag=f"{tag}/b{b}/h{h}", dtype=dtype)
    return out


def qkv_slots(seed: int, batch: int, heads: int, n: int, d: int,
              dtype=np.float64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Query/key/value arrays of shape (batch, heads, n, d) from one seed."""
    return (gen_slots(seed, batch, heads, n, d, "q", dtype),
            gen_slots(seed, batch, heads, n, d, "k", dtype),
            gen_slots(seed, batch, heads, n, d, "v", dtype))


def projection_weight(seed: int, layer: int, role: str, d: int, dtype=np.float64) -> np.ndarray:
    """(d, d) projection weight, uniform in [-1/sqrt(d), 1/sqrt(d))."""
    w = gen_data(seed, d, d, tag=f"w{role}/layer{layer}", dtype=np.float64)
    return (w / np.sqrt(float(d))).astype(dtype, copy=False)
