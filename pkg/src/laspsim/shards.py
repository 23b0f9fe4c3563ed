"""Chunk and slot layout helpers.

Data arrays carry (batch, heads, tokens, dim) axes. Communication payloads
must be 2-D, so the (batch, head) slot grid is packed by stacking each slot's
rows vertically; packing and unpacking are pure reshapes of contiguous data,
so they never change a single bit.
"""
from __future__ import annotations

import numpy as np


def split_chunks(arr: np.ndarray, chunks: int) -> list[np.ndarray]:
    """Split (B, H, N, d) into `chunks` equal (B, H, C, d) pieces along tokens."""
    if arr.ndim != 4:
        raise ValueError(f"expected a (batch, heads, tokens, dim) array, got {arr.shape}")
    n = arr.shape[2]
    if chunks < 1 or n % chunks != 0:
        raise ValueError(f"chunk count {chunks} must divide token count {n}")
    c = n // chunks
    return [arr[:, :, t * c:(t + 1) * c, :] for t in range(chunks)]


def pack_slots(arr: np.ndarray) -> np.ndarray:
    """(B, H, r, c) -> (B*H*r, c) by stacking slots vertically."""
    if arr.ndim != 4:
        raise ValueError(f"expected a 4-D slot array, got {arr.shape}")
    b, h, r, c = arr.shape
    return np.ascontiguousarray(arr).reshape(b * h * r, c)


def unpack_slots(mat: np.ndarray, batch: int, heads: int) -> np.ndarray:
    """Inverse of pack_slots; returns a view when mat is contiguous."""
    if mat.ndim != 2:
        raise ValueError(f"expected a 2-D packed matrix, got {mat.shape}")
    rows, cols = mat.shape
    if rows % (batch * heads) != 0:
        raise ValueError(f"{rows} rows do not divide into {batch}x{heads} slots")
    return mat.reshape(batch, heads, rows // (batch * heads), cols)
