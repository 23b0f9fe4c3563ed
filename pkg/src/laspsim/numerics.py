"""Dense matrix primitives and chunk-state reductions shared by every attention path.

Reduction order is part of the contract, not an implementation detail: prefix
sums fold in ascending index order and suffix sums fold in descending index
order, because the ring-transport baseline can only produce those groupings
and cross-method bit-identity is asserted. A non-empty fold starts from a copy
of its first term (never from a zero accumulator, which would rewrite -0.0
entries to +0.0); an empty fold returns zeros.
"""
from __future__ import annotations

from collections.abc import Sequence

import numpy as np


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit shape validation.

    Args:
        a: (m, k) array.
        b: (k, n) array.

    Returns:
        (m, n) product.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    """Transpose view: out[i, j] = a[j, i]."""
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-D array, got {a.ndim}-D")
    return a.T


def causal_mask(n: int, dtype=np.float64) -> np.ndarray:
    """Lower-triangular selector: mask[i, j] = 1 for i >= j, else 0.

    Encoded as {0, 1} so it composes with unnormalized linear attention by
    Hadamard product; the {-inf, 1} encoding belongs to pre-softmax masking
    and lives in the softmax path instead.
    """
    if n < 1:
        raise ValueError(f"mask size must be positive, got {n}")
    return np.tril(np.ones((n, n), dtype=dtype))


def hadamard_mask(s: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Entrywise product with a causal selector: keeps s[i, j] for i >= j."""
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ValueError(f"scores must be square, got {s.shape}")
    if s.shape != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match scores {s.shape}")
    return s * mask


def _check_states(states: Sequence[np.ndarray]) -> None:
    if len(states) == 0:
        raise ValueError("state list must be non-empty")
    shape = states[0].shape
    for i, s in enumerate(states):
        if s.shape != shape:
            raise ValueError(f"state {i} has shape {s.shape}, expected {shape}")


def prefix_sum_states(states: Sequence[np.ndarray], upto: int) -> np.ndarray:
    """Sum of states[0:upto], folded in ascending index order.

    Args:
        states: rank-ordered chunk states, all the same shape.
        upto: number of leading states to include; 0 yields zeros.

    Returns:
        The running prefix, bit-identical to extending the fold one term at a
        time (the incremental update the ring transport performs).
    """
    _check_states(states)
    if not 0 <= upto <= len(states):
        raise ValueError(f"upto={upto} outside [0, {len(states)}]")
    if upto == 0:
        return np.zeros_like(states[0])
    acc = states[0].copy()
    for i in range(1, upto):
        acc += states[i]
    return acc


def suffix_sum_states(states: Sequence[np.ndarray], start: int) -> np.ndarray:
    """Sum of states[start:], folded in descending index order.

    The descending fold mirrors the reverse ring that carries this quantity:
    the last state seeds the accumulator and earlier states are added walking
    down, so ring-transported and locally-computed suffixes agree bitwise.

    Args:
        states: rank-ordered chunk states, all the same shape.
        start: first index to include; len(states) yields zeros.

    Returns:
        The suffix sum.
    """
    _check_states(states)
    n = len(states)
    if not 0 <= start <= n:
        raise ValueError(f"start={start} outside [0, {n}]")
    if start == n:
        return np.zeros_like(states[0])
    acc = states[n - 1].copy()
    for i in range(n - 2, start - 1, -1):
        acc += states[i]
    return acc


def sum_states(states: Sequence[np.ndarray]) -> np.ndarray:
    """Full ascending-order fold over all states."""
    return prefix_sum_states(states, len(states))
