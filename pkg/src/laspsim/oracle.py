"""Serial single-rank reference implementations.

Per-token linear attention (causal and bidirectional), softmax attention, the
analytic gradients of both, and a finite-difference checker. Everything here
runs one token or one dense call at a time with no distribution, so the rest
of the package can be validated against code with no moving parts.

The causal per-token kernel is also imported by the parallel paths as their
intra-chunk forward: a chunk with an empty prefix is exactly this computation,
which is what makes single-chunk parallel runs bit-identical to the oracle.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import matmul, transpose


@dataclass(frozen=True)
class AttentionInstance:
    """One attention problem: q, k, v of shape (n, d) plus the masking flag."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    causal: bool = True

    def __post_init__(self) -> None:
        if self.q.ndim != 2:
            raise ValueError(f"expected 2-D inputs, got {self.q.ndim}-D")
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise ValueError(
                f"q/k/v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")
        if self.q.shape[0] < 1 or self.q.shape[1] < 1:
            raise ValueError(f"degenerate shape {self.q.shape}")


@dataclass
class GradientBundle:
    """Gradients with respect to q, k, v; shapes match the inputs."""

    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray


def causal_linear_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Per-token causal linear attention: o_s = q_s M_s, M_s = M_{s-1} + k_s^T v_s.

    The state update and readout happen token by token, exactly in sequence
    order. No normalization.
    """
    n, d = q.shape
    m = np.zeros((d, d), dtype=q.dtype)
    out = np.empty_like(q)
    for s in range(n):
        m = m + np.outer(k[s], v[s])
        out[s] = q[s] @ m
    return out


def linear_attn_serial(inst: AttentionInstance) -> np.ndarray:
    """Reference linear attention output.

    causal=True walks the per-token recurrence; causal=False applies the
    full-sequence state in one right product, o = q (k^T v).
    """
    if inst.causal:
        return causal_linear_forward(inst.q, inst.k, inst.v)
    m = matmul(transpose(inst.k), inst.v)
    return matmul(inst.q, m)


def linear_attn_serial_backward(inst: AttentionInstance, d_out: np.ndarray) -> GradientBundle:
    """Analytic gradients of <d_out, linear_attn_serial(inst)>.

    Causal case: dq_s = do_s M_s^T with the forward states replayed, and a
    running suffix G_s = sum_{j>=s} q_j^T do_j gives dk_s = v_s G_s^T,
    dv_s = k_s G_s. Bidirectional case collapses to single dense products.
    """
    if d_out.shape != inst.q.shape:
        raise ValueError(f"d_out shape {d_out.shape} does not match {inst.q.shape}")
    q, k, v = inst.q, inst.k, inst.v
    n, d = q.shape
    if not inst.causal:
        m = matmul(transpose(k), v)
        g = matmul(transpose(q), d_out)
        return GradientBundle(dq=matmul(d_out, transpose(m)),
                              dk=matmul(v, transpose(g)),
                              dv=matmul(k, g))
    states = np.empty((n, d, d), dtype=q.dtype)
    m = np.zeros((d, d), dtype=q.dtype)
    for s in range(n):
        m = m + np.outer(k[s], v[s])
        states[s] = m
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    g = np.zeros((d, d), dtype=q.dtype)
    for s in range(n - 1, -1, -1):
        dq[s] = d_out[s] @ states[s].T
        g += np.outer(q[s], d_out[s])
        dk[s] = v[s] @ g.T
        dv[s] = k[s] @ g
    return GradientBundle(dq=dq, dk=dk, dv=dv)


def softmax_probs(q: np.ndarray, k_full: np.ndarray, causal: bool,
                  row_offset: int = 0) -> np.ndarray:
    """Row-stochastic attention matrix softmax(q k_full^T / sqrt(d)).

    Args:
        q: (c, d) queries for rows [row_offset, row_offset + c) of the sequence.
        k_full: (n, d) keys for the whole sequence.
        causal: mask out keys at positions j > row_offset + i before softmax.
        row_offset: global position of q's first row.

    Returns:
        (c, n) probabilities; masked entries are exactly zero.
    """
    d = q.shape[1]
    scores = (q @ k_full.T) / np.sqrt(np.asarray(d, dtype=q.dtype))
    if causal:
        rows = row_offset + np.arange(q.shape[0])[:, None]
        cols = np.arange(k_full.shape[0])[None, :]
        scores = np.where(cols <= rows, scores, -np.inf)
    # Row max is finite: causal rows always see at least position 0.
    scores = scores - scores.max(axis=1, keepdims=True)
    p = np.exp(scores)
    return p / p.sum(axis=1, keepdims=True)


def softmax_chunk_forward(q: np.ndarray, k_full: np.ndarray, v_full: np.ndarray,
                          causal: bool, row_offset: int = 0) -> np.ndarray:
    """Softmax attention output for one chunk of queries against full k/v."""
    return softmax_probs(q, k_full, causal, row_offset) @ v_full


def softmax_chunk_backward(q: np.ndarray, k_full: np.ndarray, v_full: np.ndarray,
                           d_out: np.ndarray, causal: bool, row_offset: int = 0,
                           ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of <d_out, softmax_chunk_forward(...)>.

    Returns:
        (dq, dk_full, dv_full); dk_full/dv_full are this chunk's contributions
        to the full-length key/value gradients.
    """
    p = softmax_probs(q, k_full, causal, row_offset)
    dv_full = p.T @ d_out
    dp = d_out @ v_full.T
    ds = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
    scale = 1.0 / np.sqrt(np.asarray(q.shape[1], dtype=q.dtype))
    dq = (ds @ k_full) * scale
    dk_full = (ds.T @ q) * scale
    return dq, dk_full, dv_full


def softmax_attn_reference(inst: AttentionInstance) -> np.ndarray:
    """Full-sequence softmax attention, scaled by 1/sqrt(d)."""
    return softmax_chunk_forward(inst.q, inst.k, inst.v, inst.causal, row_offset=0)


def softmax_attn_reference_backward(inst: AttentionInstance, d_out: np.ndarray) -> GradientBundle:
    """Analytic gradients of <d_out, softmax_attn_reference(inst)>."""
    if d_out.shape != inst.q.shape:
        raise ValueError(f"d_out shape {d_out.shape} does not match {inst.q.shape}")
    dq, dk, dv = softmax_chunk_backward(inst.q, inst.k, inst.v, d_out, inst.causal, 0)
    return GradientBundle(dq=dq, dk=dk, dv=dv)


class DecodeCache:
    """Grow-only key/value rows for autoregressive decode."""

    def __init__(self) -> None:
        self.k_rows: list[np.ndarray] = []
        self.v_rows: list[np.ndarray] = []

    def append(self, k_row: np.ndarray, v_row: np.ndarray) -> None:
        if k_row.shape != v_row.shape or k_row.ndim != 1:
            raise ValueError("cache rows must be matching 1-D vectors")
        self.k_rows.append(np.asarray(k_row))
        self.v_rows.append(np.asarray(v_row))

    def __len__(self) -> int:
        return len(self.k_rows)


def softmax_attn_decode_step(cache: DecodeCache, q_s: np.ndarray) -> np.ndarray:
    """One decode step: softmax attention of a single query over cached rows.

    Args:
        cache: rows 1..s appended by the caller before the call.
        q_s: (1, d) query.

    Returns:
        (1, d) output row.
    """
    if len(cache) == 0:
        raise ValueError("decode cache is empty")
    if q_s.shape != (1, len(cache.k_rows[0])):
        raise ValueError(f"expected query shape (1, {len(cache.k_rows[0])}), got {q_s.shape}")
    k = np.stack(cache.k_rows)
    v = np.stack(cache.v_rows)
    # Every cached row is visible, so no mask is needed.
    return softmax_chunk_forward(q_s, k, v, causal=False)


def finite_diff_grad(loss: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar loss, entry by entry."""
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    grad = np.zeros(x.shape, dtype=np.float64)
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        fp = float(loss(xp))
        fm = float(loss(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite loss near entry {idx}")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(got: np.ndarray, ref: np.ndarray) -> float:
    """Max entrywise |got - ref| / max(1, |ref|), the floor-at-unit convention."""
    denom = np.maximum(1.0, np.abs(ref))
    return float(np.max(np.abs(got - ref) / denom))
