"""Context parallelism for softmax attention: gather keys and values, attend locally.

The forward gathers K and V chunks (two collective launches) and each rank
runs softmax attention for its own query rows against the full sequence,
masking by global token position when causal. The backward produces local
dQ plus full-length dK/dV contributions, exchanged with one more all_gather
and reduced in ascending rank order.

Unlike the linear-attention paths, the gathered payload grows with the chunk
length; doubling N doubles the bytes, which is the contrast worth measuring.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import comm
from .lasp2 import (BackwardOutcome, ChunkedSequence, ForwardOutcome,
                    IterationOutcome, _spawn, _split_like)
from .numerics import sum_states
from .oracle import GradientBundle, softmax_chunk_backward, softmax_chunk_forward
from .shards import pack_slots, unpack_slots


@dataclass
class CpCache:
    """Retained activations: own queries plus the gathered full-length K/V."""

    q: np.ndarray
    k_full: np.ndarray
    v_full: np.ndarray
    causal: bool
    row_offset: int


def _cp_forward_rank(ctx: comm.RankContext, qc: np.ndarray, kc: np.ndarray,
                     vc: np.ndarray, causal: bool) -> tuple[np.ndarray, CpCache]:
    b, h, c, _ = qc.shape
    gathered_k = ctx.all_gather(pack_slots(kc), tag="k")
    gathered_v = ctx.all_gather(pack_slots(vc), tag="v")
    k_full = np.concatenate([unpack_slots(p, b, h) for p in gathered_k], axis=2)
    v_full = np.concatenate([unpack_slots(p, b, h) for p in gathered_v], axis=2)
    row_offset = ctx.sp_position * c
    out = np.empty_like(qc)
    for bi in range(b):
        for hi in range(h):
            out[bi, hi] = softmax_chunk_forward(qc[bi, hi], k_full[bi, hi],
                                                v_full[bi, hi], causal, row_offset)
    cache = CpCache(q=qc, k_full=k_full, v_full=v_full, causal=causal,
                    row_offset=row_offset)
    return out, cache


def _cp_backward_rank(ctx: comm.RankContext, cache: CpCache,
                      d_out: np.ndarray) -> GradientBundle:
    if not isinstance(cache, CpCache):
        raise ValueError("backward needs the forward's retained CpCache")
    b, h, c, _ = cache.q.shape
    n = cache.k_full.shape[2]
    dq = np.empty_like(cache.q)
    dk_full = np.empty((b, h, n, cache.q.shape[3]), dtype=cache.q.dtype)
    dv_full = np.empty_like(dk_full)
    for bi in range(b):
        for hi in range(h):
            dq[bi, hi], dk_full[bi, hi], dv_full[bi, hi] = softmax_chunk_backward(
                cache.q[bi, hi], cache.k_full[bi, hi], cache.v_full[bi, hi],
                d_out[bi, hi], cache.causal, cache.row_offset)
    # One launch moves both contributions, stacked along the token axis.
    stacked = np.concatenate([dk_full, dv_full], axis=2)
    gathered = ctx.all_gather(pack_slots(stacked), tag="dkv")
    merged = unpack_slots(sum_states(gathered), b, h)
    lo, hi_ = cache.row_offset, cache.row_offset + c
    dk = merged[:, :, :n][:, :, lo:hi_].copy()
    dv = merged[:, :, n:][:, :, lo:hi_].copy()
    return GradientBundle(dq=dq, dk=dk, dv=dv)


# ---- world drivers ----------------------------------------------------------

def cp_forward(chunks: ChunkedSequence, causal: bool = True,
               cfg: comm.WorldConfig | None = None) -> ForwardOutcome:
    """Gather K/V (2 launches) and attend locally with a global causal mask."""
    def program(ctx, qc, kc, vc):
        return _cp_forward_rank(ctx, qc, kc, vc, causal)

    run = _spawn(chunks, cfg, program)
    t = chunks.chunks
    return ForwardOutcome(outputs=[r[0] for r in run.results[:t]],
                          caches=[r[1] for r in run.results[:t]], run=run)


def cp_backward(chunks: ChunkedSequence, d_out: np.ndarray, causal: bool,
                caches: list[CpCache],
                cfg: comm.WorldConfig | None = None) -> BackwardOutcome:
    """Analytic softmax gradients; one launch exchanges dK/dV contributions."""
    if len(caches) != chunks.chunks:
        raise ValueError(f"expected {chunks.chunks} caches, got {len(caches)}")
    for cache in caches:
        if cache.causal != causal:
            raise ValueError("cache causality does not match the requested backward")
    d_chunks = _split_like(chunks, d_out)

    def program(ctx, qc, kc, vc, cache, dc):
        return _cp_backward_rank(ctx, cache, dc)

    run = _spawn(chunks, cfg, program,
                 extra_args=[(caches[t], d_chunks[t]) for t in range(chunks.chunks)])
    return BackwardOutcome(grads=run.results[:chunks.chunks], run=run)


def cp_iteration(chunks: ChunkedSequence, d_out: np.ndarray, causal: bool = True,
                 cfg: comm.WorldConfig | None = None) -> IterationOutcome:
    """Forward plus backward in one world: exactly 3 collective launches."""
    d_chunks = _split_like(chunks, d_out)

    def program(ctx, qc, kc, vc, dc):
        out, cache = _cp_forward_rank(ctx, qc, kc, vc, causal)
        grad = _cp_backward_rank(ctx, cache, dc)
        return out, grad, cache

    run = _spawn(chunks, cfg, program,
                 extra_args=[(d_chunks[t],) for t in range(chunks.chunks)])
    t = chunks.chunks
    return IterationOutcome(outputs=[r[0] for r in run.results[:t]],
                            grads=[r[1] for r in run.results[:t]],
                            caches=[r[2] for r in run.results[:t]], run=run)
