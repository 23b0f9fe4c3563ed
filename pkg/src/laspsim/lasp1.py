"""Ring-transport baseline: the memory state walks rank to rank.

The forward ring sends the running prefix state up the chain; the backward
ring sends the running suffix of state gradients back down. Each hop is one
matched send/recv pair, so an iteration costs 2(W-1) steps against the
all_gather method's 2, which is the contrast this baseline exists to show.

Masked outputs and gradients are bit-identical to the all_gather method: the
intra kernels are shared and the ring's fold order is the same
first-term-copy ascending (forward) and descending (backward) fold the
reductions use. The unmasked forward keeps its literal exclusive-prefix
semantics (rank 0 outputs zeros), which is not the oracle's bidirectional
function; only its final ring state is comparable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import comm
from .lasp2 import (BackwardOutcome, ChunkedSequence, ForwardOutcome,
                    IterationOutcome, MemoryState, apply_state, apply_state_t,
                    chunk_state, chunk_state_grad, intra_backward, intra_forward,
                    _spawn, _split_like)
from .oracle import GradientBundle
from .shards import pack_slots, unpack_slots


@dataclass
class RingCache:
    """Forward leftovers for the reverse ring: the received prefix state
    (None on rank 0, whose prefix is empty) and the updated through-state."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    masked: bool
    m_prefix: MemoryState | None
    state_through: MemoryState


def _forward_rank(ctx: comm.RankContext, qc: np.ndarray, kc: np.ndarray,
                  vc: np.ndarray, masked: bool) -> tuple[np.ndarray, RingCache]:
    r = ctx.sp_position
    peers = ctx.sp_peers
    b, h = qc.shape[0], qc.shape[1]
    m_t = chunk_state(kc, vc)
    packed_own = pack_slots(m_t)
    # Parallel phase: every rank's intra work happens before any ring wait.
    out = intra_forward(qc, kc, vc) if masked else None
    if r == 0:
        m_prefix = None
        if not masked:
            out = np.zeros_like(qc)  # literal semantics: O_1 = Q_1 * zero state
        upd = packed_own.copy()
    else:
        received = ctx.recv(peers[r - 1], tag="state")
        ctx.mark("inter_start", f"chunk={r}")
        m_prefix = unpack_slots(received, b, h)
        inter = apply_state(qc, m_prefix)
        out = out + inter if masked else inter
        upd = received.copy()
        upd += packed_own
    if r < len(peers) - 1:
        ctx.send(peers[r + 1], upd, tag="state")
    cache = RingCache(q=qc, k=kc, v=vc, masked=masked, m_prefix=m_prefix,
                      state_through=unpack_slots(upd, b, h))
    return out, cache


def _require_cache(cache: RingCache, masked: bool) -> None:
    if not isinstance(cache, RingCache):
        raise ValueError("backward needs the forward's RingCache")
    if cache.masked != masked:
        raise ValueError(f"cache was built masked={cache.masked}, backward wants {masked}")


def _backward_masked_rank(ctx: comm.RankContext, cache: RingCache,
                          d_out: np.ndarray) -> GradientBundle:
    _require_cache(cache, masked=True)
    r = ctx.sp_position
    peers = ctx.sp_peers
    b, h = cache.q.shape[0], cache.q.shape[1]
    g_t = chunk_state_grad(cache.q, d_out)
    packed_g = pack_slots(g_t)
    bundle = intra_backward(cache.q, cache.k, cache.v, d_out)
    if r > 0:
        bundle.dq += apply_state_t(d_out, cache.m_prefix)
    if r < len(peers) - 1:
        received = ctx.recv(peers[r + 1], tag="state_grad")
        ctx.mark("inter_grad", f"chunk={r}")
        dm_suffix = unpack_slots(received, b, h)
        bundle.dk += apply_state_t(cache.v, dm_suffix)
        bundle.dv += apply_state(cache.k, dm_suffix)
        upd = received.copy()
        upd += packed_g
    else:
        upd = packed_g.copy()
    if r > 0:
        ctx.send(peers[r - 1], upd, tag="state_grad")
    return bundle


def _backward_nomask_rank(ctx: comm.RankContext, cache: RingCache,
                          d_out: np.ndarray) -> GradientBundle:
    """Gradients of the literal exclusive-prefix objective."""
    _require_cache(cache, masked=False)
    r = ctx.sp_position
    peers = ctx.sp_peers
    b, h = cache.q.shape[0], cache.q.shape[1]
    g_t = chunk_state_grad(cache.q, d_out)
    packed_g = pack_slots(g_t)
    if r > 0:
        dq = apply_state_t(d_out, cache.m_prefix)
    else:
        dq = np.zeros_like(cache.q)
    if r < len(peers) - 1:
        received = ctx.recv(peers[r + 1], tag="state_grad")
        dm_suffix = unpack_slots(received, b, h)
        dk = apply_state_t(cache.v, dm_suffix)
        dv = apply_state(cache.k, dm_suffix)
        upd = received.copy()
        upd += packed_g
    else:
        # The last chunk's k/v reach no output under exclusive-prefix semantics.
        dk = np.zeros_like(cache.k)
        dv = np.zeros_like(cache.v)
        upd = packed_g.copy()
    if r > 0:
        ctx.send(peers[r - 1], upd, tag="state_grad")
    return GradientBundle(dq=dq, dk=dk, dv=dv)


# ---- world drivers ----------------------------------------------------------

def lasp1_forward_masked(chunks: ChunkedSequence,
                         cfg: comm.WorldConfig | None = None) -> ForwardOutcome:
    """Masked ring forward; W-1 matched pairs, bit-equal to the all_gather path."""
    def program(ctx, qc, kc, vc):
        return _forward_rank(ctx, qc, kc, vc, masked=True)

    run = _spawn(chunks, cfg, program)
    t = chunks.chunks
    return ForwardOutcome(outputs=[r[0] for r in run.results[:t]],
                          caches=[r[1] for r in run.results[:t]], run=run)


def lasp1_forward_nomask(chunks: ChunkedSequence,
                         cfg: comm.WorldConfig | None = None) -> ForwardOutcome:
    """Literal exclusive-prefix forward; rank 0 outputs zeros."""
    def program(ctx, qc, kc, vc):
        return _forward_rank(ctx, qc, kc, vc, masked=False)

    run = _spawn(chunks, cfg, program)
    t = chunks.chunks
    return ForwardOutcome(outputs=[r[0] for r in run.results[:t]],
                          caches=[r[1] for r in run.results[:t]], run=run)


def lasp1_backward_masked(chunks: ChunkedSequence, d_out: np.ndarray,
                          caches: list[RingCache],
                          cfg: comm.WorldConfig | None = None) -> BackwardOutcome:
    """Reverse ring backward from saved forward states; W-1 matched pairs."""
    if len(caches) != chunks.chunks:
        raise ValueError(f"expected {chunks.chunks} caches, got {len(caches)}")
    d_chunks = _split_like(chunks, d_out)

    def program(ctx, qc, kc, vc, cache, dc):
        return _backward_masked_rank(ctx, cache, dc)

    run = _spawn(chunks, cfg, program,
                 extra_args=[(caches[t], d_chunks[t]) for t in range(chunks.chunks)])
    return BackwardOutcome(grads=run.results[:chunks.chunks], run=run)


def lasp1_backward_nomask(chunks: ChunkedSequence, d_out: np.ndarray,
                          caches: list[RingCache],
                          cfg: comm.WorldConfig | None = None) -> BackwardOutcome:
    if len(caches) != chunks.chunks:
        raise ValueError(f"expected {chunks.chunks} caches, got {len(caches)}")
    d_chunks = _split_like(chunks, d_out)

    def program(ctx, qc, kc, vc, cache, dc):
        return _backward_nomask_rank(ctx, cache, dc)

    run = _spawn(chunks, cfg, program,
                 extra_args=[(caches[t], d_chunks[t]) for t in range(chunks.chunks)])
    return BackwardOutcome(grads=run.results[:chunks.chunks], run=run)


def lasp1_iteration(chunks: ChunkedSequence, d_out: np.ndarray, masked: bool,
                    cfg: comm.WorldConfig | None = None) -> IterationOutcome:
    """Forward plus backward in one world: exactly 2(W-1) P2P steps."""
    d_chunks = _split_like(chunks, d_out)

    def program(ctx, qc, kc, vc, dc):
        out, cache = _forward_rank(ctx, qc, kc, vc, masked=masked)
        if masked:
            grad = _backward_masked_rank(ctx, cache, dc)
        else:
            grad = _backward_nomask_rank(ctx, cache, dc)
        return out, grad, cache

    run = _spawn(chunks, cfg, program,
                 extra_args=[(d_chunks[t],) for t in range(chunks.chunks)])
    t = chunks.chunks
    return IterationOutcome(outputs=[r[0] for r in run.results[:t]],
                            grads=[r[1] for r in run.results[:t]],
                            caches=[r[2] for r in run.results[:t]], run=run)
