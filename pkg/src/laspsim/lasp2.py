"""Sequence parallelism for linear attention with a single state all_gather.

Each rank owns one chunk and computes the d x d memory state M_t = K_t^T V_t
per (batch, head) slot. One all_gather moves all states; every rank then
reduces the prefix (masked) or the full sum (unmasked) locally. The payload
is d x d per slot regardless of sequence length, which is the whole point.

The masked intra-chunk forward is the oracle's per-token kernel applied to
the chunk, so a single-chunk run is bit-identical to the serial reference.
The backward uses the left-product form for the intra terms and a suffix
reduction of gathered state gradients for the inter terms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import comm
from .numerics import (causal_mask, hadamard_mask, matmul, prefix_sum_states,
                       suffix_sum_states, sum_states, transpose)
from .oracle import GradientBundle, causal_linear_forward
from .shards import pack_slots, split_chunks, unpack_slots

# A memory state is one (d, d) matrix per (batch, head) slot, carried as a
# (B, H, d, d) array; its size never depends on N or C.
MemoryState = np.ndarray


@dataclass(frozen=True)
class ChunkedSequence:
    """Full q/k/v arrays of shape (B, H, N, d) plus how to chunk them.

    Chunk t covers tokens [t*C, (t+1)*C); concatenating chunks in index order
    reconstructs the full sequence.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    chunks: int

    def __post_init__(self) -> None:
        for name, arr in (("q", self.q), ("k", self.k), ("v", self.v)):
            if arr.ndim != 4:
                raise ValueError(f"{name} must be (batch, heads, tokens, dim), got {arr.shape}")
        if not (self.q.shape == self.k.shape == self.v.shape):
            raise ValueError(
                f"q/k/v shapes differ: {self.q.shape}, {self.k.shape}, {self.v.shape}")
        if self.chunks < 1 or self.seq_len % self.chunks != 0:
            raise ValueError(
                f"chunk count {self.chunks} must divide sequence length {self.seq_len}")

    @property
    def batch(self) -> int:
        return self.q.shape[0]

    @property
    def heads(self) -> int:
        return self.q.shape[1]

    @property
    def seq_len(self) -> int:
        return self.q.shape[2]

    @property
    def dim(self) -> int:
        return self.q.shape[3]

    @property
    def chunk_len(self) -> int:
        return self.seq_len // self.chunks

    def chunk(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not 0 <= t < self.chunks:
            raise ValueError(f"chunk index {t} outside [0, {self.chunks})")
        qs = split_chunks(self.q, self.chunks)
        ks = split_chunks(self.k, self.chunks)
        vs = split_chunks(self.v, self.chunks)
        return qs[t], ks[t], vs[t]


@dataclass
class ActivationCache:
    """Forward leftovers the backward is contractually not allowed to redo.

    state_folds counts reductions over gathered forward states; the forward
    performs exactly one and the backward must leave the counter alone.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    masked: bool
    m_prefix: MemoryState | None = None
    m_full: MemoryState | None = None
    state_folds: int = 0


@dataclass
class ForwardOutcome:
    """Per-rank outputs and caches plus the world they were computed in."""

    outputs: list[np.ndarray]
    caches: list[ActivationCache]
    run: comm.WorldRun


@dataclass
class BackwardOutcome:
    grads: list[GradientBundle]
    run: comm.WorldRun


@dataclass
class IterationOutcome:
    """One forward+backward pass inside a single world, so the communication
    ledger covers the whole iteration."""

    outputs: list[np.ndarray]
    grads: list[GradientBundle]
    caches: list[ActivationCache]
    run: comm.WorldRun


# ---- per-slot kernels -------------------------------------------------------
# All math is 2-D per (batch, head) slot so every matrix product is the same
# call the serial oracle makes; batched BLAS paths could differ in bits.

def chunk_state(kc: np.ndarray, vc: np.ndarray) -> MemoryState:
    """Per-slot memory state M = K^T V, shape (B, H, d, d)."""
    b, h, _, d = kc.shape
    out = np.empty((b, h, d, d), dtype=kc.dtype)
    for bi in range(b):
        for hi in range(h):
            out[bi, hi] = matmul(transpose(kc[bi, hi]), vc[bi, hi])
    return out


def chunk_state_grad(qc: np.ndarray, d_out: np.ndarray) -> MemoryState:
    """Per-slot state gradient G = Q^T dO, shape (B, H, d, d)."""
    b, h, _, d = qc.shape
    out = np.empty((b, h, d, d), dtype=qc.dtype)
    for bi in range(b):
        for hi in range(h):
            out[bi, hi] = matmul(transpose(qc[bi, hi]), d_out[bi, hi])
    return out


def apply_state(xc: np.ndarray, m: MemoryState) -> np.ndarray:
    """Per-slot product X @ M_slot, shape like xc."""
    out = np.empty_like(xc)
    for bi in range(xc.shape[0]):
        for hi in range(xc.shape[1]):
            out[bi, hi] = matmul(xc[bi, hi], m[bi, hi])
    return out


def apply_state_t(xc: np.ndarray, m: MemoryState) -> np.ndarray:
    """Per-slot product X @ M_slot^T, shape like xc."""
    out = np.empty_like(xc)
    for bi in range(xc.shape[0]):
        for hi in range(xc.shape[1]):
            out[bi, hi] = matmul(xc[bi, hi], transpose(m[bi, hi]))
    return out


def intra_forward(qc: np.ndarray, kc: np.ndarray, vc: np.ndarray) -> np.ndarray:
    """Causal attention within the chunk: the oracle's per-token kernel."""
    out = np.empty_like(qc)
    for bi in range(qc.shape[0]):
        for hi in range(qc.shape[1]):
            out[bi, hi] = causal_linear_forward(qc[bi, hi], kc[bi, hi], vc[bi, hi])
    return out


def intra_forward_left_product(qc: np.ndarray, kc: np.ndarray, vc: np.ndarray) -> np.ndarray:
    """Masked left product [(Q K^T) o Psi] V; same values as intra_forward,
    different grouping, kept because the backward differentiates this form."""
    psi = causal_mask(qc.shape[2], dtype=qc.dtype)
    out = np.empty_like(qc)
    for bi in range(qc.shape[0]):
        for hi in range(qc.shape[1]):
            scores = hadamard_mask(matmul(qc[bi, hi], transpose(kc[bi, hi])), psi)
            out[bi, hi] = matmul(scores, vc[bi, hi])
    return out


def intra_backward(qc: np.ndarray, kc: np.ndarray, vc: np.ndarray,
                   d_out: np.ndarray) -> GradientBundle:
    """Gradients of the masked intra-chunk term in left-product form."""
    psi = causal_mask(qc.shape[2], dtype=qc.dtype)
    dq = np.empty_like(qc)
    dk = np.empty_like(kc)
    dv = np.empty_like(vc)
    for bi in range(qc.shape[0]):
        for hi in range(qc.shape[1]):
            q, k, v, do = qc[bi, hi], kc[bi, hi], vc[bi, hi], d_out[bi, hi]
            ds = hadamard_mask(matmul(do, transpose(v)), psi)
            dq[bi, hi] = matmul(ds, k)
            dk[bi, hi] = matmul(transpose(ds), q)
            dv[bi, hi] = matmul(transpose(hadamard_mask(matmul(q, transpose(k)), psi)), do)
    return GradientBundle(dq=dq, dk=dk, dv=dv)


# ---- per-rank programs ------------------------------------------------------

def _forward_nomask_rank(ctx: comm.RankContext, qc: np.ndarray, kc: np.ndarray,
                         vc: np.ndarray) -> tuple[np.ndarray, ActivationCache]:
    m_t = chunk_state(kc, vc)
    gathered = ctx.all_gather(pack_slots(m_t), tag="state")
    m_full_packed = sum_states(gathered)
    m_full = unpack_slots(m_full_packed, qc.shape[0], qc.shape[1])
    out = apply_state(qc, m_full)
    cache = ActivationCache(q=qc, k=kc, v=vc, masked=False, m_full=m_full, state_folds=1)
    return out, cache


def _forward_masked_rank(ctx: comm.RankContext, qc: np.ndarray, kc: np.ndarray,
                         vc: np.ndarray, overlap: bool = False,
                         ) -> tuple[np.ndarray, ActivationCache]:
    t = ctx.sp_position
    m_t = chunk_state(kc, vc)
    if overlap:
        # Issue the collective, compute intra while it is in flight, then wait.
        pending = ctx.all_gather_async(pack_slots(m_t), tag="state")
        ctx.mark("intra_start", f"chunk={t}")
        out = intra_forward(qc, kc, vc)
        ctx.mark("intra_end", f"chunk={t}")
        gathered = pending.wait()
    else:
        gathered = ctx.all_gather(pack_slots(m_t), tag="state")
        ctx.mark("intra_start", f"chunk={t}")
        out = intra_forward(qc, kc, vc)
        ctx.mark("intra_end", f"chunk={t}")
    prefix_packed = prefix_sum_states(gathered, t)
    m_prefix = unpack_slots(prefix_packed, qc.shape[0], qc.shape[1])
    if t > 0:
        out = out + apply_state(qc, m_prefix)
    # First chunk: output stays exactly the intra term, no zero-add.
    cache = ActivationCache(q=qc, k=kc, v=vc, masked=True, m_prefix=m_prefix,
                            state_folds=1)
    return out, cache


def _require_cache(cache: ActivationCache, masked: bool) -> None:
    if not isinstance(cache, ActivationCache):
        raise ValueError("backward needs the forward's ActivationCache")
    if cache.masked != masked:
        raise ValueError(f"cache was built masked={cache.masked}, backward wants {masked}")
    needed = cache.m_prefix if masked else cache.m_full
    if needed is None:
        raise ValueError("cache is missing its reduced state")


def _backward_nomask_rank(ctx: comm.RankContext, cache: ActivationCache,
                          d_out: np.ndarray) -> GradientBundle:
    _require_cache(cache, masked=False)
    g_t = chunk_state_grad(cache.q, d_out)
    gathered = ctx.all_gather(pack_slots(g_t), tag="state_grad")
    # Every chunk's k/v feeds every output, so the reduction runs over all
    # chunks, not a suffix.
    dm_full = unpack_slots(sum_states(gathered), cache.q.shape[0], cache.q.shape[1])
    dq = apply_state_t(d_out, cache.m_full)
    dk = apply_state_t(cache.v, dm_full)
    dv = apply_state(cache.k, dm_full)
    return GradientBundle(dq=dq, dk=dk, dv=dv)


def _backward_masked_rank(ctx: comm.RankContext, cache: ActivationCache,
                          d_out: np.ndarray) -> GradientBundle:
    _require_cache(cache, masked=True)
    t = ctx.sp_position
    world = ctx.sp_size
    g_t = chunk_state_grad(cache.q, d_out)
    gathered = ctx.all_gather(pack_slots(g_t), tag="state_grad")
    bundle = intra_backward(cache.q, cache.k, cache.v, d_out)
    if t > 0:
        bundle.dq += apply_state_t(d_out, cache.m_prefix)
    if t < world - 1:
        suffix_packed = suffix_sum_states(gathered, t + 1)
        dm_suffix = unpack_slots(suffix_packed, cache.q.shape[0], cache.q.shape[1])
        bundle.dk += apply_state_t(cache.v, dm_suffix)
        bundle.dv += apply_state(cache.k, dm_suffix)
    return bundle


# ---- world drivers ----------------------------------------------------------

def default_world(chunks: ChunkedSequence, **overrides) -> comm.WorldConfig:
    """One rank per chunk, element size taken from the data dtype."""
    overrides.setdefault("element_bytes", chunks.q.dtype.itemsize)
    return comm.WorldConfig(world_size=chunks.chunks, sp_size=chunks.chunks, **overrides)


def _check_world(chunks: ChunkedSequence, cfg: comm.WorldConfig) -> None:
    if cfg.sp_size != chunks.chunks:
        raise ValueError(f"world sp_size {cfg.sp_size} != chunk count {chunks.chunks}")
    if cfg.element_bytes != chunks.q.dtype.itemsize:
        raise ValueError(f"world element_bytes {cfg.element_bytes} does not match "
                         f"dtype {chunks.q.dtype}")


def _split_like(chunks: ChunkedSequence, full: np.ndarray) -> list[np.ndarray]:
    if full.shape != chunks.q.shape:
        raise ValueError(f"expected shape {chunks.q.shape}, got {full.shape}")
    return split_chunks(full, chunks.chunks)


def _spawn(chunks: ChunkedSequence, cfg: comm.WorldConfig | None, program,
           extra_args: list[tuple] | None = None) -> comm.WorldRun:
    cfg = cfg or default_world(chunks)
    _check_world(chunks, cfg)
    rank_args = []
    for rank in range(cfg.world_size):
        t = rank % cfg.sp_size  # DP replicas beyond group 0 carry the same data
        qc, kc, vc = chunks.chunk(t)
        extra = extra_args[t] if extra_args is not None else ()
        rank_args.append((qc, kc, vc, *extra))
    return comm.world_spawn(cfg, program, rank_args)


def lasp2_forward_nomask(chunks: ChunkedSequence,
                         cfg: comm.WorldConfig | None = None) -> ForwardOutcome:
    """Unmasked forward: O_t = Q_t M_{1:T} after one state all_gather."""
    def program(ctx, qc, kc, vc):
        return _forward_nomask_rank(ctx, qc, kc, vc)

    run = _spawn(chunks, cfg, program)
    t = chunks.chunks
    return ForwardOutcome(outputs=[r[0] for r in run.results[:t]],
                          caches=[r[1] for r in run.results[:t]], run=run)


def lasp2_forward_masked(chunks: ChunkedSequence, cfg: comm.WorldConfig | None = None,
                         overlap: bool = False) -> ForwardOutcome:
    """Masked forward: O_t = intra(Q_t, K_t, V_t) + Q_t M_{1:t-1}."""
    def program(ctx, qc, kc, vc):
        return _forward_masked_rank(ctx, qc, kc, vc, overlap=overlap)

    run = _spawn(chunks, cfg, program)
    t = chunks.chunks
    return ForwardOutcome(outputs=[r[0] for r in run.results[:t]],
                          caches=[r[1] for r in run.results[:t]], run=run)


def lasp2_overlap_schedule(chunks: ChunkedSequence,
                           cfg: comm.WorldConfig | None = None) -> ForwardOutcome:
    """Masked forward with the collective in flight during intra compute.

    The returned outcome's run.trace shows, per rank, all_gather_issue then
    intra_start/intra_end then all_gather_complete; outputs are bit-identical
    to the sequential schedule.
    """
    return lasp2_forward_masked(chunks, cfg, overlap=True)


def lasp2_backward_nomask(chunks: ChunkedSequence, d_out: np.ndarray,
                          caches: list[ActivationCache],
                          cfg: comm.WorldConfig | None = None) -> BackwardOutcome:
    """Unmasked backward from host-held caches; one all_gather of Q^T dO."""
    if len(caches) != chunks.chunks:
        raise ValueError(f"expected {chunks.chunks} caches, got {len(caches)}")
    d_chunks = _split_like(chunks, d_out)

    def program(ctx, qc, kc, vc, cache, dc):
        return _backward_nomask_rank(ctx, cache, dc)

    run = _spawn(chunks, cfg, program,
                 extra_args=[(caches[t], d_chunks[t]) for t in range(chunks.chunks)])
    return BackwardOutcome(grads=run.results[:chunks.chunks], run=run)


def lasp2_backward_masked(chunks: ChunkedSequence, d_out: np.ndarray,
                          caches: list[ActivationCache],
                          cfg: comm.WorldConfig | None = None) -> BackwardOutcome:
    """Masked backward from host-held caches; one all_gather of Q^T dO."""
    if len(caches) != chunks.chunks:
        raise ValueError(f"expected {chunks.chunks} caches, got {len(caches)}")
    d_chunks = _split_like(chunks, d_out)

    def program(ctx, qc, kc, vc, cache, dc):
        return _backward_masked_rank(ctx, cache, dc)

    run = _spawn(chunks, cfg, program,
                 extra_args=[(caches[t], d_chunks[t]) for t in range(chunks.chunks)])
    return BackwardOutcome(grads=run.results[:chunks.chunks], run=run)


def lasp2_iteration(chunks: ChunkedSequence, d_out: np.ndarray, masked: bool,
                    cfg: comm.WorldConfig | None = None,
                    overlap: bool = False) -> IterationOutcome:
    """Forward plus backward in one world: exactly 2 collective launches."""
    d_chunks = _split_like(chunks, d_out)

    def program(ctx, qc, kc, vc, dc):
        if masked:
            out, cache = _forward_masked_rank(ctx, qc, kc, vc, overlap=overlap)
            grad = _backward_masked_rank(ctx, cache, dc)
        else:
            out, cache = _forward_nomask_rank(ctx, qc, kc, vc)
            grad = _backward_nomask_rank(ctx, cache, dc)
        return out, grad, cache

    run = _spawn(chunks, cfg, program,
                 extra_args=[(d_chunks[t],) for t in range(chunks.chunks)])
    t = chunks.chunks
    return IterationOutcome(outputs=[r[0] for r in run.results[:t]],
                            grads=[r[1] for r in run.results[:t]],
                            caches=[r[2] for r in run.results[:t]], run=run)
