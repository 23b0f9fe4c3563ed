"""Layer stacks mixing linear attention and softmax attention in one world.

A pattern string over {L, N} names the stack: L layers run the state-gather
linear path, N layers run gather-the-keys softmax attention. Every layer
projects its input with its own seeded d x d weights and feeds the next layer
directly; residuals, MLPs, and normalization are out of scope. Both layer
kinds share one rank context, so a whole forward+backward iteration costs
exactly 2 collective launches per L layer and 3 per N layer.

Weight gradients are chunk-local X^T dQ products; the driver folds them
across ranks in ascending rank order on the host, which keeps the collective
ledger pure attention traffic.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import comm, lasp2, standard_sp
from .datagen import projection_weight
from .numerics import matmul, sum_states, transpose
from .oracle import (AttentionInstance, causal_linear_forward,
                     linear_attn_serial_backward, softmax_chunk_backward,
                     softmax_chunk_forward)
from .shards import pack_slots, split_chunks

_LAYER_KINDS = frozenset("LN")


@dataclass(frozen=True)
class ModelSpec:
    """A stack description: pattern over {L, N} plus shapes and a weight seed.

    Spaces in the pattern are cosmetic grouping and are ignored.
    """

    pattern: str
    dim: int
    heads: int = 1
    batch: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.dim < 1 or self.heads < 1 or self.batch < 1:
            raise ValueError("dim, heads, and batch must be positive")
        _ = self.layers

    @property
    def layers(self) -> str:
        flat = self.pattern.replace(" ", "")
        if not flat:
            raise ValueError("pattern must contain at least one layer")
        bad = set(flat) - _LAYER_KINDS
        if bad:
            raise ValueError(f"invalid pattern character(s) {sorted(bad)}; use L or N")
        return flat


def layer_weights(spec: ModelSpec) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per-layer (W_Q, W_K, W_V), each seeded from (seed, layer index, role)."""
    return [tuple(projection_weight(spec.seed, i, role, spec.dim) for role in "qkv")
            for i in range(len(spec.layers))]


def pattern_for_ratio(num_layers: int, ratio) -> str:
    """Pattern with the given fraction of N layers, one N closing each group.

    ratio 1/4 over 16 layers gives "LLLN LLLN LLLN LLLN"; ratio 0 gives all L.
    The group size is the ratio's denominator, which must divide num_layers.
    """
    if num_layers < 1:
        raise ValueError("num_layers must be positive")
    frac = Fraction(ratio)
    if not 0 <= frac <= 1:
        raise ValueError(f"ratio must lie in [0, 1], got {frac}")
    if frac == 0:
        flat = "L" * num_layers
    else:
        group = "L" * (frac.denominator - frac.numerator) + "N" * frac.numerator
        if num_layers % frac.denominator != 0:
            raise ValueError(
                f"ratio {frac} needs groups of {frac.denominator} layers, "
                f"which does not divide {num_layers}")
        flat = group * (num_layers // frac.denominator)
    return " ".join(flat[i:i + 4] for i in range(0, len(flat), 4))


@dataclass
class LayerActivation:
    """One layer's forward leftovers: kind, input chunk, and attention cache."""

    kind: str
    x: np.ndarray
    cache: object


@dataclass
class HybridForward:
    outputs: list[np.ndarray]
    caches: list[list[LayerActivation]]
    run: comm.WorldRun


@dataclass
class HybridBackward:
    """Input gradients per rank plus weight gradients folded across ranks."""

    d_x: list[np.ndarray]
    d_weights: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    run: comm.WorldRun


@dataclass
class HybridIteration:
    outputs: list[np.ndarray]
    d_x: list[np.ndarray]
    d_weights: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    caches: list[list[LayerActivation]]
    run: comm.WorldRun


@dataclass
class StackResult:
    """Serial reference: final outputs, input grads, weight grads, and the
    per-layer outputs for layer-wise cross-checks."""

    outputs: np.ndarray
    d_x: np.ndarray
    d_weights: list[tuple[np.ndarray, np.ndarray, np.ndarray]]
    layer_outputs: list[np.ndarray]


# ---- shared projection math ---------------------------------------------------

def _project(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-slot X @ W with a weight shared across slots."""
    out = np.empty_like(x)
    for bi in range(x.shape[0]):
        for hi in range(x.shape[1]):
            out[bi, hi] = matmul(x[bi, hi], w)
    return out


def _project_t(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-slot G @ W^T, the input-side projection gradient."""
    out = np.empty_like(g)
    for bi in range(g.shape[0]):
        for hi in range(g.shape[1]):
            out[bi, hi] = matmul(g[bi, hi], transpose(w))
    return out


def _weight_grads(x: np.ndarray, dq: np.ndarray, dk: np.ndarray,
                  dv: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chunk-local dW = X^T dY over all slot rows packed into one product."""
    x_rows = transpose(pack_slots(x))
    return (matmul(x_rows, pack_slots(dq)),
            matmul(x_rows, pack_slots(dk)),
            matmul(x_rows, pack_slots(dv)))


# ---- per-rank programs --------------------------------------------------------

def _stack_forward_rank(ctx: comm.RankContext, layers: str, weights, x: np.ndarray,
                        causal: bool) -> tuple[np.ndarray, list[LayerActivation]]:
    acts = []
    for kind, (wq, wk, wv) in zip(layers, weights):
        q, k, v = _project(x, wq), _project(x, wk), _project(x, wv)
        if kind == "L":
            if causal:
                out, cache = lasp2._forward_masked_rank(ctx, q, k, v)
            else:
                out, cache = lasp2._forward_nomask_rank(ctx, q, k, v)
        else:
            out, cache = standard_sp._cp_forward_rank(ctx, q, k, v, causal)
        acts.append(LayerActivation(kind=kind, x=x, cache=cache))
        x = out
    return x, acts


def _stack_backward_rank(ctx: comm.RankContext, layers: str, weights,
                         acts: list[LayerActivation], d_out: np.ndarray,
                         ) -> tuple[np.ndarray, list[tuple]]:
    if len(acts) != len(layers):
        raise ValueError(f"expected {len(layers)} layer activations, got {len(acts)}")
    dy = d_out
    d_weights: list[tuple] = [()] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        act = acts[i]
        wq, wk, wv = weights[i]
        if act.kind == "L":
            if act.cache.masked:
                bundle = lasp2._backward_masked_rank(ctx, act.cache, dy)
            else:
                bundle = lasp2._backward_nomask_rank(ctx, act.cache, dy)
        else:
            bundle = standard_sp._cp_backward_rank(ctx, act.cache, dy)
        d_weights[i] = _weight_grads(act.x, bundle.dq, bundle.dk, bundle.dv)
        dx = _project_t(bundle.dq, wq)
        dx += _project_t(bundle.dk, wk)
        dx += _project_t(bundle.dv, wv)
        dy = dx
    return dy, d_weights


# ---- world drivers ------------------------------------------------------------

def _spawn(spec: ModelSpec, x: np.ndarray, chunks: int,
           cfg: comm.WorldConfig | None, program,
           extra_args: list[tuple] | None = None) -> comm.WorldRun:
    if x.ndim != 4 or x.shape[0] != spec.batch or x.shape[1] != spec.heads \
            or x.shape[3] != spec.dim:
        raise ValueError(
            f"x must be ({spec.batch}, {spec.heads}, tokens, {spec.dim}), got {x.shape}")
    cfg = cfg or comm.WorldConfig(world_size=chunks, sp_size=chunks,
                                  element_bytes=x.dtype.itemsize)
    if cfg.sp_size != chunks:
        raise ValueError(f"world sp_size {cfg.sp_size} != chunk count {chunks}")
    if cfg.element_bytes != x.dtype.itemsize:
        raise ValueError(f"world element_bytes {cfg.element_bytes} does not match "
                         f"dtype {x.dtype}")
    xs = split_chunks(x, chunks)
    rank_args = []
    for rank in range(cfg.world_size):
        t = rank % cfg.sp_size
        extra = extra_args[t] if extra_args is not None else ()
        rank_args.append((xs[t], *extra))
    return comm.world_spawn(cfg, program, rank_args)


def _fold_rank_weight_grads(per_rank: list[list[tuple]], num_layers: int,
                            ) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    # Ascending rank order, first contribution copied, per the fold contract.
    return [tuple(sum_states([contrib[i][j] for contrib in per_rank])
                  for j in range(3))
            for i in range(num_layers)]


def hybrid_forward(spec: ModelSpec, x: np.ndarray, chunks: int, causal: bool = True,
                   cfg: comm.WorldConfig | None = None) -> HybridForward:
    """Run the stack forward; each rank owns one chunk of every layer."""
    layers, weights = spec.layers, layer_weights(spec)

    def program(ctx, xc):
        return _stack_forward_rank(ctx, layers, weights, xc, causal)

    run = _spawn(spec, x, chunks, cfg, program)
    return HybridForward(outputs=[r[0] for r in run.results[:chunks]],
                         caches=[r[1] for r in run.results[:chunks]], run=run)


def hybrid_backward(spec: ModelSpec, x: np.ndarray, d_out: np.ndarray, chunks: int,
                    caches: list[list[LayerActivation]],
                    cfg: comm.WorldConfig | None = None) -> HybridBackward:
    """Reverse the stack from host-held activations."""
    if len(caches) != chunks:
        raise ValueError(f"expected {chunks} activation lists, got {len(caches)}")
    if d_out.shape != x.shape:
        raise ValueError(f"d_out shape {d_out.shape} != x shape {x.shape}")
    layers, weights = spec.layers, layer_weights(spec)
    d_chunks = split_chunks(d_out, chunks)

    def program(ctx, xc, acts, dc):
        return _stack_backward_rank(ctx, layers, weights, acts, dc)

    run = _spawn(spec, x, chunks, cfg, program,
                 extra_args=[(caches[t], d_chunks[t]) for t in range(chunks)])
    d_x = [r[0] for r in run.results[:chunks]]
    d_weights = _fold_rank_weight_grads([r[1] for r in run.results[:chunks]],
                                        len(layers))
    return HybridBackward(d_x=d_x, d_weights=d_weights, run=run)


def hybrid_iteration(spec: ModelSpec, x: np.ndarray, d_out: np.ndarray, chunks: int,
                     causal: bool = True,
                     cfg: comm.WorldConfig | None = None) -> HybridIteration:
    """Forward plus backward in one world: 2 launches per L layer, 3 per N."""
    if d_out.shape != x.shape:
        raise ValueError(f"d_out shape {d_out.shape} != x shape {x.shape}")
    layers, weights = spec.layers, layer_weights(spec)
    d_chunks = split_chunks(d_out, chunks)

    def program(ctx, xc, dc):
        out, acts = _stack_forward_rank(ctx, layers, weights, xc, causal)
        dx, dw = _stack_backward_rank(ctx, layers, weights, acts, dc)
        return out, dx, dw, acts

    run = _spawn(spec, x, chunks, cfg, program,
                 extra_args=[(d_chunks[t],) for t in range(chunks)])
    results = run.results[:chunks]
    d_weights = _fold_rank_weight_grads([r[2] for r in results], len(layers))
    return HybridIteration(outputs=[r[0] for r in results],
                           d_x=[r[1] for r in results],
                           d_weights=d_weights,
                           caches=[r[3] for r in results], run=run)


# ---- serial reference ---------------------------------------------------------

def serial_stack_oracle(spec: ModelSpec, x: np.ndarray, d_out: np.ndarray,
                        causal: bool = True) -> StackResult:
    """Single-process stack on the full sequence, built from oracle kernels.

    The forward applies the same per-slot attention the parallel single-chunk
    path applies, so a T = 1 parallel run reproduces it bit for bit; the
    backward is the independent per-layer analytic gradient.
    """
    if x.ndim != 4:
        raise ValueError(f"x must be (batch, heads, tokens, dim), got {x.shape}")
    if d_out.shape != x.shape:
        raise ValueError(f"d_out shape {d_out.shape} != x shape {x.shape}")
    layers, weights = spec.layers, layer_weights(spec)
    b, h = x.shape[0], x.shape[1]

    retained = []
    layer_outputs = []
    cur = x
    for kind, (wq, wk, wv) in zip(layers, weights):
        q, k, v = _project(cur, wq), _project(cur, wk), _project(cur, wv)
        out = np.empty_like(q)
        for bi in range(b):
            for hi in range(h):
                if kind == "L":
                    if causal:
                        out[bi, hi] = causal_linear_forward(q[bi, hi], k[bi, hi], v[bi, hi])
                    else:
                        out[bi, hi] = matmul(
                            q[bi, hi], matmul(transpose(k[bi, hi]), v[bi, hi]))
                else:
                    out[bi, hi] = softmax_chunk_forward(
                        q[bi, hi], k[bi, hi], v[bi, hi], causal, 0)
        retained.append((cur, q, k, v))
        layer_outputs.append(out)
        cur = out

    dy = d_out
    d_weights: list[tuple] = [()] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        kind = layers[i]
        inp, q, k, v = retained[i]
        wq, wk, wv = weights[i]
        dq, dk, dv = np.empty_like(q), np.empty_like(k), np.empty_like(v)
        for bi in range(b):
            for hi in range(h):
                if kind == "L":
                    inst = AttentionInstance(q=q[bi, hi], k=k[bi, hi], v=v[bi, hi],
                                             causal=causal)
                    g = linear_attn_serial_backward(inst, dy[bi, hi])
                    dq[bi, hi], dk[bi, hi], dv[bi, hi] = g.dq, g.dk, g.dv
                else:
                    dq[bi, hi], dk[bi, hi], dv[bi, hi] = softmax_chunk_backward(
                        q[bi, hi], k[bi, hi], v[bi, hi], dy[bi, hi], causal, 0)
        d_weights[i] = tuple(g.copy() for g in _weight_grads(inp, dq, dk, dv))
        dx = _project_t(dq, wq)
        dx += _project_t(dk, wk)
        dx += _project_t(dv, wv)
        dy = dx
    return StackResult(outputs=layer_outputs[-1], d_x=dy, d_weights=d_weights,
                       layer_outputs=layer_outputs)
