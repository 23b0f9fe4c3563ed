"""Command-line harness: verification suites, benchmark sweeps, cost tables.

Three subcommands:

  verify     run correctness checks for one config or a grid; JSON report
  bench      one timed iteration per config; CSV of comm counters
  costmodel  closed-form step/traffic table; CSV

Configs come from flags, an optional flat config file (key = value, one per
line; flags override the file), and an optional grid file (same format with
comma-separated value lists, expanded as a cartesian product; grid values
override flags). Exit codes: 0 all checks pass, 1 check failure, 2 usage or
config error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__, comm, costmodel
from .datagen import gen_data, gen_slots, qkv_slots  # noqa: F401  (gen_data is part of the CLI surface)
from .hybrid import ModelSpec, hybrid_iteration, serial_stack_oracle
from .lasp1 import lasp1_iteration
from .lasp2 import ChunkedSequence, chunk_state, chunk_state_grad, lasp2_iteration
from .numerics import (causal_mask, hadamard_mask, matmul, prefix_sum_states,
                       suffix_sum_states, sum_states, transpose)
from .oracle import (AttentionInstance, DecodeCache, causal_linear_forward,
                     finite_diff_grad, linear_attn_serial,
                     linear_attn_serial_backward, relative_error,
                     softmax_attn_decode_step, softmax_attn_reference,
                     softmax_attn_reference_backward)
from .shards import split_chunks
from .standard_sp import cp_iteration

METHODS = ("lasp1", "lasp2", "lasp2h", "cp", "oracle")
PRECISIONS = {"f32": np.float32, "f64": np.float64}

BENCH_COLUMNS = ["method", "N", "T", "W", "d", "H", "B", "masked",
                 "steps", "launches", "bytes", "simulated_time", "wall_time_ns"]
COST_COLUMNS = ["method", "W", "T", "B", "H", "d", "element_bytes", "iterations",
                "steps_per_iteration", "traffic_per_step_bytes",
                "state_param_count", "total_traffic_bytes"]

# Finite differencing is O(entries^2); restrict to shapes where it stays fast.
_FD_MAX_N = 16
_FD_MAX_D = 8

_TOLS = {
    "f64": {"forward": 1e-10, "forward_softmax": 1e-12, "grad_serial": 1e-12,
            "grad_softmax": 1e-10, "fd": 1e-6, "stack": 1e-9,
            "right_product": 1e-10, "decode": 1e-12},
    "f32": {"forward": 1e-3, "forward_softmax": 1e-3, "grad_serial": 1e-3,
            "grad_softmax": 1e-3, "fd": None, "stack": 1e-2,
            "right_product": 1e-3, "decode": 1e-4},
}


class UsageError(Exception):
    """Bad flags, config keys, or parameter combinations; exits with code 2."""


def _to_int(s: str) -> int:
    try:
        return int(s)
    except ValueError as exc:
        raise UsageError(f"expected an integer, got {s!r}") from exc


def _to_float(s: str) -> float:
    try:
        return float(s)
    except ValueError as exc:
        raise UsageError(f"expected a number, got {s!r}") from exc


def _to_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise UsageError(f"expected true or false, got {s!r}")


_CONVERTERS = {
    "method": str,
    "seq_len": _to_int,
    "chunks": _to_int,
    "world": _to_int,
    "dim": _to_int,
    "heads": _to_int,
    "batch": _to_int,
    "masked": _to_bool,
    "pattern": str,
    "precision": str,
    "seed": _to_int,
    "latency_per_launch": _to_float,
    "latency_per_byte": _to_float,
    "element_bytes": _to_int,
    "iterations": _to_int,
}


def _coerce(key: str, value):
    norm = key.strip().lstrip("-").replace("-", "_")
    conv = _CONVERTERS.get(norm)
    if conv is None:
        raise UsageError(f"unknown configuration key {key.strip()!r}")
    return norm, (conv(value) if isinstance(value, str) else value)


@dataclass(frozen=True)
class RunConfig:
    """One fully-resolved run: method, shapes, masking, precision, latency."""

    method: str = "lasp2"
    seq_len: int = 64
    chunks: int = 4
    world: int | None = None
    dim: int = 8
    heads: int = 1
    batch: int = 1
    masked: bool = True
    pattern: str = ""
    precision: str = "f64"
    seed: int = 0
    latency_per_launch: float = 10.0
    latency_per_byte: float = 1.0 / 1024.0

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.precision not in PRECISIONS:
            raise UsageError(f"unknown precision {self.precision!r}; choose f32 or f64")
        for name in ("seq_len", "chunks", "dim", "heads", "batch"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be positive, got {getattr(self, name)}")
        if self.seq_len % self.chunks != 0:
            raise UsageError(
                f"chunks {self.chunks} must divide seq_len {self.seq_len}")
        if self.world is None:
            object.__setattr__(self, "world", self.chunks)
        if self.world % self.chunks != 0:
            raise UsageError(f"chunks {self.chunks} must divide world {self.world}")
        if self.method == "lasp2h":
            if not self.pattern.replace(" ", ""):
                raise UsageError("method lasp2h needs a nonempty --pattern")
        elif self.pattern:
            raise UsageError(f"--pattern applies only to lasp2h, not {self.method}")
        if self.latency_per_launch < 0 or self.latency_per_byte < 0:
            raise UsageError("latency parameters must be nonnegative")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def element_bytes(self) -> int:
        return 4 if self.precision == "f32" else 8

    def world_config(self) -> comm.WorldConfig:
        return comm.WorldConfig(world_size=self.world, sp_size=self.chunks,
                                element_bytes=self.element_bytes,
                                latency_per_launch=self.latency_per_launch,
                                latency_per_byte=self.latency_per_byte)

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


@dataclass
class Check:
    """One named invariant: observed deviation against its tolerance."""

    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def as_dict(self) -> dict:
        return {"name": self.name, "max_error": self.max_error,
                "tolerance": self.tolerance, "passed": self.passed}


# ---- serial references on full (B, H, N, d) arrays ---------------------------

def _per_slot(fn, *arrays):
    out = np.empty_like(arrays[0])
    for bi in range(arrays[0].shape[0]):
        for hi in range(arrays[0].shape[1]):
            out[bi, hi] = fn(*(a[bi, hi] for a in arrays))
    return out


def _linear_full(q, k, v, causal):
    return _per_slot(
        lambda qs, ks, vs: linear_attn_serial(AttentionInstance(qs, ks, vs, causal)),
        q, k, v)


def _linear_grads(q, k, v, d_out, causal):
    dq, dk, dv = np.empty_like(q), np.empty_like(k), np.empty_like(v)
    for bi in range(q.shape[0]):
        for hi in range(q.shape[1]):
            g = linear_attn_serial_backward(
                AttentionInstance(q[bi, hi], k[bi, hi], v[bi, hi], causal), d_out[bi, hi])
            dq[bi, hi], dk[bi, hi], dv[bi, hi] = g.dq, g.dk, g.dv
    return dq, dk, dv


def _softmax_full(q, k, v, causal):
    return _per_slot(
        lambda qs, ks, vs: softmax_attn_reference(AttentionInstance(qs, ks, vs, causal)),
        q, k, v)


def _softmax_grads(q, k, v, d_out, causal):
    dq, dk, dv = np.empty_like(q), np.empty_like(k), np.empty_like(v)
    for bi in range(q.shape[0]):
        for hi in range(q.shape[1]):
            g = softmax_attn_reference_backward(
                AttentionInstance(q[bi, hi], k[bi, hi], v[bi, hi], causal), d_out[bi, hi])
            dq[bi, hi], dk[bi, hi], dv[bi, hi] = g.dq, g.dk, g.dv
    return dq, dk, dv


def _ring_prefix_states(k, v, chunks):
    ks, vs = split_chunks(k, chunks), split_chunks(v, chunks)
    return [chunk_state(ks[t], vs[t]) for t in range(chunks)]


def _exclusive_prefix_forward(q, k, v, chunks):
    """What the ring computes without a mask: O_t = Q_t x (sum of earlier states)."""
    states = _ring_prefix_states(k, v, chunks)
    qs = split_chunks(q, chunks)
    parts = []
    for t in range(chunks):
        if t == 0:
            parts.append(np.zeros_like(qs[0]))
            continue
        prefix = prefix_sum_states(states, t)
        parts.append(_per_slot(lambda x, m: matmul(x, m), qs[t], prefix))
    return np.concatenate(parts, axis=2)


def _exclusive_prefix_grads(q, k, v, d_out, chunks):
    states = _ring_prefix_states(k, v, chunks)
    qs, ks, vs = (split_chunks(a, chunks) for a in (q, k, v))
    ds = split_chunks(d_out, chunks)
    g_states = [chunk_state_grad(qs[t], ds[t]) for t in range(chunks)]
    dq_parts, dk_parts, dv_parts = [], [], []
    for t in range(chunks):
        if t == 0:
            dq_parts.append(np.zeros_like(qs[0]))
        else:
            prefix = prefix_sum_states(states, t)
            dq_parts.append(_per_slot(lambda x, m: matmul(x, transpose(m)), ds[t], prefix))
        if t == chunks - 1:
            dk_parts.append(np.zeros_like(ks[t]))
            dv_parts.append(np.zeros_like(vs[t]))
        else:
            suffix = suffix_sum_states(g_states, t + 1)
            dk_parts.append(_per_slot(lambda x, m: matmul(x, transpose(m)), vs[t], suffix))
            dv_parts.append(_per_slot(lambda x, m: matmul(x, m), ks[t], suffix))
    return (np.concatenate(dq_parts, axis=2), np.concatenate(dk_parts, axis=2),
            np.concatenate(dv_parts, axis=2))


def _left_product_full(q, k, v, causal):
    n = q.shape[2]
    psi = causal_mask(n, dtype=q.dtype) if causal else None

    def one(qs, ks, vs):
        scores = matmul(qs, transpose(ks))
        if psi is not None:
            scores = hadamard_mask(scores, psi)
        return matmul(scores, vs)

    return _per_slot(one, q, k, v)


def _max_abs(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b))) if a.size else 0.0


def _fd_worst(forward_fn, arrays, d_out, got) -> float:
    """Worst relative error of got gradients against central differences."""
    worst = 0.0
    for i in range(3):
        def loss(x, i=i):
            args = list(arrays)
            args[i] = x
            return float(np.sum(forward_fn(*args) * d_out))

        fd = finite_diff_grad(loss, np.asarray(arrays[i], dtype=np.float64))
        worst = max(worst, relative_error(np.asarray(got[i], dtype=np.float64), fd))
    return worst


def _fd_eligible(cfg: RunConfig) -> bool:
    return (cfg.precision == "f64" and cfg.seq_len <= _FD_MAX_N
            and cfg.dim <= _FD_MAX_D)


def _run_inputs(cfg: RunConfig):
    q, k, v = qkv_slots(cfg.seed, cfg.batch, cfg.heads, cfg.seq_len, cfg.dim,
                        dtype=cfg.dtype)
    d_out = gen_slots(cfg.seed, cfg.batch, cfg.heads, cfg.seq_len, cfg.dim, "do",
                      dtype=cfg.dtype)
    return q, k, v, d_out


_ZERO_COMM = {"p2p_sends": 0, "p2p_recvs": 0, "allgather_launches": 0,
              "bytes_sent": 0, "communication_steps": 0, "bytes_by_primitive": {}}


def _comm_dict(run: comm.WorldRun) -> dict:
    return asdict(run.stats)


def _state_bytes(cfg: RunConfig) -> int:
    return cfg.batch * cfg.heads * cfg.dim * cfg.dim * cfg.element_bytes


# ---- per-method verification runners ------------------------------------------

def _run_lasp2(cfg: RunConfig, corrupt: bool):
    q, k, v, d_out = _run_inputs(cfg)
    chunks = ChunkedSequence(q, k, v, cfg.chunks)
    it = lasp2_iteration(chunks, d_out, cfg.masked, cfg.world_config())
    out = np.concatenate(it.outputs, axis=2)
    dq = np.concatenate([g.dq for g in it.grads], axis=2)
    dk = np.concatenate([g.dk for g in it.grads], axis=2)
    dv = np.concatenate([g.dv for g in it.grads], axis=2)
    if corrupt:
        dq = dq + 1e-3
    tol = _TOLS[cfg.precision]
    ref_out = _linear_full(q, k, v, cfg.masked)
    ref_grads = _linear_grads(q, k, v, d_out, cfg.masked)
    fwd_tol = 0.0 if cfg.chunks == 1 else tol["forward"]
    checks = [
        Check("forward_max_abs_vs_oracle", _max_abs(out, ref_out), fwd_tol),
        Check("backward_rel_vs_oracle",
              max(relative_error(g, r) for g, r in zip((dq, dk, dv), ref_grads)),
              tol["grad_serial"]),
    ]
    if _fd_eligible(cfg):
        checks.append(Check(
            "backward_rel_vs_fd",
            _fd_worst(lambda *a: _linear_full(*a, cfg.masked), (q, k, v), d_out,
                      (dq, dk, dv)),
            tol["fd"]))
    stats = it.run.stats
    dp = cfg.world // cfg.chunks
    step_err = abs(stats.allgather_launches - 2 * dp) + stats.p2p_sends
    checks.append(Check("collective_steps_exact", float(step_err), 0.0))
    byte_err = abs(stats.bytes_sent - 2 * cfg.world * _state_bytes(cfg))
    checks.append(Check("state_bytes_exact", float(byte_err), 0.0))
    return checks, _comm_dict(it.run), it.run.simulated_time


def _run_lasp1(cfg: RunConfig, corrupt: bool):
    q, k, v, d_out = _run_inputs(cfg)
    chunks = ChunkedSequence(q, k, v, cfg.chunks)
    it = lasp1_iteration(chunks, d_out, cfg.masked, cfg.world_config())
    out = np.concatenate(it.outputs, axis=2)
    dq = np.concatenate([g.dq for g in it.grads], axis=2)
    dk = np.concatenate([g.dk for g in it.grads], axis=2)
    dv = np.concatenate([g.dv for g in it.grads], axis=2)
    if corrupt:
        dq = dq + 1e-3
    tol = _TOLS[cfg.precision]
    checks = []
    if cfg.masked:
        ref_out = _linear_full(q, k, v, True)
        ref_grads = _linear_grads(q, k, v, d_out, True)
        fwd_tol = 0.0 if cfg.chunks == 1 else tol["forward"]
        checks.append(Check("forward_max_abs_vs_oracle", _max_abs(out, ref_out), fwd_tol))
        checks.append(Check(
            "backward_rel_vs_oracle",
            max(relative_error(g, r) for g, r in zip((dq, dk, dv), ref_grads)),
            tol["grad_serial"]))
        other = lasp2_iteration(chunks, d_out, True, cfg.world_config())
        bit_err = _max_abs(out, np.concatenate(other.outputs, axis=2))
        for mine, theirs in ((dq, "dq"), (dk, "dk"), (dv, "dv")):
            ref = np.concatenate([getattr(g, theirs) for g in other.grads], axis=2)
            bit_err = max(bit_err, _max_abs(mine, ref))
        checks.append(Check("bitwise_vs_lasp2", bit_err, 0.0))
    else:
        ref_out = _exclusive_prefix_forward(q, k, v, cfg.chunks)
        checks.append(Check("forward_bitwise_vs_exclusive_prefix",
                            _max_abs(out, ref_out), 0.0))
        ref_grads = _exclusive_prefix_grads(q, k, v, d_out, cfg.chunks)
        checks.append(Check(
            "backward_bitwise_vs_exclusive_prefix",
            max(_max_abs(g, r) for g, r in zip((dq, dk, dv), ref_grads)),
            0.0))
        final_state = it.caches[-1].state_through
        full = sum_states(_ring_prefix_states(k, v, cfg.chunks))
        checks.append(Check("ring_final_state_bitwise", _max_abs(final_state, full), 0.0))
        if _fd_eligible(cfg):
            checks.append(Check(
                "backward_rel_vs_fd",
                _fd_worst(lambda *a: _exclusive_prefix_forward(*a, cfg.chunks),
                          (q, k, v), d_out, (dq, dk, dv)),
                tol["fd"]))
    stats = it.run.stats
    dp = cfg.world // cfg.chunks
    step_err = (abs(stats.p2p_sends - dp * 2 * (cfg.chunks - 1))
                + stats.allgather_launches)
    checks.append(Check("ring_steps_exact", float(step_err), 0.0))
    return checks, _comm_dict(it.run), it.run.simulated_time


def _run_cp(cfg: RunConfig, corrupt: bool):
    q, k, v, d_out = _run_inputs(cfg)
    chunks = ChunkedSequence(q, k, v, cfg.chunks)
    it = cp_iteration(chunks, d_out, cfg.masked, cfg.world_config())
    out = np.concatenate(it.outputs, axis=2)
    dq = np.concatenate([g.dq for g in it.grads], axis=2)
    dk = np.concatenate([g.dk for g in it.grads], axis=2)
    dv = np.concatenate([g.dv for g in it.grads], axis=2)
    if corrupt:
        dq = dq + 1e-3
    tol = _TOLS[cfg.precision]
    ref_out = _softmax_full(q, k, v, cfg.masked)
    ref_grads = _softmax_grads(q, k, v, d_out, cfg.masked)
    fwd_tol = 0.0 if cfg.chunks == 1 else tol["forward_softmax"]
    checks = [
        Check("forward_max_abs_vs_oracle", _max_abs(out, ref_out), fwd_tol),
        Check("backward_rel_vs_oracle",
              max(relative_error(g, r) for g, r in zip((dq, dk, dv), ref_grads)),
              tol["grad_softmax"]),
    ]
    if _fd_eligible(cfg):
        checks.append(Check(
            "backward_rel_vs_fd",
            _fd_worst(lambda *a: _softmax_full(*a, cfg.masked), (q, k, v), d_out,
                      (dq, dk, dv)),
            tol["fd"]))
    stats = it.run.stats
    dp = cfg.world // cfg.chunks
    step_err = abs(stats.allgather_launches - 3 * dp) + stats.p2p_sends
    checks.append(Check("gather_launches_exact", float(step_err), 0.0))
    # Forward contributes its K and V chunks, backward its full-length dK/dV.
    chunk_len = cfg.seq_len // cfg.chunks
    per_rank = cfg.batch * cfg.heads * cfg.dim * cfg.element_bytes \
        * (2 * chunk_len + 2 * cfg.seq_len)
    byte_err = abs(stats.bytes_sent - cfg.world * per_rank)
    checks.append(Check("gathered_bytes_exact", float(byte_err), 0.0))
    return checks, _comm_dict(it.run), it.run.simulated_time


def _run_lasp2h(cfg: RunConfig, corrupt: bool):
    spec = ModelSpec(pattern=cfg.pattern, dim=cfg.dim, heads=cfg.heads,
                     batch=cfg.batch, seed=cfg.seed)
    x = gen_slots(cfg.seed, cfg.batch, cfg.heads, cfg.seq_len, cfg.dim, "x",
                  dtype=cfg.dtype)
    d_out = gen_slots(cfg.seed, cfg.batch, cfg.heads, cfg.seq_len, cfg.dim, "do",
                      dtype=cfg.dtype)
    it = hybrid_iteration(spec, x, d_out, cfg.chunks, cfg.masked, cfg.world_config())
    out = np.concatenate(it.outputs, axis=2)
    d_x = np.concatenate(it.d_x, axis=2)
    if corrupt:
        d_x = d_x + 1e-3
    ref = serial_stack_oracle(spec, x, d_out, cfg.masked)
    tol = _TOLS[cfg.precision]
    # Single-chunk forward shares the oracle's code path exactly; the backward
    # differentiates the left-product form, so it stays a tolerance check.
    fwd_tol = 0.0 if cfg.chunks == 1 else tol["stack"]
    grad_err = relative_error(d_x, ref.d_x)
    for got_w, ref_w in zip(it.d_weights, ref.d_weights):
        for g, r in zip(got_w, ref_w):
            grad_err = max(grad_err, relative_error(g, r))
    checks = [
        Check("forward_rel_vs_stack", relative_error(out, ref.outputs), fwd_tol),
        Check("backward_rel_vs_stack", grad_err, tol["stack"]),
    ]
    stats = it.run.stats
    dp = cfg.world // cfg.chunks
    layers = spec.layers
    expected = (2 * layers.count("L") + 3 * layers.count("N")) * dp
    step_err = abs(stats.allgather_launches - expected) + stats.p2p_sends
    checks.append(Check("launch_composition_exact", float(step_err), 0.0))
    return checks, _comm_dict(it.run), it.run.simulated_time


def _run_oracle(cfg: RunConfig, corrupt: bool):
    q, k, v, d_out = _run_inputs(cfg)
    tol = _TOLS[cfg.precision]
    right = _linear_full(q, k, v, cfg.masked)
    if corrupt:
        right = right + 1e-3
    left = _left_product_full(q, k, v, cfg.masked)
    checks = [Check("forward_max_abs_left_vs_right_product",
                    _max_abs(right, left), tol["right_product"])]

    decode_err = 0.0
    for bi in range(cfg.batch):
        for hi in range(cfg.heads):
            inst = AttentionInstance(q[bi, hi], k[bi, hi], v[bi, hi], causal=True)
            batch_out = softmax_attn_reference(inst)
            cache = DecodeCache()
            for s in range(cfg.seq_len):
                cache.append(k[bi, hi, s], v[bi, hi, s])
                step = softmax_attn_decode_step(cache, q[bi, hi, s:s + 1])
                decode_err = max(decode_err, _max_abs(step[0], batch_out[s]))
    checks.append(Check("decode_max_abs_vs_batch", decode_err, tol["decode"]))

    if _fd_eligible(cfg):
        lin = _linear_grads(q, k, v, d_out, cfg.masked)
        checks.append(Check(
            "backward_rel_vs_fd_linear",
            _fd_worst(lambda *a: _linear_full(*a, cfg.masked), (q, k, v), d_out, lin),
            tol["fd"]))
        soft = _softmax_grads(q, k, v, d_out, cfg.masked)
        checks.append(Check(
            "backward_rel_vs_fd_softmax",
            _fd_worst(lambda *a: _softmax_full(*a, cfg.masked), (q, k, v), d_out, soft),
            tol["fd"]))
    return checks, dict(_ZERO_COMM), 0.0


_RUNNERS = {
    "lasp2": _run_lasp2,
    "lasp1": _run_lasp1,
    "cp": _run_cp,
    "lasp2h": _run_lasp2h,
    "oracle": _run_oracle,
}


# ---- config assembly -----------------------------------------------------------

_RUN_KEYS = ("method", "seq_len", "chunks", "world", "dim", "heads", "batch",
             "masked", "pattern", "precision", "seed", "latency_per_launch",
             "latency_per_byte")


def _parse_kv_lines(path: str) -> list[tuple[str, str]]:
    pairs = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise UsageError(f"{path}:{lineno}: expected key = value")
                key, _, value = line.partition("=")
                pairs.append((key.strip(), value.strip()))
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    return pairs


def _parse_config_file(path: str, allowed: tuple[str, ...]) -> dict:
    out = {}
    for key, value in _parse_kv_lines(path):
        norm, val = _coerce(key, value)
        if norm not in allowed:
            raise UsageError(f"{path}: key {key!r} not valid here")
        out[norm] = val
    return out


def _parse_grid_file(path: str, allowed: tuple[str, ...]) -> list[dict]:
    keys: list[str] = []
    columns: list[list] = []
    for key, value in _parse_kv_lines(path):
        vals = []
        norm = None
        for piece in value.split(","):
            norm, val = _coerce(key, piece.strip())
            vals.append(val)
        if norm not in allowed:
            raise UsageError(f"{path}: key {key!r} not valid here")
        if norm in keys:
            raise UsageError(f"{path}: duplicate key {key!r}")
        keys.append(norm)
        columns.append(vals)
    if not keys:
        raise UsageError(f"{path}: grid file is empty")
    return [dict(zip(keys, combo)) for combo in itertools.product(*columns)]


def _collect_flag_overrides(args, allowed: tuple[str, ...]) -> dict:
    out = {}
    for key in allowed:
        value = getattr(args, key, None)
        if value is not None:
            _, out[key] = _coerce(key, value)
    return out


def _expand_run_configs(args, default_grid) -> list[RunConfig]:
    base = {}
    if args.config:
        base.update(_parse_config_file(args.config, _RUN_KEYS))
    base.update(_collect_flag_overrides(args, _RUN_KEYS))
    if args.grid:
        dicts = [dict(base, **entry)
                 for entry in _parse_grid_file(args.grid, _RUN_KEYS)]
    elif base:
        dicts = [base]
    else:
        dicts = default_grid()
    return [RunConfig(**d) for d in dicts]


def _default_verify_grid() -> list[dict]:
    grid = []
    for method in METHODS:
        for n in (8, 64, 256):
            for t in (1, 2, 4, 8):
                if n % t:
                    continue
                for d in (4, 16):
                    for masked in (True, False):
                        grid.append({"method": method, "seq_len": n, "chunks": t,
                                     "dim": d, "masked": masked,
                                     "pattern": "LN" if method == "lasp2h" else ""})
    return grid


# ---- subcommands ----------------------------------------------------------------

def _describe(cfg: RunConfig) -> str:
    return (f"{cfg.method:<6} N={cfg.seq_len} T={cfg.chunks} W={cfg.world} "
            f"d={cfg.dim} H={cfg.heads} B={cfg.batch} "
            f"masked={'true' if cfg.masked else 'false'} {cfg.precision} "
            f"seed={cfg.seed}")


def _first_error(checks: list[Check], prefix: str):
    for check in checks:
        if check.name.startswith(prefix):
            return check.max_error
    return None


def cmd_verify(args) -> int:
    configs = _expand_run_configs(args, _default_verify_grid)
    records = []
    failures = 0
    for cfg in configs:
        started = time.perf_counter_ns()
        checks, comm_echo, sim_time = _RUNNERS[cfg.method](cfg, args.corrupt_gradient)
        wall = time.perf_counter_ns() - started
        passed = all(c.passed for c in checks)
        failures += 0 if passed else 1
        records.append({
            "method": cfg.method,
            "config": asdict(cfg),
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "checks": [c.as_dict() for c in checks],
            "forward_max_abs_error": _first_error(checks, "forward"),
            "grad_max_rel_error": _first_error(checks, "backward"),
            "comm": comm_echo,
            "simulated_time": sim_time,
            "wall_time_ns": wall,
            "passed": passed,
        })
        if passed:
            print(f"ok   {_describe(cfg)} checks={len(checks)}")
        else:
            worst = ", ".join(f"{c.name}={c.max_error:.3e}>{c.tolerance:g}"
                              for c in checks if not c.passed)
            print(f"FAIL {_describe(cfg)} {worst}")
    print(f"{len(configs) - failures}/{len(configs)} runs passed")
    if args.out:
        report = {"version": __version__, "runs": records}
        try:
            with open(args.out, "w", encoding="utf-8") as fh:
                json.dump(report, fh, indent=2)
                fh.write("\n")
        except OSError as exc:
            raise UsageError(f"cannot write {args.out}: {exc}") from exc
    return 1 if failures else 0


def _bench_row(cfg: RunConfig) -> list:
    started = time.perf_counter_ns()
    if cfg.method == "oracle":
        q, k, v, d_out = _run_inputs(cfg)
        out = _linear_full(q, k, v, cfg.masked)
        _linear_grads(q, k, v, d_out, cfg.masked)
        del out
        stats, sim_time = None, 0.0
    else:
        if cfg.method == "lasp2h":
            spec = ModelSpec(pattern=cfg.pattern, dim=cfg.dim, heads=cfg.heads,
                             batch=cfg.batch, seed=cfg.seed)
            x = gen_slots(cfg.seed, cfg.batch, cfg.heads, cfg.seq_len, cfg.dim, "x",
                          dtype=cfg.dtype)
            d_out = gen_slots(cfg.seed, cfg.batch, cfg.heads, cfg.seq_len, cfg.dim,
                              "do", dtype=cfg.dtype)
            run = hybrid_iteration(spec, x, d_out, cfg.chunks, cfg.masked,
                                   cfg.world_config()).run
        else:
            q, k, v, d_out = _run_inputs(cfg)
            chunks = ChunkedSequence(q, k, v, cfg.chunks)
            driver = {"lasp1": lasp1_iteration, "lasp2": lasp2_iteration,
                      "cp": cp_iteration}[cfg.method]
            run = driver(chunks, d_out, cfg.masked, cfg.world_config()).run
        stats, sim_time = run.stats, run.simulated_time
    wall = time.perf_counter_ns() - started
    return [cfg.method, cfg.seq_len, cfg.chunks, cfg.world, cfg.dim, cfg.heads,
            cfg.batch, "true" if cfg.masked else "false",
            stats.communication_steps if stats else 0,
            stats.allgather_launches if stats else 0,
            stats.bytes_sent if stats else 0,
            sim_time, wall]


def _write_csv(path: str | None, header: list[str], rows: list[list]) -> None:
    def emit(fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)

    if path:
        try:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                emit(fh)
        except OSError as exc:
            raise UsageError(f"cannot write {path}: {exc}") from exc
    else:
        emit(sys.stdout)


def cmd_bench(args) -> int:
    configs = _expand_run_configs(args, lambda: [{}])
    rows = [_bench_row(cfg) for cfg in configs]
    _write_csv(args.out, BENCH_COLUMNS, rows)
    return 0


_COST_KEYS = ("method", "world", "chunks", "batch", "heads", "dim",
              "element_bytes", "iterations")

_COST_DEFAULT_SHAPES = (
    (1, 1, 1, 4, 8, 1),
    (2, 1, 1, 4, 8, 1),
    (8, 2, 4, 8, 8, 1),
    (8, 2, 4, 8, 8, 10),
    (64, 16, 16, 2048, 2, 1),
    (64, 16, 32, 4096, 2, 1),
)


def _default_cost_grid() -> list[dict]:
    grid = []
    for method in costmodel.METHODS:
        for w, b, h, d, eb, iters in _COST_DEFAULT_SHAPES:
            grid.append({"method": method, "world": w, "batch": b, "heads": h,
                         "dim": d, "element_bytes": eb, "iterations": iters})
    return grid


def cmd_costmodel(args) -> int:
    base = {}
    if args.config:
        base.update(_parse_config_file(args.config, _COST_KEYS))
    base.update(_collect_flag_overrides(args, _COST_KEYS))
    if args.grid:
        dicts = [dict(base, **entry)
                 for entry in _parse_grid_file(args.grid, _COST_KEYS)]
    elif base:
        dicts = [base]
    else:
        dicts = _default_cost_grid()

    rows = []
    for entry in dicts:
        method = entry.get("method", "lasp2")
        world = entry.get("world", 1)
        sp = entry.get("chunks", world)
        try:
            params = costmodel.CostParams(
                world_size=world, sp_size=sp, batch=entry.get("batch", 1),
                heads=entry.get("heads", 1), dim=entry.get("dim", 8),
                iterations=entry.get("iterations", 1),
                element_bytes=entry.get("element_bytes", 8))
            steps = costmodel.comm_steps_per_iteration(method, params.world_size)
            per_step = costmodel.traffic_per_step(params)
            count = costmodel.state_param_count(params.batch, params.heads, params.dim)
            total = costmodel.total_traffic(method, params)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        rows.append([method, params.world_size, params.sp_size, params.batch,
                     params.heads, params.dim, params.element_bytes,
                     params.iterations, steps, per_step, count, total])
    _write_csv(args.out, COST_COLUMNS, rows)
    return 0


# ---- argument parsing ------------------------------------------------------------

def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--method", choices=METHODS, help="attention path to run")
    parser.add_argument("--seq-len", dest="seq_len", type=int, metavar="N",
                        help="sequence length (default 64)")
    parser.add_argument("--chunks", type=int, metavar="T",
                        help="chunk count; must divide seq-len (default 4)")
    parser.add_argument("--world", type=int, metavar="W",
                        help="rank count; multiple of chunks (default: chunks)")
    parser.add_argument("--dim", type=int, metavar="D", help="head dimension (default 8)")
    parser.add_argument("--heads", type=int, metavar="H", help="heads (default 1)")
    parser.add_argument("--batch", type=int, metavar="B", help="batch (default 1)")
    parser.add_argument("--masked", choices=["true", "false"],
                        help="causal masking (default true)")
    parser.add_argument("--pattern", metavar="STR",
                        help="layer pattern over L/N, lasp2h only (spaces ignored)")
    parser.add_argument("--precision", choices=sorted(PRECISIONS),
                        help="element type (default f64)")
    parser.add_argument("--seed", type=int, help="data seed (default 0)")
    parser.add_argument("--latency-per-launch", dest="latency_per_launch", type=float,
                        metavar="COST", help="simulated fixed cost per comm step")
    parser.add_argument("--latency-per-byte", dest="latency_per_byte", type=float,
                        metavar="COST", help="simulated cost per transferred byte")
    parser.add_argument("--config", metavar="FILE",
                        help="key = value defaults; explicit flags override")
    parser.add_argument("--grid", metavar="FILE",
                        help="key = comma,separated,values; expanded as a product")
    parser.add_argument("--out", metavar="PATH", help="write the report/table here")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="laspsim",
        description="Sequence-parallel linear attention on a simulated multi-rank "
                    "runtime, with serial oracles and communication accounting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_verify = sub.add_parser(
        "verify", help="run correctness checks; JSON report with --out")
    _add_run_flags(p_verify)
    p_verify.add_argument("--corrupt-gradient", dest="corrupt_gradient",
                          action="store_true",
                          help="test hook: perturb a computed gradient so the "
                               "failure path is exercised")
    p_verify.set_defaults(func=cmd_verify)

    p_bench = sub.add_parser(
        "bench", help="time one iteration per config; CSV to --out or stdout")
    _add_run_flags(p_bench)
    p_bench.set_defaults(func=cmd_bench)

    p_cost = sub.add_parser(
        "costmodel", help="closed-form step/traffic table; CSV to --out or stdout")
    p_cost.add_argument("--method", choices=costmodel.METHODS)
    p_cost.add_argument("--world", type=int, metavar="W")
    p_cost.add_argument("--chunks", type=int, metavar="T")
    p_cost.add_argument("--batch", type=int, metavar="B")
    p_cost.add_argument("--heads", type=int, metavar="H")
    p_cost.add_argument("--dim", type=int, metavar="D")
    p_cost.add_argument("--element-bytes", dest="element_bytes", type=int,
                        metavar="BYTES")
    p_cost.add_argument("--iterations", type=int, metavar="I")
    p_cost.add_argument("--config", metavar="FILE")
    p_cost.add_argument("--grid", metavar="FILE")
    p_cost.add_argument("--out", metavar="PATH")
    p_cost.set_defaults(func=cmd_costmodel)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
