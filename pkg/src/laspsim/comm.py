"""Simulated multi-rank distributed runtime with exact communication accounting.

One OS thread per rank. Payloads are snapshotted (copied and frozen) at the
hand-off, so ranks never share mutable memory; every primitive updates a
per-rank ledger of sends, receives, collective launches, and bytes moved.

A simulated clock gives schedule-sensitive timing without a real network:
receiving costs the receiver `latency_per_launch + bytes * latency_per_byte`
measured from the sender's clock at the send, and a collective completes for
everyone at the latest participant's issue clock plus the same cost on the
per-rank contribution. Compute time is deliberately not modeled; only
communication moves the clock.

Blocking primitives use a bounded wait: instead of hanging, a starved rank
raises a diagnosis naming the primitive and the ranks it is waiting for.
"""
from __future__ import annotations

import threading
import time
from collections import deque
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

_WAIT_TICK = 0.05


class CommError(Exception):
    """Base class for runtime communication failures."""


class DeadlockError(CommError):
    """A rank blocked past the configured timeout."""


class CollectiveError(CommError):
    """Participants disagreed about a collective's payload shape or dtype."""


class WorldAbortedError(CommError):
    """Another rank failed first; this rank was unblocked to die quietly."""


class TeardownError(CommError):
    """Messages were still queued when every rank had returned."""


@dataclass(frozen=True)
class WorldConfig:
    """Static description of one simulated world.

    world_size ranks are partitioned into contiguous sequence-parallel groups
    of sp_size; ranks at the same position across groups are data-parallel
    peers. element_bytes pins the payload precision (8 for float64, 4 for
    float32) and is enforced against every payload's dtype.
    """

    world_size: int
    sp_size: int | None = None
    element_bytes: int = 8
    latency_per_launch: float = 10.0
    latency_per_byte: float = 1.0 / 1024.0
    deadlock_timeout: float = 5.0

    def __post_init__(self) -> None:
        if self.sp_size is None:
            object.__setattr__(self, "sp_size", self.world_size)
        if self.world_size < 1:
            raise ValueError(f"world_size must be >= 1, got {self.world_size}")
        if self.sp_size < 1:
            raise ValueError(f"sp_size must be >= 1, got {self.sp_size}")
        if self.world_size % self.sp_size != 0:
            raise ValueError(
                f"sp_size {self.sp_size} must divide world_size {self.world_size}")
        if self.element_bytes not in (4, 8):
            raise ValueError(f"element_bytes must be 4 or 8, got {self.element_bytes}")
        if self.latency_per_launch < 0 or self.latency_per_byte < 0:
            raise ValueError("latency parameters must be non-negative")
        if self.deadlock_timeout <= 0:
            raise ValueError("deadlock_timeout must be positive")

    @property
    def dp_size(self) -> int:
        return self.world_size // self.sp_size


@dataclass
class CommStats:
    """Ledger of communication work. One step = one matched P2P pair or one
    collective launch; bytes count each rank's contributed payload."""

    p2p_sends: int = 0
    p2p_recvs: int = 0
    allgather_launches: int = 0
    bytes_sent: int = 0
    communication_steps: int = 0
    bytes_by_primitive: dict[str, int] = field(default_factory=dict)

    def _account(self, primitive: str, nbytes: int) -> None:
        self.bytes_sent += nbytes
        self.bytes_by_primitive[primitive] = (
            self.bytes_by_primitive.get(primitive, 0) + nbytes)


@dataclass(frozen=True)
class Envelope:
    """One in-flight point-to-point message."""

    src_rank: int
    dst_rank: int
    payload: np.ndarray
    tag: str
    sent_clock: float

    def __post_init__(self) -> None:
        if self.src_rank == self.dst_rank:
            raise ValueError(f"self-send on rank {self.src_rank}")


@dataclass(frozen=True)
class TraceEvent:
    """One entry of the global execution trace, ordered by seq."""

    seq: int
    rank: int
    clock: float
    kind: str
    detail: str = ""


@dataclass(frozen=True)
class GroupInfo:
    """A rank's placement in the DPxSP grid."""

    dp_peers: tuple[int, ...]
    sp_peers: tuple[int, ...]
    sp_position: int


def process_groups(cfg: WorldConfig) -> dict[int, GroupInfo]:
    """Rank -> placement mapping: contiguous SP groups, strided DP peers.

    Ranks [g*T, (g+1)*T) form SP group g; ranks sharing a position within
    their SP group are DP peers.
    """
    t = cfg.sp_size
    out = {}
    for rank in range(cfg.world_size):
        g, pos = divmod(rank, t)
        out[rank] = GroupInfo(
            dp_peers=tuple(gg * t + pos for gg in range(cfg.dp_size)),
            sp_peers=tuple(range(g * t, (g + 1) * t)),
            sp_position=pos,
        )
    return out


class _GatherGen:
    """State of one all_gather call generation within a group."""

    __slots__ = ("shape", "dtype", "contributions", "result",
                 "completion_clock", "complete", "error")

    def __init__(self) -> None:
        self.shape = None
        self.dtype = None
        self.contributions: dict[int, tuple[np.ndarray, float]] = {}
        self.result: list[np.ndarray] | None = None
        self.completion_clock = 0.0
        self.complete = False
        self.error: CollectiveError | None = None


class _BarrierGen:
    __slots__ = ("arrived", "completion_clock", "done")

    def __init__(self) -> None:
        self.arrived: dict[int, float] = {}
        self.completion_clock = 0.0
        self.done = False


class _Group:
    __slots__ = ("index", "ranks", "gather_gens", "barrier_gens")

    def __init__(self, index: int, ranks: tuple[int, ...]) -> None:
        self.index = index
        self.ranks = ranks
        self.gather_gens: dict[int, _GatherGen] = {}
        self.barrier_gens: dict[int, _BarrierGen] = {}


class _World:
    """Shared runtime state; all mutation happens under one condition lock."""

    def __init__(self, cfg: WorldConfig) -> None:
        self.cfg = cfg
        self.lock = threading.Lock()
        self.cond = threading.Condition(self.lock)
        self.queues: dict[tuple[int, int], deque[Envelope]] = {}
        self.trace: list[TraceEvent] = []
        self.abort_error: BaseException | None = None
        self.collective_launches = 0
        t = cfg.sp_size
        self.groups = [
            _Group(g, tuple(range(g * t, (g + 1) * t))) for g in range(cfg.dp_size)
        ]

    def _abort_locked(self, err: BaseException) -> None:
        if self.abort_error is None:
            self.abort_error = err
        self.cond.notify_all()

    def _record_locked(self, rank: int, clock: float, kind: str, detail: str) -> None:
        self.trace.append(TraceEvent(len(self.trace), rank, clock, kind, detail))


class PendingGather:
    """Handle for an issued all_gather; wait() blocks until every SP peer
    has contributed and returns the rank-ordered contribution list."""

    def __init__(self, ctx: "RankContext", group: _Group, call_index: int, tag: str) -> None:
        self._ctx = ctx
        self._group = group
        self._call_index = call_index
        self._tag = tag
        self._result: list[np.ndarray] | None = None

    def wait(self) -> list[np.ndarray]:
        if self._result is not None:
            return list(self._result)
        ctx = self._ctx
        gen = self._group.gather_gens[self._call_index]
        with ctx.world.cond:
            ctx._wait_locked(
                lambda: gen.complete or gen.error is not None,
                lambda: (f"all_gather call {self._call_index} stalled: contributions from "
                         f"ranks {sorted(gen.contributions)}, group {self._group.ranks}"))
            if gen.error is not None:
                raise CollectiveError(*gen.error.args)
            ctx.clock = max(ctx.clock, gen.completion_clock)
            ctx.world._record_locked(ctx.rank, ctx.clock, "all_gather_complete",
                                     f"call={self._call_index} tag={self._tag}")
            self._result = gen.result
        return list(self._result)


class RankContext:
    """One rank's handle on the world; every primitive is a method here."""

    def __init__(self, world: _World, rank: int) -> None:
        self.world = world
        self.rank = rank
        self.stats = CommStats()
        self.clock = 0.0
        self._group = world.groups[rank // world.cfg.sp_size]
        self._gather_calls = 0
        self._barrier_calls = 0

    @property
    def config(self) -> WorldConfig:
        return self.world.cfg

    @property
    def world_size(self) -> int:
        return self.world.cfg.world_size

    @property
    def sp_peers(self) -> tuple[int, ...]:
        return self._group.ranks

    @property
    def sp_position(self) -> int:
        return self.rank - self._group.ranks[0]

    @property
    def sp_size(self) -> int:
        return len(self._group.ranks)

    @property
    def dp_peers(self) -> tuple[int, ...]:
        t = self.world.cfg.sp_size
        return tuple(g * t + self.sp_position for g in range(self.world.cfg.dp_size))

    # ---- internal helpers -------------------------------------------------

    def _check_payload(self, payload: np.ndarray) -> np.ndarray:
        arr = np.asarray(payload)
        eb = self.world.cfg.element_bytes
        if arr.dtype.itemsize != eb:
            raise ValueError(
                f"payload dtype {arr.dtype} ({arr.dtype.itemsize}-byte) does not match "
                f"the world's {eb}-byte elements")
        return arr

    def _snapshot(self, arr: np.ndarray) -> np.ndarray:
        snap = arr.copy()
        snap.setflags(write=False)
        return snap

    def _wait_locked(self, cond_fn: Callable[[], bool],
                     describe: Callable[[], str]) -> None:
        """Wait under the world lock until cond_fn holds, the world aborts,
        or the deadlock timeout trips."""
        deadline = time.monotonic() + self.world.cfg.deadlock_timeout
        while True:
            if self.world.abort_error is not None:
                raise WorldAbortedError(
                    f"rank {self.rank}: aborted by {self.world.abort_error!r}")
            if cond_fn():
                return
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                err = DeadlockError(f"rank {self.rank}: {describe()}")
                self.world._abort_locked(err)
                raise err
            self.world.cond.wait(min(_WAIT_TICK, remaining))

    # ---- primitives -------------------------------------------------------

    def send(self, dst: int, payload: np.ndarray, tag: str = "") -> None:
        """Deposit a snapshot for dst. Non-blocking; the matched pair is
        accounted as one communication step on the sender's ledger."""
        if not 0 <= dst < self.world_size:
            raise ValueError(f"destination {dst} outside world of {self.world_size}")
        arr = self._check_payload(payload)
        snap = self._snapshot(arr)
        env = Envelope(self.rank, dst, snap, tag, self.clock)
        with self.world.cond:
            if self.world.abort_error is not None:
                raise WorldAbortedError(
                    f"rank {self.rank}: aborted by {self.world.abort_error!r}")
            # Recorded before the deposit so a receiver's events always trail it.
            self.world._record_locked(self.rank, self.clock, "send",
                                      f"dst={dst} tag={tag} bytes={snap.nbytes}")
            self.stats.p2p_sends += 1
            self.stats.communication_steps += 1
            self.stats._account("send", snap.nbytes)
            self.world.queues.setdefault((self.rank, dst), deque()).append(env)
            self.world.cond.notify_all()

    def recv(self, src: int, tag: str = "") -> np.ndarray:
        """Block for the next message from src (FIFO per channel; the tag is
        an accounting label, not a filter). Returns the frozen snapshot."""
        if not 0 <= src < self.world_size:
            raise ValueError(f"source {src} outside world of {self.world_size}")
        if src == self.rank:
            raise ValueError(f"rank {self.rank} cannot receive from itself")
        key = (src, self.rank)
        with self.world.cond:
            queue = self.world.queues.setdefault(key, deque())
            self._wait_locked(lambda: len(queue) > 0,
                              lambda: f"recv from rank {src} found no matching send")
            env = queue.popleft()
            cfg = self.world.cfg
            arrival = (env.sent_clock + cfg.latency_per_launch
                       + env.payload.nbytes * cfg.latency_per_byte)
            self.clock = max(self.clock, arrival)
            self.stats.p2p_recvs += 1
            self.world._record_locked(self.rank, self.clock, "recv",
                                      f"src={src} tag={tag} bytes={env.payload.nbytes}")
            return env.payload

    def all_gather_async(self, payload: np.ndarray, tag: str = "") -> PendingGather:
        """Issue a non-blocking all_gather over this rank's SP group.

        The n-th call on each group member joins the same collective; the
        first contribution pins shape and dtype for the generation. Returns a
        handle whose wait() yields the rank-ordered list of contributions.
        """
        arr = self._check_payload(payload)
        with self.world.cond:
            if self.world.abort_error is not None:
                raise WorldAbortedError(
                    f"rank {self.rank}: aborted by {self.world.abort_error!r}")
            call_index = self._gather_calls
            self._gather_calls += 1
            gen = self._group.gather_gens.setdefault(call_index, _GatherGen())
            if gen.error is not None:
                raise CollectiveError(*gen.error.args)
            if gen.shape is None:
                gen.shape, gen.dtype = arr.shape, arr.dtype
            elif arr.shape != gen.shape or arr.dtype != gen.dtype:
                gen.error = CollectiveError(
                    f"all_gather call {call_index}: rank {self.rank} contributed "
                    f"{arr.shape} {arr.dtype}, generation pinned to {gen.shape} {gen.dtype}")
                self.world.cond.notify_all()
                raise gen.error
            snap = self._snapshot(arr)
            self.world._record_locked(self.rank, self.clock, "all_gather_issue",
                                      f"call={call_index} tag={tag} bytes={snap.nbytes}")
            self.stats.allgather_launches += 1
            self.stats.communication_steps += 1
            self.stats._account("all_gather", snap.nbytes)
            gen.contributions[self.rank] = (snap, self.clock)
            if len(gen.contributions) == len(self._group.ranks):
                gen.result = [gen.contributions[r][0] for r in self._group.ranks]
                cfg = self.world.cfg
                latest = max(c for (_, c) in gen.contributions.values())
                gen.completion_clock = (latest + cfg.latency_per_launch
                                        + snap.nbytes * cfg.latency_per_byte)
                gen.complete = True
                self.world.collective_launches += 1
                self.world.cond.notify_all()
        return PendingGather(self, self._group, call_index, tag)

    def all_gather(self, payload: np.ndarray, tag: str = "") -> list[np.ndarray]:
        """Blocking all_gather: issue and immediately wait."""
        return self.all_gather_async(payload, tag).wait()

    def barrier(self) -> None:
        """Synchronize the SP group; clocks align, no bytes or steps accrue."""
        with self.world.cond:
            call_index = self._barrier_calls
            self._barrier_calls += 1
            bar = self._group.barrier_gens.setdefault(call_index, _BarrierGen())
            bar.arrived[self.rank] = self.clock
            self.world._record_locked(self.rank, self.clock, "barrier",
                                      f"call={call_index}")
            if len(bar.arrived) == len(self._group.ranks):
                bar.completion_clock = max(bar.arrived.values())
                bar.done = True
                self.world.cond.notify_all()
            self._wait_locked(
                lambda: bar.done,
                lambda: (f"barrier call {call_index} stalled: arrived "
                         f"{sorted(bar.arrived)}, group {self._group.ranks}"))
            self.clock = max(self.clock, bar.completion_clock)

    def mark(self, kind: str, detail: str = "") -> None:
        """Drop a program-level event into the trace (no accounting)."""
        with self.world.cond:
            self.world._record_locked(self.rank, self.clock, kind, detail)


@dataclass
class WorldRun:
    """Everything a completed world leaves behind."""

    config: WorldConfig
    results: list[Any]
    rank_stats: list[CommStats]
    stats: CommStats
    trace: list[TraceEvent]
    simulated_time: float


def _merge_stats(rank_stats: Sequence[CommStats], collective_launches: int) -> CommStats:
    merged = CommStats()
    for st in rank_stats:
        merged.p2p_sends += st.p2p_sends
        merged.p2p_recvs += st.p2p_recvs
        merged.bytes_sent += st.bytes_sent
        for key, val in st.bytes_by_primitive.items():
            merged.bytes_by_primitive[key] = merged.bytes_by_primitive.get(key, 0) + val
    # A collective is one step for the whole group, not one per participant.
    merged.allgather_launches = collective_launches
    merged.communication_steps = merged.p2p_sends + collective_launches
    return merged


def world_spawn(cfg: WorldConfig, program: Callable[..., Any],
                rank_args: Sequence[tuple] | None = None) -> WorldRun:
    """Run program(ctx, *rank_args[rank]) on one thread per rank.

    Args:
        cfg: world layout and latency model.
        program: per-rank procedure; its return value lands in results[rank].
        rank_args: optional per-rank positional arguments.

    Returns:
        WorldRun with per-rank results, per-rank and merged ledgers, the
        execution trace, and the simulated makespan (max final rank clock).

    Raises:
        The first failing rank's exception (rank order, original ranks
        preferred over cascade aborts), or TeardownError when a send was
        never received.
    """
    if rank_args is not None and len(rank_args) != cfg.world_size:
        raise ValueError(f"rank_args has {len(rank_args)} entries for "
                         f"{cfg.world_size} ranks")
    world = _World(cfg)
    ctxs = [RankContext(world, r) for r in range(cfg.world_size)]
    results: list[Any] = [None] * cfg.world_size
    errors: list[BaseException | None] = [None] * cfg.world_size

    def runner(ctx: RankContext) -> None:
        args = rank_args[ctx.rank] if rank_args is not None else ()
        try:
            results[ctx.rank] = program(ctx, *args)
        except BaseException as exc:
            errors[ctx.rank] = exc
            with world.cond:
                world._abort_locked(exc)

    threads = [threading.Thread(target=runner, args=(ctx,), name=f"rank{ctx.rank}")
               for ctx in ctxs]
    for th in threads:
        th.start()
    for th in threads:
        th.join()

    primary = None
    for err in errors:
        if err is not None and not isinstance(err, WorldAbortedError):
            primary = err
            break
    if primary is None:
        for err in errors:
            if err is not None:
                primary = err
                break
    if primary is not None:
        raise primary

    leftovers = [(src, dst, len(q)) for (src, dst), q in world.queues.items() if q]
    if leftovers:
        raise TeardownError(f"undelivered messages at teardown: {sorted(leftovers)}")

    return WorldRun(
        config=cfg,
        results=results,
        rank_stats=[ctx.stats for ctx in ctxs],
        stats=_merge_stats([ctx.stats for ctx in ctxs], world.collective_launches),
        trace=list(world.trace),
        simulated_time=max(ctx.clock for ctx in ctxs),
    )
