"""Simulated multi-rank runtime: accounting, clocks, error surfacing."""

import time

import numpy as np
import pytest

from laspsim.comm import (CollectiveError, DeadlockError, TeardownError,
                          WorldConfig, process_groups, world_spawn)

# default cost model: 10.0 per launch, 1/1024 per byte
MSG_128B_TIME = 10.0 + 128.0 / 1024.0


def test_singleton_world_runs_without_comm():
    run = world_spawn(WorldConfig(1), lambda ctx: ctx.rank * 10)
    assert run.results == [0]
    assert run.stats.p2p_sends == 0
    assert run.stats.allgather_launches == 0
    assert run.stats.bytes_sent == 0
    assert run.stats.communication_steps == 0
    assert run.simulated_time == 0.0


def test_two_rank_exchange_pinned_accounting():
    def program(ctx):
        peer = 1 - ctx.rank
        ctx.send(peer, np.full((4, 4), float(ctx.rank)))
        return ctx.recv(peer)

    run = world_spawn(WorldConfig(2), program)
    assert np.array_equal(run.results[0], np.ones((4, 4)))
    assert np.array_equal(run.results[1], np.zeros((4, 4)))
    assert run.stats.p2p_sends == 2
    assert run.stats.p2p_recvs == 2
    assert run.stats.bytes_sent == 256
    assert run.stats.communication_steps == 2
    assert run.stats.bytes_by_primitive == {"send": 256}
    # receiver clock = send clock + 10 + 128/1024
    assert run.simulated_time == MSG_128B_TIME


def test_all_gather_rank_order_and_isolation_of_copies():
    def program(ctx):
        parts = ctx.all_gather(np.eye(2) * ctx.rank)
        return parts

    run = world_spawn(WorldConfig(4), program)
    for rank in range(4):
        parts = run.results[rank]
        assert len(parts) == 4
        for src, part in enumerate(parts):
            assert np.array_equal(part, np.eye(2) * src)
            assert not part.flags.writeable


def test_all_gather_pinned_bytes_and_single_launch():
    def program(ctx):
        ctx.all_gather(np.ones((16, 16)))

    run = world_spawn(WorldConfig(8), program)
    for rank in range(8):
        assert run.rank_stats[rank].bytes_sent == 2048
        assert run.rank_stats[rank].allgather_launches == 1
    # one collective generation across the group counts once in merged stats
    assert run.stats.allgather_launches == 1
    assert run.stats.bytes_sent == 8 * 2048
    assert run.stats.communication_steps == 1
    # completes at max issue clock + 10 + 2048/1024
    assert run.simulated_time == 12.0


def test_send_snapshot_taken_at_send_time():
    def program(ctx):
        if ctx.rank == 0:
            buf = np.arange(4.0)
            ctx.send(1, buf)
            buf[:] = -1.0
            return None
        got = ctx.recv(0)
        assert not got.flags.writeable
        return got

    run = world_spawn(WorldConfig(2), program)
    assert np.array_equal(run.results[1], np.arange(4.0))


def test_ring_chain_makespan():
    def program(ctx):
        if ctx.rank > 0:
            ctx.recv(ctx.rank - 1)
        if ctx.rank < 3:
            ctx.send(ctx.rank + 1, np.zeros((4, 4)))

    run = world_spawn(WorldConfig(4), program)
    assert run.stats.p2p_sends == 3
    assert run.stats.communication_steps == 3
    assert run.simulated_time == 3 * MSG_128B_TIME


def test_rank_results_and_determinism():
    def program(ctx):
        parts = ctx.all_gather(np.full((2, 2), float(ctx.rank)))
        ctx.barrier()
        return sum(p.sum() for p in parts)

    first = world_spawn(WorldConfig(4), program)
    second = world_spawn(WorldConfig(4), program)
    assert first.results == second.results
    assert first.simulated_time == second.simulated_time
    assert first.stats == second.stats


def test_barrier_costs_nothing():
    def program(ctx):
        ctx.barrier()

    run = world_spawn(WorldConfig(4), program)
    assert run.stats.bytes_sent == 0
    assert run.stats.communication_steps == 0
    assert run.stats.allgather_launches == 0
    assert run.simulated_time == 0.0


def test_process_groups_partition():
    groups = process_groups(WorldConfig(8, sp_size=4))
    assert groups[5].sp_peers == (4, 5, 6, 7)
    assert groups[5].sp_position == 1
    assert groups[5].dp_peers == (1, 5)
    singletons = process_groups(WorldConfig(4, sp_size=1))
    for rank in range(4):
        assert singletons[rank].sp_peers == (rank,)
        assert singletons[rank].dp_peers == (0, 1, 2, 3)


def test_groups_gather_independently():
    def program(ctx):
        parts = ctx.all_gather(np.full((1,), float(ctx.rank)))
        return [float(p[0]) for p in parts]

    run = world_spawn(WorldConfig(4, sp_size=2), program)
    assert run.results[0] == [0.0, 1.0]
    assert run.results[1] == [0.0, 1.0]
    assert run.results[2] == [2.0, 3.0]
    assert run.results[3] == [2.0, 3.0]
    # one launch per group
    assert run.stats.allgather_launches == 2


def test_collective_shape_mismatch_raises():
    def program(ctx):
        if ctx.rank == 1:
            time.sleep(0.05)  # rank 0 pins the generation first
            ctx.all_gather(np.ones((3, 2)))
        else:
            ctx.all_gather(np.ones((2, 2)))

    with pytest.raises(CollectiveError) as err:
        world_spawn(WorldConfig(2), program)
    msg = str(err.value)
    assert "rank 1 contributed (3, 2)" in msg
    assert "pinned to (2, 2)" in msg


def test_recv_without_send_deadlocks():
    def program(ctx):
        if ctx.rank == 1:
            ctx.recv(0)

    with pytest.raises(DeadlockError) as err:
        world_spawn(WorldConfig(2, deadlock_timeout=0.2), program)
    assert str(err.value) == "rank 1: recv from rank 0 found no matching send"


def test_undelivered_message_fails_teardown():
    def program(ctx):
        if ctx.rank == 0:
            ctx.send(1, np.zeros(2))

    with pytest.raises(TeardownError) as err:
        world_spawn(WorldConfig(2), program)
    assert "undelivered messages at teardown" in str(err.value)
    assert "(0, 1, 1)" in str(err.value)


def test_self_send_rejected():
    def program(ctx):
        ctx.send(ctx.rank, np.zeros(2))

    with pytest.raises(ValueError, match="self-send"):
        world_spawn(WorldConfig(2), program)


def test_payload_dtype_must_match_element_bytes():
    def program(ctx):
        ctx.all_gather(np.zeros(2, dtype=np.float32))

    with pytest.raises(ValueError, match="8-byte elements"):
        world_spawn(WorldConfig(2), program)


def test_world_config_validation():
    with pytest.raises(ValueError):
        WorldConfig(6, sp_size=4)
    with pytest.raises(ValueError):
        WorldConfig(0)
    with pytest.raises(ValueError):
        WorldConfig(2, element_bytes=2)
    cfg = WorldConfig(8, sp_size=2)
    assert cfg.dp_size == 4
