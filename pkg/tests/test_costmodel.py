"""Closed-form step and traffic predictions, checked against actual runs."""

import numpy as np
import pytest

from laspsim.costmodel import (METHODS, CostParams, comm_steps_per_iteration,
                               state_param_count, total_traffic,
                               traffic_per_step)
from laspsim.datagen import gen_slots, qkv_slots
from laspsim.lasp1 import lasp1_iteration
from laspsim.lasp2 import ChunkedSequence, lasp2_iteration


def test_methods_tuple():
    assert METHODS == ("lasp1", "lasp2")


def test_steps_per_iteration_pinned():
    assert comm_steps_per_iteration("lasp1", 64) == 126
    assert comm_steps_per_iteration("lasp2", 64) == 2
    assert comm_steps_per_iteration("lasp1", 1) == 0
    assert comm_steps_per_iteration("lasp2", 1) == 2


def test_step_ratio_grows_with_world():
    for world in (2, 4, 8, 64):
        ratio = (comm_steps_per_iteration("lasp1", world)
                 / comm_steps_per_iteration("lasp2", world))
        assert ratio == world - 1


def test_unknown_method_rejected():
    with pytest.raises(ValueError):
        comm_steps_per_iteration("ring2", 4)


def test_state_param_count_pinned():
    assert state_param_count(16, 16, 2048) == 1_073_741_824
    assert state_param_count(16, 32, 4096) == 8_589_934_592
    assert state_param_count(1, 1, 4) == 16


def test_traffic_per_step_pinned_two_byte_mode():
    small = CostParams(world_size=64, sp_size=64, batch=16, heads=16, dim=2048,
                       iterations=1, element_bytes=2)
    assert traffic_per_step(small) == 2_147_483_648
    assert abs(traffic_per_step(small) / 1e9 - 2.14) <= 0.015
    large = CostParams(world_size=64, sp_size=64, batch=16, heads=32, dim=4096,
                       iterations=1, element_bytes=2)
    assert traffic_per_step(large) == 17_179_869_184
    assert abs(traffic_per_step(large) / 1e9 - 17.18) <= 0.015


def test_total_traffic_pinned():
    p = CostParams(world_size=8, sp_size=8, batch=2, heads=4, dim=8,
                   iterations=10, element_bytes=8)
    assert total_traffic("lasp2", p) == 81_920
    assert total_traffic("lasp1", p) == 10 * 14 * 2 * 4 * 64 * 8


def test_cost_params_validation():
    with pytest.raises(ValueError):
        CostParams(world_size=8, sp_size=3, batch=1, heads=1, dim=4,
                   iterations=1, element_bytes=8)
    with pytest.raises(ValueError):
        CostParams(world_size=0, sp_size=1, batch=1, heads=1, dim=4,
                   iterations=1, element_bytes=8)
    with pytest.raises(ValueError):
        CostParams(world_size=2, sp_size=2, batch=1, heads=1, dim=4,
                   iterations=0, element_bytes=8)


@pytest.mark.parametrize("world", [2, 4])
def test_predictions_match_actual_runs(world):
    batch, heads, n, d = 2, 3, 8 * world, 4
    q, k, v = qkv_slots(0, batch, heads, n, d)
    d_out = gen_slots(0, batch, heads, n, d, "do")
    seq = ChunkedSequence(q, k, v, world)
    p = CostParams(world_size=world, sp_size=world, batch=batch, heads=heads,
                   dim=d, iterations=1, element_bytes=8)

    ring = lasp1_iteration(seq, d_out, True)
    assert ring.run.stats.communication_steps == comm_steps_per_iteration("lasp1", world)
    # every ring hop carries one state, so world wire bytes match the model
    assert ring.run.stats.bytes_sent == total_traffic("lasp1", p)

    gather = lasp2_iteration(seq, d_out, True)
    assert gather.run.stats.communication_steps == comm_steps_per_iteration("lasp2", world)
    # the collective charges each rank its contribution: per-rank bytes match
    for rank in range(world):
        assert gather.run.rank_stats[rank].bytes_sent == total_traffic("lasp2", p)
