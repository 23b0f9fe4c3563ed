"""Ring-transport baseline: bit-identity to the all_gather method, step counts."""

import numpy as np
import pytest

from laspsim import comm
from laspsim.datagen import gen_slots, qkv_slots
from laspsim.lasp1 import (lasp1_backward_masked, lasp1_backward_nomask,
                           lasp1_forward_masked, lasp1_forward_nomask,
                           lasp1_iteration)
from laspsim.lasp2 import (ChunkedSequence, apply_state, apply_state_t,
                           chunk_state, chunk_state_grad, lasp2_iteration)
from laspsim.numerics import prefix_sum_states, suffix_sum_states, sum_states
from laspsim.oracle import finite_diff_grad, relative_error

FD_TOL = 1e-6


def _inputs(n, d, batch=1, heads=1, seed=0):
    q, k, v = qkv_slots(seed, batch, heads, n, d)
    d_out = gen_slots(seed, batch, heads, n, d, "do")
    return q, k, v, d_out


def _cat(parts):
    return np.concatenate(parts, axis=2)


def _cat_grads(grads):
    return (_cat([g.dq for g in grads]), _cat([g.dk for g in grads]),
            _cat([g.dv for g in grads]))


def _exclusive_prefix_out(seq):
    # literal unmasked ring semantics: O_t = Q_t * (sum of states before t)
    states = [chunk_state(*seq.chunk(t)[1:]) for t in range(seq.chunks)]
    outs = []
    for t in range(seq.chunks):
        qc = seq.chunk(t)[0]
        if t == 0:
            outs.append(np.zeros_like(qc))
        else:
            outs.append(apply_state(qc, prefix_sum_states(states, t)))
    return outs


def _exclusive_prefix_grads(seq, d_out_chunks):
    states = [chunk_state(*seq.chunk(t)[1:]) for t in range(seq.chunks)]
    g = [chunk_state_grad(seq.chunk(t)[0], d_out_chunks[t])
         for t in range(seq.chunks)]
    out = []
    for t in range(seq.chunks):
        qc, kc, vc = seq.chunk(t)
        dq = (np.zeros_like(qc) if t == 0
              else apply_state_t(d_out_chunks[t], prefix_sum_states(states, t)))
        if t == seq.chunks - 1:
            dk, dv = np.zeros_like(kc), np.zeros_like(vc)
        else:
            suffix = suffix_sum_states(g, t + 1)
            dk = apply_state_t(vc, suffix)
            dv = apply_state(kc, suffix)
        out.append((dq, dk, dv))
    return out


@pytest.mark.parametrize("n,d,t", [(8, 4, 2), (8, 8, 4), (16, 4, 4), (16, 8, 8)])
def test_masked_bitwise_match_with_allgather_method(n, d, t):
    q, k, v, d_out = _inputs(n, d)
    seq = ChunkedSequence(q, k, v, t)
    ring = lasp1_iteration(seq, d_out, True)
    gather = lasp2_iteration(seq, d_out, True)
    assert np.array_equal(_cat(ring.outputs), _cat(gather.outputs))
    for a, b in zip(_cat_grads(ring.grads), _cat_grads(gather.grads)):
        assert np.array_equal(a, b)


@pytest.mark.parametrize("world", [2, 4])
def test_ring_step_counts(world):
    q, k, v, d_out = _inputs(16, 4)
    seq = ChunkedSequence(q, k, v, world)
    fwd = lasp1_forward_masked(seq)
    assert fwd.run.stats.p2p_sends == world - 1
    assert fwd.run.stats.allgather_launches == 0
    it = lasp1_iteration(seq, d_out, True)
    assert it.run.stats.p2p_sends == 2 * (world - 1)
    assert it.run.stats.allgather_launches == 0
    assert it.run.stats.communication_steps == 2 * (world - 1)


def test_single_chunk_needs_no_comm():
    q, k, v, d_out = _inputs(8, 4)
    it = lasp1_iteration(ChunkedSequence(q, k, v, 1), d_out, True)
    assert it.run.stats.communication_steps == 0
    assert it.run.stats.bytes_sent == 0


def test_ring_state_bytes_per_hop():
    q, k, v, _ = _inputs(16, 4, batch=2, heads=3)
    fwd = lasp1_forward_masked(ChunkedSequence(q, k, v, 4))
    # each hop carries one packed state: B*H*d*d elements
    assert fwd.run.stats.bytes_sent == 3 * (2 * 3 * 4 * 4 * 8)


def test_unmasked_forward_literal_exclusive_prefix():
    q, k, v, _ = _inputs(16, 4, seed=2)
    seq = ChunkedSequence(q, k, v, 4)
    fwd = lasp1_forward_nomask(seq)
    for got, want in zip(fwd.outputs, _exclusive_prefix_out(seq)):
        assert np.array_equal(got, want)
    assert np.array_equal(fwd.outputs[0], np.zeros_like(seq.chunk(0)[0]))


def test_unmasked_backward_literal_exclusive_prefix():
    q, k, v, d_out = _inputs(16, 4, seed=3)
    seq = ChunkedSequence(q, k, v, 4)
    d_chunks = [np.ascontiguousarray(d_out[:, :, i:i + 4]) for i in (0, 4, 8, 12)]
    fwd = lasp1_forward_nomask(seq)
    bwd = lasp1_backward_nomask(seq, d_out, fwd.caches)
    want = _exclusive_prefix_grads(seq, d_chunks)
    for got, (dq, dk, dv) in zip(bwd.grads, want):
        assert np.array_equal(got.dq, dq)
        assert np.array_equal(got.dk, dk)
        assert np.array_equal(got.dv, dv)
    last = bwd.grads[-1]
    assert np.array_equal(last.dk, np.zeros_like(last.dk))
    assert np.array_equal(last.dv, np.zeros_like(last.dv))


def test_unmasked_backward_matches_finite_difference():
    q, k, v, d_out = _inputs(8, 4, seed=4)
    seq = ChunkedSequence(q, k, v, 4)
    fwd = lasp1_forward_nomask(seq)
    bwd = lasp1_backward_nomask(seq, d_out, fwd.caches)
    dq, dk, dv = _cat_grads(bwd.grads)

    def loss_for(which):
        def loss(x):
            parts = {"q": q, "k": k, "v": v}
            parts[which] = x
            inner = ChunkedSequence(parts["q"], parts["k"], parts["v"], 4)
            return float(np.sum(_cat(_exclusive_prefix_out(inner)) * d_out))
        return loss

    for which, got in (("q", dq), ("k", dk), ("v", dv)):
        fd = finite_diff_grad(loss_for(which), dict(q=q, k=k, v=v)[which])
        assert relative_error(got, fd) <= FD_TOL


def test_final_ring_state_is_full_sum():
    q, k, v, _ = _inputs(16, 4, seed=5)
    seq = ChunkedSequence(q, k, v, 4)
    states = [chunk_state(*seq.chunk(t)[1:]) for t in range(4)]
    for fwd in (lasp1_forward_masked(seq), lasp1_forward_nomask(seq)):
        assert np.array_equal(fwd.caches[-1].state_through, sum_states(states))


def test_masked_zero_upstream_gives_zero_grads():
    q, k, v, d_out = _inputs(8, 4)
    seq = ChunkedSequence(q, k, v, 4)
    it = lasp1_iteration(seq, np.zeros_like(d_out), True)
    for g in _cat_grads(it.grads):
        assert np.array_equal(g, np.zeros_like(g))


def test_ring_order_in_trace():
    q, k, v, _ = _inputs(8, 4)
    fwd = lasp1_forward_masked(ChunkedSequence(q, k, v, 4))
    sends = {ev.rank: ev.seq for ev in fwd.run.trace if ev.kind == "send"}
    inters = {ev.rank: ev.seq for ev in fwd.run.trace if ev.kind == "inter_start"}
    assert sorted(sends) == [0, 1, 2]
    assert sorted(inters) == [1, 2, 3]
    for rank in (1, 2, 3):
        # a rank folds its prefix only after the previous rank sent it
        assert inters[rank] > sends[rank - 1]


def test_backward_rejects_wrong_caches():
    q, k, v, d_out = _inputs(8, 4)
    seq = ChunkedSequence(q, k, v, 2)
    caches = lasp1_forward_nomask(seq).caches
    with pytest.raises(ValueError):
        lasp1_backward_masked(seq, d_out, caches)
    with pytest.raises(ValueError):
        lasp1_backward_nomask(seq, d_out, caches[:1])
