"""Serial per-token references: hand examples, gradients, decode agreement."""

import numpy as np
import pytest

from laspsim.datagen import gen_data, qkv_slots
from laspsim.numerics import causal_mask, hadamard_mask, matmul, transpose
from laspsim.oracle import (AttentionInstance, DecodeCache, causal_linear_forward,
                            finite_diff_grad, linear_attn_serial,
                            linear_attn_serial_backward, relative_error,
                            softmax_attn_decode_step, softmax_attn_reference,
                            softmax_attn_reference_backward,
                            softmax_chunk_backward, softmax_chunk_forward,
                            softmax_probs)

FD_TOL = 1e-6


def _qkv(seed, n, d):
    q, k, v = qkv_slots(seed, 1, 1, n, d)
    return q[0, 0], k[0, 0], v[0, 0]


def test_causal_hand_example():
    q = np.array([[1.0], [1.0]])
    k = np.array([[1.0], [2.0]])
    v = np.array([[1.0], [1.0]])
    assert np.array_equal(causal_linear_forward(q, k, v), np.array([[1.0], [3.0]]))


def test_causal_hand_example_d1():
    q = np.array([[1.0], [2.0]])
    k = np.array([[3.0], [4.0]])
    v = np.array([[5.0], [6.0]])
    inst = AttentionInstance(q, k, v, causal=True)
    assert np.array_equal(linear_attn_serial(inst), np.array([[15.0], [78.0]]))


def test_bidirectional_hand_example_d1():
    q = np.array([[1.0], [2.0]])
    k = np.array([[3.0], [4.0]])
    v = np.array([[5.0], [6.0]])
    inst = AttentionInstance(q, k, v, causal=False)
    assert np.array_equal(linear_attn_serial(inst), np.array([[39.0], [78.0]]))


def test_serial_causal_matches_per_token_kernel():
    q, k, v = _qkv(0, 12, 4)
    inst = AttentionInstance(q, k, v, causal=True)
    assert np.array_equal(linear_attn_serial(inst), causal_linear_forward(q, k, v))


def test_bidirectional_is_single_state_product():
    q, k, v = _qkv(1, 10, 4)
    inst = AttentionInstance(q, k, v, causal=False)
    want = matmul(q, matmul(transpose(k), v))
    assert np.array_equal(linear_attn_serial(inst), want)


def test_zero_values_give_zero_output():
    q, k, _ = _qkv(2, 8, 4)
    v = np.zeros_like(q)
    for causal in (True, False):
        out = linear_attn_serial(AttentionInstance(q, k, v, causal=causal))
        assert np.array_equal(out, np.zeros_like(q))


def test_single_token_causal_equals_bidirectional():
    q, k, v = _qkv(3, 1, 6)
    a = linear_attn_serial(AttentionInstance(q, k, v, causal=True))
    b = linear_attn_serial(AttentionInstance(q, k, v, causal=False))
    assert np.array_equal(a, b)


def test_per_token_matches_left_product_form():
    q, k, v = _qkv(4, 16, 8)
    left = matmul(hadamard_mask(matmul(q, transpose(k)), causal_mask(16)), v)
    assert np.max(np.abs(causal_linear_forward(q, k, v) - left)) <= 1e-10


@pytest.mark.parametrize("causal", [True, False])
def test_linear_backward_matches_finite_difference(causal):
    q, k, v = _qkv(5, 6, 3)
    d_out = gen_data(5, 6, 3, tag="do")
    grads = linear_attn_serial_backward(AttentionInstance(q, k, v, causal), d_out)

    def loss_for(which):
        def loss(x):
            parts = {"q": q, "k": k, "v": v}
            parts[which] = x
            inst = AttentionInstance(parts["q"], parts["k"], parts["v"], causal)
            return float(np.sum(linear_attn_serial(inst) * d_out))
        return loss

    for which, got in (("q", grads.dq), ("k", grads.dk), ("v", grads.dv)):
        fd = finite_diff_grad(loss_for(which), dict(q=q, k=k, v=v)[which])
        assert relative_error(got, fd) <= FD_TOL


@pytest.mark.parametrize("causal", [True, False])
def test_softmax_backward_matches_finite_difference(causal):
    q, k, v = _qkv(6, 6, 3)
    d_out = gen_data(6, 6, 3, tag="do")
    grads = softmax_attn_reference_backward(AttentionInstance(q, k, v, causal), d_out)

    def loss_for(which):
        def loss(x):
            parts = {"q": q, "k": k, "v": v}
            parts[which] = x
            inst = AttentionInstance(parts["q"], parts["k"], parts["v"], causal)
            return float(np.sum(softmax_attn_reference(inst) * d_out))
        return loss

    for which, got in (("q", grads.dq), ("k", grads.dk), ("v", grads.dv)):
        fd = finite_diff_grad(loss_for(which), dict(q=q, k=k, v=v)[which])
        assert relative_error(got, fd) <= FD_TOL


def test_softmax_probs_rows_sum_to_one():
    q, k, _ = _qkv(7, 8, 4)
    for causal in (True, False):
        p = softmax_probs(q, k, causal)
        assert np.max(np.abs(p.sum(axis=1) - 1.0)) <= 1e-12
    # causal rows place no mass above the diagonal
    p = softmax_probs(q, k, True)
    assert np.array_equal(np.triu(p, k=1), np.zeros_like(p))


def test_softmax_probs_row_offset_shifts_visibility():
    q, k, _ = _qkv(8, 8, 4)
    full = softmax_probs(q, k, True)
    shifted = softmax_probs(q[4:], k, True, row_offset=4)
    assert np.max(np.abs(shifted - full[4:])) <= 1e-12


def test_softmax_chunked_matches_full():
    q, k, v = _qkv(9, 12, 4)
    full = softmax_chunk_forward(q, k, v, causal=True)
    parts = [softmax_chunk_forward(q[i:i + 4], k, v, True, row_offset=i)
             for i in (0, 4, 8)]
    assert np.max(np.abs(np.concatenate(parts) - full)) <= 1e-12


def test_softmax_zero_keys_causal_prefix_mean():
    q, _, v = _qkv(10, 6, 3)
    k = np.zeros_like(q)
    out = softmax_attn_reference(AttentionInstance(q, k, v, causal=True))
    want = np.stack([v[:i + 1].mean(axis=0) for i in range(6)])
    assert np.max(np.abs(out - want)) <= 1e-12


def test_decode_matches_batch_reference():
    q, k, v = _qkv(11, 10, 4)
    batch = softmax_attn_reference(AttentionInstance(q, k, v, causal=True))
    cache = DecodeCache()
    worst = 0.0
    for s in range(10):
        cache.append(k[s], v[s])
        assert len(cache) == s + 1
        step = softmax_attn_decode_step(cache, q[s:s + 1])
        worst = max(worst, float(np.max(np.abs(step[0] - batch[s]))))
    assert worst <= 1e-12


def test_decode_rejects_empty_cache():
    with pytest.raises(ValueError):
        softmax_attn_decode_step(DecodeCache(), np.ones((1, 4)))


def test_finite_diff_on_closed_form():
    x = gen_data(12, 4, 3)
    fd = finite_diff_grad(lambda a: float(np.sum(a * a)), x)
    assert relative_error(fd, 2.0 * x) <= 1e-9


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda a: 0.0, np.ones(2), h=0.0)


def test_relative_error_floors_denominator_at_one():
    assert relative_error(np.array([1e-13]), np.array([0.0])) == 1e-13
    assert relative_error(np.array([4.0]), np.array([2.0])) == 1.0


def test_instance_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        AttentionInstance(np.ones((4, 2)), np.ones((4, 3)), np.ones((4, 2)))
