import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridloop import tensor as tl
from gradcheck import finite_diff_check, op_gradient_cases


# ---------------------------------------------------------------------------
# forward oracles


def test_matmul_identity():
    i2 = tl.Tensor(np.eye(2))
    m = tl.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(tl.matmul(i2, m).data, m.data)


def test_matmul_hand_case():
    a = tl.Tensor([[1.0, 2.0]])
    b = tl.Tensor([[3.0], [4.0]])
    assert tl.matmul(a, b).item() == 11.0


def test_matmul_vs_nested_loop_oracle(f64, rng):
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(5, 3))
    expected = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                expected[i, j] += a[i, k] * b[k, j]
    got = tl.matmul(tl.Tensor(a), tl.Tensor(b)).data
    assert np.max(np.abs(got - expected)) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(tl.ShapeError) as err:
        tl.matmul(tl.Tensor(np.zeros((2, 3))), tl.Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_softmax_uniform_on_constant_row():
    y = tl.softmax_rows(tl.Tensor([0.0, 0.0, 0.0, 0.0]))
    assert np.allclose(y.data, 0.25)


def test_softmax_vs_direct_exp_sum(f64, rng):
    x = rng.normal(size=(6, 9))
    direct = np.exp(x) / np.exp(x).sum(axis=1, keepdims=True)
    got = tl.softmax_rows(tl.Tensor(x)).data
    assert np.max(np.abs(got - direct)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-30, 30))
def test_softmax_shift_invariance_and_row_sum(row, shift):
    a = tl.softmax_rows(tl.Tensor(np.array(row))).data
    b = tl.softmax_rows(tl.Tensor(np.array(row) + shift)).data
    assert abs(a.sum() - 1.0) < 1e-6
    assert np.max(np.abs(a - b)) < 1e-6


def test_rmsnorm_constant_vector_gives_ones(f64):
    x = tl.Tensor(np.full(8, 3.0))
    gain = tl.Tensor(np.ones(8))
    out = tl.rmsnorm(x, gain, 1e-12)
    assert np.allclose(out.data, 1.0, atol=1e-6)


def test_rmsnorm_zero_vector_stays_zero():
    out = tl.rmsnorm(tl.Tensor(np.zeros(5)), tl.Tensor(np.ones(5)), 1e-6)
    assert np.array_equal(out.data, np.zeros(5))


def test_rmsnorm_output_rms_is_unit(f64, rng):
    x = rng.normal(size=16)
    out = tl.rmsnorm(tl.Tensor(x), tl.Tensor(np.ones(16)), 1e-12).data
    assert abs(np.sqrt((out ** 2).mean()) - 1.0) < 1e-4


def test_silu_zero_and_scalar_oracle(f64, rng):
    assert tl.silu(tl.Tensor([0.0])).data[0] == 0.0
    x = rng.normal(size=32) * 4
    got = tl.silu(tl.Tensor(x)).data
    assert np.max(np.abs(got - x / (1.0 + np.exp(-x)))) < 1e-12


def test_dwconv3x3_identity_kernel_is_identity(rng):
    x = rng.normal(size=(3, 5, 4)).astype(np.float32)
    kernel = np.zeros((3, 3, 3), dtype=np.float32)
    kernel[:, 1, 1] = 1.0
    out = tl.dwconv3x3(tl.Tensor(x), tl.Tensor(kernel), tl.Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_dwconv3x3_ones_counting():
    x = tl.Tensor(np.ones((1, 3, 3)))
    k = tl.Tensor(np.ones((1, 3, 3)))
    out = tl.dwconv3x3(x, k, tl.Tensor(np.zeros(1))).data[0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0


def test_dwconv3x3_vs_nested_loop_oracle(f64, rng):
    c, h, w = 2, 5, 4
    x = rng.normal(size=(c, h, w))
    k = rng.normal(size=(c, 3, 3))
    b = rng.normal(size=c)
    expected = np.zeros((c, h, w))
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for u in range(3):
                    for v in range(3):
                        ii, jj = i + u - 1, j + v - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            acc += k[ch, u, v] * x[ch, ii, jj]
                expected[ch, i, j] = acc + b[ch]
    got = tl.dwconv3x3(tl.Tensor(x), tl.Tensor(k), tl.Tensor(b)).data
    assert np.max(np.abs(got - expected)) < 1e-10


def test_dwconv3x3_kernel_shape_error():
    with pytest.raises(tl.ShapeError):
        tl.dwconv3x3(tl.Tensor(np.zeros((2, 4, 4))), tl.Tensor(np.zeros((3, 3, 3))), tl.Tensor(np.zeros(2)))


def test_cross_entropy_uniform_logits(f64):
    logits = tl.Tensor(np.zeros((4, 11)))
    loss = tl.cross_entropy_mean(logits, np.zeros(4, dtype=int))
    assert abs(loss.item() - np.log(11)) < 1e-12


# ---------------------------------------------------------------------------
# backward contracts


def test_sum_backward_is_ones():
    x = tl.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    tl.backward(tl.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_add_backward_passes_grads_through():
    a = tl.Tensor(np.ones((2, 2)), requires_grad=True)
    b = tl.Tensor(np.ones((2, 2)), requires_grad=True)
    tl.backward(tl.sum_all(tl.add(a, b)))
    assert np.array_equal(a.grad, np.ones((2, 2)))
    assert np.array_equal(b.grad, np.ones((2, 2)))


def test_weight_tied_chain_grad(f64):
    # y = w * (w * x): dy/dw = 2 w x, accumulated over both uses
    w = tl.Tensor([[2.0]], requires_grad=True)
    x = tl.Tensor([[3.0]])
    y = tl.elementwise_mul(w, tl.elementwise_mul(w, x))
    tl.backward(tl.sum_all(y))
    assert np.allclose(w.grad, 2.0 * 2.0 * 3.0)


def test_tied_grads_match_summed_untied_copies(f64, rng):
    x = rng.normal(size=(3, 3))
    w_data = rng.normal(size=(3, 3))
    uses = 4

    tied = tl.Tensor(w_data, requires_grad=True)
    z = tl.Tensor(x)
    for _ in range(uses):
        z = tl.matmul(z, tied)
    tl.backward(tl.sum_all(z))
    tied_grad = tied.grad.copy()

    tl.tape().clear()
    copies = [tl.Tensor(w_data, requires_grad=True) for _ in range(uses)]
    z = tl.Tensor(x)
    for w in copies:
        z = tl.matmul(z, w)
    tl.backward(tl.sum_all(z))
    summed = sum(w.grad for w in copies)
    assert np.allclose(tied_grad, summed, atol=1e-12)


def test_backward_requires_scalar_and_nonempty_tape():
    x = tl.Tensor(np.ones((2, 2)), requires_grad=True)
    y = tl.add(x, x)
    with pytest.raises(tl.ShapeError):
        tl.backward(y)
    tl.tape().clear()
    with pytest.raises(ValueError):
        tl.backward(tl.Tensor(1.0))


def test_no_grad_suppresses_recording():
    x = tl.Tensor(np.ones((2, 2)), requires_grad=True)
    with tl.no_grad():
        y = tl.add(x, x)
    assert not y.requires_grad
    assert len(tl.tape()) == 0


def test_zero_grad_clears():
    x = tl.Tensor(np.ones(3), requires_grad=True)
    x.grad = np.ones(3)
    tl.zero_grad([x])
    assert x.grad is None


# ---------------------------------------------------------------------------
# finite differences, every differentiable op


_OP_CASE_NAMES = [name for name, _, _ in op_gradient_cases(np.random.default_rng(7))]


@pytest.mark.parametrize("name", _OP_CASE_NAMES)
def test_finite_difference_per_op(name, f64):
    # rebuild under float64 so the check has headroom
    fresh = {n: (f, ts) for n, f, ts in op_gradient_cases(np.random.default_rng(7))}
    fn, tensors = fresh[name]
    assert finite_diff_check(fn, tensors) < 1e-5


# ---------------------------------------------------------------------------
# misc invariants


def test_outputs_finite_after_ops(rng):
    x = tl.Tensor(rng.normal(size=(4, 8)) * 10)
    for out in (tl.silu(x), tl.softmax_rows(x), tl.rmsnorm(x, tl.Tensor(np.ones(8)), 1e-6)):
        assert np.all(np.isfinite(out.data))


def test_determinism_same_inputs_bitwise():
    rng1 = np.random.default_rng(11)
    rng2 = np.random.default_rng(11)
    a1 = tl.matmul(tl.Tensor(rng1.normal(size=(5, 5))), tl.Tensor(rng1.normal(size=(5, 5))))
    a2 = tl.matmul(tl.Tensor(rng2.normal(size=(5, 5))), tl.Tensor(rng2.normal(size=(5, 5))))
    assert np.array_equal(a1.data, a2.data)


def test_split_concat_round_trip(rng):
    x = tl.Tensor(rng.normal(size=(6, 4)))
    parts = tl.split_rows(x, [2, 1, 3])
    back = tl.concat_rows(parts)
    assert np.array_equal(back.data, x.data)
    parts = tl.split_cols(x, [1, 3])
    assert np.array_equal(tl.concat_cols(parts).data, x.data)


def test_rotate_pairs_is_quarter_turn():
    x = tl.Tensor([1.0, 2.0, 3.0, 4.0])
    assert np.array_equal(tl.rotate_pairs(x).data, [-2.0, 1.0, -4.0, 3.0])


def test_precision_switch_changes_dtype():
    assert tl.Tensor([1.0]).data.dtype == np.float32
    with tl.using_dtype("f64"):
        assert tl.Tensor([1.0]).data.dtype == np.float64
    assert tl.Tensor([1.0]).data.dtype == np.float32
