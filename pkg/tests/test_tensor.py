import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from univip import tensor as T
from univip.gradcheck import NondeterministicError, finite_diff_check, relative_error
from univip.gradsuite import op_cases
from univip.tensor import NumericError, Tensor


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- elementwise ---------------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_add_zeros_is_identity():
    x = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(T.add(Tensor(x), Tensor(np.zeros((3, 4)))).data, x)


def test_mul_gradient_at_3_4():
    a, b = leaf(3.0), leaf(4.0)
    T.mul(a, b).backward()
    assert a.grad == pytest.approx(4.0) and b.grad == pytest.approx(3.0)
    rep = finite_diff_check(lambda: T.mul(a, b), {"a": a, "b": b}, tol=1e-6)
    assert rep.passed, str(rep)


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_elementwise_dispatch_matches_functions(kind):
    a, b = Tensor([1.0, -2.0]), Tensor([3.0, 5.0])
    expect = {"add": [4, 3], "sub": [-2, -7], "mul": [3, -10]}[kind]
    np.testing.assert_allclose(T.elementwise(kind, a, b).data, expect)


def test_elementwise_unary_kinds():
    a = Tensor([-1.5, 2.0])
    np.testing.assert_allclose(T.elementwise("max0", a).data, [0.0, 2.0])
    np.testing.assert_allclose(T.elementwise("neg", a).data, [1.5, -2.0])
    np.testing.assert_allclose(T.elementwise("scale", a, 2.0).data, [-3.0, 4.0])
    with pytest.raises(ValueError):
        T.elementwise("pow", a, a)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_non_finite_input_raises():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        T.mul(Tensor([1e308]), Tensor([1e308]))


def test_trailing_broadcast_gradient_sums():
    a = leaf(np.ones((2, 3)))
    b = leaf(np.arange(3.0))
    T.tsum(T.mul(a, b)).backward()
    np.testing.assert_allclose(b.grad, [2, 2, 2])
    np.testing.assert_allclose(a.grad, np.tile(np.arange(3.0), (2, 1)))


def test_float32_is_preserved():
    x = Tensor(np.ones(3, dtype=np.float32))
    assert T.relu(T.add(x, x)).dtype == np.float32


# -- matmul, conv ----------------------------------------------------------------


def test_matmul_identity_and_direct():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)
    np.testing.assert_array_equal(T.matmul(Tensor(x), Tensor([[1.0], [1.0]])).data, [[3], [7]])


def test_matmul_gradient_random_3x4_4x2():
    rng = np.random.default_rng(3)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    rep = finite_diff_check(lambda: T.tsum(T.mul(T.matmul(a, b), w)), [a, b], tol=1e-6)
    assert rep.passed, str(rep)


def test_matmul_dimension_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv_1x1_unit_kernel_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_allclose(out.data, x)


def test_conv_ones_3x3_on_ones_5x5():
    out = T.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 9.0))


@pytest.mark.parametrize("h,k,s,p", [(5, 3, 1, 0), (6, 3, 2, 1), (7, 2, 3, 0), (4, 4, 1, 2)])
def test_conv_output_size(h, k, s, p):
    out = T.conv2d(Tensor(np.zeros((1, 2, h, h))), Tensor(np.zeros((3, 2, k, k))), stride=s, padding=p)
    assert out.shape == (1, 3, (h + 2 * p - k) // s + 1, (h + 2 * p - k) // s + 1)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(2, 3, 7, 6)), rng.normal(size=(4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[:, :, i, j] = np.einsum("bchw,fchw->bf", patch, w)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_kernel_larger_than_input():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# -- l2_normalize, cosine --------------------------------------------------------


def test_l2_normalize_345():
    np.testing.assert_allclose(T.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])


def test_l2_normalize_unit_vector_fixed_point():
    v = np.array([0.0, 1.0, 0.0])
    np.testing.assert_array_equal(T.l2_normalize(Tensor(v)).data, v)


def test_l2_normalize_gradient_orthogonal_to_input():
    rng = np.random.default_rng(1)
    v = leaf(rng.normal(size=6))
    w = rng.normal(size=6)
    T.tsum(T.mul(T.l2_normalize(v), w)).backward()
    assert abs(np.dot(v.grad, v.data)) < 1e-8


def test_l2_normalize_zero_vector_is_finite():
    out = T.l2_normalize(Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3)))
def test_l2_normalize_unit_norm_property(v):
    if np.linalg.norm(v) <= 1e-6:
        return
    assert abs(np.linalg.norm(T.l2_normalize(Tensor(v)).data) - 1.0) < 1e-10


def test_cosine_examples():
    v = Tensor([0.3, -1.2, 2.0])
    assert T.cosine(v, v).item() == pytest.approx(1.0)
    assert T.cosine(v, -v).item() == pytest.approx(-1.0)
    assert T.cosine(Tensor([1.0, 0.0]), Tensor([1.0, 1.0])).item() == pytest.approx(0.70710678118, abs=1e-10)


def test_cosine_both_zero_raises():
    with pytest.raises(NumericError):
        T.cosine(Tensor(np.zeros(3)), Tensor(np.zeros(3)))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (2, 5), elements=st.floats(-100, 100)))
def test_cosine_in_unit_interval(ab):
    if np.linalg.norm(ab[0]) <= 1e-6 and np.linalg.norm(ab[1]) <= 1e-6:
        return
    c = T.cosine(Tensor(ab[0]), Tensor(ab[1])).item()
    assert -1 - 1e-12 <= c <= 1 + 1e-12


# -- shape ops, stopgrad ---------------------------------------------------------


def test_concat_lengths():
    assert T.concat([Tensor(np.ones(2)), Tensor(np.ones(3))]).shape == (5,)


def test_concat_incompatible_raises():
    with pytest.raises(ValueError):
        T.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=0)


def test_mean_of_123():
    assert T.mean(Tensor([1.0, 2.0, 3.0])).item() == 2.0


def test_stopgrad_blocks_gradient():
    x = leaf([1.0, 2.0])
    y = T.add(T.tsum(T.mul(T.stopgrad(x), T.stopgrad(x))), T.scale(T.tsum(x), 0.0))
    y.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])
    np.testing.assert_array_equal(T.stopgrad(x).data, x.data)


def test_getitem_repeated_index_accumulates():
    x = leaf(np.arange(4.0))
    T.tsum(T.getitem(x, [1, 1, 3])).backward()
    np.testing.assert_array_equal(x.grad, [0, 2, 0, 1])


# -- backward --------------------------------------------------------------------


def test_sum_gradient_is_ones():
    x = leaf(np.random.default_rng(0).normal(size=(3, 2)))
    T.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))


def test_two_consumers_accumulate():
    x = leaf(1.5)
    T.add(x, x).backward()
    assert x.grad == 2.0


def test_backward_accumulates_across_calls_until_zero_grad():
    x = leaf(2.0)
    T.scale(x, 3.0).backward()
    T.scale(x, 3.0).backward()
    assert x.grad == 6.0
    x.zero_grad()
    assert x.grad is None


def test_backward_non_scalar_raises():
    with pytest.raises(ValueError):
        T.relu(leaf([1.0, 2.0])).backward()


def test_diamond_graph_visits_each_node_once():
    x = leaf(3.0)
    y = T.mul(x, x)  # y feeds two consumers
    z = T.add(T.scale(y, 2.0), y)
    z.backward()
    assert x.grad == pytest.approx(3 * 2 * 3.0)


# -- finite differences ---------------------------------------------------------


def test_finite_diff_detects_nondeterminism():
    x = leaf([1.0])
    calls = iter(range(100))
    with pytest.raises(NondeterministicError):
        finite_diff_check(lambda: T.scale(T.tsum(x), float(next(calls))), [x])


def test_finite_diff_flags_wrong_gradient():
    x = leaf([0.5, -0.2])

    def f():
        out = T.tsum(T.mul(x, x))
        out._backward = None  # sever the graph: analytic grad stays empty
        return out

    rep = finite_diff_check(f, {"x": x})
    assert not rep.passed and rep.errors["x"] == pytest.approx(1.0)


def test_relative_error_of_identical_is_zero():
    assert relative_error(np.ones(3), np.ones(3)) == 0.0


@pytest.mark.parametrize("seed", range(100))
def test_every_op_gradient_matches_central_differences(seed):
    for name, (f, params) in op_cases(np.random.default_rng(seed)).items():
        rep = finite_diff_check(f, params, h=1e-5, tol=1e-4)
        assert rep.passed, f"{name}\n{rep}"
