import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tscorrect.autodiff import Tape, Var, zero_grads
from tscorrect.errors import ContractError, DimensionError
from helpers import away_from_kinks, fd_worst_rel_err

RNG = np.random.default_rng


# ---------------------------------------------------------------------------
# hand-checkable values


def test_matmul_identity():
    t = Tape()
    a = Var(np.eye(2))
    b = Var(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(t.matmul(a, b).value, b.value)


def test_matmul_row_times_column():
    t = Tape()
    out = t.matmul(Var(np.array([[1.0, 2.0]])), Var(np.array([[3.0], [4.0]])))
    assert out.value.item() == 11.0


def test_abs_relu_values():
    t = Tape()
    x = Var(np.array([-1.0, 0.0, 2.0]))
    assert np.array_equal(t.abs(x).value, [1.0, 0.0, 2.0])
    assert np.array_equal(t.relu(x).value, [0.0, 0.0, 2.0])


def test_abs_subgradient_zero_at_zero():
    t = Tape()
    x = Var(np.array([0.0, -0.5, 0.5]), requires_grad=True)
    t.backward(t.sum(t.abs(x)))
    assert np.array_equal(x.grad, [0.0, -1.0, 1.0])


def test_mean_abs_gradient_is_sign_over_n():
    t = Tape()
    x = Var(np.array([0.5, -0.3]), requires_grad=True)
    t.backward(t.mean(t.abs(x)))
    assert np.allclose(x.grad, [0.5, -0.5], atol=0, rtol=0)


def test_mean_and_axis_sum_values():
    t = Tape()
    assert t.mean(Var(np.array([1.0, 2.0, 3.0]))).value.item() == 2.0
    out = t.sum(Var(np.array([[1.0, 2.0], [3.0, 4.0]])), axes=0)
    assert np.array_equal(out.value, [4.0, 6.0])


def test_sum_gradient_is_ones():
    t = Tape()
    x = Var(RNG(0).standard_normal((3, 4)), requires_grad=True)
    t.backward(t.sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_concat_and_transpose_values():
    t = Tape()
    out = t.concat([Var(np.array([[1.0], [2.0]])), Var(np.array([[3.0], [4.0]]))], axis=1)
    assert np.array_equal(out.value, [[1.0, 3.0], [2.0, 4.0]])
    x = Var(RNG(1).standard_normal((2, 3)))
    assert np.array_equal(t.transpose(t.transpose(x)).value, x.value)


def test_scalar_chain_rule_hand_value():
    # L = mean((W*x - y)^2) on a 1x1 problem, via mul: dL/dW = 2*(6-5)*3 = 6
    t = Tape()
    w = Var(np.array([2.0]), requires_grad=True)
    err = t.sub(t.mul(w, t.constant(np.array([3.0]))), t.constant(np.array([5.0])))
    t.backward(t.mean(t.mul(err, err)))
    assert w.grad.item() == pytest.approx(6.0, abs=1e-12)


def test_conv1d_output_length():
    t = Tape()
    x = Var(np.zeros((1, 96)))
    w = Var(np.zeros((2, 1, 3)))
    b = Var(np.zeros(2))
    assert t.conv1d(x, w, b, stride=2, padding=1).value.shape == (2, 48)


def test_conv1d_unit_kernel_is_identity():
    t = Tape()
    x = Var(RNG(2).standard_normal((1, 10)))
    w = Var(np.ones((1, 1, 1)))
    b = Var(np.zeros(1))
    out = t.conv1d(x, w, b, stride=1, padding=0)
    assert np.array_equal(out.value, x.value)


def test_conv1d_zero_weights_gives_bias_broadcast():
    t = Tape()
    x = Var(RNG(3).standard_normal((2, 11)))
    w = Var(np.zeros((3, 2, 3)))
    b = Var(np.array([1.0, -2.0, 0.5]))
    out = t.conv1d(x, w, b, stride=2, padding=1)
    assert np.array_equal(out.value, np.broadcast_to(b.value[:, None], out.value.shape))


# ---------------------------------------------------------------------------
# finite-difference oracle per primitive


def test_fd_matmul():
    rng = RNG(10)
    a = rng.uniform(-2, 2, (3, 4))
    b = rng.uniform(-2, 2, (4, 2))
    err = fd_worst_rel_err(lambda t, v: t.mean(t.mul(t.matmul(v[0], v[1]), t.matmul(v[0], v[1]))), [a, b], rng)
    assert err < 1e-6


def test_fd_conv1d():
    rng = RNG(11)
    x = rng.uniform(-2, 2, (2, 10))
    w = rng.uniform(-2, 2, (3, 2, 3))
    b = rng.uniform(-2, 2, 3)

    def build(t, v):
        out = t.conv1d(v[0], v[1], v[2], stride=2, padding=1)
        return t.mean(t.mul(out, out))

    assert fd_worst_rel_err(build, [x, w, b], rng) < 1e-6


def test_fd_conv1d_batched_strides():
    rng = RNG(12)
    for stride, padding in [(1, 0), (1, 1), (2, 1), (3, 2)]:
        x = rng.uniform(-2, 2, (2, 3, 12))
        w = rng.uniform(-2, 2, (4, 3, 3))
        b = rng.uniform(-2, 2, 4)

        def build(t, v):
            out = t.conv1d(v[0], v[1], v[2], stride=stride, padding=padding)
            return t.mean(t.mul(out, out))

        assert fd_worst_rel_err(build, [x, w, b], rng) < 1e-6


def test_fd_elementwise_ops():
    rng = RNG(13)
    a = rng.uniform(-2, 2, (4, 5))
    b = rng.uniform(-2, 2, (4, 5))
    cases = [
        lambda t, v: t.mean(t.add(v[0], v[1])),
        lambda t, v: t.mean(t.sub(v[0], v[1])),
        lambda t, v: t.mean(t.mul(v[0], v[1])),
        lambda t, v: t.mean(t.scale(v[0], -1.7)),
    ]
    for build in cases:
        assert fd_worst_rel_err(build, [a, b], rng) < 1e-6


def test_fd_scalar_broadcast():
    rng = RNG(14)
    a = rng.uniform(-2, 2, (3, 4))
    s = rng.uniform(0.5, 2, (1,))
    for build in (
        lambda t, v: t.mean(t.mul(v[0], v[1])),
        lambda t, v: t.mean(t.mul(v[1], v[0])),
        lambda t, v: t.mean(t.add(v[0], v[1])),
        lambda t, v: t.mean(t.mul(v[0], t.reciprocal(v[1]))),
    ):
        assert fd_worst_rel_err(build, [a, s], rng) < 1e-6


def test_fd_abs_relu_away_from_kinks():
    rng = RNG(15)
    x = away_from_kinks(rng.uniform(-2, 2, (4, 6)))
    assert fd_worst_rel_err(lambda t, v: t.mean(t.abs(v[0])), [x], rng) < 1e-6
    assert fd_worst_rel_err(lambda t, v: t.mean(t.relu(v[0])), [x], rng) < 1e-6


def test_fd_reductions_and_reshapes():
    rng = RNG(16)
    x = rng.uniform(-2, 2, (2, 6))

    def build_reshape(t, v):
        r = t.reshape(v[0], (3, 4))
        return t.mean(t.mul(r, r))

    def build_axis_sum(t, v):
        s = t.sum(v[0], axes=0)
        return t.mean(t.mul(s, s))

    def build_axis_mean(t, v):
        m = t.mean(v[0], axes=1)
        return t.sum(t.mul(m, m))

    def build_transpose(t, v):
        tr = t.transpose(v[0])
        return t.mean(t.mul(tr, tr))

    def build_concat(t, v):
        c = t.concat([v[0], v[0]], axis=1)
        return t.mean(t.mul(c, c))

    for build in (build_reshape, build_axis_sum, build_axis_mean, build_transpose, build_concat):
        assert fd_worst_rel_err(build, [x], rng) < 1e-6


def test_fd_reciprocal():
    rng = RNG(17)
    x = rng.uniform(0.5, 2.0, (3, 3))
    assert fd_worst_rel_err(lambda t, v: t.mean(t.reciprocal(v[0])), [x], rng) < 1e-6


def test_reshape_gradient_roundtrip():
    t = Tape()
    x = Var(RNG(18).standard_normal((2, 6)), requires_grad=True)
    y = t.reshape(x, (3, 4))
    t.backward(t.sum(t.mul(y, t.constant(np.arange(12.0).reshape(3, 4)))))
    assert np.array_equal(x.grad, np.arange(12.0).reshape(2, 6))


# ---------------------------------------------------------------------------
# graph behaviors


def test_dag_fanout_sums_contributions():
    # z = x used by two consumers; grad must be the sum of both paths
    t = Tape()
    x = Var(np.array([1.5, -0.5]), requires_grad=True)
    out = t.sum(t.add(t.mul(x, x), t.scale(x, 3.0)))
    t.backward(out)
    assert np.allclose(x.grad, 2 * x.value + 3.0, rtol=0, atol=1e-15)


def test_repeated_backward_accumulates():
    x = Var(np.array([1.0, 2.0]), requires_grad=True)
    t = Tape()
    out = t.sum(t.mul(x, x))
    t.backward(out)
    once = x.grad.copy()
    t.backward(out)
    assert np.array_equal(x.grad, 2 * once)
    zero_grads([x])
    assert np.array_equal(x.grad, np.zeros(2))


def test_stop_gradient_freezes_one_factor():
    t = Tape()
    x = Var(np.array([2.0]), requires_grad=True)
    t.backward(t.mean(t.mul(x, t.stop_gradient(x))))
    assert x.grad.item() == 2.0  # not 4


def test_stop_gradient_mask_routing():
    t = Tape()
    x = Var(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    m = t.stop_gradient(Var(np.array([1.0, 0.0, 1.0])))
    t.backward(t.sum(t.mul(m, x)))
    assert np.array_equal(x.grad, [1.0, 0.0, 1.0])


def test_stop_gradient_value_identity():
    x = Var(np.array([[1.0, -2.0], [0.0, 3.5]]))
    assert np.array_equal(Tape().stop_gradient(x).value, x.value)


def test_backward_requires_scalar_root():
    t = Tape()
    x = Var(np.ones(3), requires_grad=True)
    y = t.mul(x, x)
    with pytest.raises(ContractError):
        t.backward(y)


def test_shape_mismatch_raises():
    t = Tape()
    with pytest.raises(DimensionError):
        t.add(Var(np.ones((2, 3))), Var(np.ones((3, 2))))
    with pytest.raises(DimensionError):
        t.matmul(Var(np.ones((2, 3))), Var(np.ones((2, 3))))


def test_reciprocal_rejects_zero():
    with pytest.raises(ContractError):
        Tape().reciprocal(Var(np.array([1.0, 0.0])))


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=40, deadline=None)
@given(
    t_len=st.integers(4, 40),
    k=st.integers(1, 5),
    stride=st.integers(1, 3),
    padding=st.integers(0, 3),
)
def test_conv1d_length_formula(t_len, k, stride, padding):
    t_out = (t_len + 2 * padding - k) // stride + 1
    if t_out < 1:
        return
    tape = Tape()
    out = tape.conv1d(Var(np.zeros((1, t_len))), Var(np.zeros((2, 1, k))), Var(np.zeros(2)), stride, padding)
    assert out.value.shape == (2, t_out)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_fanout_matches_brute_force_perturbation(seed):
    rng = RNG(seed)
    x0 = away_from_kinks(rng.uniform(-2, 2, 4))

    def build(t, v):
        shared = t.add(v[0], t.constant(np.full(4, 0.25)))
        return t.mean(t.add(t.abs(shared), t.mul(shared, shared)))

    assert fd_worst_rel_err(build, [x0], rng, samples=4) < 1e-4
