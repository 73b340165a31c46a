import numpy as np
import pytest

from pidreg.autodiff import Tape, grad_check


def rand(shape, seed):
    return np.random.default_rng(seed).normal(size=shape)


def weighted_scalar(tape, node, seed=0):
    """Reduce a node to a generic scalar so gradients are not structurally flat."""
    w = tape.constant(rand(node.shape, seed + 1000))
    return tape.sum(tape.mul(node, w))


def test_log_exp_derivative_is_one():
    for x in [-2.0, -0.3, 0.0, 1.7, 4.0]:
        tape = Tape()
        t = tape.leaf([[x]])
        out = tape.log(tape.exp(t))
        g = tape.backward(out).wrt(t)
        assert abs(g[0, 0] - 1.0) < 1e-12


def test_pairwise_sqdist_three_four_five():
    tape = Tape()
    a = tape.leaf([[0.0, 0.0]])
    b = tape.constant([[3.0, 4.0]])
    d = tape.pairwise_sqdist(a, b)
    assert d.value[0, 0] == pytest.approx(25.0)
    g = tape.backward(tape.sum(d)).wrt(a)
    assert np.allclose(g, [[-6.0, -8.0]])


def test_matmul_identity_passthrough():
    a0 = rand((4, 4), 3)
    tape = Tape()
    a = tape.leaf(a0)
    out = tape.matmul(a, tape.constant(np.eye(4)))
    assert np.array_equal(out.value, a0)
    w = rand((4, 4), 4)
    loss = tape.sum(tape.mul(out, tape.constant(w)))
    assert np.allclose(tape.backward(loss).wrt(a), w)


def test_sum_of_squares_gradient():
    x0 = rand((5, 3), 7)
    tape = Tape()
    x = tape.leaf(x0)
    loss = tape.sum(tape.mul(x, x))
    g = tape.backward(loss).wrt(x)
    assert np.allclose(g, 2.0 * x0)


def test_constants_get_no_gradient():
    tape = Tape()
    x = tape.leaf([[1.0, 2.0]])
    c = tape.constant([[3.0, 4.0]])
    loss = tape.sum(tape.mul(x, c))
    grads = tape.backward(loss)
    assert np.array_equal(grads.wrt(c), np.zeros((1, 2)))
    assert not c.needs_grad


def test_fanout_accumulates():
    # y = x*x + 3x uses x twice; dy/dx = 2x + 3
    tape = Tape()
    x = tape.leaf([[2.5]])
    y = tape.add(tape.mul(x, x), tape.scale(x, 3.0))
    g = tape.backward(y).wrt(x)
    assert g[0, 0] == pytest.approx(2.0 * 2.5 + 3.0)


ELEMENTWISE = [
    ("exp", lambda tp, x: tp.exp(x), None),
    ("log", lambda tp, x: tp.log(x), "positive"),
    ("tanh", lambda tp, x: tp.tanh(x), None),
    ("sigmoid", lambda tp, x: tp.sigmoid(x), None),
    ("leaky", lambda tp, x: tp.leaky_relu(x, 0.1), "away_from_kink"),
    ("powc", lambda tp, x: tp.powc(x, -0.5), "positive"),
    ("scale", lambda tp, x: tp.scale(x, -2.7), None),
]


@pytest.mark.parametrize("name,op,domain", ELEMENTWISE, ids=[e[0] for e in ELEMENTWISE])
def test_elementwise_gradients(name, op, domain):
    x0 = rand((4, 3), 11)
    if domain == "positive":
        x0 = np.abs(x0) + 0.5
    elif domain == "away_from_kink":
        x0 = x0 + np.sign(x0) * 0.1

    def build(t):
        return weighted_scalar(t.tape, op(t.tape, t), seed=5)

    assert grad_check(build, x0) < 1e-6


def test_binary_op_gradients_with_broadcast():
    shapes = [((4, 3), (4, 3)), ((4, 3), (1, 3)), ((4, 3), (4, 1)), ((4, 3), (1, 1))]
    for sa, sb in shapes:
        b0 = np.abs(rand(sb, 21)) + 0.5
        for opname in ["add", "sub", "mul", "div"]:
            def build_a(t, opname=opname, b0=b0):
                tp = t.tape
                return weighted_scalar(tp, getattr(tp, opname)(t, tp.constant(b0)), seed=2)

            def build_b(t, opname=opname, sa=sa):
                tp = t.tape
                a = tp.constant(rand(sa, 22))
                return weighted_scalar(tp, getattr(tp, opname)(a, t), seed=3)

            assert grad_check(build_a, rand(sa, 23)) < 1e-6, (opname, sa, sb)
            assert grad_check(build_b, b0) < 1e-6, (opname, sa, sb)


def test_matmul_gradients_both_sides():
    a0 = rand((4, 3), 31)
    b0 = rand((3, 5), 32)

    def build_a(t):
        tp = t.tape
        return weighted_scalar(tp, tp.matmul(t, tp.constant(b0)), seed=6)

    def build_b(t):
        tp = t.tape
        return weighted_scalar(tp, tp.matmul(tp.constant(a0), t), seed=6)

    assert grad_check(build_a, a0) < 1e-6
    assert grad_check(build_b, b0) < 1e-6


def test_transpose_reshape_concat_broadcast_gradients():
    def build_t(t):
        tp = t.tape
        return weighted_scalar(tp, tp.transpose(t), seed=8)

    def build_r(t):
        tp = t.tape
        return weighted_scalar(tp, tp.reshape(t, (12, 1)), seed=9)

    def build_c(t):
        tp = t.tape
        other = tp.constant(rand((4, 2), 41))
        return weighted_scalar(tp, tp.concat_cols([t, other, t]), seed=10)

    def build_b(t):
        tp = t.tape
        return weighted_scalar(tp, tp.broadcast_row(t, 6), seed=11)

    assert grad_check(build_t, rand((4, 3), 42)) < 1e-6
    assert grad_check(build_r, rand((4, 3), 43)) < 1e-6
    assert grad_check(build_c, rand((4, 3), 44)) < 1e-6
    assert grad_check(build_b, rand((1, 5), 45)) < 1e-6


def test_reduction_gradients():
    for axis in [None, 0, 1]:
        def build_s(t, axis=axis):
            return weighted_scalar(t.tape, t.tape.sum(t, axis=axis), seed=12)

        def build_m(t, axis=axis):
            return weighted_scalar(t.tape, t.tape.mean(t, axis=axis), seed=13)

        assert grad_check(build_s, rand((5, 4), 46)) < 1e-6
        assert grad_check(build_m, rand((5, 4), 47)) < 1e-6


def test_pairwise_sqdist_gradients_both_sides():
    a0 = rand((5, 3), 51)
    b0 = rand((4, 3), 52)

    def build_a(t):
        tp = t.tape
        return weighted_scalar(tp, tp.pairwise_sqdist(t, tp.constant(b0)), seed=14)

    def build_b(t):
        tp = t.tape
        return weighted_scalar(tp, tp.pairwise_sqdist(tp.constant(a0), t), seed=15)

    # self-distance exercises the coupled grads through both arguments
    def build_self(t):
        tp = t.tape
        return weighted_scalar(tp, tp.pairwise_sqdist(t, t), seed=16)

    assert grad_check(build_a, a0) < 1e-6
    assert grad_check(build_b, b0) < 1e-6
    assert grad_check(build_self, a0) < 1e-6


def test_inv_sqrtm_psd_matches_scalar_closed_form():
    tape = Tape()
    a = tape.leaf([[4.0]])
    b = tape.inv_sqrtm_psd(a)
    assert b.value[0, 0] == pytest.approx(0.5)
    g = tape.backward(tape.sum(b)).wrt(a)
    # d a^(-1/2) / d a = -a^(-3/2) / 2
    assert g[0, 0] == pytest.approx(-0.5 * 4.0 ** -1.5)


def test_inv_sqrtm_psd_gradient_and_value():
    rng = np.random.default_rng(61)
    c = rng.normal(size=(5, 5))
    a0 = c @ c.T + 5.0 * np.eye(5)

    tape = Tape()
    a = tape.leaf(a0)
    b = tape.inv_sqrtm_psd(a)
    assert np.allclose(b.value @ b.value @ a0, np.eye(5), atol=1e-10)

    def build(t):
        return weighted_scalar(t.tape, t.tape.inv_sqrtm_psd(t), seed=17)

    assert grad_check(build, a0, step=1e-5) < 1e-5


def test_inv_sqrtm_psd_rejects_indefinite():
    tape = Tape()
    a = tape.leaf(np.diag([1.0, -0.5]))
    with pytest.raises(np.linalg.LinAlgError):
        tape.inv_sqrtm_psd(a)


def test_sort_gather_scatters_gradient():
    x0 = np.array([[3.0], [1.0], [2.0], [1.0]])
    tape = Tape()
    x = tape.leaf(x0)
    s = tape.sort_gather(x)
    # stable argsort keeps the first of the tied 1.0s first
    assert np.array_equal(s.value[:, 0], [1.0, 1.0, 2.0, 3.0])
    w = np.array([[10.0], [20.0], [30.0], [40.0]])
    loss = tape.sum(tape.mul(s, tape.constant(w)))
    g = tape.backward(loss).wrt(x)
    assert np.array_equal(g, [[40.0], [10.0], [30.0], [20.0]])


def test_sort_gather_gradient_away_from_ties():
    x0 = rand((9, 1), 71)

    def build(t):
        return weighted_scalar(t.tape, t.tape.sort_gather(t), seed=18)

    assert grad_check(build, x0) < 1e-6


def test_forward_is_bitwise_deterministic():
    x0 = rand((6, 4), 81)

    def run():
        tape = Tape()
        x = tape.leaf(x0)
        h = tape.tanh(tape.matmul(x, tape.constant(rand((4, 4), 82))))
        out = tape.sum(tape.exp(tape.scale(h, 0.1)))
        return out.value.copy(), tape.backward(out).wrt(x).copy()

    v1, g1 = run()
    v2, g2 = run()
    assert np.array_equal(v1, v2)
    assert np.array_equal(g1, g2)


def test_nonfinite_forward_raises():
    tape = Tape()
    x = tape.leaf([[1000.0]])
    with pytest.raises(ArithmeticError):
        tape.exp(x)


def test_log_and_div_domain_errors():
    tape = Tape()
    x = tape.leaf([[-1.0, 2.0]])
    with pytest.raises(ValueError):
        tape.log(x)
    with pytest.raises(ZeroDivisionError):
        tape.div(x, tape.constant([[0.0, 1.0]]))


def test_backward_requires_scalar_root():
    tape = Tape()
    x = tape.leaf([[1.0, 2.0]])
    with pytest.raises(ValueError):
        tape.backward(x)


def test_cross_tape_mixing_rejected():
    t1, t2 = Tape(), Tape()
    a = t1.leaf([[1.0]])
    b = t2.leaf([[2.0]])
    with pytest.raises(ValueError):
        t1.add(a, b)


def test_chained_composite_gradient():
    # leaky MLP stack ending in a mixed reduction, checked end to end
    w1 = rand((4, 6), 91)
    w2 = rand((6, 2), 92)

    def build(t):
        tp = t.tape
        h = tp.leaky_relu(tp.matmul(t, tp.constant(w1)), 0.05)
        h = tp.tanh(tp.matmul(h, tp.constant(w2)))
        col = tp.mean(h, axis=0)
        return tp.sum(tp.mul(col, col))

    assert grad_check(build, rand((7, 4), 93) + 0.3) < 1e-6
