import numpy as np
import pytest

from meshpool import autodiff as ad
from meshpool.autodiff import Value
from meshpool.errors import NumericalError, ShapeError, StateError


def P(shape, rng, name=None):
    return Value(rng.normal(size=shape), True, name)


def run_backward(f, params):
    for p in params:
        p.grad = None
    tape = ad.Tape()
    with ad.use_tape(tape):
        out = f()
    tape.backward(out)
    grads = [None if p.grad is None else p.grad.copy() for p in params]
    tape.clear()
    return out, grads


def test_row_softmax_two_class_jacobian():
    x = Value([[0.0, 0.0]], True)
    s, _ = run_backward(lambda: ad.reduce_sum(ad.mul(ad.row_softmax(x), Value([[1.0, -1.0]]))),
                        [x])
    with ad.no_grad():
        np.testing.assert_array_equal(ad.row_softmax(Value([[0.0, 0.0]])).data, [[0.5, 0.5]])
    # J = [[p(1-p), -p q], [-p q, q(1-q)]] with p = q = 1/2; J^T [1, -1] = [0.5, -0.5]
    J = np.array([[0.25, -0.25], [-0.25, 0.25]])
    np.testing.assert_allclose(x.grad, (J.T @ np.array([1.0, -1.0]))[None], atol=1e-15)


def test_leaky_relu_negative_branch():
    x = Value([-1.0], True)
    out, (g,) = run_backward(lambda: ad.reduce_sum(ad.leaky_relu(x, 0.01)), [x])
    assert float(out.data) == pytest.approx(-0.01, abs=1e-15)
    assert g[0] == pytest.approx(0.01, abs=1e-15)


def test_matmul_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = P((3, 2), rng), P((2, 4), rng)
    w = rng.normal(size=(3, 4))
    f = lambda: ad.reduce_sum(ad.mul(ad.matmul(a, b), Value(w)))
    assert ad.grad_check(f, [a, b]) <= 1e-6


def test_quadratic_gradient():
    x = Value([1.0, 2.0, 3.0], True)
    f = lambda: ad.reduce_sum(ad.square(x))
    _, (g,) = run_backward(f, [x])
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])
    assert ad.grad_check(f, [x]) <= 1e-9


# Each op gets random small shapes over 100 seeded trials.
def _op_cases(rng):
    n, m, k = rng.integers(1, 5, size=3)
    A, B = P((n, m), rng), P((n, m), rng)
    row = P((m,), rng)
    C = P((m, k), rng)
    D = P((n, k), rng)
    v = P((n,), rng)
    idx = rng.integers(0, n, size=n + 2)
    ids = rng.integers(0, 3, size=n)
    wts = rng.uniform(0.1, 1.0, size=n)
    W = lambda shape: Value(rng.normal(size=shape))
    w_nm, w_nk, w_mk = W((n, m)), W((n, k)), W((m, k))
    w_idx, w_seg = W((n + 2, m)), W((3, m))
    w_m, w_n, w_flat = W((m,)), W((n,)), W((n * m,))
    E = P((m, k), rng)
    target = int(rng.integers(0, m))
    yt = rng.normal(size=(n, m))
    sq = lambda x, w: ad.reduce_sum(ad.mul(x, w))
    return {
        "add": (lambda: sq(ad.add(A, B), w_nm), [A, B]),
        "add_broadcast": (lambda: sq(ad.add(A, row), w_nm), [A, row]),
        "sub": (lambda: sq(ad.sub(A, row), w_nm), [A, row]),
        "mul": (lambda: sq(ad.mul(A, B), w_nm), [A, B]),
        "mul_broadcast": (lambda: sq(ad.mul(row, A), w_nm), [A, row]),
        "scalar_mul": (lambda: sq(ad.scalar_mul(A, -1.7), w_nm), [A]),
        "neg": (lambda: sq(ad.neg(A), w_nm), [A]),
        "exp": (lambda: sq(ad.exp(A), w_nm), [A]),
        "square": (lambda: sq(ad.square(A), w_nm), [A]),
        "matmul": (lambda: sq(ad.matmul(A, C), w_nk), [A, C]),
        "transpose_matmul": (lambda: sq(ad.transpose_matmul(A, D), w_mk), [A, D]),
        "matmul_transpose": (lambda: sq(ad.matmul_transpose(D, E), w_nm), [D, E]),
        "gather_rows": (lambda: sq(ad.gather_rows(A, idx), w_idx), [A]),
        "segment_sum": (lambda: sq(ad.segment_sum(A, ids, 3), w_seg), [A]),
        "segment_sum_weighted": (lambda: sq(ad.segment_sum(A, ids, 3, wts), w_seg), [A]),
        "row_softmax": (lambda: sq(ad.row_softmax(A), w_nm), [A]),
        "leaky_relu": (lambda: sq(ad.leaky_relu(A, 0.2), w_nm), [A]),
        "reduce_sum_axis0": (lambda: sq(ad.reduce_sum(A, axis=0), w_m), [A]),
        "reduce_sum_axis1": (lambda: sq(ad.reduce_sum(A, axis=1), w_n), [A]),
        "reshape": (lambda: sq(ad.reshape(A, (n * m,)), w_flat), [A]),
        "scale_rows": (lambda: sq(ad.scale_rows(A, v), w_nm), [A, v]),
        "cross_entropy": (lambda: ad.cross_entropy_logits(row, target), [row]),
        "mse": (lambda: ad.mean_squared_error(A, yt), [A]),
    }


OP_NAMES = list(_op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("op", OP_NAMES)
def test_op_gradients_match_finite_differences(op):
    for trial in range(100):
        rng = np.random.default_rng([trial, OP_NAMES.index(op)])
        f, params = _op_cases(rng)[op]
        if op == "leaky_relu":
            # keep entries away from the kink so central differences are valid
            params[0].data[np.abs(params[0].data) < 1e-3] = 0.5
        assert ad.grad_check(f, params) <= 1e-6, f"{op} trial {trial}"


@pytest.mark.parametrize("op", OP_NAMES)
def test_op_forward_bit_deterministic(op):
    rng = np.random.default_rng(5)
    f, _ = _op_cases(rng)[op]
    with ad.no_grad():
        assert np.array_equal(f().data, f().data)


def test_backward_is_linear():
    rng = np.random.default_rng(1)
    x = P((4, 3), rng)
    w1, w2 = Value(rng.normal(size=(4, 3))), Value(rng.normal(size=(4, 3)))
    f = lambda: ad.reduce_sum(ad.mul(ad.exp(x), w1))
    g = lambda: ad.reduce_sum(ad.mul(ad.square(x), w2))
    _, (gf,) = run_backward(f, [x])
    _, (gg,) = run_backward(g, [x])
    a, b = 1.3, -0.4
    _, (gc,) = run_backward(lambda: ad.add(ad.scalar_mul(f(), a), ad.scalar_mul(g(), b)), [x])
    np.testing.assert_allclose(gc, a * gf + b * gg, atol=1e-12)


def test_gradient_accumulates_across_uses():
    x = Value([2.0, -1.0], True)
    _, (g,) = run_backward(lambda: ad.reduce_sum(ad.add(ad.mul(x, x), x)), [x])
    np.testing.assert_array_equal(g, [5.0, -1.0])


def test_no_gradient_leakage():
    rng = np.random.default_rng(2)
    x, c = P((3, 3), rng), Value(rng.normal(size=(3, 3)))
    tape = ad.Tape()
    with ad.use_tape(tape):
        out = ad.reduce_sum(ad.matmul(x, c))
    tape.backward(out)
    assert c.grad is None and x.grad is not None


def test_no_grad_records_nothing():
    x = Value([1.0], True)
    tape = ad.Tape()
    with ad.use_tape(tape), ad.no_grad():
        y = ad.square(x)
    assert len(tape) == 0 and not y.requires_grad


def test_shape_errors_name_both_shapes():
    a, b = Value(np.zeros((2, 3))), Value(np.zeros((4, 5)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(a, b)
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.add(a, b)
    with pytest.raises(ShapeError):
        ad.mul(Value(np.zeros((2, 3))), Value(np.zeros((2,))))


def test_backward_before_forward():
    with pytest.raises(StateError):
        Value([1.0], True).backward()


def test_backward_needs_scalar():
    x = Value([1.0, 2.0], True)
    tape = ad.Tape()
    with ad.use_tape(tape):
        y = ad.square(x)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_tape_reverse_order_and_clear():
    x = Value([1.5], True)
    tape = ad.Tape()
    with ad.use_tape(tape):
        y = ad.exp(ad.square(x))
        z = ad.reduce_sum(y)
    assert [n.kind for n in tape.nodes] == ["square", "exp", "reduce_sum"]
    tape.backward(z)
    assert x.grad[0] == pytest.approx(2 * 1.5 * np.exp(1.5 ** 2), rel=1e-14)
    tape.clear()
    assert len(tape) == 0 and z.tape_id is None


def test_grad_check_flags_wrong_backward():
    x = Value(np.array([0.3, -0.7]), True)

    def bad_square(a):
        return ad.record(a.data * a.data, (a,), lambda g: (3.0 * a.data * g,), "bad")

    assert ad.grad_check(lambda: ad.reduce_sum(bad_square(x)), [x]) > 0.1


def test_grad_check_nonfinite():
    x = Value([1000.0], True)
    with np.errstate(over="ignore"), pytest.raises(NumericalError):
        ad.grad_check(lambda: ad.reduce_sum(ad.exp(x)), [x])


def test_sequential_reduction_order():
    data = np.array([1e16, 1.0, -1e16, 1.0])
    with ad.no_grad():
        total = float(ad.reduce_sum(Value(data)).data)
    assert total == ((1e16 + 1.0) - 1e16) + 1.0
