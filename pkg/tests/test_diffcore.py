import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gp3 import diffcore as dc
from gp3.diffcore import Parameter, Tensor


def central_grad(f, x, eps=1e-6):
    """Independent numeric oracle: plain numpy central differences."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


def test_softmax_uniform():
    np.testing.assert_allclose(dc.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_matmul_identity():
    x = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(dc.matmul(np.eye(3), x).data, x)


def test_layer_norm_hand_value():
    out = dc.layer_norm(Tensor([1.0, 2.0, 3.0]), eps=0.0).data
    np.testing.assert_allclose(out, [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)


def test_backward_square():
    x = Parameter([1.0, 2.0])
    dc.backward(dc.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_constant_loss_zero_grads():
    x = Parameter([1.0, 2.0])
    loss = dc.sum(x * 0.0) + 3.0
    dc.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_mean_matmul_matches_finite_differences():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    A = Parameter(a)
    dc.backward(dc.mean(dc.matmul(A, b)))
    numeric = central_grad(lambda m: np.mean(m @ b), a, 1e-5)
    assert np.max(np.abs(A.grad - numeric) / np.maximum(1, np.abs(numeric))) <= 1e-6


def test_non_scalar_loss_rejected():
    with pytest.raises(ValueError, match="scalar"):
        dc.backward(Parameter([1.0, 2.0]) * 2)


def test_second_backward_rejected():
    x = Parameter([1.0])
    loss = dc.sum(x * x)
    dc.backward(loss)
    x.zero_grad()
    with pytest.raises(RuntimeError, match="consumed"):
        dc.backward(loss)


def test_stale_leaf_gradient_rejected():
    x = Parameter([1.0])
    dc.backward(dc.sum(x * x))
    with pytest.raises(RuntimeError, match="zero_grad"):
        dc.backward(dc.sum(x * 3))


def test_shape_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        dc.matmul(np.ones((2, 3)), np.ones((4, 5)))


@pytest.mark.parametrize("fn", [dc.log, dc.sqrt])
def test_non_positive_domain_rejected(fn):
    with pytest.raises(ValueError):
        fn(Tensor([1.0, -1.0]))


def test_gradcheck_of_sum_is_exact():
    x = np.random.default_rng(2).normal(size=(3, 3))
    assert dc.finite_diff_gradcheck(dc.sum, x, 1e-5) <= 1e-9


def test_gradcheck_reports_non_finite():
    # exp overflows only at the +eps probe of the first coordinate
    with np.errstate(over="ignore"), pytest.raises(dc.GradcheckError, match=r"coordinate \(0,\)"):
        dc.finite_diff_gradcheck(lambda t: dc.sum(dc.exp(t * 1000.0)), np.array([0.7097, 0.0]), 1e-4)


def test_shared_subexpression_accumulates():
    rng = np.random.default_rng(3)
    v = rng.normal(size=4)
    x = Parameter(v)
    y = dc.tanh(x)
    dc.backward(dc.sum(y * y + y))
    # oracle: the same expression built from two independent copies of tanh(x)
    x2 = Parameter(v)
    dc.backward(dc.sum(dc.tanh(x2) * dc.tanh(x2) + dc.tanh(x2)))
    np.testing.assert_allclose(x.grad, x2.grad, rtol=0, atol=1e-15)
    np.testing.assert_allclose(x.grad, (2 * np.tanh(v) + 1) * (1 - np.tanh(v) ** 2), atol=1e-12)


def test_no_grad_builds_no_tape():
    x = Parameter([1.0, 2.0])
    with dc.no_grad():
        y = x * x
    assert not y.requires_grad and y.is_leaf


def _unary(name):
    return {
        "exp": (dc.exp, lambda v: v),
        "log": (dc.log, lambda v: np.abs(v) + 0.5),
        "sqrt": (dc.sqrt, lambda v: np.abs(v) + 0.5),
        "tanh": (dc.tanh, lambda v: v),
        "sigmoid": (dc.sigmoid, lambda v: v),
        "softplus": (dc.softplus, lambda v: v),
        "gelu": (dc.gelu, lambda v: v),
        "neg": (dc.neg, lambda v: v),
        "abs": (dc.absolute, lambda v: np.where(np.abs(v) < 1e-3, v + 0.01, v)),
        "huber": (lambda t: dc.huber(t, 1.0), lambda v: np.where(np.abs(np.abs(v) - 1) < 1e-3, v * 1.01, v)),
        "softmax": (dc.softmax, lambda v: v),
        "layer_norm": (dc.layer_norm, lambda v: v),
        "power": (lambda t: dc.power(t, 3.0), lambda v: v),
    }[name]


PRIMITIVES = ["exp", "log", "sqrt", "tanh", "sigmoid", "softplus", "gelu", "neg", "abs", "huber", "softmax",
              "layer_norm", "power"]


@pytest.mark.parametrize("name", PRIMITIVES)
def test_unary_primitive_gradcheck_ten_points(name):
    fn, domain = _unary(name)
    rng = np.random.default_rng(PRIMITIVES.index(name))
    w = rng.normal(size=(2, 3))
    for _ in range(10):
        x = domain(rng.normal(size=(2, 3)))
        err = dc.finite_diff_gradcheck(lambda t: dc.sum(fn(t) * w), x, 1e-5)
        assert err <= 1e-5, (name, err)


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "matmul", "concat", "getitem", "reshape", "transpose",
                                  "mean", "embedding", "bilinear", "attention"])
def test_structural_primitive_gradcheck(name):
    rng = np.random.default_rng(7)
    other = rng.normal(size=(2, 3))
    table_ids = np.array([[0, 1], [1, 1]])
    fns = {
        "add": lambda t: t + other,
        "sub": lambda t: other - t,
        "mul": lambda t: t * other,
        "div": lambda t: other / (dc.absolute(t) + 1.0),
        "matmul": lambda t: dc.matmul(t, other.T),
        "concat": lambda t: dc.concat([t, t * 2], axis=1),
        "getitem": lambda t: t[:, 1:],
        "reshape": lambda t: dc.reshape(t, (3, 2)),
        "transpose": lambda t: dc.transpose(t),
        "mean": lambda t: dc.mean(t, axis=0),
        "embedding": lambda t: dc.embedding(t, table_ids),
        "bilinear": lambda t: dc.bilinear_upsample(t, 4, 5),
        "attention": lambda t: dc.scaled_dot_product_attention(t, t * 0.5, t)[0],
    }
    for _ in range(10):
        x = rng.normal(size=(2, 3)) + (1.0 if name == "div" else 0.0)
        if name == "div":
            x = np.abs(x) + 0.1
        out_w = None

        def f(t):
            nonlocal out_w
            y = fns[name](t)
            if out_w is None:
                out_w = np.random.default_rng(11).normal(size=y.shape)
            return dc.sum(y * out_w)

        assert dc.finite_diff_gradcheck(f, x, 1e-5) <= 1e-5


def test_backward_matches_independent_numpy_oracle():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def np_f(m):
        h = np.tanh(m @ b)
        return float(np.sum(np.exp(h) * h))

    A = Parameter(a)
    h = dc.tanh(dc.matmul(A, b))
    dc.backward(dc.sum(dc.exp(h) * h))
    np.testing.assert_allclose(A.grad, central_grad(np_f, a), atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_is_a_distribution(x):
    p = dc.softmax(Tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p >= 0) and np.all(p <= 1)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 5)),
              elements=st.floats(-5, 5, allow_nan=False)))
def test_backward_leaves_finite_grads(x):
    p = Parameter(x)
    dc.backward(dc.sum(dc.softmax(dc.tanh(p)) * dc.layer_norm(p)))
    assert p.grad.shape == x.shape and np.all(np.isfinite(p.grad))


def test_bilinear_matrix_rows_are_convex_weights():
    m = dc.bilinear_matrix(4, 9)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(m >= 0)
