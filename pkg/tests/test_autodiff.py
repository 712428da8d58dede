import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypergale import autodiff as ad
from hypergale.autodiff import Tensor, finite_diff_check
from hypergale.errors import ContractError, DimensionError, OracleError

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def _u(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def test_sigmoid_midpoint():
    assert ad.forward_op("sigmoid", [[[0.0]]]).value.tolist() == [[0.5]]


def test_identity_matmul():
    m = np.array([[1.5, -2.0], [0.25, 3.0]])
    out = ad.forward_op("matmul", [np.eye(2), m]).value
    assert np.array_equal(out, m)


def test_softmax_uniform():
    out = ad.forward_op("softmax_rows", [[[0.0, 0.0, 0.0]]]).value
    np.testing.assert_allclose(out, [[1 / 3, 1 / 3, 1 / 3]], rtol=0, atol=1e-15)


def test_square_gradient():
    p = Tensor([[2.0]], requires_grad=True)
    grads = ad.backward(ad.sum_all(ad.mul(p, p)))
    assert grads[p].tolist() == [[4.0]]


def test_disconnected_parameter_gets_zeros():
    p = Tensor([[1.0, 2.0]], requires_grad=True)
    q = Tensor([[3.0], [4.0]], requires_grad=True)
    grads = ad.backward(ad.sum_all(p), [p, q])
    assert np.array_equal(grads[q], np.zeros((2, 1)))


def test_fan_out_accumulates():
    rng = np.random.default_rng(3)
    x = _u(rng, 3, 2)
    p1 = Tensor(x, requires_grad=True)
    g_single = ad.backward(ad.sum_all(ad.tanh(p1)))[p1]
    p2 = Tensor(x, requires_grad=True)
    g = ad.tanh(p2)
    g_double = ad.backward(ad.sum_all(ad.add(g, g)))[p2]
    np.testing.assert_allclose(g_double, 2 * g_single, rtol=1e-15)


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        ad.backward(Tensor(np.ones((2, 2)), requires_grad=True))


def test_shape_mismatch_names_op():
    with pytest.raises(DimensionError, match="matmul.*\\(2, 3\\).*\\(2, 3\\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError, match="mul"):
        ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        Tensor([[np.nan]])


def _loss_for(kind, rng):
    """Build (params, loss_fn) for one op kind, contracting with a random probe."""
    shapes = {
        "matmul": [(3, 4), (4, 2)], "add": [(3, 4), (1, 4)], "sub": [(3, 4), (3, 4)],
        "mul": [(3, 4), (3, 4)], "scale": [(3, 4)], "row_scale": [(3, 4), (3, 1)],
        "col_scale": [(3, 4), (1, 4)], "sigmoid": [(3, 4)], "tanh": [(3, 4)], "relu": [(3, 4)],
        "softplus": [(3, 4)], "softmax_rows": [(3, 4)], "flatten": [(3, 4)], "sum_all": [(3, 4)],
        "transpose": [(3, 4)], "reciprocal": [(3, 4)], "col_max": [(3, 4)], "col_mean": [(3, 4)],
        "bce": [(1, 5)],
    }[kind]
    params = {f"x{i}": _u(rng, *s) for i, s in enumerate(shapes)}
    if kind == "reciprocal":
        params["x0"] = rng.uniform(0.5, 2.0, size=shapes[0]) * rng.choice([-1, 1], size=shapes[0])
    labels = rng.integers(0, 2, size=(1, 5)).astype(float)
    probe_cache = {}

    def loss_fn(p):
        xs = [p[f"x{i}"] for i in range(len(shapes))]
        if kind == "scale":
            out = ad.scale(xs[0], -1.7)
        elif kind == "bce":
            out = ad.bce(ad.sigmoid(xs[0]), ad.constant(labels))
        else:
            out = ad.OPS[kind](*xs)
        if "probe" not in probe_cache:
            probe_cache["probe"] = rng.uniform(-1, 1, size=out.shape)
        return ad.sum_all(ad.mul(out, ad.constant(probe_cache["probe"])))

    return params, loss_fn


@pytest.mark.parametrize("kind", sorted(ad.OPS))
@settings(max_examples=15, deadline=None)
@given(seed=seeds)
def test_every_op_matches_finite_differences(kind, seed):
    rng = np.random.default_rng(seed)
    params, loss_fn = _loss_for(kind, rng)
    res = finite_diff_check(loss_fn, params, step=1e-5, tolerance=1e-4)
    assert res.passed, res


@settings(max_examples=25, deadline=None)
@given(seed=seeds, rows=st.integers(1, 5), cols=st.integers(1, 6))
def test_softmax_rows_simplex(seed, rows, cols):
    x = np.random.default_rng(seed).uniform(-2, 2, size=(rows, cols))
    s = ad.softmax_rows(Tensor(x)).value
    np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all(s > 0) and np.all(s < 1) or cols == 1


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh", "softplus"])
def test_elementwise_shape(kind):
    x = Tensor(np.random.default_rng(0).normal(size=(4, 7)))
    assert ad.OPS[kind](x).shape == (4, 7)


def test_quadratic_exact():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(3, 3))

    def loss_fn(p):
        y = ad.matmul(ad.constant(a), p["w"])
        return ad.sum_all(ad.mul(y, y))

    res = finite_diff_check(loss_fn, {"w": rng.normal(size=(3, 2))}, step=1e-5)
    assert res.max_rel_error < 1e-9


def test_corrupted_rule_fails():
    def bad_square(x):
        return ad.custom_op("bad_square", x.value**2, (x,), lambda g: (g * 3.0 * x.value,))

    def loss_fn(p):
        return ad.sum_all(bad_square(p["w"]))

    res = finite_diff_check(loss_fn, {"w": np.array([[0.5, -1.2, 2.0]])})
    assert not res.passed


def test_nondeterministic_loss_detected():
    counter = iter(range(10**6))

    def loss_fn(p):
        return ad.sum_all(ad.scale(p["w"], 1.0 + next(counter) * 1e-3))

    with pytest.raises(OracleError):
        finite_diff_check(loss_fn, {"w": np.ones((1, 2))})


def test_bce_clamped_saturation():
    p = Tensor([[1.0, 0.0]])
    loss = ad.bce(p, ad.constant([[1.0, 0.0]]))
    assert 0 <= loss.value[0, 0] < 1e-11
