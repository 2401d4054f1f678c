"""Differentiable-engine tests: exact op semantics, finite-difference
gradient oracles, and graph-level invariants."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qface import autodiff as ad
from qface.autodiff import Tensor, backward, grad_check


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def rand64(rng, *shape, requires_grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# matmul

def test_matmul_identity():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(3, 3))
    out = ad.matmul(t64(np.eye(3)), t64(m))
    np.testing.assert_allclose(out.data, m)


def test_matmul_hand_case():
    out = ad.matmul(t64([[1, 2], [3, 4]]), t64([[0], [1]]))
    np.testing.assert_array_equal(out.data, [[2], [4]])


def test_matmul_shape_error_names_dims():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(t64(np.zeros((2, 3))), t64(np.zeros((2, 3))))


def test_matmul_gradient_oracle(rng64):
    a = rand64(rng64, 4, 3)
    b = rand64(rng64, 3, 5)
    report = grad_check(lambda a, b: ad.sum_(ad.matmul(a, b)), [a, b], tol=1e-6)
    assert report.max_rel_err < 1e-6


def test_matmul_batched_gradient(rng64):
    a = rand64(rng64, 2, 3, 4)
    b = rand64(rng64, 4, 5)
    w = Tensor(rng64.normal(size=(2, 3, 5)))
    report = grad_check(lambda a, b: ad.sum_(ad.matmul(a, b) * w), [a, b])
    assert report.passed


# ---------------------------------------------------------------------------
# softmax

def test_softmax_symmetry():
    out = ad.softmax(t64([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_softmax_extreme_logits_stable():
    out = ad.softmax(t64([1000.0, 0.0]))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)
    assert np.all(np.isfinite(out.data))


def test_softmax_gradient_oracle(rng64):
    x = rand64(rng64, 3, 6)
    w = Tensor(rng64.normal(size=(3, 6)))
    report = grad_check(lambda x: ad.sum_(ad.softmax(x, axis=-1) * w), [x], tol=1e-6)
    assert report.max_rel_err < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=12))
def test_softmax_rows_sum_to_one(vals):
    out = ad.softmax(t64(vals))
    assert abs(float(out.data.sum()) - 1.0) < 1e-6
    assert np.all(out.data >= 0.0)


# ---------------------------------------------------------------------------
# layer_norm

def test_layer_norm_constant_row_returns_bias():
    x = t64([[3.0, 3.0, 3.0]])
    gain = t64([2.0, 2.0, 2.0])
    bias = t64([0.5, -0.5, 1.0])
    out = ad.layer_norm(x, gain, bias)
    np.testing.assert_allclose(out.data, [[0.5, -0.5, 1.0]], atol=1e-12)


def test_layer_norm_closed_form_pm_one():
    # (x - mu)/sqrt(var + eps) with x=[1,-1]: mu=0, var=1
    expected = 1.0 / np.sqrt(1.0 + 1e-5)
    out = ad.layer_norm(t64([1.0, -1.0]), t64([1.0, 1.0]), t64([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [expected, -expected], rtol=1e-12)


def test_layer_norm_gradient_oracle(rng64):
    x = rand64(rng64, 4, 5)
    gain = rand64(rng64, 5)
    bias = rand64(rng64, 5)
    w = Tensor(rng64.normal(size=(4, 5)))
    report = grad_check(lambda x, g, b: ad.sum_(ad.layer_norm(x, g, b) * w), [x, gain, bias])
    assert report.passed


# ---------------------------------------------------------------------------
# small ops

def test_gelu_zero_fixed_point():
    assert float(ad.gelu(t64(0.0)).data) == 0.0


def test_l1_identity_case(rng64):
    x = t64(rng64.normal(size=(3, 4)))
    assert float(ad.l1(x, x).data) == 0.0


def test_concat_token_axis_shapes():
    parts = [Tensor(np.zeros((197, 8), np.float32)) for _ in range(3)]
    assert ad.concat(parts, axis=0).shape == (591, 8)


def test_concat_gradient(rng64):
    xs = [rand64(rng64, 2, 3) for _ in range(3)]
    w = Tensor(rng64.normal(size=(6, 3)))
    report = grad_check(lambda *xs: ad.sum_(ad.concat(xs, axis=0) * w), xs)
    assert report.passed


def test_slice_gradient(rng64):
    x = rand64(rng64, 4, 6)
    w = Tensor(rng64.normal(size=(2, 3)))
    report = grad_check(lambda x: ad.sum_(x[1:3, 2:5] * w), [x])
    assert report.passed


def test_mean_matches_numpy(rng64):
    arr = rng64.normal(size=(3, 5))
    np.testing.assert_allclose(ad.mean(t64(arr), axis=1).data, arr.mean(axis=1))


@pytest.mark.parametrize("op", ["exp", "log", "sqrt", "tanh", "abs_", "gelu", "log_sigmoid"])
def test_unary_gradients(op, rng64):
    fn = getattr(ad, op)
    base = np.abs(rng64.normal(size=(3, 4))) + 0.5 if op in ("log", "sqrt") \
        else rng64.normal(size=(3, 4))
    x = Tensor(base, requires_grad=True)
    w = Tensor(rng64.normal(size=(3, 4)))
    report = grad_check(lambda x: ad.sum_(fn(x) * w), [x])
    assert report.passed, f"{op}: {report.max_rel_err}"


def test_arccos_and_clip_gradients(rng64):
    x = Tensor(rng64.uniform(-0.8, 0.8, size=(5,)), requires_grad=True)
    w = Tensor(rng64.normal(size=(5,)))
    report = grad_check(lambda x: ad.sum_(ad.arccos(ad.clip(x, -0.99, 0.99)) * w), [x])
    assert report.passed


def test_smooth_l1_values_and_gradient(rng64):
    x = t64([0.5, 2.0, -3.0])
    out = ad.smooth_l1(x, beta=1.0)
    np.testing.assert_allclose(out.data, [0.125, 1.5, 2.5])
    xg = Tensor(np.array([0.3, -1.7, 0.9]), requires_grad=True)
    report = grad_check(lambda x: ad.sum_(ad.smooth_l1(x, beta=1.0)), [xg])
    assert report.passed


# ---------------------------------------------------------------------------
# backward semantics

def test_backward_sum_gives_ones(rng64):
    x = rand64(rng64, 3, 4)
    backward(ad.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_square_gives_2x(rng64):
    x = rand64(rng64, 5)
    backward(ad.sum_(x * x))
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)


def test_backward_rejects_non_scalar(rng64):
    x = rand64(rng64, 3)
    with pytest.raises(ValueError, match="scalar"):
        backward(x * x)


def test_backward_three_layer_mlp_oracle(rng64):
    # random MLP: all parameter grads match central differences
    sizes = [(4, 6), (6,), (6, 5), (5,), (5, 1), (1,)]
    params = [rand64(rng64, *s) for s in sizes]
    x = Tensor(rng64.normal(size=(3, 4)))

    def f(w1, b1, w2, b2, w3, b3):
        h = ad.gelu(ad.linear(x, w1, b1))
        h = ad.tanh(ad.linear(h, w2, b2))
        return ad.sum_(ad.linear(h, w3, b3))

    report = grad_check(f, params, h=1e-5, tol=1e-4)
    assert report.max_rel_err < 1e-4


def test_grad_accumulates_linearly(rng64):
    # a value used k times accumulates exactly k single-use gradients
    x = rand64(rng64, 4)
    backward(ad.sum_(x))
    single = x.grad.copy()
    x.grad = None
    y = ad.sum_(x) + ad.sum_(x) + ad.sum_(x)
    backward(y)
    np.testing.assert_allclose(x.grad, 3 * single, rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2 ** 31))
def test_ops_deterministic(k, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(k, k + 1)).astype(np.float32)
    b = rng.normal(size=(k + 1, k)).astype(np.float32)
    r1 = ad.matmul(ad.softmax(Tensor(a), axis=-1), Tensor(b)).data
    r2 = ad.matmul(ad.softmax(Tensor(a), axis=-1), Tensor(b)).data
    assert np.array_equal(r1, r2)


# ---------------------------------------------------------------------------
# grad_check harness itself

def test_grad_check_trivial_sum(rng64):
    x = rand64(rng64, 3, 3)
    report = grad_check(lambda x: ad.sum_(x), [x])
    assert report.max_rel_err < 1e-9


def test_grad_check_composite_softmax_matmul(rng64):
    a = rand64(rng64, 3, 4)
    b = rand64(rng64, 4, 4)
    w = Tensor(rng64.normal(size=(3, 4)))
    report = grad_check(lambda a, b: ad.sum_(ad.softmax(ad.matmul(a, b), axis=-1) * w),
                        [a, b], tol=1e-5)
    assert report.max_rel_err < 1e-5


def test_grad_check_flags_corrupted_gradient(rng64):
    # an op whose backward is deliberately wrong by a factor of 2
    def doubled_sum(x):
        out = ad.sum_(x)

        def bad_bwd(g):
            ad._accum(x, 2.0 * np.broadcast_to(g, x.data.shape))

        return ad._make(out.data, (x,), bad_bwd)

    x = rand64(rng64, 4)
    report = grad_check(doubled_sum, [x])
    assert not report.passed


def test_grad_check_rejects_non_scalar(rng64):
    x = rand64(rng64, 3)
    with pytest.raises(ValueError, match="scalar"):
        grad_check(lambda x: x * 2.0, [x])


# ---------------------------------------------------------------------------
# randomized primitive sweep (the module-level property)

@pytest.mark.parametrize("seed", range(20))
def test_primitive_sweep_randomized_shapes(seed):
    rng = np.random.default_rng(seed)
    rows = int(rng.integers(1, 5))
    cols = int(rng.integers(2, 6))
    x = Tensor(rng.normal(size=(rows, cols)), requires_grad=True)
    w = Tensor(rng.normal(size=(cols, cols)), requires_grad=True)
    gain = Tensor(rng.normal(size=cols) + 2.0, requires_grad=True)
    bias = Tensor(rng.normal(size=cols), requires_grad=True)
    mixer = Tensor(rng.normal(size=(rows, cols)))

    def f(x, w, gain, bias):
        h = ad.layer_norm(ad.matmul(x, w), gain, bias)
        h = ad.gelu(h) + ad.softmax(h, axis=-1)
        return ad.sum_(h * mixer)

    report = grad_check(f, [x, w, gain, bias], h=1e-5, tol=1e-4)
    assert report.max_rel_err < 1e-4
