"""Tensor substrate: primitive semantics and gradient checks against oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protocast.autodiff import (
    GradCheckError,
    Parameter,
    Tensor,
    gelu,
    grad_check,
    grad_check_report,
    layer_norm,
    matmul,
    no_grad,
    sigmoid,
    softmax_lastdim,
    take,
    where,
)


def manual_matmul(a, b):
    """Triple-loop reference product."""
    r, k = a.shape
    k2, c = b.shape
    assert k == k2
    out = np.zeros((r, c))
    for i in range(r):
        for j in range(c):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(Tensor(np.eye(2)), Tensor(x))
        assert np.array_equal(out.data, x)

    def test_projection(self):
        p = np.array([[1.0, 0.0], [0.0, 0.0]])
        v = np.array([[5.0], [7.0]])
        out = matmul(Tensor(p), Tensor(v))
        assert np.array_equal(out.data, np.array([[5.0], [0.0]]))

    def test_random_matches_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        out = matmul(Tensor(a), Tensor(b))
        assert np.array_equal(out.data, manual_matmul(a, b)) or np.allclose(
            out.data, manual_matmul(a, b), rtol=0, atol=1e-15)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batched_broadcast_grad(self):
        rng = np.random.default_rng(0)
        a = Parameter("a", rng.normal(size=(2, 3, 4)))
        b = Parameter("b", rng.normal(size=(4, 5)))
        w = rng.normal(size=(2, 3, 5))
        err = grad_check(lambda: (matmul(a.value, b.value) * Tensor(w)).sum(), [a, b])
        assert err < 1e-6


class TestSoftmax:
    def test_symmetry(self):
        out = softmax_lastdim(Tensor(np.array([0.0, 0.0])))
        assert np.allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_analytic(self):
        out = softmax_lastdim(Tensor(np.array([math.log(2.0), 0.0])))
        assert np.allclose(out.data, [2 / 3, 1 / 3], atol=1e-15)

    def test_random_matches_exp_normalize(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=5)
        expected = np.exp(x) / np.exp(x).sum()
        out = softmax_lastdim(Tensor(x))
        assert np.abs(out.data - expected).max() < 1e-12

    @given(st.lists(st.floats(min_value=-30, max_value=30), min_size=1, max_size=12))
    def test_rows_sum_to_one(self, values):
        out = softmax_lastdim(Tensor(np.array(values)))
        assert abs(out.data.sum() - 1.0) < 1e-12
        assert (out.data >= 0).all()


class TestLayerNorm:
    def test_constant_slice_zero(self):
        out = layer_norm(Tensor(np.array([1.0, 1.0, 1.0])),
                         Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.allclose(out.data, 0.0, atol=1e-12)

    def test_symmetric_pair(self):
        out = layer_norm(Tensor(np.array([-1.0, 1.0])),
                         Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.abs(out.data - np.array([-1.0, 1.0])).max() < 1e-4

    def test_random_matches_scalar_loop(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=7)
        gain = rng.normal(size=7)
        bias = rng.normal(size=7)
        mu = sum(x) / 7
        var = sum((v - mu) ** 2 for v in x) / 7
        expected = [(v - mu) / math.sqrt(var + 1e-5) * g + b
                    for v, g, b in zip(x, gain, bias)]
        out = layer_norm(Tensor(x), Tensor(gain), Tensor(bias))
        assert np.abs(out.data - np.array(expected)).max() < 1e-10

    @given(st.floats(min_value=-100, max_value=100))
    def test_shift_invariance(self, shift):
        rng = np.random.default_rng(5)
        x = rng.normal(size=6)
        g = Tensor(np.ones(6))
        b = Tensor(np.zeros(6))
        base = layer_norm(Tensor(x), g, b).data
        shifted = layer_norm(Tensor(x + shift), g, b).data
        assert np.abs(base - shifted).max() < 1e-9


class TestSigmoid:
    def test_zero(self):
        assert sigmoid(Tensor(np.array(0.0))).data == 0.5

    def test_saturation(self):
        assert abs(sigmoid(Tensor(np.array(50.0))).data - 1.0) < 1e-12

    def test_analytic(self):
        assert abs(sigmoid(Tensor(np.array(math.log(3.0)))).data - 0.75) < 1e-15


class TestGradCheck:
    def test_quadratic(self):
        p = Parameter("theta", np.array(3.0))
        err = grad_check(lambda: p.value * p.value, [p])
        assert err < 1e-9

    def test_sigmoid_sum(self):
        p = Parameter("theta", np.array([0.2, -1.5, 0.7]))
        err = grad_check(lambda: sigmoid(p.value).sum(), [p])
        assert err < 1e-7

    def test_nonfinite_probe_reports_name_and_index(self):
        p = Parameter("bad", np.array([1.0, 1e-6]))
        with pytest.raises(GradCheckError, match="bad"):
            grad_check(lambda: p.value.log().sum(), [p], step=1e-5)

    def test_report_covers_each_parameter(self):
        a = Parameter("a", np.array([1.0, 2.0]))
        b = Parameter("b", np.array(0.5))
        report = grad_check_report(lambda: (a.value * a.value).sum() * b.value, [a, b])
        assert set(report) == {"a", "b"}
        assert max(report.values()) < 1e-8


def _rand(rng, *shape):
    return rng.normal(size=shape)


@pytest.mark.parametrize("name,builder", [
    ("add", lambda p, q, w: ((p.value + q.value) * w).sum()),
    ("sub", lambda p, q, w: ((p.value - q.value) * w).sum()),
    ("mul", lambda p, q, w: ((p.value * q.value) * w).sum()),
    ("div", lambda p, q, w: ((p.value / (q.value * q.value + 1.0)) * w).sum()),
    ("pow", lambda p, q, w: (((p.value * p.value + 1.0) ** 1.5) * w).sum()),
    ("exp", lambda p, q, w: (p.value.exp() * w).sum()),
    ("log", lambda p, q, w: ((p.value * p.value + 1.0).log() * w).sum()),
    ("sqrt", lambda p, q, w: ((p.value * p.value + 1.0).sqrt() * w).sum()),
    ("abs", lambda p, q, w: (p.value.abs() * w).sum()),
    ("sigmoid", lambda p, q, w: (sigmoid(p.value) * w).sum()),
    ("gelu", lambda p, q, w: (gelu(p.value) * w).sum()),
    ("softmax", lambda p, q, w: (softmax_lastdim(p.value) * w).sum()),
    ("transpose", lambda p, q, w: (p.value.transpose(1, 0) * Tensor(w.data.T)).sum()),
    ("reshape", lambda p, q, w: (p.value.reshape(12) * Tensor(w.data.reshape(12))).sum()),
    ("mean", lambda p, q, w: p.value.mean(axis=1).sum() * 3.0),
    ("slice", lambda p, q, w: (p.value[:, 1:] * Tensor(w.data[:, 1:])).sum()),
])
def test_primitive_backward_below_1e6(name, builder):
    rng = np.random.default_rng(hash(name) % 2**32)
    p = Parameter("p", _rand(rng, 3, 4))
    q = Parameter("q", _rand(rng, 3, 4))
    w = Tensor(_rand(rng, 3, 4))
    err = grad_check(lambda: builder(p, q, w), [p, q])
    assert err < 1e-6, f"{name}: {err}"


def test_layer_norm_backward_below_1e6():
    # probe with a random linear functional: sum(LN(x)^2) is nearly constant
    rng = np.random.default_rng(21)
    x = Parameter("x", rng.normal(size=(2, 6)))
    g = Parameter("g", rng.normal(size=6))
    b = Parameter("b", rng.normal(size=6))
    w = Tensor(rng.normal(size=(2, 6)))
    err = grad_check(lambda: (layer_norm(x.value, g.value, b.value) * w).sum(),
                     [x, g, b])
    assert err < 1e-6


def test_take_and_where_backward():
    rng = np.random.default_rng(31)
    p = Parameter("p", rng.normal(size=(4, 3)))
    idx = np.array([0, 2, 2, 1])
    w = Tensor(rng.normal(size=(4, 3)))
    err = grad_check(lambda: (take(p.value, idx) * w).sum(), [p])
    assert err < 1e-6
    cond = rng.normal(size=(4, 3)) > 0
    err = grad_check(
        lambda: (where(cond, p.value * 2.0, p.value * p.value) * w).sum(), [p])
    assert err < 1e-6


def test_no_grad_blocks_tape():
    p = Parameter("p", np.array([1.0, 2.0]))
    with no_grad():
        out = (p.value * p.value).sum()
    assert not out.requires_grad
    out2 = (p.value * p.value).sum()
    assert out2.requires_grad


def test_grad_accumulates_across_backwards():
    p = Parameter("p", np.array(2.0))
    (p.value * p.value).backward()
    (p.value * 3.0).backward()
    assert float(p.grad) == pytest.approx(4.0 + 3.0)
    p.zero_grad()
    assert float(p.grad) == 0.0


def test_tensor_invariant_shape_matches_data():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert int(np.prod(t.shape)) == t.data.size
