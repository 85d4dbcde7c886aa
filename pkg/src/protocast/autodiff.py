"""Dense-tensor substrate with reverse-mode differentiation.

A ``Tensor`` wraps a row-major numpy array and records, on creation, the
vector-Jacobian products needed to pull a cotangent back to its parents.
``backward()`` replays the tape in reverse topological order.  Every
differentiable operation in the package is built from the primitives here,
and ``grad_check`` verifies any scalar loss against central differences.

float64 is the default and the only dtype used on test/oracle paths;
float32 is accepted for faster training runs.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Parameter",
    "GradCheckError",
    "no_grad",
    "matmul",
    "softmax_lastdim",
    "layer_norm",
    "sigmoid",
    "gelu",
    "where",
    "take",
    "grad_check",
    "grad_check_report",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference, FD probes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """N-dimensional array plus the tape entry that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad and _grad_enabled
        self._parents: tuple = ()
        self._vjps: tuple = ()

    # -- construction of tape nodes -------------------------------------

    @staticmethod
    def _result(data, parents, vjps) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjps = tuple(vjps)
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjps = ()
        return out

    # -- basic introspection ---------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate gradients of this (scalar) tensor into the graph."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a cotangent requires a scalar tensor")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad:
                    continue
                contrib = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + contrib
                else:
                    grads[key] = contrib

    # -- arithmetic primitives ---------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other
        return Tensor._result(
            a.data + b.data,
            (a, b),
            (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        a, b = self, other
        return Tensor._result(
            a.data - b.data,
            (a, b),
            (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __neg__(self):
        a = self
        return Tensor._result(-a.data, (a,), (lambda g: -g,))

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        return Tensor._result(
            a.data * b.data,
            (a, b),
            (
                lambda g: _unbroadcast(g * b.data, a.shape),
                lambda g: _unbroadcast(g * a.data, b.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other
        return Tensor._result(
            a.data / b.data,
            (a, b),
            (
                lambda g: _unbroadcast(g / b.data, a.shape),
                lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __pow__(self, exponent: float):
        a = self
        e = float(exponent)
        return Tensor._result(
            a.data ** e,
            (a,),
            (lambda g: g * e * a.data ** (e - 1.0),),
        )

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape primitives ---------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape
        return Tensor._result(
            a.data.reshape(shape),
            (a,),
            (lambda g: g.reshape(old),),
        )

    def transpose(self, *axes):
        a = self
        if not axes:
            # default: swap the last two axes
            axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._result(
            a.data.transpose(axes),
            (a,),
            (lambda g: g.transpose(inv),),
        )

    def __getitem__(self, idx):
        a = self
        out = a.data[idx]
        def vjp(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return full
        return Tensor._result(out, (a,), (vjp,))

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out = a.data.sum(axis=axis, keepdims=keepdims)
        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g, dtype=a.data.dtype)
            g2 = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(g2, a.shape).copy()
        return Tensor._result(np.asarray(out), (a,), (vjp,))

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for ax in axes:
                n *= self.shape[ax]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- pointwise nonlinearities --------------------------------------------

    def exp(self):
        a = self
        out = np.exp(a.data)
        return Tensor._result(out, (a,), (lambda g: g * out,))

    def log(self):
        a = self
        return Tensor._result(np.log(a.data), (a,), (lambda g: g / a.data,))

    def sqrt(self):
        a = self
        out = np.sqrt(a.data)
        return Tensor._result(out, (a,), (lambda g: g * 0.5 / out,))

    def abs(self):
        a = self
        return Tensor._result(np.abs(a.data), (a,), (lambda g: g * np.sign(a.data),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; inner extents must agree.

    Backward: dA = dC @ B^T, dB = A^T @ dC, with broadcast batch axes
    summed back down.
    """
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp_a(g):
        return _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)

    def vjp_b(g):
        return _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)

    return Tensor._result(out, (a, b), (vjp_a, vjp_b))


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted for stability."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        # J^T g = y * (g - sum(g * y))
        inner = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - inner)

    return Tensor._result(out, (x,), (vjp,))


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize each last-axis slice to zero mean / unit variance, then affine.

    Population variance; epsilon added inside the square root.
    """
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    xhat = xc / (var + LAYER_NORM_EPS).sqrt()
    return xhat * gain + bias


def sigmoid(x: Tensor) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(x)
    # evaluate via the positive branch to avoid overflow
    out = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                   np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def vjp(g):
        return g * out * (1.0 - out)

    return Tensor._result(out, (x,), (vjp,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return g * (cdf + x.data * pdf)

    return Tensor._result(out, (x,), (vjp,))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; the condition itself carries no gradient."""
    cond = np.asarray(cond, dtype=bool)
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b))
    out = np.where(cond, a.data, b.data)
    return Tensor._result(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(np.where(cond, g, 0.0), a.shape),
            lambda g: _unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


def take(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds."""
    indices = np.asarray(indices, dtype=np.intp)
    out = x.data[indices]

    def vjp(g):
        full = np.zeros_like(x.data)
        np.add.at(full, indices, g)
        return full

    return Tensor._result(out, (x,), (vjp,))


class Parameter:
    """Named learnable tensor with a zero-initialized gradient buffer."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, data):
        self.name = name
        self.value = Tensor(np.asarray(data, dtype=np.float64))
        self.value.requires_grad = True
        self.value.grad = np.zeros_like(self.value.data)

    @property
    def grad(self) -> np.ndarray:
        return self.value.grad

    def zero_grad(self):
        self.value.grad = np.zeros_like(self.value.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class GradCheckError(RuntimeError):
    """Raised when a finite-difference probe produces a non-finite loss."""


def grad_check_report(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    step: float = 1e-5,
) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients, per parameter.

    Relative error per scalar is |a - n| / max(|a|, |n|, 1e-8).  ``f`` is
    re-evaluated 2x per parameter scalar with the entry perturbed in place,
    so it must close over the live parameter tensors.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.data.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    if not np.isfinite(loss.data):
        raise GradCheckError("non-finite loss at the evaluation point")
    loss.backward()
    analytic = {p.name: np.array(p.grad, copy=True) for p in params}

    report: dict[str, float] = {}
    with no_grad():
        for p in params:
            flat = p.value.data.reshape(-1)
            a_flat = analytic[p.name].reshape(-1)
            worst = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = float(f().data)
                flat[i] = orig - step
                f_minus = float(f().data)
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise GradCheckError(
                        f"non-finite loss probing parameter {p.name!r} at flat index {i}"
                    )
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = a_flat[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if err > worst:
                    worst = err
            report[p.name] = worst
    return report


def grad_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    step: float = 1e-5,
) -> float:
    """Maximum relative error over every parameter scalar."""
    report = grad_check_report(f, params, step=step)
    return max(report.values()) if report else 0.0
