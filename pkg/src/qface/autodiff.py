"""Reverse-mode automatic differentiation over numpy buffers.

Everything the model computes flows through `Tensor`: a dense row-major
array plus an optional slot in a backward graph. Training runs in float32;
gradient checking builds the same graphs in float64, where central finite
differences are actually meaningful.

Broadcasting follows numpy rules for the elementwise ops and for the batch
dimensions of `matmul`; gradients of broadcast operands are summed back to
the operand shape. No other implicit shape magic exists.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715

class Tensor:
    """N-d float array participating in a reverse-mode graph.

    `grad`, when populated by `backward`, always has the same shape and
    dtype as `data`. Tensors created from integer/bool input are cast to
    float32.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; all defer to the module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(out_data: np.ndarray, parents, backward_fn) -> Tensor:
    """Wrap an op result; the graph only records parents that need grads."""
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    needy = tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(needy)
    out._parents = needy
    out._backward = backward_fn if needy else None
    return out


def _accum(t: Tensor, g: np.ndarray):
    """Add g (already reduced to t's shape) into t.grad."""
    if not t.requires_grad:
        return
    if t.grad is None:
        # own the buffer: closures may hand over shared/broadcast arrays
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _accum_new(t: Tensor, g: np.ndarray):
    """Like _accum for gradients the caller freshly allocated (no copy)."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape`, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        _accum_new(a, _unbroadcast(g * b.data, a.data.shape))
        _accum_new(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bwd(g):
        _accum_new(a, _unbroadcast(g / b.data, a.data.shape))
        _accum_new(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), bwd)


def pow_(x: Tensor, p: float) -> Tensor:
    out = x.data ** p

    def bwd(g):
        _accum_new(x, g * p * x.data ** (p - 1.0))

    return _make(out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bwd(g):
        _accum_new(x, g * out)

    return _make(out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def bwd(g):
        _accum_new(x, g / x.data)

    return _make(out, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bwd(g):
        _accum_new(x, g * 0.5 / out)

    return _make(out, (x,), bwd)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bwd(g):
        _accum_new(x, g * (1.0 - out * out))

    return _make(out, (x,), bwd)


def abs_(x: Tensor) -> Tensor:
    out = np.abs(x.data)

    def bwd(g):
        _accum_new(x, g * np.sign(x.data))

    return _make(out, (x,), bwd)


def arccos(x: Tensor) -> Tensor:
    """Inverse cosine; callers clamp inputs away from the |x|=1 poles."""
    out = np.arccos(x.data)

    def bwd(g):
        _accum_new(x, -g / np.sqrt(1.0 - x.data * x.data))

    return _make(out, (x,), bwd)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only strictly inside (lo, hi)."""
    out = np.clip(x.data, lo, hi)

    def bwd(g):
        inside = (x.data > lo) & (x.data < hi)
        _accum_new(x, g * inside.astype(x.data.dtype))

    return _make(out, (x,), bwd)


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) evaluated without overflow at either tail."""
    xd = x.data
    t = np.exp(-np.abs(xd))
    out = (np.minimum(xd, 0.0) - np.log1p(t)).astype(xd.dtype, copy=False)

    def bwd(g):
        # d/dx log(sigmoid(x)) = sigmoid(-x)
        sig_neg = np.where(xd >= 0, t / (1.0 + t), 1.0 / (1.0 + t))
        _accum_new(x, g * sig_neg.astype(xd.dtype, copy=False))

    return _make(out, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (closed-form derivative)."""
    xd = x.data
    u = _GELU_C * (xd + _GELU_A * xd * xd * xd)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        _accum_new(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du))

    return _make(out, (x,), bwd)


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise smoothed L1: quadratic inside |x|<beta, linear outside."""
    xd = x.data
    absd = np.abs(xd)
    quad = absd < beta
    out = np.where(quad, 0.5 * xd * xd / beta, absd - 0.5 * beta).astype(xd.dtype, copy=False)

    def bwd(g):
        _accum_new(x, g * np.clip(xd / beta, -1.0, 1.0).astype(xd.dtype, copy=False))

    return _make(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape / reduction ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul: inner extents differ, {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum_new(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and g.ndim > 2:
                # 2-d weight under a batched input: one flat gemm instead of
                # a batched gemm followed by a reduction
                k = a.data.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
            _accum_new(b, gb)

    return _make(out, (a, b), bwd)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum_new(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=True))

    return _make(np.asarray(out), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), _as_tensor(1.0 / float(count), x.dtype))


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape
    out = x.data.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(orig))

    return _make(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)

    def bwd(g):
        _accum(x, g.transpose(inv))

    return _make(out, (x,), bwd)


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape)

    def bwd(g):
        _accum(x, _unbroadcast(g, x.data.shape))

    return _make(out, (x,), bwd)


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing with gradient scatter-add."""
    out = x.data[idx]

    def bwd(g):
        full = np.zeros_like(x.data)
        full[idx] += g
        _accum(x, full)

    return _make(out, (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, s, e in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(s, e)
            _accum(t, g[tuple(sl)])

    return _make(out, tuple(ts), bwd)


def expand_dims(x: Tensor, axis: int) -> Tensor:
    shape = list(x.data.shape)
    shape.insert(axis if axis >= 0 else len(shape) + 1 + axis, 1)
    return reshape(x, tuple(shape))


def stack(tensors, axis: int = 0) -> Tensor:
    return concat([expand_dims(t, axis) for t in tensors], axis=axis)


# ---------------------------------------------------------------------------
# composite neural ops

def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax; nonnegative, sums to 1 along `axis`."""
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = np.sum(p * g, axis=axis, keepdims=True)
        _accum_new(x, p * (g - inner))

    return _make(p, (x,), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    out = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def bwd(g):
        _accum_new(x, g - np.exp(out) * np.sum(g, axis=axis, keepdims=True))

    return _make(out, (x,), bwd)


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1 (eps inside the root),
    then affine: y * gain + bias."""
    xd = x.data
    mu = np.mean(xd, axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gain.data + bias.data

    def bwd(g):
        ghat = g * gain.data
        dx = inv * (ghat - np.mean(ghat, axis=-1, keepdims=True)
                    - y * np.mean(ghat * y, axis=-1, keepdims=True))
        _accum_new(x, dx.astype(x.data.dtype, copy=False))
        _accum_new(gain, _unbroadcast(g * y, gain.data.shape))
        _accum(bias, _unbroadcast(g, bias.data.shape))

    return _make(out, (x, gain, bias), bwd)


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements (scalar)."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"l1: shape mismatch {a.data.shape} vs {b.data.shape}")
    return mean(abs_(sub(a, b)))


# ---------------------------------------------------------------------------
# backward sweep

def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar; accumulates into .grad additively."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, emit = stack_.pop()
        if emit:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# finite-difference oracle

@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def grad_check(f, inputs, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar-valued f against central
    differences, coordinate by coordinate.

    Relative error uses a 1e-4 denominator floor so that coordinates whose
    true gradient is tiny are judged on an absolute scale instead of
    amplifying finite-difference noise. Run in float64; float32 inputs make
    the difference quotient meaningless.
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check: f must be scalar-valued")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    report = GradCheckReport(max_rel_err=0.0, tol=tol)
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_hi = float(f(*inputs).data)
            flat[i] = orig - h
            f_lo = float(f(*inputs).data)
            flat[i] = orig
            numeric[i] = (f_hi - f_lo) / (2.0 * h)
        a = analytic[k].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-4)
        rel = np.abs(a - numeric) / denom
        worst = float(rel.max()) if rel.size else 0.0
        report.per_input.append(worst)
        report.max_rel_err = max(report.max_rel_err, worst)
    return report
