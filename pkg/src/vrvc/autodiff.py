"""Dense-tensor reverse-mode autodiff over numpy arrays.

A `Tensor` wraps one contiguous numpy array plus an optional gradient
accumulator.  Every op records a backward closure on an implicit tape (the
parent graph); calling :meth:`Tensor.backward` on a scalar loss walks the
tape once in reverse topological order.  The graph lives only for the step
that built it -- dropping the loss reference clears the tape.

Precision follows the global mode in :mod:`vrvc.config`: f64 for tests and
gradient checks, f32 for training speed.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy import special as _sp

from . import config, kernels
from .errors import DimensionError, NonFiniteError, ProbeError, StateError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (evaluation renders, decoding)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _unbroadcast_owned(g: np.ndarray, shape: tuple) -> tuple:
    """Like _unbroadcast, also reporting whether the result is a fresh array."""
    reduced = _unbroadcast(g, shape)
    return reduced, reduced is not g


class Tensor:
    """Contiguous real-valued array with an optional same-shape gradient."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype if dtype is not None else config.dtype())
        self.grad = None
        self.requires_grad = requires_grad and _grad_enabled
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return self.data.item()

    def check_finite(self, context: str = "tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{context}: non-finite values detected")
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- tape -------------------------------------------------------------

    def backward(self, grad=None):
        if not self.requires_grad:
            raise StateError("backward called on a tensor with no recorded tape")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accum(self, g: np.ndarray, owned: bool = False):
        """Add g into the gradient accumulator.

        `owned=True` promises g is a fresh array the caller will not reuse,
        letting the first accumulation adopt it without a copy.
        """
        if self.grad is None:
            if owned and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True) if g.dtype != self.data.dtype else g.copy()
        else:
            self.grad += g

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(p for p in parents if p.requires_grad) if needs else ()
    out._backward = backward if needs else None
    return out


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(*_unbroadcast_owned(g, a.data.shape))
        if b.requires_grad:
            b._accum(*_unbroadcast_owned(g, b.data.shape))

    return _make(a.data + b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape), owned=True)
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape), owned=True)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.data.shape), owned=True)
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape), owned=True)

    return _make(a.data / b.data, (a, b), backward)


def pow_const(a, p) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def backward(g):
        a._accum(g * p * a.data ** (p - 1.0), owned=True)

    return _make(a.data**p, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner sizes differ: {a.data.shape} @ {b.data.shape}")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T, owned=True)
        if b.requires_grad:
            b._accum(a.data.T @ g, owned=True)

    return _make(a.data @ b.data, (a, b), backward)


# -- elementwise nonlinearities ---------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accum(g * (a.data > 0), owned=True)

    return _make(np.maximum(a.data, 0), (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = _sp.expit(a.data)

    def backward(g):
        a._accum(g * out_data * (1 - out_data), owned=True)

    return _make(out_data, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accum(g * _sp.expit(a.data), owned=True)

    return _make(np.logaddexp(np.asarray(0, dtype=a.data.dtype), a.data), (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accum(g * out_data, owned=True)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accum(g / a.data, owned=True)

    return _make(np.log(a.data), (a,), backward)


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accum(g * np.sign(a.data), owned=True)

    return _make(np.abs(a.data), (a,), backward)


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient passes only where a > floor."""
    a = as_tensor(a)

    def backward(g):
        a._accum(g * (a.data > floor), owned=True)

    return _make(np.maximum(a.data, floor), (a,), backward)


def gauss_cdf(a) -> Tensor:
    """Standard normal CDF (Cephes ndtr); derivative is the normal pdf."""
    a = as_tensor(a)

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * np.asarray(1.0 / np.sqrt(2 * np.pi), dtype=a.data.dtype)
        a._accum(g * pdf, owned=True)

    return _make(_sp.ndtr(a.data).astype(a.data.dtype, copy=False), (a,), backward)


# -- reductions / shape ------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.data.shape).copy() if np.ndim(g) else np.full_like(a.data, g), owned=True)
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(ge, a.data.shape).copy(), owned=True)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def cumsum(a, axis: int) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accum(np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis), owned=True)

    return _make(np.cumsum(a.data, axis=axis), (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape

    def backward(g):
        a._accum(g.reshape(old), owned=True)

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        a._accum(np.transpose(g, None if axes is None else np.argsort(axes)), owned=True)

    return _make(np.transpose(a.data, axes), (a,), backward)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] += g
        a._accum(full, owned=True)

    return _make(a.data[key], (a,), backward)


def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                p._accum(g[tuple(index)], owned=True)

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


# -- quantization (straight-through) -----------------------------------------


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, halves away from zero."""
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def ste_round_scaled(y, step) -> Tensor:
    """round(y/step)*step on the value path; identity gradient to y.

    `step` enters as plain data: no gradient is routed to the quantization
    step through this op (the rate path is where the step learns).
    """
    y = as_tensor(y)
    step_data = step.data if isinstance(step, Tensor) else np.asarray(step, dtype=y.data.dtype)

    def backward(g):
        y._accum(*_unbroadcast_owned(g, y.data.shape))

    return _make(round_half_away(y.data / step_data) * step_data, (y,), backward)


# -- convolution --------------------------------------------------------------


def conv3x3(x, kernels_t) -> Tensor:
    """Zero-padded stride-1 3x3 convolution: x (B,Ci,H,W), kernels (Co,Ci,3,3)."""
    x, kernels_t = as_tensor(x), as_tensor(kernels_t)
    if x.data.ndim != 4 or kernels_t.data.ndim != 4 or kernels_t.data.shape[2:] != (3, 3):
        raise DimensionError(f"conv3x3 expects x (B,Ci,H,W), kernels (Co,Ci,3,3); got {x.data.shape}, {kernels_t.data.shape}")
    if x.data.shape[1] != kernels_t.data.shape[1]:
        raise DimensionError(f"conv3x3 channel mismatch: input {x.data.shape[1]}, kernels {kernels_t.data.shape[1]}")

    k_data = np.ascontiguousarray(kernels_t.data)
    x_data = np.ascontiguousarray(x.data)

    def backward(g):
        gk, gx = kernels.conv3x3_bwd(k_data, x_data, np.ascontiguousarray(g))
        if kernels_t.requires_grad:
            kernels_t._accum(gk, owned=True)
        if x.requires_grad:
            x._accum(gx, owned=True)

    return _make(kernels.conv3x3_fwd(k_data, x_data), (x, kernels_t), backward)


def conv3x3_eval(kernels_arr, feature_map) -> Tensor:
    """Single-stack convenience form: kernels (Co,Ci,3,3), input (Ci,H,W)."""
    kernels_arr, feature_map = as_tensor(kernels_arr), as_tensor(feature_map)
    if feature_map.data.ndim != 3:
        raise DimensionError(f"expected (Ci,H,W) feature stack, got {feature_map.data.shape}")
    ci, h, w = feature_map.data.shape
    out = conv3x3(reshape(feature_map, (1, ci, h, w)), kernels_arr)
    return reshape(out, (kernels_arr.data.shape[0], h, w))


# -- MLP ----------------------------------------------------------------------

_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "none": lambda t: t}


class Mlp:
    """Plain fully connected stack; activation between layers, linear output."""

    def __init__(self, layers: list[tuple[Tensor, Tensor]], activation: str = "relu"):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.layers = layers
        self.activation = activation

    @classmethod
    def create(cls, sizes: list[int], rng: np.random.Generator, activation: str = "relu", name: str = "mlp") -> "Mlp":
        """Seeded init, uniform in +-1/sqrt(fan_in)."""
        layers = []
        for i, (din, dout) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / np.sqrt(din)
            w = Tensor(rng.uniform(-bound, bound, size=(din, dout)), requires_grad=True, name=f"{name}.w{i}")
            b = Tensor(rng.uniform(-bound, bound, size=(dout,)), requires_grad=True, name=f"{name}.b{i}")
            layers.append((w, b))
        return cls(layers, activation)

    def params(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_eval(self.layers, x, self.activation)


def mlp_eval(weights: list[tuple[Tensor, Tensor]], x, activation: str = "relu") -> Tensor:
    """Forward through (W, b) layers; `activation` between layers only.

    The final layer output is pre-activation.  Input may be (N, d) or (d,).
    """
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    act = _ACTIVATIONS[activation]
    x = as_tensor(x)
    squeeze = x.data.ndim == 1
    if squeeze:
        x = reshape(x, (1, x.data.shape[0]))
    for i, (w, b) in enumerate(weights):
        if x.data.shape[1] != w.data.shape[0]:
            raise DimensionError(f"mlp layer {i}: input width {x.data.shape[1]} != weight rows {w.data.shape[0]}")
        x = add(matmul(x, w), b)
        if i < len(weights) - 1:
            x = act(x)
    return reshape(x, (x.data.shape[1],)) if squeeze else x


def mlp_grad(weights, x, upstream, activation: str = "relu"):
    """Gradients of <upstream, mlp(x)> w.r.t. every weight and the input."""
    wts = [(Tensor(w.data, requires_grad=True), Tensor(b.data, requires_grad=True)) for w, b in weights]
    xin = Tensor(as_tensor(x).data, requires_grad=True)
    out = mlp_eval(wts, xin, activation)
    up = as_tensor(upstream)
    if up.data.shape != out.data.shape:
        raise DimensionError(f"upstream shape {up.data.shape} != output shape {out.data.shape}")
    loss = tsum(mul(out, up.detach()))
    loss.backward()
    grads = [(w.grad, b.grad) for w, b in wts]
    return grads, xin.grad


# -- finite-difference checking ----------------------------------------------


def grad_check(f, params: list[Tensor], tolerance: float = 1e-4, h: float = 1e-5):
    """Compare analytic gradients of scalar f(params) with central differences.

    Returns a report dict with per-parameter max relative error and pass/fail.
    f is called with no arguments and must rebuild its graph from `params`
    each time.  Probe points where f is non-finite raise ProbeError.
    """
    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise ProbeError("objective non-finite at the evaluation point")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    per_param = []
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gnum = np.zeros_like(flat)
        for i in range(flat.size):
            keep = flat[i]
            step = h * max(1.0, abs(keep))
            flat[i] = keep + step
            fp = float(f().data.reshape(-1)[0])
            flat[i] = keep - step
            fm = float(f().data.reshape(-1)[0])
            flat[i] = keep
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ProbeError(f"objective non-finite at probe of {p.name or 'param'}[{i}]")
            gnum[i] = (fp - fm) / (2 * step)
        gn = gnum.reshape(p.data.shape)
        denom = np.maximum(np.abs(ga) + np.abs(gn), 1e-8)
        err = float(np.max(np.abs(ga - gn) / denom)) if p.data.size else 0.0
        per_param.append({"name": p.name, "max_rel_err": err})
        worst = max(worst, err)
    return {"max_rel_err": worst, "passed": worst < tolerance, "per_param": per_param}
