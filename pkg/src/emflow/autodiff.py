"""Reverse-mode automatic differentiation on a dynamic tape.

Values are float64 numpy arrays (scalars are 0-d). Recording happens only
while a ``Tape`` is active; outside a tape every operation evaluates
eagerly, which doubles as inference mode. One tape belongs to one
execution context; independent runs use independent tapes.
"""

from __future__ import annotations

import numpy as np

from . import special
from .errors import NonFiniteLoss

_TAPE_STACK: list["Tape"] = []


def _active() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Param:
    """A named trainable array, mutated in place by optimizers."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


class _Node:
    __slots__ = ("parents", "backward", "value", "op", "param")

    def __init__(self, parents, backward, value, op, param=None):
        self.parents = parents
        self.backward = backward
        self.value = value
        self.op = op
        self.param = param


class Tape:
    """Records operations for one reverse pass; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, _Node] = {}

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False

    def _record(self, parents, backward, value, op):
        node = _Node(parents, backward, value, op)
        self.nodes.append(node)
        return node

    def leaf(self, param: Param) -> "_Node":
        node = self._leaves.get(id(param))
        if node is None:
            node = _Node((), None, param.value, "leaf", param=param)
            self.nodes.append(node)
            self._leaves[id(param)] = node
        return node


class Tensor:
    """Array value plus an optional tape node for gradient participation."""

    __slots__ = ("value", "node")

    def __init__(self, value, node=None):
        self.value = value
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    # Arithmetic sugar; implementations below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)


def constant(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64))


def watch(param: Param) -> Tensor:
    """Expose a parameter to the active tape as a differentiable leaf."""
    tape = _active()
    if tape is None:
        return Tensor(param.value)
    return Tensor(param.value, tape.leaf(param))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Param):
        return watch(x)
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(value, op, inputs, backward):
    """Record an op if a tape is active and any input is tracked."""
    tape = _active()
    if tape is None:
        return Tensor(value)
    parents = tuple(t.node for t in inputs if t.node is not None)
    if not parents:
        return Tensor(value)
    # backward receives the output gradient and returns per-input grads
    # aligned with `inputs`; None entries mean "no gradient".
    def dispatch(g, _inputs=inputs, _backward=backward):
        grads = _backward(g)
        return [gr for t, gr in zip(_inputs, grads) if t.node is not None]

    node = tape._record(parents, dispatch, value, op)
    return Tensor(value, node)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    v = a.value + b.value
    return _make(v, "add", (a, b), lambda g: (
        _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    v = a.value - b.value
    return _make(v, "sub", (a, b), lambda g: (
        _unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    v = a.value * b.value
    return _make(v, "mul", (a, b), lambda g: (
        _unbroadcast(g * b.value, a.value.shape),
        _unbroadcast(g * a.value, b.value.shape)))


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    v = a.value / b.value
    return _make(v, "div", (a, b), lambda g: (
        _unbroadcast(g / b.value, a.value.shape),
        _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)))


def neg(a):
    a = _as_tensor(a)
    return _make(-a.value, "neg", (a,), lambda g: (-g,))


def power(a, k):
    """a**k for a constant real exponent k."""
    a = _as_tensor(a)
    k = float(k)
    v = a.value ** k
    return _make(v, "pow", (a,), lambda g: (g * k * a.value ** (k - 1.0),))


def square(a):
    a = _as_tensor(a)
    return _make(a.value * a.value, "square", (a,), lambda g: (2.0 * g * a.value,))


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def exp(a):
    a = _as_tensor(a)
    v = np.exp(a.value)
    return _make(v, "exp", (a,), lambda g: (g * v,))


def log(a):
    a = _as_tensor(a)
    v = np.log(a.value)
    return _make(v, "log", (a,), lambda g: (g / a.value,))


def sqrt(a):
    a = _as_tensor(a)
    v = np.sqrt(a.value)
    return _make(v, "sqrt", (a,), lambda g: (0.5 * g / v,))


def tanh(a):
    a = _as_tensor(a)
    v = np.tanh(a.value)
    return _make(v, "tanh", (a,), lambda g: (g * (1.0 - v * v),))


def sigmoid(a):
    a = _as_tensor(a)
    x = a.value
    v = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(v, "sigmoid", (a,), lambda g: (g * v * (1.0 - v),))


def softplus(a):
    """log(1 + exp(x)), overflow-safe."""
    a = _as_tensor(a)
    x = a.value
    v = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(v, "softplus", (a,), lambda g: (g * sig,))


def relu(a):
    a = _as_tensor(a)
    v = np.maximum(a.value, 0.0)
    return _make(v, "relu", (a,), lambda g: (g * (a.value > 0.0),))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes only through the interior."""
    a = _as_tensor(a)
    v = np.clip(a.value, lo, hi)
    inside = (a.value > lo) & (a.value < hi)
    return _make(v, "clip", (a,), lambda g: (g * inside,))


def norm_cdf(a):
    a = _as_tensor(a)
    v = special.std_normal_cdf(a.value)
    v = np.asarray(v, dtype=np.float64)
    pdf = np.exp(-0.5 * a.value * a.value) / np.sqrt(2.0 * np.pi)
    return _make(v, "norm_cdf", (a,), lambda g: (g * pdf,))


def norm_quantile(a):
    a = _as_tensor(a)
    v = np.asarray(special.std_normal_quantile(a.value), dtype=np.float64)
    pdf = np.exp(-0.5 * v * v) / np.sqrt(2.0 * np.pi)
    return _make(v, "norm_quantile", (a,), lambda g: (g / pdf,))


def stop_gradient(a):
    a = _as_tensor(a)
    return Tensor(a.value)


_LOG_2PI = float(np.log(2.0 * np.pi))


def gated_affine(x, mu, sigma, lam):
    """y = (1 + lam*(sigma-1))*x + lam*mu (fused elementwise primitive)."""
    x, mu, sigma, lam = (_as_tensor(t) for t in (x, mu, sigma, lam))
    slope = 1.0 + lam.value * (sigma.value - 1.0)
    v = slope * x.value + lam.value * mu.value

    def backward(g):
        return (_unbroadcast(g * slope, x.value.shape),
                _unbroadcast(g * lam.value, mu.value.shape),
                _unbroadcast(g * lam.value * x.value, sigma.value.shape),
                _unbroadcast(g * ((sigma.value - 1.0) * x.value + mu.value),
                             lam.value.shape))

    return _make(np.asarray(v, dtype=np.float64), "gated_affine",
                 (x, mu, sigma, lam), backward)


def gated_affine_inv(y, mu, sigma, lam):
    """x = (y - lam*mu) / (1 + lam*(sigma-1)) (fused elementwise primitive)."""
    y, mu, sigma, lam = (_as_tensor(t) for t in (y, mu, sigma, lam))
    slope = 1.0 + lam.value * (sigma.value - 1.0)
    v = (y.value - lam.value * mu.value) / slope

    def backward(g):
        gs = g / slope
        return (_unbroadcast(gs, y.value.shape),
                _unbroadcast(-gs * lam.value, mu.value.shape),
                _unbroadcast(-gs * v * lam.value, sigma.value.shape),
                _unbroadcast(-gs * (mu.value + (sigma.value - 1.0) * v),
                             lam.value.shape))

    return _make(np.asarray(v, dtype=np.float64), "gated_affine_inv",
                 (y, mu, sigma, lam), backward)


def gated_slope_logdet(sigma, lam):
    """Sum over the last axis of log(1 + lam*(sigma-1))."""
    sigma, lam = _as_tensor(sigma), _as_tensor(lam)
    slope = 1.0 + lam.value * (sigma.value - 1.0)
    v = np.asarray(np.log(slope).sum(axis=-1), dtype=np.float64)

    def backward(g):
        gg = g[..., None]
        return (_unbroadcast(gg * lam.value / slope, sigma.value.shape),
                _unbroadcast(gg * (sigma.value - 1.0) / slope,
                             lam.value.shape))

    return _make(v, "gated_slope_logdet", (sigma, lam), backward)


def gaussian_logpdf(x, mean, std):
    """Normal log density summed over the last axis (fused primitive)."""
    x, mean, std = _as_tensor(x), _as_tensor(mean), _as_tensor(std)
    z = (x.value - mean.value) / std.value
    elem = -np.log(std.value) - 0.5 * _LOG_2PI - 0.5 * z * z
    v = np.asarray(elem.sum(axis=-1), dtype=np.float64)

    def backward(g):
        gg = g[..., None]
        gx = -gg * z / std.value
        return (_unbroadcast(gx, x.value.shape),
                _unbroadcast(-gx, mean.value.shape),
                _unbroadcast(gg * (z * z - 1.0) / std.value, std.value.shape))

    return _make(v, "gaussian_logpdf", (x, mean, std), backward)


def bernoulli_logpdf(value, logit):
    """Bernoulli log density from logits, summed over the last axis."""
    value, logit = _as_tensor(value), _as_tensor(logit)
    l = logit.value
    sp = np.maximum(l, 0.0) + np.log1p(np.exp(-np.abs(l)))
    elem = value.value * l - sp
    v = np.asarray(elem.sum(axis=-1), dtype=np.float64)
    sig = np.where(l >= 0, 1.0 / (1.0 + np.exp(-np.abs(l))),
                   np.exp(-np.abs(l)) / (1.0 + np.exp(-np.abs(l))))

    def backward(g):
        gg = g[..., None]
        return (_unbroadcast(gg * l, value.value.shape),
                _unbroadcast(gg * (value.value - sig), logit.value.shape))

    return _make(v, "bernoulli_logpdf", (value, logit), backward)


# ---------------------------------------------------------------------------
# shape and reduction ops


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    v = a.value @ b.value
    return _make(v, "matmul", (a, b), lambda g: (
        g @ b.value.T, a.value.T @ g))


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    v = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).copy(),)

    return _make(np.asarray(v, dtype=np.float64), "sum", (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    v = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size if axis is None else a.value.shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.value.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / count, a.value.shape).copy(),)

    return _make(np.asarray(v, dtype=np.float64), "mean", (a,), backward)


def logsumexp(a, axis=-1, keepdims=False):
    a = _as_tensor(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    shifted = np.exp(a.value - m)
    total = shifted.sum(axis=axis, keepdims=True)
    v = m + np.log(total)
    if not keepdims:
        v = np.squeeze(v, axis=axis)
    soft = shifted / total

    def backward(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (gg * soft,)

    return _make(np.asarray(v, dtype=np.float64), "logsumexp", (a,), backward)


def gather(a, idx):
    """Select indices along the last axis (1-D or 2-D tensors)."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    v = a.value[..., idx]

    def backward(g):
        full = np.zeros_like(a.value)
        if a.value.ndim == 1:
            np.add.at(full, idx, g)
        else:
            np.add.at(full, (slice(None), idx), g)
        return (full,)

    return _make(v, "gather", (a,), backward)


def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    v = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        moved = np.moveaxis(g, axis, -1)
        outs = []
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            outs.append(np.moveaxis(moved[..., start:stop], -1, axis))
        return tuple(outs)

    return _make(v, "concat", tuple(tensors), backward)


def reshape(a, shape):
    a = _as_tensor(a)
    v = a.value.reshape(shape)
    return _make(v, "reshape", (a,), lambda g: (g.reshape(a.value.shape),))


def scatter(values, idx, size):
    """Place a 1-D tensor into a zero vector of length ``size`` at ``idx``.

    Indices must be unique.
    """
    values = _as_tensor(values)
    idx = np.asarray(idx)
    v = np.zeros(size, dtype=np.float64)
    v[idx] = values.value
    return _make(v, "scatter", (values,), lambda g: (g[idx],))


# ---------------------------------------------------------------------------
# gradients


def compute_gradients(loss: Tensor, params) -> dict:
    """Gradients of a scalar loss w.r.t. each Param.

    Parameters that do not touch the loss get an exact zero gradient.
    Raises NonFiniteLoss, naming the earliest non-finite tape node, when
    the loss value is NaN or Inf.
    """
    params = list(params)
    if loss.value.size != 1:
        raise ValueError("loss must be a scalar")
    if not np.isfinite(loss.value):
        tape = _active()
        culprit = "loss"
        if tape is not None:
            for i, node in enumerate(tape.nodes):
                if not np.all(np.isfinite(node.value)):
                    culprit = f"{node.op}#{i}"
                    break
        raise NonFiniteLoss(f"non-finite loss; first bad node: {culprit}")

    grads = {id(p): np.zeros_like(p.value) for p in params}
    if loss.node is None:
        return {p: grads[id(p)] for p in params}

    tape = _active()
    if tape is None:
        raise RuntimeError("compute_gradients requires the recording tape to be active")

    adjoint: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.value)}
    for node in reversed(tape.nodes):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.param is not None:
            acc = grads.get(id(node.param))
            if acc is not None:
                acc += g
            continue
        if node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None:
                continue
            slot = adjoint.get(id(parent))
            if slot is None:
                adjoint[id(parent)] = pg.copy() if pg.base is not None or pg is g else pg
            else:
                slot += pg

    return {p: grads[id(p)] for p in params}


def finite_difference_check(f, params, h=1e-6) -> float:
    """Max relative disagreement between tape gradients and central FD.

    ``f`` evaluates the scalar loss from the current parameter values; it
    is re-invoked with perturbed values, so it must be deterministic.
    """
    params = list(params)
    with Tape():
        loss = f()
        grads = compute_gradients(loss, params)

    worst = 0.0
    for p in params:
        g_ad = np.atleast_1d(grads[p]).ravel()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(f().value)
            flat[i] = orig - h
            f_minus = float(f().value)
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * h)
            err = abs(g_ad[i] - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst
