"""Dense float64 tensors with reverse-mode automatic differentiation.

A module-level tape records every differentiable operation in execution
order (define-by-run).  ``backward(loss)`` replays the recorded backward
rules in reverse, accumulates gradients into every ``requires_grad``
tensor reachable from the loss, and clears the tape.

Scope is deliberately small: broadcasting is limited to scalars and
trailing-dimension (bias-style) vectors, and there is no view sharing a
caller could mutate through.  Everything runs in float64 so analytic
gradients can be checked against central finite differences.

Not thread-safe: one tape, one thread.  Frozen parameters (plain data,
no recording via ``no_grad``) may be read concurrently.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit

from .errors import DimensionError

__all__ = [
    "Tensor", "Tape", "no_grad", "record_op", "backward",
    "matmul", "linear", "add", "mul", "neg", "sub",
    "relu", "gelu", "silu", "softplus", "sigmoid", "exp",
    "reshape", "transpose", "concat", "take_rows",
    "reduce_max", "reduce_sum", "mean",
    "softmax", "layer_norm", "cross_entropy",
    "Adam", "xavier_uniform", "zeros_param",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class _Node:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("output", "backward")

    def __init__(self, output, backward):
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of operations; inputs of each op precede it."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def clear(self):
        self.nodes.clear()


_tape = Tape()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable recording inside the block (inference / frozen evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def record_op(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Create the output tensor of a custom op, recording its backward rule.

    ``backward_fn(grad_out)`` must accumulate into the inputs' ``grad``
    via the gradient it computes (use the returned tensor's inputs and
    ``Tensor.grad`` through closures).  Recording is skipped when grads
    are globally disabled or no input requires them.
    """
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        _tape.nodes.append(_Node(out, backward_fn))
    return out


def backward(loss: Tensor):
    """Populate gradients of everything the scalar ``loss`` depends on.

    Replays the tape's backward rules in reverse order (each node visited
    once) and clears the tape afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(_tape.nodes):
            if node.output.grad is not None:
                node.backward(node.output.grad)
    finally:
        _tape.clear()


# ---------------------------------------------------------------------------
# broadcasting helpers (scalar and trailing-dimension only)


def _broadcast_kind(a_shape, b_shape):
    """Classify the allowed add/mul broadcast: 'same', 'scalar_a/b', 'trail_a/b'."""
    if a_shape == b_shape:
        return "same"
    a_n, b_n = int(np.prod(a_shape)), int(np.prod(b_shape))
    if b_n == 1:
        return "scalar_b"
    if a_n == 1:
        return "scalar_a"
    if len(b_shape) == 1 and len(a_shape) >= 2 and b_shape[0] == a_shape[-1]:
        return "trail_b"
    if len(a_shape) == 1 and len(b_shape) >= 2 and a_shape[0] == b_shape[-1]:
        return "trail_a"
    raise DimensionError(
        f"unsupported broadcast between shapes {a_shape} and {b_shape}; "
        "only equal shapes, scalars, and trailing-dimension vectors combine"
    )


def _reduce_to(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    """Sum the output gradient back down to the named operand's shape."""
    other = "b" if side == "a" else "a"
    if kind == "same" or kind == f"trail_{other}" or kind == f"scalar_{other}":
        return g
    if kind.startswith("scalar"):
        return np.asarray(g.sum())
    # trailing vector: sum over all leading axes
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    out_data = a.data + b.data

    def back(g):
        _accumulate(a, _reduce_to(g, kind, "a").reshape(a.shape))
        _accumulate(b, _reduce_to(g, kind, "b").reshape(b.shape))

    return record_op(out_data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a.shape, b.shape)
    out_data = a.data * b.data

    def back(g):
        _accumulate(a, _reduce_to(g * b.data, kind, "a").reshape(a.shape))
        _accumulate(b, _reduce_to(g * a.data, kind, "b").reshape(b.shape))

    return record_op(out_data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return record_op(-a.data, (a,), lambda g: _accumulate(a, -g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def back(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return record_op(out_data, (a, b), back)


_ACTIVATIONS = {"relu", "gelu", "silu", None}


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, act: str | None = None) -> Tensor:
    """Fused ``act(x @ w + b)`` for 2-D ``x``; one tape node."""
    if act not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {act!r}")
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear shapes disagree: x {x.shape}, w {w.shape}")
    pre = x.data @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise DimensionError(f"bias shape {b.shape} != ({w.shape[1]},)")
        pre = pre + b.data
    out_data, dact = _apply_activation(pre, act)

    def back(g):
        gp = g if dact is None else g * dact()
        _accumulate(x, gp @ w.data.T)
        _accumulate(w, x.data.T @ gp)
        if b is not None:
            _accumulate(b, gp.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    return record_op(out_data, inputs, back)


def _apply_activation(pre: np.ndarray, act: str | None):
    """Return (activated, derivative_thunk); thunk is None for identity."""
    if act is None:
        return pre, None
    if act == "relu":
        mask = pre > 0.0
        return np.where(mask, pre, 0.0), lambda: mask.astype(np.float64)
    if act == "gelu":
        cdf = 0.5 * (1.0 + erf(pre * _INV_SQRT2))
        out = pre * cdf
        return out, lambda: cdf + pre * np.exp(-0.5 * pre * pre) * _INV_SQRT2PI
    # silu
    sig = expit(pre)
    return pre * sig, lambda: sig * (1.0 + pre * (1.0 - sig))


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def _unary(a: Tensor, out_data: np.ndarray, dfn) -> Tensor:
    return record_op(out_data, (a,), lambda g: _accumulate(a, g * dfn()))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    return _unary(a, np.where(mask, a.data, 0.0), lambda: mask.astype(np.float64))


def gelu(a: Tensor) -> Tensor:
    out, dact = _apply_activation(a.data, "gelu")
    return _unary(a, out, dact)


def silu(a: Tensor) -> Tensor:
    out, dact = _apply_activation(a.data, "silu")
    return _unary(a, out, dact)


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)
    return _unary(a, out, lambda: expit(a.data))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _unary(a, s, lambda: s * (1.0 - s))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _unary(a, e, lambda: e)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)
    return record_op(out_data, (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")
    return record_op(a.data.T.copy(), (a,), lambda g: _accumulate(a, g.T))


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(sl)])

    return record_op(out_data, tuple(parts), back)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D tensor; output shape is ``idx.shape + (D,)``."""
    if a.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-D tensor, got {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    out_data = a.data[idx]

    def back(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx.reshape(-1), g.reshape(-1, a.shape[1]))
        _accumulate(a, ga)

    return record_op(out_data, (a,), back)


# ---------------------------------------------------------------------------
# reductions


def reduce_max(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along ``axis``; gradient flows to the first (lowest-index) argmax."""
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    out_data = a.data.max(axis=axis, keepdims=keepdims)
    argmax = np.expand_dims(a.data.argmax(axis=axis), axis)

    def back(g):
        ga = np.zeros_like(a.data)
        gexp = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(ga, argmax, gexp, axis)
        _accumulate(a, ga)

    return record_op(out_data, (a,), back)


def reduce_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape).copy())
        else:
            gexp = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gexp, a.shape).copy())

    return record_op(out_data, (a,), back)


def mean(a: Tensor) -> Tensor:
    """Mean over all elements (scalar output)."""
    n = a.size
    out_data = np.asarray(a.data.mean())
    return record_op(out_data, (a,), lambda g: _accumulate(a, np.full(a.shape, float(g) / n)))


# ---------------------------------------------------------------------------
# normalized blocks


def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stable softmax (max-subtraction) along ``axis``.

    ``-inf`` entries are legal and yield exact zeros, which is how
    attention masks are realized.
    """
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accumulate(a, y * (g - inner))

    return record_op(y, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0.0:
        raise ValueError(f"eps must be positive, got {eps}")
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm needs a non-empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"gain/bias shapes {gain.shape}/{bias.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        _accumulate(gain, (g * xhat).sum(axis=lead))
        _accumulate(bias, g.sum(axis=lead))
        gx = g * gain.data
        dvar = (gx * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
        dmu = -(gx.sum(axis=-1, keepdims=True)) * inv + dvar * (-2.0) * xc.mean(axis=-1, keepdims=True)
        _accumulate(x, gx * inv + dvar * 2.0 * xc / d + dmu / d)

    return record_op(out_data, (x, gain, bias), back)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row softmax."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy expects (T, C) logits and (T,) labels, got {logits.shape}, {labels.shape}"
        )
    n, c = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    nll = lse - logits.data[np.arange(n), labels]
    out_data = np.asarray(nll.mean())

    def back(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        _accumulate(logits, p * (float(g) / n))

    return record_op(out_data, (logits,), back)


# ---------------------------------------------------------------------------
# parameters and optimization


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Tensor:
    """Glorot-uniform initialized parameter tensor."""
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Adam:
    """Adam optimizer over an explicit parameter list.

    Desk-scale default lr is 1e-3; the documented full-scale setting
    (batch 32 across 8 devices) uses 0.03.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * (p.grad * p.grad)
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.data = p.data - self.lr * update

    def zero_grad(self):
        for p in self.params:
            p.grad = None
