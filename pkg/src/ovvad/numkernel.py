"""Dense float64 matrices, a small reverse-mode tape, AdamW, and a
finite-difference gradient checker.

Everything is plain numpy on the CPU and fully deterministic: the tape
records one node per primitive in construction order (already a valid
topological order), and the backward pass is a single reversed walk over
that list. Values are kept in 64-bit floats even though feature files on
disk are 32-bit; gradient checking needs the headroom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.special import erf, expit

from .errors import NumericalError

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# matrices and plain (non-tape) forward ops


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Array:
    """Validate and return a row-major float64 matrix.

    Rejects non-2-D input and any NaN/Inf entry; optional rows/cols pin the
    expected shape.
    """
    a = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if a.ndim != 2:
        raise ValueError(f"matrix must be 2-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("matrix entries must be finite (NaN/Inf rejected)")
    if rows is not None and a.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {a.shape[0]}")
    if cols is not None and a.shape[1] != cols:
        raise ValueError(f"expected {cols} cols, got {a.shape[1]}")
    return a


def as_vector(data, length: int | None = None) -> Array:
    a = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if a.ndim != 1:
        raise ValueError(f"vector must be 1-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("vector entries must be finite (NaN/Inf rejected)")
    if length is not None and a.shape[0] != length:
        raise ValueError(f"expected length {length}, got {a.shape[0]}")
    return a


def matmul(a: Array, b: Array) -> Array:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def row_softmax(a: Array) -> Array:
    """Softmax along the last axis with per-row max subtraction."""
    a = np.asarray(a, dtype=np.float64)
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: Array, gamma: Array, beta: Array, eps: float = 1e-5) -> Array:
    """Per-row standardization followed by the affine (gamma, beta)."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError(
            f"gamma/beta must have length {x.shape[-1]}, got {gamma.shape}/{beta.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gamma * (x - mu) / np.sqrt(var + eps) + beta


def sigmoid(x: Array) -> Array:
    return expit(np.asarray(x, dtype=np.float64))


def gelu(x: Array) -> Array:
    """Exact Gaussian-CDF GeLU (not the tanh approximation)."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


# ---------------------------------------------------------------------------
# reverse-mode tape


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast gradient back down to the operand's shape."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Var:
    """One tape node: cached forward value plus its backward rule."""

    __slots__ = ("data", "grad", "tape", "_backward", "name")

    # keep numpy from consuming Vars elementwise; defer to reflected operators
    __array_ufunc__ = None

    def __init__(self, data: Array, tape: "Tape", backward=None, name: str | None = None):
        self.data = data
        self.grad: Array | None = None
        self.tape = tape
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    # arithmetic sugar; non-Var operands are constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul_v(self, other)

    @property
    def T(self) -> "Var":
        return transpose(self)

    def reshape(self, *shape) -> "Var":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Ordered record of primitives; backward walks it in exact reverse."""

    def __init__(self):
        self._nodes: list[Var] = []

    def leaf(self, data, name: str | None = None) -> Var:
        a = np.asarray(data, dtype=np.float64)
        if not np.isfinite(a).all():
            raise NumericalError(f"non-finite leaf value{': ' + name if name else ''}")
        node = Var(a, self, backward=None, name=name)
        self._nodes.append(node)
        return node

    def _record(self, data: Array, backward) -> Var:
        node = Var(np.asarray(data, dtype=np.float64), self, backward=backward)
        self._nodes.append(node)
        return node

    def backward(self, loss: Var) -> None:
        """Seed d(loss)/d(loss)=1 and accumulate grads into every ancestor."""
        if loss.data.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        for node in self._nodes:
            node.grad = None
        loss.grad = np.array(1.0)
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)

    def gradient(self, leaf: Var) -> Array:
        """Gradient of the last backward() w.r.t. a leaf; exact zeros if unused."""
        return leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)


def _data(x) -> Array:
    return x.data if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise TypeError("at least one operand must be a tape Var")


def _acc(x: Var, g: Array) -> None:
    if x.grad is None:
        x.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        x.grad += g


def add(a, b) -> Var:
    ad, bd = _data(a), _data(b)
    out = ad + bd

    def backward(g):
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g, ad.shape))
        if isinstance(b, Var):
            _acc(b, _unbroadcast(g, bd.shape))

    return _tape_of(a, b)._record(out, backward)


def sub(a, b) -> Var:
    ad, bd = _data(a), _data(b)
    out = ad - bd

    def backward(g):
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g, ad.shape))
        if isinstance(b, Var):
            _acc(b, _unbroadcast(-g, bd.shape))

    return _tape_of(a, b)._record(out, backward)


def mul(a, b) -> Var:
    ad, bd = _data(a), _data(b)
    out = ad * bd

    def backward(g):
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g * bd, ad.shape))
        if isinstance(b, Var):
            _acc(b, _unbroadcast(g * ad, bd.shape))

    return _tape_of(a, b)._record(out, backward)


def div(a, b) -> Var:
    ad, bd = _data(a), _data(b)
    out = ad / bd

    def backward(g):
        if isinstance(a, Var):
            _acc(a, _unbroadcast(g / bd, ad.shape))
        if isinstance(b, Var):
            _acc(b, _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _tape_of(a, b)._record(out, backward)


def neg(a: Var) -> Var:
    def backward(g):
        _acc(a, -g)

    return a.tape._record(-a.data, backward)


def matmul_v(a, b) -> Var:
    ad, bd = _data(a), _data(b)
    if ad.ndim != 2 or bd.ndim != 2 or ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
    out = ad @ bd

    def backward(g):
        if isinstance(a, Var):
            _acc(a, g @ bd.T)
        if isinstance(b, Var):
            _acc(b, ad.T @ g)

    return _tape_of(a, b)._record(out, backward)


def transpose(a: Var) -> Var:
    def backward(g):
        _acc(a, g.T)

    return a.tape._record(a.data.T.copy(), backward)


def reshape(a: Var, shape) -> Var:
    old = a.data.shape

    def backward(g):
        _acc(a, g.reshape(old))

    return a.tape._record(a.data.reshape(shape).copy(), backward)


def concat_cols(a: Var, b: Var) -> Var:
    ad, bd = a.data, b.data
    if ad.shape[0] != bd.shape[0]:
        raise ValueError(f"concat_cols row mismatch: {ad.shape} vs {bd.shape}")
    split = ad.shape[1]

    def backward(g):
        _acc(a, g[:, :split])
        _acc(b, g[:, split:])

    return a.tape._record(np.concatenate([ad, bd], axis=1), backward)


def row_softmax_v(a: Var) -> Var:
    y = row_softmax(a.data)

    def backward(g):
        s = (g * y).sum(axis=-1, keepdims=True)
        _acc(a, y * (g - s))

    return a.tape._record(y, backward)


def sigmoid_v(a: Var) -> Var:
    y = expit(a.data)

    def backward(g):
        _acc(a, g * y * (1.0 - y))

    return a.tape._record(y, backward)


def gelu_v(a: Var) -> Var:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    y = x * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _acc(a, g * (cdf + x * pdf))

    return a.tape._record(y, backward)


def layer_norm_v(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = gamma.data * xhat + beta.data

    def backward(g):
        _acc(beta, g.sum(axis=0))
        _acc(gamma, (g * xhat).sum(axis=0))
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _acc(x, inv * (dxhat - m1 - xhat * m2))

    return x.tape._record(out, backward)


def log_v(a: Var) -> Var:
    def backward(g):
        _acc(a, g / a.data)

    return a.tape._record(np.log(a.data), backward)


def sqrt_v(a: Var) -> Var:
    y = np.sqrt(a.data)

    def backward(g):
        _acc(a, g * 0.5 / y)

    return a.tape._record(y, backward)


def clip_v(a: Var, lo: float, hi: float) -> Var:
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        _acc(a, g * mask)

    return a.tape._record(np.clip(a.data, lo, hi), backward)


def vsum(a: Var, axis: int | None = None, keepdims: bool = False) -> Var:
    shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, shape).copy())

    return a.tape._record(a.data.sum(axis=axis, keepdims=keepdims), backward)


def vmean(a: Var, axis: int | None = None, keepdims: bool = False) -> Var:
    shape = a.data.shape
    count = a.data.size if axis is None else shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g / count, shape).copy())

    return a.tape._record(a.data.mean(axis=axis, keepdims=keepdims), backward)


def take_rows(a: Var, idx) -> Var:
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        dx = np.zeros_like(a.data)
        np.add.at(dx, idx, g)
        _acc(a, dx)

    return a.tape._record(a.data[idx].copy(), backward)


def take_cols(a: Var, idx) -> Var:
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.data.shape[0])[:, None]

    def backward(g):
        dx = np.zeros_like(a.data)
        np.add.at(dx, (rows, idx[None, :]), g)
        _acc(a, dx)

    return a.tape._record(a.data[:, idx].copy(), backward)


def take_along_cols(a: Var, idx) -> Var:
    """Per-row gather: out[i, j] = a[i, idx[i, j]]."""
    idx = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.data.shape[0])[:, None]

    def backward(g):
        dx = np.zeros_like(a.data)
        np.add.at(dx, (rows, idx), g)
        _acc(a, dx)

    return a.tape._record(np.take_along_axis(a.data, idx, axis=1), backward)


# ---------------------------------------------------------------------------
# gradient checking

LossFn = Callable[[dict[str, Var]], Var]


def grad_check(loss_fn: LossFn, params: Mapping[str, Array], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` is called with a dict of leaf Vars (same keys as ``params``)
    on a fresh tape and must return a scalar Var. The error per entry is
    |analytic - fd| / max(1, |fd|); the max over all entries is returned.
    """
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}

    tape = Tape()
    pvars = {k: tape.leaf(v, name=k) for k, v in work.items()}
    loss = loss_fn(pvars)
    if not np.isfinite(loss.data):
        raise NumericalError("non-finite loss at the unperturbed point")
    tape.backward(loss)
    analytic = {k: tape.gradient(pvars[k]) for k in work}

    def eval_loss(pname: str) -> float:
        t = Tape()
        pv = {k: t.leaf(v, name=k) for k, v in work.items()}
        val = float(loss_fn(pv).data)
        if not math.isfinite(val):
            raise NumericalError(f"non-finite loss while perturbing parameter {pname!r}")
        return val

    worst = 0.0
    for name in sorted(work):
        flat = work[name].reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            lp = eval_loss(name)
            flat[i] = saved - eps
            lm = eval_loss(name)
            flat[i] = saved
            fd = (lp - lm) / (2.0 * eps)
            err = abs(aflat[i] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class OptimizerState:
    """Per-parameter moment accumulators plus the shared hyperparameters."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    step: int
    m: dict[str, Array]
    v: dict[str, Array]


def adamw_init(
    params: Mapping[str, Array],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> OptimizerState:
    return OptimizerState(
        lr=lr,
        beta1=betas[0],
        beta2=betas[1],
        eps=eps,
        weight_decay=weight_decay,
        step=0,
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adamw_step(
    params: dict[str, Array], grads: Mapping[str, Array], state: OptimizerState
) -> dict[str, Array]:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name in sorted(params):
        p = params[name]
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p -= state.lr * (update + state.weight_decay * p)
    return params
