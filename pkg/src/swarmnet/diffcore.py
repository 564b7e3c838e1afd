"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of operations the swarm predictor needs are provided:
matrix products against weight matrices, valid-mode 1D convolution along
time, row gather/scatter for graph message passing, pointwise maps, and an
MSE reduction.  Broadcasting is restricted to leading axes (the smaller
operand's shape must be a suffix of the larger one's), which keeps every
backward rule a plain sum over the broadcast axes.

Recording happens only inside an active :class:`Tape`::

    with Tape() as tape:
        loss = mse(model(x), y)
    tape.backward(loss)

Outside a tape the same functions run as ordinary numpy code, which is how
inference and rollouts avoid building graphs.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    pass


class RankError(DimensionError):
    pass


class SeriesTooShortError(DimensionError):
    pass


class ParameterError(ValueError):
    pass


class PoisonedGradientError(FloatingPointError):
    def __init__(self, step, name=None):
        where = f" in {name!r}" if name else ""
        super().__init__(f"non-finite gradient{where} at optimizer step {step}")
        self.step = step
        self.name = name


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Define-by-run record of differentiable operations.

    Entries are appended in execution order, so parents always precede
    children and a single reverse sweep visits each entry once.
    """

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.entries)

    def clear(self):
        """Drop recorded entries and detach their outputs, breaking the
        tensor <-> tape reference cycles so intermediates are freed now."""
        for out, _, _, _ in self.entries:
            out.tape = out.node = out.grad = None
        self.entries = []

    def record(self, out, parents, backward, kind):
        self.entries.append((out, parents, backward, kind))
        return len(self.entries) - 1

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``.

        Intermediate adjoints live only for the duration of the sweep, so
        a second call on the same tape adds the same leaf gradients again
        (grads double unless zeroed in between).
        """
        if loss.data.size != 1:
            raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.tape is not self:
            return
        pending = {loss.node: np.ones_like(loss.data)}
        for idx in range(loss.node, -1, -1):
            g = pending.pop(idx, None)
            if g is None:
                continue
            out, parents, rule, _ = self.entries[idx]
            out.grad = g
            for parent, pg in zip(parents, rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.node is None:
                    pg = pg.astype(parent.data.dtype, copy=False)
                    if parent.grad is None:
                        parent.grad = np.zeros_like(parent.data)
                    parent.grad += pg
                elif parent.node in pending:
                    pending[parent.node] = pending[parent.node] + pg
                else:
                    pending[parent.node] = pg


class Tensor:
    """A dense array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "tape", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=DEFAULT_DTYPE, name=None):
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.tape = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    return as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b)


def _result(data, parents, backward, kind):
    out = Tensor(data, dtype=None)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.tape = tape
        out.node = tape.record(out, parents, backward, kind)
    return out


def _check_leading_broadcast(a_shape, b_shape, what):
    short, long_ = sorted((tuple(a_shape), tuple(b_shape)), key=len)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(
            f"{what}: shapes {tuple(a_shape)} and {tuple(b_shape)} do not broadcast over leading axes"
        )


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# -- pointwise ---------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    _check_leading_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _pair(a, b)
    _check_leading_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b):
    a, b = _pair(a, b)
    _check_leading_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(x, alpha):
    x = as_tensor(x)
    alpha = float(alpha)
    return _result(x.data * x.data.dtype.type(alpha), (x,), lambda g: (g * alpha,), "scale")


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    recorder = getattr(_local, "relu_masks", None)
    if recorder is not None:
        recorder.append(mask)
    return _result(np.where(mask, x.data, 0).astype(x.data.dtype, copy=False), (x,),
                   lambda g: (g * mask,), "relu")


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "tanh": tanh,
    "scale": scale,
}


def elementwise(kind, *inputs):
    """Dispatch a pointwise op by name (add, sub, mul, relu, tanh, scale)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ParameterError(f"unknown elementwise op {kind!r}") from None
    return fn(*inputs)


# -- linear algebra ----------------------------------------------------------

def matmul(a, b):
    """``a @ b`` where ``b`` is a 2-D weight matrix and ``a`` is ``[..., m, k]``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def conv1d_valid(series, kernel, bias=None):
    """Valid-mode convolution along the time axis (axis -2).

    ``series`` is ``[..., T, Cin]``, ``kernel`` is ``[K, Cin, Cout]`` and the
    result is ``[..., T-K+1, Cout]`` with
    ``out[t] = sum_tau series[t+tau] @ kernel[tau] + bias``.
    """
    series, kernel = as_tensor(series), as_tensor(kernel)
    if kernel.ndim != 3:
        raise DimensionError(f"conv1d_valid: kernel must be [K, Cin, Cout], got {kernel.shape}")
    k, cin, cout = kernel.shape
    if series.ndim < 2 or series.shape[-1] != cin:
        raise DimensionError(f"conv1d_valid: series {series.shape} does not match kernel {kernel.shape}")
    t = series.shape[-2]
    if t < k:
        raise SeriesTooShortError(f"conv1d_valid: series length {t} shorter than kernel {k}")
    t_out = t - k + 1
    x = series.data
    cols = np.concatenate([x[..., tau:tau + t_out, :] for tau in range(k)], axis=-1)
    w = kernel.data.reshape(k * cin, cout)

    def backward(g):
        gcols = g @ w.T
        gx = np.zeros_like(x)
        for tau in range(k):
            gx[..., tau:tau + t_out, :] += gcols[..., tau * cin:(tau + 1) * cin]
        gw = cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)
        return gx, gw.reshape(k, cin, cout)

    out = _result(cols @ w, (series, kernel), backward, "conv1d")
    return out if bias is None else add(out, bias)


def _one_hot(index, n, dtype):
    index = np.asarray(index, dtype=np.int64)
    m = np.zeros((index.size, n), dtype=dtype)
    m[np.arange(index.size), index] = 1
    return m


def take_rows(x, index):
    """Gather rows along axis -2: ``out[..., e, :] = x[..., index[e], :]``."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"take_rows needs rank >= 2, got {x.shape}")
    sel = _one_hot(index, x.shape[-2], x.data.dtype)
    return _result(sel @ x.data, (x,), lambda g: (sel.T @ g,), "take_rows")


def segment_sum(x, index, n):
    """Scatter-add rows along axis -2 into ``n`` buckets given by ``index``."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-2] != len(index):
        raise DimensionError(f"segment_sum: {x.shape} does not match {len(index)} indices")
    sel = _one_hot(index, n, x.data.dtype)
    return _result(sel.T @ x.data, (x,), lambda g: (sel @ g,), "segment_sum")


# -- structural --------------------------------------------------------------

def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise DimensionError(f"concat: shapes {[u.shape for u in tensors]} disagree off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward, "concat")


def concat_last(a, b):
    return concat([a, b], axis=-1)


def getitem(x, index):
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] += g
        return (gx,)

    return _result(x.data[index], (x,), backward, "getitem")


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def swapaxes(x, a, b):
    x = as_tensor(x)
    return _result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


# -- reductions --------------------------------------------------------------

def sum_all(x):
    x = as_tensor(x)
    shape, dt = x.shape, x.data.dtype
    return _result(np.sum(x.data, dtype=np.float64), (x,),
                   lambda g: (np.full(shape, g, dtype=dt),), "sum")


def mse(pred, target):
    """Mean squared difference, accumulated in float64."""
    pred = as_tensor(pred)
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target)
    if isinstance(target, Tensor) and target.requires_grad:
        raise ParameterError("mse target must not be gradient-tracked")
    if pred.shape != target_data.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target_data.shape}")
    diff = pred.data.astype(np.float64) - target_data.astype(np.float64)
    n = diff.size
    dt = pred.data.dtype
    return _result(np.mean(diff * diff), (pred,),
                   lambda g: ((g * 2.0 / n * diff).astype(dt),), "mse")


def backward(loss):
    """Run the reverse sweep on the tape that produced ``loss``."""
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is not None:
        loss.tape.backward(loss)


# -- parameters, optimizer, dropout -------------------------------------------

def glorot_uniform(shape, fan_in, fan_out, rng, dtype=DEFAULT_DTYPE):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on ``params``.

    Raises PoisonedGradientError (carrying the step index) before touching
    anything if any gradient is non-finite.
    """
    if len(params) != len(grads):
        raise DimensionError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, g, m in zip(params, grads, state.m):
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"adam_step: grad {g.shape} / moment {m.shape} vs param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise PoisonedGradientError(state.step + 1, p.name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return params, state


def dropout_mask(shape, p, rng, dtype=DEFAULT_DTYPE):
    """Inverted-dropout mask: 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= p
    return (keep / (1.0 - p)).astype(dtype)


# -- finite-difference checking -----------------------------------------------

@contextlib.contextmanager
def record_relu_masks():
    """Collect the activation pattern of every relu evaluated inside the block."""
    prev = getattr(_local, "relu_masks", None)
    masks = []
    _local.relu_masks = masks
    try:
        yield masks
    finally:
        _local.relu_masks = prev


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def numeric_grad(fn, x, index, h):
    """Central difference of scalar ``fn()`` w.r.t. ``x.data[index]``.

    Returns None when the probe straddles a relu kink, where the finite
    difference does not estimate the derivative.
    """
    orig = x.data[index].copy()
    with record_relu_masks() as base:
        fn()
    x.data[index] = orig + h
    with record_relu_masks() as up:
        fp = float(fn().data)
    x.data[index] = orig - h
    with record_relu_masks() as down:
        fm = float(fn().data)
    x.data[index] = orig
    if not (_same_pattern(base, up) and _same_pattern(base, down)):
        return None
    return (fp - fm) / (2 * h)


def directional_grad(fn, x, direction, h):
    """Central difference of ``fn`` along ``direction`` in ``x``; None at kinks."""
    orig = x.data.copy()
    with record_relu_masks() as base:
        fn()
    x.data[...] = orig + h * direction
    with record_relu_masks() as up:
        fp = float(fn().data)
    x.data[...] = orig - h * direction
    with record_relu_masks() as down:
        fm = float(fn().data)
    x.data[...] = orig
    if not (_same_pattern(base, up) and _same_pattern(base, down)):
        return None
    return (fp - fm) / (2 * h)


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
