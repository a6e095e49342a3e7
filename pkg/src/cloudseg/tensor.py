"""Dense tensors with reverse-mode differentiation.

Every operation records its inputs and a backward closure on the value it
returns; calling ``backward()`` on a scalar replays the recorded tape in
reverse topological order and accumulates gradients into the leaves.
Float64 is the default precision (finite-difference checks need it);
float32 is available for benchmark work via ``default_dtype``.

All op outputs are checked for NaN/Inf (a non-finite value anywhere is an
error state, see ``no_finite_checks`` to opt out on hot paths), and every
operation is deterministic: same inputs, same bits out.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

_DEFAULT_DTYPE = np.float64
_CHECK_FINITE = True

# Multiply-accumulate counter, used by the attention cost-model checks.
_MAC_ENABLED = False
_MAC_COUNT = 0


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the dtype newly created tensors default to."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_finite_checks():
    """Disable per-op NaN/Inf screening (benchmark hot paths only)."""
    global _CHECK_FINITE
    prev = _CHECK_FINITE
    _CHECK_FINITE = False
    try:
        yield
    finally:
        _CHECK_FINITE = prev


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of matmuls executed inside the block.

    Yields a zero-arg callable returning the running count.
    """
    global _MAC_ENABLED, _MAC_COUNT
    _MAC_ENABLED = True
    _MAC_COUNT = 0
    try:
        yield lambda: _MAC_COUNT
    finally:
        _MAC_ENABLED = False


def _tally_macs(n):
    global _MAC_COUNT
    if _MAC_ENABLED:
        _MAC_COUNT += int(n)


def _check(arr, op):
    if _CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by '{op}'")
    return arr


class Tensor:
    """N-d float array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        _check(self.data, "tensor")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed=None):
        """Reverse the recorded tape, accumulating gradients into leaves."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ValueError("seed gradient shape must match tensor shape")

        order = _toposort(self)
        self._accumulate(seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Arithmetic sugar; the free functions below are the actual ops.
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    @property
    def T(self):
        return transpose(self)


def _toposort(root):
    """Iterative post-order over the tape (graphs can outgrow the recursion limit)."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _node(data, parents, backward, op):
    out = Tensor(_check(data, op))
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(a.data / b.data, (a, b), backward, "div")


def power(a, p):
    a = _lift(a)
    p = float(p)

    def backward(g):
        a._accumulate(g * p * np.power(a.data, p - 1.0))

    return _node(np.power(a.data, p), (a,), backward, "pow")


def exp(a):
    a = _lift(a)
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return _node(out_data, (a,), backward, "exp")


def log(a):
    a = _lift(a)

    def backward(g):
        a._accumulate(g / a.data)

    return _node(np.log(a.data), (a,), backward, "log")


def relu(a):
    a = _lift(a)
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), backward, "relu")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    _tally_macs(a.shape[0] * a.shape[1] * b.shape[1])

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a):
    a = _lift(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-d tensor")

    def backward(g):
        a._accumulate(g.T)

    return _node(a.data.T.copy(), (a,), backward, "transpose")


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g, dtype=a.dtype))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        a._accumulate(np.broadcast_to(gg, a.shape))

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = _lift(a)
    orig = a.shape

    def backward(g):
        a._accumulate(g.reshape(orig))

    return _node(a.data.reshape(shape), (a,), backward, "reshape")


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def slice_axis(a, axis, start, stop):
    a = _lift(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        buf = np.zeros(a.shape, dtype=a.dtype)
        buf[sl] = g
        a._accumulate(buf)

    return _node(a.data[sl].copy(), (a,), backward, "slice")


def gather(a, index):
    """Select rows (axis 0) of ``a``; ``index`` may have any shape."""
    a = _lift(a)
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise IndexError("gather index must be integer")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"gather index out of range [0, {a.shape[0]})")

    def backward(g):
        buf = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(buf, idx, g)
        a._accumulate(buf)

    return _node(a.data[idx], (a,), backward, "gather")


def scatter_add(a, index, updates):
    """Return a copy of ``a`` with ``updates`` rows added at ``index``."""
    a, updates = _lift(a), _lift(updates)
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise IndexError("scatter_add index must be integer")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"scatter_add index out of range [0, {a.shape[0]})")
    out_data = a.data.copy()
    np.add.at(out_data, idx, updates.data)

    def backward(g):
        a._accumulate(g)
        updates._accumulate(g[idx])

    return _node(out_data, (a, updates), backward, "scatter_add")


# ---------------------------------------------------------------------------
# softmax family


def softmax(a, axis=-1):
    """Max-subtracted softmax along ``axis``; slices sum to one."""
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _node(y, (a,), backward, "softmax")


def log_softmax(a, axis=-1):
    a = _lift(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True)) + m
    y = a.data - lse

    def backward(g):
        a._accumulate(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _node(y, (a,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# deterministic randomness


MASK64 = (1 << 64) - 1


@dataclass
class RngState:
    """Counter-based randomness: (seed, counter) fully determines every draw.

    Each draw call keys a fresh Philox stream with (seed, counter) and then
    advances the counter, so the sequence of values is reproducible across
    platforms and independent of thread scheduling.
    """

    seed: int
    counter: int = 0

    def _next_gen(self):
        g = np.random.Generator(np.random.Philox(key=[self.seed & MASK64, self.counter & MASK64]))
        self.counter += 1
        return g

    def normal(self, shape=(), scale=1.0, dtype=None):
        x = self._next_gen().standard_normal(size=shape, dtype=np.float64) * scale
        return x.astype(dtype) if dtype is not None else x

    def uniform(self, shape=(), low=0.0, high=1.0):
        return self._next_gen().uniform(low, high, size=shape)

    def integers(self, low, high, size=None):
        return self._next_gen().integers(low, high, size=size)

    def choice(self, n, size, replace=False):
        return self._next_gen().choice(n, size=size, replace=replace)

    def permutation(self, n):
        return self._next_gen().permutation(n)

    def child(self, tag):
        """Derive an independent stream, e.g. one per worker or scene."""
        mixed = self._next_gen().integers(0, 1 << 62) + tag
        return RngState(seed=int(mixed) & MASK64)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckEntry:
    name: str
    max_abs_err: float
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self):
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def __str__(self):
        lines = [
            f"  {'PASS' if e.passed else 'FAIL'}  {e.name}: rel={e.max_rel_err:.3e} abs={e.max_abs_err:.3e}"
            for e in self.entries
        ]
        return "\n".join(lines)


def grad_check(fn, inputs, step=1e-5, tol=1e-4, names=None, scale_floor=1e-4):
    """Compare analytic gradients of a scalar function against central differences.

    ``fn`` must be pure and is re-evaluated ~2x per input element; the
    relative error for an input is max|analytic - numeric| normalized by the
    larger of the two gradients' max magnitudes. The normalizer is floored
    at ``scale_floor`` so that structurally-zero gradients (where central
    differences deliver only roundoff noise) compare absolutely instead of
    dividing noise by noise.
    """
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(out.data)):
        raise NumericError("grad_check: function output is not finite")
    for t in inputs:
        t.zero_grad()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    report = GradCheckReport()
    for k, t in enumerate(inputs):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn(*inputs).data)
            flat[i] = orig - step
            lo = float(fn(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError("grad_check: non-finite value during finite differencing")
            nflat[i] = (hi - lo) / (2.0 * step)
        a = analytic[k]
        abs_err = float(np.max(np.abs(a - numeric))) if a.size else 0.0
        scale = max(float(np.max(np.abs(a))) if a.size else 0.0,
                    float(np.max(np.abs(numeric))) if numeric.size else 0.0,
                    scale_floor)
        rel = abs_err / scale
        name = names[k] if names else (t.name or f"input[{k}]")
        report.entries.append(GradCheckEntry(name, abs_err, rel, rel <= tol))
    return report
