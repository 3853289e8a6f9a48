"""Dense tensors with reverse-mode automatic differentiation.

Every op records its inputs and a backward rule on the output tensor; calling
``backward`` on a scalar walks the recorded graph in reverse topological order
and accumulates gradients into the leaves that require them.

Matrix products are the only kernels that perform multiply-accumulates, so the
MAC counter used by the profiler lives in :func:`matmul`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

DTYPES = (np.float32, np.float64)

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the enclosed block (per thread)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class MacCounter:
    def __init__(self) -> None:
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


@contextlib.contextmanager
def count_macs():
    """Count every multiply-accumulate performed by ``matmul`` in the block."""
    counter = MacCounter()
    stack = getattr(_state, "mac_counters", None)
    if stack is None:
        stack = _state.mac_counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


def _record_macs(n: int) -> None:
    for counter in getattr(_state, "mac_counters", ()):
        counter.add(n)


class GradientError(RuntimeError):
    pass


class Tensor:
    """An n-dimensional float array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._prev: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._consumed = False
        self.name = name

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return power(self, 0.5)

    # -- differentiation --------------------------------------------------

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.dtype for t in tensors))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward_fn
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    out_dtype = _result_dtype(a, b)

    def _bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make((a.data + b.data).astype(out_dtype, copy=False), (a, b), _bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    if not isinstance(b, Tensor):
        scale = np.asarray(b, dtype=a.dtype)
        return _make(a.data * scale, (a,), lambda g: (unbroadcast(g * scale, a.shape),))
    out_dtype = _result_dtype(a, b)

    def _bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make((a.data * b.data).astype(out_dtype, copy=False), (a, b), _bw)


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU: 0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³)))."""
    xd = x.data
    c = np.asarray(_GELU_C, dtype=xd.dtype)
    sq = xd * xd
    inner = c * (xd + 0.044715 * sq * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def _bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * sq)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make(out, (x,), _bw)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return mul(x, keep)


# -- shape ops --------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def take(a: Tensor, index) -> Tensor:
    """Gather ``a[index]``; the backward pass scatter-adds (repeats accumulate)."""
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)

    def _bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), _bw)


# -- reductions -------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), _bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2:]
    n = b.shape[-1]
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    _record_macs(batch * m * k * n)

    def _bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), _bw)


# -- normalisation and activations ------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), _bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def _bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), _bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    h = x.shape[-1]
    if gain.shape != (h,) or bias.shape != (h,):
        raise ValueError(f"layer_norm expects gain/bias of shape ({h},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain.data + bias.data

    def _bw(g):
        dxhat = g * gain.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _make(out.astype(x.dtype, copy=False), (x, gain, bias), _bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        raise IndexError(f"embedding id {int(ids[bad].flat[0])} out of range [0, {vocab})")
    return take(table, ids)


# -- losses -------------------------------------------------------------------


def kl_divergence(p: Tensor, q: Tensor, axis: int = -1, tol: float = 1e-6) -> Tensor:
    """Mean over rows of Σ p·(ln p − ln q), with 0·ln 0 taken as 0."""
    pd, qd = p.data, q.data
    for label, arr in (("p", pd), ("q", qd)):
        sums = arr.sum(axis=axis)
        worst = np.abs(sums - 1.0)
        if worst.size and worst.max() > tol:
            row = np.unravel_index(int(np.argmax(worst)), worst.shape)
            raise ValueError(f"{label} row {row} sums to {sums[row]!r}, not 1")
    support = pd > 0
    bad = support & (qd <= 0)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"q is zero at index {idx} where p > 0")
    safe_p = np.where(support, pd, 1.0)
    safe_q = np.where(support, qd, 1.0)
    terms = np.where(support, pd * (np.log(safe_p) - np.log(safe_q)), 0.0)
    rows = pd.size // pd.shape[axis]
    out = np.asarray(terms.sum() / rows, dtype=_result_dtype(p, q))

    def _bw(g):
        gp = np.where(support, np.log(safe_p) - np.log(safe_q) + 1.0, 0.0) * (g / rows)
        gq = np.where(support, -pd / safe_q, 0.0) * (g / rows)
        return gp.astype(p.dtype), gq.astype(q.dtype)

    return _make(out, (p, q), _bw)


def cosine_embedding_loss(u: Tensor, v: Tensor) -> Tensor:
    """Mean over rows (last axis = features) of 1 − cos(u_row, v_row)."""
    if u.shape != v.shape:
        raise ValueError(f"cosine_embedding_loss shape mismatch: {u.shape} vs {v.shape}")
    h = u.shape[-1]
    ud = u.data.reshape(-1, h)
    vd = v.data.reshape(-1, h)
    nu = np.sqrt((ud * ud).sum(axis=1))
    nv = np.sqrt((vd * vd).sum(axis=1))
    zero = np.flatnonzero((nu == 0) | (nv == 0))
    if zero.size:
        raise ValueError(f"cosine_embedding_loss: zero-norm row {int(zero[0])}")
    dot = (ud * vd).sum(axis=1)
    # sqrt(su*sv) rather than nu*nv: for u == v this is exactly dot, so cos == 1
    cos = dot / np.sqrt((ud * ud).sum(axis=1) * (vd * vd).sum(axis=1))
    n = ud.shape[0]
    out = np.asarray((1.0 - cos).mean(), dtype=_result_dtype(u, v))

    def _bw(g):
        scale = -g / n
        gu = (vd / (nu * nv)[:, None] - cos[:, None] * ud / (nu * nu)[:, None]) * scale
        gv = (ud / (nu * nv)[:, None] - cos[:, None] * vd / (nv * nv)[:, None]) * scale
        return gu.reshape(u.shape).astype(u.dtype), gv.reshape(v.shape).astype(v.dtype)

    return _make(out, (u, v), _bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).sum() / n, dtype=_result_dtype(a, b))

    def _bw(g):
        d = diff * (2.0 * g / n)
        return d.astype(a.dtype), (-d).astype(b.dtype)

    return _make(out, (a, b), _bw)


IGNORE_INDEX = -100


def cross_entropy(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood of ``labels`` over non-ignored rows.

    ``logits`` is [n, C]; when every row is ignored the loss is 0 and the
    gradient is zero.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, classes = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"cross_entropy: {n} logit rows but {labels.shape[0]} labels")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= classes))
    if bad.any():
        raise IndexError(f"label {int(labels[bad][0])} out of range [0, {classes})")
    count = int(valid.sum())
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.flatnonzero(valid)
    if count:
        value = -logp[rows, labels[rows]].sum() / count
    else:
        value = 0.0
    out = np.asarray(value, dtype=logits.dtype)

    def _bw(g):
        grad = np.zeros_like(logits.data)
        if count:
            grad[rows] = np.exp(logp[rows])
            grad[rows, labels[rows]] -= 1.0
            grad *= g / count
        return (grad,)

    return _make(out, (logits,), _bw)


# -- backward -----------------------------------------------------------------


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The recorded graph is released afterwards; a second call on the same loss
    raises :class:`GradientError`.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GradientError("graph already consumed by a previous backward call")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None and node.requires_grad:
                g = g.astype(node.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._prev, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in order:
        node._prev = ()
        node._backward = None
    loss._consumed = True


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    step: float = 1e-5,
    coords: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` is re-evaluated with ``x.data`` perturbed in place, so it may also be
    a closure that ignores its argument and reads ``x`` (e.g. a model
    parameter). ``coords`` limits the check to a random subset of entries.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check requires a float64 tensor")
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    saved = x.grad
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    loss = f(x)
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = saved
    x.requires_grad = was

    flat = x.data.reshape(-1)
    indices: Iterable[int] = range(flat.size)
    if coords is not None and coords < flat.size:
        indices = np.random.default_rng(seed).choice(flat.size, size=coords, replace=False)
    worst = 0.0
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + step
            up = f(x).item()
            flat[i] = orig - step
            down = f(x).item()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            a = analytic.reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
