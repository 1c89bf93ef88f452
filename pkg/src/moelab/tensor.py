"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is implicit: every operation returns a new Tensor that keeps
references to its parents plus a vector-Jacobian closure, and a global
creation counter doubles as a topological order. backward() walks the
reachable subgraph newest-first, propagates adjoints through the
closures, and adds the final adjoint of every gradient-requiring node
into its .grad slot — so a second backward() without a reset doubles
every gradient.

Kernels are numpy-backed and deliberately narrow: row-major storage,
binary ops accept equal shapes, size-1 scalars, or a suffix shape
broadcast over leading batch axes, and nothing else. -inf is the one
permitted non-finite input value (masked logits); it never appears in
gradients.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateSliceError, ShapeError

_counter = itertools.count()


class _GradMode(threading.local):
    # thread-local so parallel no-grad evaluation can't corrupt another
    # thread's mode; each new thread starts with gradients enabled
    def __init__(self):
        self.enabled = True


_mode = _GradMode()


class no_grad:
    """Context manager that suspends graph construction."""

    def __enter__(self):
        self._saved = _mode.enabled
        _mode.enabled = False
        return self

    def __exit__(self, *exc):
        _mode.enabled = self._saved
        return False


def is_grad_enabled() -> bool:
    return _mode.enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operators -------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return tmean(self, axis)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if _mode.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _trace(root: Tensor) -> list[Tensor]:
    """Ordered record of the gradient-requiring subgraph reaching root.

    Creation ids ascend from parents to children, so sorting by id is a
    topological order.
    """
    seen = {root._id}
    stack, nodes = [root], [root]
    while stack:
        for p in stack.pop()._parents:
            if p.requires_grad and p._id not in seen:
                seen.add(p._id)
                stack.append(p)
                nodes.append(p)
    nodes.sort(key=lambda t: t._id)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad of every reachable node."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any gradient-requiring tensor")
    nodes = _trace(loss)
    adjoint: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(nodes):
        adj = adjoint.pop(node._id, None)
        if adj is None:
            continue
        node.grad = adj.copy() if node.grad is None else node.grad + adj
        if node._vjp is None:
            continue
        for parent, contrib in zip(node._parents, node._vjp(adj)):
            if contrib is None or not parent.requires_grad:
                continue
            if contrib.shape != parent.shape:
                raise ShapeError(
                    f"vjp produced shape {contrib.shape} for parent {parent.shape}"
                )
            prev = adjoint.get(parent._id)
            adjoint[parent._id] = contrib if prev is None else prev + contrib


# binary elementwise ------------------------------------------------------


def _binary_shape(sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"incompatible shapes {sa} and {sb}") from None
    if out != sa and out != sb:
        raise ShapeError(f"mutual broadcast {sa} x {sb} not supported")
    small = sb if out == sa else sa
    if int(np.prod(small)) != 1 and small != out[len(out) - len(small):]:
        raise ShapeError(f"only scalar or suffix-shape broadcast allowed: {sa} x {sb}")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shape(a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shape(a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shape(a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shape(a.shape, b.shape)

    def vjp(g):
        da = _unbroadcast(g / b.data, a.shape)
        db = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return da, db

    return _node(a.data / b.data, (a, b), vjp)


# linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul is strictly 2-D, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, (a, b), vjp)


def bmm(a, b) -> Tensor:
    """Batched matmul over a shared leading axis: (B,m,k) @ (B,k,n)."""
    a, b = _lift(a), _lift(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm needs (B,m,k) @ (B,k,n), got {a.shape} @ {b.shape}")

    def vjp(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _node(a.data @ b.data, (a, b), vjp)


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose is 2-D, got shape {a.shape}")

    def vjp(g):
        return (g.T.copy(),)

    return _node(a.data.T.copy(), (a,), vjp)


def permute(a, axes: Sequence[int]) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"bad permutation {axes} for ndim {a.ndim}")
    inverse = tuple(int(i) for i in np.argsort(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _lift(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _node(a.data.reshape(shape), (a,), vjp)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 2 or not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"bad column slice [{start}:{stop}] of shape {a.shape}")

    def vjp(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop].copy(), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ContractError("concat of zero tensors")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _node(np.concatenate([t.data for t in ts], axis=axis), ts, vjp)


# elementwise nonlinear ---------------------------------------------------


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _node(out, (a,), vjp)


def log(a) -> Tensor:
    a = _lift(a)
    with np.errstate(divide="ignore"):
        out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _node(out, (a,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a) -> Tensor:
    a = _lift(a)
    x = a.data
    # max(x,0) + log1p(exp(-|x|)) never overflows at either extreme
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        return (g * _sigmoid(x),)

    return _node(out, (a,), vjp)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    a = _lift(a)
    x = a.data
    u = _GELU_C * (x + _GELU_A * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _node(out, (a,), vjp)


# reductions --------------------------------------------------------------


def tsum(a, axis: int | None = None) -> Tensor:
    a = _lift(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), vjp)


def tmean(a, axis: int | None = None) -> Tensor:
    a = _lift(a)
    shape = a.shape
    n = a.size if axis is None else shape[axis]
    if n == 0:
        raise ContractError("mean over an empty axis")

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy(),)

    return _node(a.data.mean(axis=axis), (a,), vjp)


# softmax family ----------------------------------------------------------


def _check_slices(x: np.ndarray, axis: int) -> None:
    finite_any = np.isfinite(x).any(axis=axis)
    if not finite_any.all():
        raise DegenerateSliceError("softmax slice with no finite entry")


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    x = a.data
    _check_slices(x, axis)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    x = a.data
    _check_slices(x, axis)
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    with np.errstate(invalid="ignore"):
        out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), vjp)


# gather / scatter --------------------------------------------------------


def gather_rows(a, idx) -> Tensor:
    a = _lift(a)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"row index must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ContractError("row index out of range")

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), vjp)


# Token-id lookup into an embedding table is exactly a row gather.
embedding_lookup = gather_rows


def gather_pairs(a, rows, cols) -> Tensor:
    a = _lift(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if a.ndim != 2 or rows.shape != cols.shape or rows.ndim != 1:
        raise ShapeError("gather_pairs needs a 2-D tensor and matching 1-D indices")

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _node(a.data[rows, cols], (a,), vjp)


def scatter_rows(values, idx, n_rows: int) -> Tensor:
    values = _lift(values)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1 or idx.shape[0] != values.shape[0]:
        raise ShapeError("scatter_rows index must be 1-D and match the value rows")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ContractError("row index out of range")
    out = np.zeros((n_rows,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, idx, values.data)

    def vjp(g):
        return (g[idx],)

    return _node(out, (values,), vjp)


def scale_rows(a, s) -> Tensor:
    """Multiply row i of a (m,d) tensor by scalar s[i]."""
    a, s = _lift(a), _lift(s)
    if a.ndim != 2 or s.shape != (a.shape[0],):
        raise ShapeError(f"scale_rows needs (m,d) and (m,), got {a.shape} and {s.shape}")

    def vjp(g):
        return g * s.data[:, None], (g * a.data).sum(axis=1)

    return _node(a.data * s.data[:, None], (a, s), vjp)


def mask_fill(a, keep, fill: float) -> Tensor:
    """Keep entries where the boolean mask is True, set the rest to fill.

    Gradient flows only through kept entries; the mask broadcasts.
    """
    a = _lift(a)
    keep = np.asarray(keep, dtype=bool)
    out = np.where(keep, a.data, fill)
    if out.shape != a.shape:
        raise ShapeError(f"mask shape {keep.shape} does not broadcast onto {a.shape}")

    def vjp(g):
        return (np.where(keep, g, 0.0),)

    return _node(out, (a,), vjp)


# fused training ops ------------------------------------------------------


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    a, gamma, beta = _lift(a), _lift(gamma), _lift(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm gain/bias must match the last axis")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gamma.data + beta.data
    reduce_axes = tuple(range(x.ndim - 1))

    def vjp(g):
        gh = g * gamma.data
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        return dx, dgamma, dbeta

    return _node(out, (a, gamma, beta), vjp)


def cross_entropy_masked(logits, targets, mask) -> Tensor:
    """Mean negative log-likelihood of targets over masked rows.

    Rows outside the mask contribute nothing — their gradient is
    exactly zero.
    """
    logits = _lift(logits)
    targets = np.asarray(targets, dtype=np.intp)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],) or mask.shape != targets.shape:
        raise ShapeError("cross_entropy_masked needs (R,V) logits with (R,) targets and mask")
    if not mask.any():
        raise ContractError("cross_entropy_masked over an empty mask")
    rows = np.nonzero(mask)[0]
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = rows.size
    loss = -logp[rows, targets[rows]].sum() / n

    def vjp(g):
        p = np.exp(logp)
        dx = np.zeros_like(x)
        dx[rows] = p[rows]
        dx[rows, targets[rows]] -= 1.0
        return (dx * (g / n),)

    return _node(np.float64(loss), (logits,), vjp)


def kl_div_rowsum(log_p, log_q) -> Tensor:
    """Per-row sum_v p*(log p - log q) with the 0*log 0 = 0 convention.

    Both arguments are log-probabilities of shape (R,V); gradient flows
    into whichever side requires it (through p = exp(log_p) on the
    first side).
    """
    log_p, log_q = _lift(log_p), _lift(log_q)
    if log_p.shape != log_q.shape or log_p.ndim != 2:
        raise ShapeError(f"kl_div_rowsum needs matching (R,V) shapes, got {log_p.shape} and {log_q.shape}")
    p = np.exp(log_p.data)
    with np.errstate(invalid="ignore"):
        diff = log_p.data - log_q.data
        terms = np.where(p > 0, p * diff, 0.0)
    out = terms.sum(axis=1)

    def vjp(g):
        gg = g[:, None]
        with np.errstate(invalid="ignore"):
            dlp = np.where(p > 0, p * diff + p, 0.0) * gg
        dlq = -p * gg
        return dlp, dlq

    return _node(out, (log_p, log_q), vjp)
