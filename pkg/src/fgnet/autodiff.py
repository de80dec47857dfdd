"""Dense 2-D tensors with reverse-mode differentiation.

Only the operators the network needs are provided. Values are float64
numpy arrays of shape (rows, cols); broadcasting is limited to row
vectors (1, cols), column vectors (rows, 1) and scalars (1, 1).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-12


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- bookkeeping -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``.

        Nodes are visited once each in reverse topological order.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without grad needs a 1x1 tensor, got {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _broadcast_shape(a: tuple[int, int], b: tuple[int, int], op: str) -> tuple[int, int]:
    shape = []
    for da, db in zip(a, b):
        if da == db or db == 1:
            shape.append(da)
        elif da == 1:
            shape.append(db)
        else:
            raise ShapeError(f"{op}: incompatible shapes {a} and {b}")
    return tuple(shape)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape, "subtract")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with row/column broadcasting."""
    _broadcast_shape(a.shape, b.shape, "multiply")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor, eps: float = 0.0) -> Tensor:
    if eps == 0.0 and np.any(a.data <= 0):
        raise ValueError("log of non-positive entry; pass eps to guard")
    shifted = a.data + eps
    return _make(np.log(shifted), (a,), lambda g: (g / shifted,))


def reciprocal(a: Tensor, eps: float = 0.0) -> Tensor:
    """1 / (a + eps). Without ``eps`` every entry must be positive."""
    if eps == 0.0 and np.any(a.data <= 0):
        raise ValueError("reciprocal of non-positive entry; pass eps to guard")
    out = 1.0 / (a.data + eps)
    return _make(out, (a,), lambda g: (-g * out * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed stably."""
    x = a.data
    out = np.logaddexp(0.0, x)
    sig = np.exp(-np.logaddexp(0.0, -x))
    return _make(out, (a,), lambda g: (g * sig,))


# -- linear algebra ---------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    """Row-major reshape."""
    if rows * cols != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {(rows, cols)}")
    shape = a.shape
    return _make(a.data.reshape(rows, cols), (a,), lambda g: (g.reshape(shape),))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# -- reductions -------------------------------------------------------------


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    """Sum over all entries (axis=None), rows (axis=0) or columns (axis=1)."""
    shape = a.shape
    if axis is None:
        return _make(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))
    if axis not in (0, 1):
        raise ValueError(f"axis must be None, 0 or 1, got {axis}")
    out = a.data.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def norm_rows(a: Tensor) -> Tensor:
    """Euclidean norm of every row, as a column vector.

    The subgradient at a zero row is taken as zero.
    """
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=1, keepdims=True))
    safe = np.where(out > 0, out, 1.0)

    def backward(g):
        return (np.where(out > 0, g / safe, 0.0) * ad,)

    return _make(out, (a,), backward)


# -- structural -------------------------------------------------------------


def concat(tensors: Iterable[Tensor], axis: int = 1) -> Tensor:
    ts = list(tensors)
    if axis == 1:
        rows = {t.rows for t in ts}
        if len(rows) != 1:
            raise ShapeError(f"concat: row counts differ: {[t.shape for t in ts]}")
        widths = [t.cols for t in ts]
        splits = np.cumsum(widths)[:-1]
        return _make(np.concatenate([t.data for t in ts], axis=1), ts,
                     lambda g: tuple(np.split(g, splits, axis=1)))
    if axis == 0:
        cols = {t.cols for t in ts}
        if len(cols) != 1:
            raise ShapeError(f"concat: column counts differ: {[t.shape for t in ts]}")
        heights = [t.rows for t in ts]
        splits = np.cumsum(heights)[:-1]
        return _make(np.concatenate([t.data for t in ts], axis=0), ts,
                     lambda g: tuple(np.split(g, splits, axis=0)))
    raise ValueError(f"axis must be 0 or 1, got {axis}")


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64).ravel()
    rows = a.rows

    def backward(g):
        out = np.zeros((rows, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def scatter_add_rows(a: Tensor, indices, rows: int) -> Tensor:
    """Sum row ``k`` of ``a`` into output row ``indices[k]``."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if idx.size != a.rows:
        raise ShapeError(f"scatter_add_rows: {idx.size} indices for {a.shape}")
    out = np.zeros((rows, a.cols))
    np.add.at(out, idx, a.data)
    return _make(out, (a,), lambda g: (g[idx],))


def segment_sum(a: Tensor, group: int) -> Tensor:
    """Sum consecutive blocks of ``group`` rows; a fast scatter_add_rows."""
    if a.rows % group:
        raise ShapeError(f"segment_sum: {a.rows} rows not divisible by {group}")
    n = a.rows // group
    out = a.data.reshape(n, group, a.cols).sum(axis=1)
    return _make(out, (a,), lambda g: (np.repeat(g, group, axis=0),))


# -- normalisers ------------------------------------------------------------


def softmax(a: Tensor, axis: int | None = 1) -> Tensor:
    """Softmax along rows (axis=1), columns (axis=0) or the whole matrix (None)."""
    x = a.data
    if axis is None:
        e = np.exp(x - x.max())
        out = e / e.sum()

        def backward(g):
            return (out * (g - (g * out).sum()),)
    else:
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        out = e / e.sum(axis=axis, keepdims=True)

        def backward(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), backward)


def full_matrix_softmax(a: Tensor) -> Tensor:
    """exp(x_yz) / sum_yz exp(x_yz): one normaliser over every entry."""
    return softmax(a, axis=None)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    prob = np.exp(out)
    return _make(out, (a,), lambda g: (g - prob * g.sum(axis=1, keepdims=True),))


# -- helpers ----------------------------------------------------------------


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def numerical_gradient(fn: Callable[[], float], param: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    denom = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(diff / denom)
