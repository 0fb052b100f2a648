"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every tensor produced by an op keeps references to its parents and a closure
that maps the output gradient to parent gradients.  ``backward`` walks that
implicit tape once in reverse topological order and then releases it.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-12


class TensorError(ValueError):
    """Raised for shape mismatches, domain errors and non-finite values."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._consumed = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, float(x)))


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if not np.isfinite(arr).all():
        raise TensorError(f"{opname} produced a non-finite value")


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, opname: str,
          check: bool = False) -> Tensor:
    # Only ops that can create non-finite values from finite inputs (exp, log,
    # division, reductions) pass check=True; leaves are validated on creation.
    if check:
        _check_finite(data, opname)
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise TensorError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


# --- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions must match exactly."""
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.ndim != b.data.ndim:
        raise TensorError(f"matmul: incompatible ranks {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul: dimension mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), back, "matmul")


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise TensorError(f"transpose needs rank >= 2, got {x.shape}")
    return _make(np.swapaxes(x.data, -1, -2).copy(), (x,),
                 lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the trailing axis (the only broadcast we allow)."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise TensorError(f"add_bias: {x.shape} + {b.shape}")
    lead = tuple(range(x.data.ndim - 1))

    def back(g):
        return g, (g.sum(axis=lead) if b.requires_grad else None)

    return _make(x.data + b.data, (x, b), back, "add_bias")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply ``x @ w + b`` over the trailing axis of an arbitrary-rank input."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.data.ndim != 2 else x
    out = matmul(flat, w)
    if b is not None:
        out = add_bias(out, b)
    if x.data.ndim != 2:
        out = reshape(out, lead + (w.shape[1],))
    return out


# --- elementwise ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # relu'(0) = 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp", check=True)


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise TensorError("log: domain error, input has non-positive entries")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log", check=True)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    _same_shape(a, b, "maximum")
    take_a = a.data >= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b),
                 lambda g: (g * take_a, g * ~take_a), "maximum")


def elementwise(op: str, *args, **kwargs) -> Tensor:
    table = {"add": add, "sub": sub, "mul": mul, "scale": scale,
             "relu": relu, "exp": exp, "log": log, "max": maximum}
    if op not in table:
        raise TensorError(f"unknown elementwise op {op!r}")
    return table[op](*args, **kwargs)


# --- reductions -----------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum", check=True)


def mean_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise TensorError("mean of empty tensor")
    n = x.size
    shape = x.shape
    return _make(np.array(x.data.sum() / n), (x,),
                 lambda g: (np.full(shape, float(g) / n),), "mean", check=True)


def reduce_mean(x: Tensor, axes: tuple[int, ...] | str = "spatial") -> Tensor:
    """Mean over ``axes``.  ``"spatial"`` means the H, W axes of ``...×H×W×d``."""
    if axes == "spatial":
        if x.data.ndim < 3:
            raise TensorError(f"spatial mean needs a ...xHxWxd tensor, got {x.shape}")
        axes = (x.data.ndim - 3, x.data.ndim - 2)
    axes = tuple(a % x.data.ndim for a in axes)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise TensorError("reduce_mean over an empty axis")
    shape = x.shape

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape) / count,)

    return _make(x.data.mean(axis=axes), (x,), back, "reduce_mean", check=True)


def logsumexp(x: Tensor, temperature: float = 1.0) -> Tensor:
    """``log sum exp(x / temperature)`` over the trailing axis, max-shifted."""
    if temperature <= 0:
        raise TensorError("logsumexp: temperature must be positive")
    if x.data.ndim == 0 or x.shape[-1] == 0:
        raise TensorError("logsumexp of empty input")
    z = x.data / temperature
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    s = e.sum(axis=-1, keepdims=True)
    out = (zmax + np.log(s))[..., 0]
    soft = e / s

    def back(g):
        return (soft * (g[..., None] / temperature),)

    return _make(out, (x,), back, "logsumexp", check=True)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale every trailing-axis vector to unit Euclidean length."""
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if (norms < NORM_EPS).any():
        raise TensorError("l2_normalize: degenerate (near-zero) vector")
    y = x.data / norms

    def back(g):
        return ((g - y * (y * g).sum(axis=-1, keepdims=True)) / norms,)

    return _make(y, (x,), back, "l2_normalize", check=True)


# --- shape and indexing ---------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise TensorError(f"reshape {orig} -> {shape}: {exc}") from None
    return _make(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not xs:
        raise TensorError("concat of nothing")
    nd = xs[0].data.ndim
    axis = axis % nd
    for t in xs[1:]:
        if t.data.ndim != nd or t.shape[:axis] + t.shape[axis + 1:] != xs[0].shape[:axis] + xs[0].shape[axis + 1:]:
            raise TensorError(f"concat: shape mismatch {xs[0].shape} vs {t.shape}")
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, back, "concat")


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Index along ``axis`` with an integer array; duplicates accumulate on backward."""
    idx = np.asarray(index, dtype=np.int64)
    axis = axis % x.data.ndim
    n = x.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise TensorError(f"take: index {int(bad)} out of bounds for axis of size {n}")
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        gm = np.moveaxis(gx, axis, 0)
        gg = np.moveaxis(g, axis, 0).reshape((idx.size,) + gm.shape[1:])
        np.add.at(gm, idx.reshape(-1), gg)
        return (gx,)

    return _make(np.take(x.data, idx, axis=axis), (x,), back, "take")


def take_cols(x: Tensor, index) -> Tensor:
    """Row-wise column pick: ``out[i, k] = x[i, index[i, k]]`` for a 2-D ``x``."""
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise TensorError(f"take_cols: x {x.shape} with index {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise TensorError("take_cols: column index out of bounds")
    rows = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        np.add.at(gx, (np.broadcast_to(rows, idx.shape), idx), g)
        return (gx,)

    return _make(x.data[rows, idx], (x,), back, "take_cols")


def gather_rows(x: Tensor, coords: Sequence[tuple[int, int]]) -> Tensor:
    """Pick the feature vectors of an ``H×W×d`` map at ``(row, col)`` positions."""
    if x.data.ndim != 3:
        raise TensorError(f"gather_rows expects HxWxd, got {x.shape}")
    h, w, d = x.shape
    flat_idx = []
    for r, c in coords:
        if not (0 <= r < h and 0 <= c < w):
            raise TensorError(f"gather_rows: coordinate ({r}, {c}) out of bounds for {h}x{w}")
        flat_idx.append(r * w + c)
    return take(reshape(x, (h * w, d)), flat_idx, axis=0)


def neighbor_mean(x: Tensor) -> Tensor:
    """Mean of the 4-neighbourhood of every pixel of a ``...×H×W×C`` map.

    Border pixels average over the neighbours that exist.
    """
    if x.data.ndim < 3:
        raise TensorError(f"neighbor_mean expects ...xHxWxC, got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    counts = _neighbor_counts(h, w)
    out = _neighbor_sum(x.data) / counts

    def back(g):
        return (_neighbor_sum(g / counts),)

    return _make(out, (x,), back, "neighbor_mean")


def _neighbor_counts(h: int, w: int) -> np.ndarray:
    c = np.zeros((h, w, 1))
    c[1:] += 1
    c[:-1] += 1
    c[:, 1:] += 1
    c[:, :-1] += 1
    return np.maximum(c, 1)


def _neighbor_sum(a: np.ndarray) -> np.ndarray:
    # symmetric stencil, so it is its own adjoint
    if a.shape[-3] < 2 or a.shape[-2] < 2:
        s = np.zeros_like(a)
        s[..., 1:, :, :] += a[..., :-1, :, :]
        s[..., :-1, :, :] += a[..., 1:, :, :]
        s[..., :, 1:, :] += a[..., :, :-1, :]
        s[..., :, :-1, :] += a[..., :, 1:, :]
        return s
    s = np.empty_like(a)
    s[..., 0, :, :] = a[..., 1, :, :]
    s[..., -1, :, :] = a[..., -2, :, :]
    np.add(a[..., :-2, :, :], a[..., 2:, :, :], out=s[..., 1:-1, :, :])
    s[..., :, 1:, :] += a[..., :, :-1, :]
    s[..., :, :-1, :] += a[..., :, 1:, :]
    return s


# --- backward -------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable tensor that requires it.

    The graph is single-use: a second call on the same loss, or a call that
    would accumulate into a grad left over from an earlier pass, is rejected.
    """
    if loss.size != 1 or loss.data.ndim != 0:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TensorError("backward called twice on the same graph")
    if not loss.requires_grad:
        raise TensorError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    for node in order:
        if node.grad is not None:
            raise TensorError("stale gradient present; reset grads before a new backward pass")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents and not np.isfinite(g).all():
            raise TensorError("non-finite gradient encountered during backward")
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    # release the tape; leaves keep their grad and can join fresh graphs
    for node in order:
        node._parents = ()
        node._backward = None
    loss._consumed = True
