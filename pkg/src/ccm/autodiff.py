"""Dense float64 tensors with reverse-mode automatic differentiation.

Every kernel in this module returns a new :class:`Tensor`. When gradient
recording is enabled and at least one input requires a gradient, the output
remembers its inputs and a closure mapping the output cotangent to input
cotangents. :func:`backward` gathers the reachable nodes into a
:class:`ComputationRecord` ordered by creation and replays it in reverse.

Only leaves (tensors without recorded parents) keep a ``.grad``; gradients
accumulate across calls until :func:`zero_grad` is used.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, ShapeError

__all__ = [
    "Tensor",
    "ComputationRecord",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "zero_grad",
    "grad_check",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "relu",
    "exp",
    "log",
    "clamp_min",
    "concat",
    "reshape",
    "transpose",
    "broadcast_to",
    "sum",
    "mean",
    "l2_normalize",
    "softmax",
    "log_softmax",
    "pick",
    "cross_entropy",
]

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array plus optional gradient and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "parents", "_vjp", "op", "seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.seq = next(_seq)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], vjp, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.seq = next(_seq)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.parents = tuple(inputs)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out.parents = ()
        out._vjp = None
    if not np.all(np.isfinite(data)):
        raise DomainError(op, "produced non-finite values")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out the axes numpy broadcasting added or stretched
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kernel: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(kernel, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log", f"non-positive input (min {a.data.min():.3g})")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """``max(a, lo)``; the gradient is zero where the clamp is active."""
    keep = a.data >= lo
    return _make(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


# ---------------------------------------------------------------- structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", detail="no inputs")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError("concat", ref.shape, t.shape, detail=f"axis={axis}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp, "concat")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"axes={axes}")
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = np.broadcast_to(a.data, tuple(shape)).copy()
    except ValueError:
        raise ShapeError("broadcast_to", src, tuple(shape)) from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, src),), "broadcast_to")


def _check_axis(kernel: str, a: Tensor, axis: int | None) -> None:
    if axis is not None and not -a.ndim <= axis < a.ndim:
        raise ShapeError(kernel, a.shape, detail=f"axis {axis} out of range")


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    _check_axis("sum", a, axis)
    src = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp, "sum")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    _check_axis("mean", a, axis)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean", a.shape, detail="empty reduction")
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[i] = a[i, index[i]]`` for a 2-D ``a``."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError("pick", a.shape, index.shape)
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise DomainError("pick", f"index outside [0, {a.shape[1]})")
    rows = np.arange(a.shape[0])
    src = a.shape

    def vjp(g):
        out = np.zeros(src)
        out[rows, index] = g
        return (out,)

    return _make(a.data[rows, index], (a,), vjp, "pick")


# ---------------------------------------------------------------- normalizers


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    An exactly-zero slice maps to zero and passes back a zero gradient.
    """
    _check_axis("l2_normalize", a, axis)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nz = norm > 0
    safe = np.where(nz, norm, 1.0)
    y = np.where(nz, a.data / safe, 0.0)

    def vjp(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(nz, (g - y * proj) / safe, 0.0),)

    return _make(y, (a,), vjp, "l2_normalize")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis("softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), vjp, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis("log_softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (a,), vjp, "log_softmax")


def cross_entropy(probs: Tensor, labels: np.ndarray, eps: float = 1e-12) -> tuple[Tensor, int]:
    """Mean of ``-log probs[i, labels[i]]`` over rows.

    Probabilities are clamped at ``eps`` before the log; the number of
    clamped rows is returned alongside the loss.
    """
    p = pick(probs, labels)
    clamped = int(np.count_nonzero(p.data < eps))
    return neg(mean(log(clamp_min(p, eps)))), clamped


# ---------------------------------------------------------------- backward


class ComputationRecord:
    """Nodes reachable from a root, in the order they were executed."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationRecord":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(t.parents)
        nodes.sort(key=lambda t: t.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def replay(self, root: Tensor, seed: np.ndarray) -> list[Tensor]:
        """Propagate ``seed`` from ``root`` in reverse; returns the visit order."""
        cot: dict[int, np.ndarray] = {id(root): seed}
        visited = []
        for node in reversed(self.nodes):
            g = cot.pop(id(node), None)
            if g is None:
                continue
            visited.append(node)
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node.parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in cot:
                    cot[id(parent)] = cot[id(parent)] + pg
                else:
                    cot[id(parent)] = pg
        return visited


def backward(loss: Tensor) -> ComputationRecord:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    record = ComputationRecord.from_root(loss)
    if record.nodes:
        record.replay(loss, np.ones_like(loss.data))
    return record


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    fn: Callable[..., Tensor],
    point: Tensor | Sequence[Tensor],
    step: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` is called as ``fn(*points)`` and must return a scalar. The error
    per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    points = [point] if isinstance(point, Tensor) else list(point)
    for p in points:
        p.requires_grad = True
        p.grad = None
    loss = fn(*points)
    backward(loss)
    worst = 0.0
    for p in points:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = fn(*points).item()
                flat[i] = orig - step
                down = fn(*points).item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * step)
        err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
