"""Dense float64 arrays with reverse-mode differentiation.

Every operation in this module computes its forward value with numpy and
records a closure that maps the output adjoint to input adjoints.  The graph
is rebuilt on each forward pass; :func:`backward` replays the recorded
operations reachable from a scalar root in reverse recording order.

Images and feature maps are channel-first ``(C, H, W)`` arrays.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DeterminismError, DimensionError, UsageError

__all__ = [
    "Tensor",
    "Graph",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "neg",
    "relu",
    "sigmoid",
    "sqrt",
    "absolute",
    "square",
    "sum",
    "mean",
    "l2_norm",
    "reshape",
    "transpose",
    "matmul",
    "softmax",
    "conv2d",
    "avg_pool2",
    "upsample2",
    "concat",
    "concat_channels",
    "laplacian",
    "backward",
    "grad_check",
]

_sequence = itertools.count()

LAPLACIAN_KERNEL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


class Tensor:
    """An immutable float64 array, optionally a node of the differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "parents", "adjoint", "op", "seq")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _copy: bool = True):
        self.data = np.array(data, dtype=np.float64, copy=True if _copy else None)
        self.data.setflags(write=False)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.adjoint: Callable | None = None
        self.op = "leaf"
        self.seq = next(_sequence)

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
        return self.adjoint is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], adjoint: Callable, op: str) -> Tensor:
    out = Tensor(data, _copy=False)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.adjoint = adjoint
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), adjoint, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), adjoint, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def adjoint(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), adjoint, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def adjoint(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _record(out, (a, b), adjoint, "div")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record(x.data * c, (x,), lambda g: (g * c,), "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _record(x.data + float(c), (x,), lambda g: (g,), "add_scalar")


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _record(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def square(x: Tensor) -> Tensor:
    return _record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


# ---------------------------------------------------------------------------
# reductions and shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), adjoint, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise DimensionError(f"mean over an empty extent of shape {x.shape}")
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def l2_norm(x: Tensor, axis=-1, keepdims: bool = True, eps: float = 0.0) -> Tensor:
    """Euclidean norm along ``axis``; ``eps`` adds ``eps**2`` under the root."""
    out = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps * eps)

    def adjoint(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * x.data / out,)

    value = out if keepdims else np.squeeze(out, axis=axis)
    return _record(value, (x,), adjoint, "l2_norm")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _record(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            i != axis % len(ref) and s != r for i, (s, r) in enumerate(zip(t.shape, ref))
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tensors, adjoint, "concat")


def concat_channels(*tensors: Tensor) -> Tensor:
    for t in tensors:
        if t.ndim != 3:
            raise DimensionError(f"concat_channels expects (C, H, W) tensors, got {t.shape}")
    return concat(tensors, axis=0)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def adjoint(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), adjoint, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    if x.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis of shape {x.shape}")
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def adjoint(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), adjoint, "softmax")


# ---------------------------------------------------------------------------
# spatial


def _pad(x: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    width = ((0, 0), (ph, ph), (pw, pw))
    return np.pad(x, width, mode="edge" if mode == "replicate" else "constant")


def _unpad(g: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    """Adjoint of :func:`_pad`: replicated border cells fold back onto the edge."""
    if ph == 0 and pw == 0:
        return g
    h = g.shape[1] - 2 * ph
    w = g.shape[2] - 2 * pw
    if mode == "replicate":
        g = g.copy()
        if ph:
            g[:, ph] += g[:, :ph].sum(axis=1)
            g[:, ph + h - 1] += g[:, ph + h:].sum(axis=1)
        if pw:
            g[:, :, pw] += g[:, :, :pw].sum(axis=2)
            g[:, :, pw + w - 1] += g[:, :, pw + w:].sum(axis=2)
    return g[:, ph:ph + h, pw:pw + w]


def _check_padding(padding: str) -> None:
    if padding not in ("zero", "replicate"):
        raise ConfigurationError(f"padding must be 'zero' or 'replicate', got {padding!r}")


def conv2d(x: Tensor, k: Tensor, padding: str = "zero") -> Tensor:
    """Same-size 2-D cross-correlation of ``(C_in, H, W)`` with ``(C_out, C_in, kh, kw)``."""
    _check_padding(padding)
    if x.ndim != 3 or k.ndim != 4:
        raise DimensionError(f"conv2d expects (C,H,W) input and 4-D kernel, got {x.shape} and {k.shape}")
    c_out, c_in, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d: input has {x.shape[0]} channels, kernel expects {c_in}")
    _, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = _pad(x.data, ph, pw, padding)
    # (C_in, kh, kw, H, W) -> (C_in*kh*kw, H*W)
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2)).transpose(0, 3, 4, 1, 2)
    cols = cols.reshape(c_in * kh * kw, h * w)
    kmat = k.data.reshape(c_out, -1)
    out = (kmat @ cols).reshape(c_out, h, w)

    def adjoint(g):
        gmat = g.reshape(c_out, h * w)
        dk = (gmat @ cols.T).reshape(k.shape) if k.requires_grad else None
        dx = None
        if x.requires_grad:
            # adjoint of the padded input: full correlation of g with the flipped kernel
            hp, wp = h + 2 * ph, w + 2 * pw
            gpad = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gcols = sliding_window_view(gpad, (kh, kw), axis=(1, 2)).transpose(0, 3, 4, 1, 2)
            gcols = gcols.reshape(c_out * kh * kw, hp * wp)
            kflip = k.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, -1)
            dx = _unpad((kflip @ gcols).reshape(c_in, hp, wp), ph, pw, padding)
        return dx, dk

    return _record(out, (x, k), adjoint, "conv2d")


def laplacian(x: Tensor, padding: str = "replicate") -> Tensor:
    """Per-channel 5-point Laplacian of a ``(C, H, W)`` tensor."""
    _check_padding(padding)
    if x.ndim != 3:
        raise DimensionError(f"laplacian expects (C,H,W), got {x.shape}")
    _, h, w = x.shape
    xp = _pad(x.data, 1, 1, padding)
    out = (
        xp[:, :-2, 1:-1] + xp[:, 2:, 1:-1] + xp[:, 1:-1, :-2] + xp[:, 1:-1, 2:]
        - 4.0 * xp[:, 1:-1, 1:-1]
    )

    def adjoint(g):
        gp = np.zeros_like(xp)
        gp[:, :-2, 1:-1] += g
        gp[:, 2:, 1:-1] += g
        gp[:, 1:-1, :-2] += g
        gp[:, 1:-1, 2:] += g
        gp[:, 1:-1, 1:-1] -= 4.0 * g
        return (_unpad(gp, 1, 1, padding),)

    return _record(out, (x,), adjoint, "laplacian")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 mean pooling with stride 2; spatial extents must be even."""
    if x.ndim != 3 or x.shape[1] % 2 or x.shape[2] % 2:
        raise DimensionError(f"avg_pool2 needs (C,H,W) with even H and W, got {x.shape}")
    c, h, w = x.shape
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def adjoint(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25,)

    return _record(out, (x,), adjoint, "avg_pool2")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of a ``(C, H, W)`` tensor."""
    if x.ndim != 3:
        raise DimensionError(f"upsample2 expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def adjoint(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _record(out, (x,), adjoint, "upsample2")


# ---------------------------------------------------------------------------
# graph and differentiation


@dataclass
class Graph:
    """Recorded operations reachable from a root, in recording order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            found.append(node)
            stack.extend(node.parents)
        found.sort(key=lambda n: n.seq)
        return cls(found)

    @property
    def operations(self) -> list[Tensor]:
        return [n for n in self.nodes if not n.is_leaf]

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def op_names(self) -> list[str]:
        return [n.op for n in self.operations]


def backward(root: Tensor, accumulate: bool = True) -> dict[Tensor, np.ndarray]:
    """Propagate d(root) back to every ``requires_grad`` leaf.

    Returns a map from leaf tensor to its gradient.  With ``accumulate`` the
    gradients are also added into each leaf's ``.grad``.
    """
    if root.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    graph = Graph.from_root(root)
    adj: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    grads: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            grads[node] = g
            continue
        for parent, pg in zip(node.parents, node.adjoint(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = np.asarray(pg, dtype=np.float64)
    if accumulate:
        for leaf, g in grads.items():
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return grads


def grad_check(
    fn: Callable[[Tensor], Tensor],
    x,
    h: float = 1e-5,
    samples: int | None = None,
    seed: int = 0,
) -> float:
    """Largest ``|analytic - central difference| / max(1, |analytic|)`` over coordinates.

    ``samples`` restricts the comparison to that many randomly chosen
    coordinates, which keeps checks on large parameter arrays affordable.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    def evaluate(values: np.ndarray) -> float:
        return _as_tensor(fn(Tensor(values))).item()

    first = evaluate(base)
    if evaluate(base) != first:
        raise DeterminismError("grad_check: two evaluations at the same point differ")

    leaf = Tensor(base, requires_grad=True)
    out = fn(leaf)
    analytic = backward(out, accumulate=False).get(leaf, np.zeros_like(base))

    flat = base.reshape(-1)
    coords: Iterable[int] = range(flat.size)
    if samples is not None and samples < flat.size:
        coords = np.random.default_rng(seed).choice(flat.size, size=samples, replace=False)
    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in coords:
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        numeric = (evaluate(plus.reshape(base.shape)) - evaluate(minus.reshape(base.shape))) / (2 * h)
        err = abs(a_flat[i] - numeric) / max(1.0, abs(a_flat[i]))
        worst = max(worst, err)
    return worst
