"""Dense float64 tensors with a small reverse-mode autodiff tape.

Every primitive checks shapes explicitly. Elementwise binary ops follow numpy
broadcasting and reduce gradients back to each operand's shape.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "primitive",
    "no_grad",
    "backward",
    "grad_check",
    "numeric_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "matmul",
    "bmm",
    "linear",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "softmax",
    "masked_softmax",
    "log_softmax",
    "concat",
    "stack",
    "take",
    "sum",
    "reshape",
    "transpose",
    "max_pool2d",
    "conv2d",
    "conv1d_same",
    "flip_padded",
]


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""


def _shape_error(op: str, *shapes) -> ShapeError:
    dims = ", ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {dims}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

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
        return self._backward is None

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> dict:
        return backward(self)

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

    def __getitem__(self, idx):
        return take(self, idx)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_RECORDING = [True]


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording them on the tape."""
    prev = _RECORDING[0]
    _RECORDING[0] = False
    try:
        yield
    finally:
        _RECORDING[0] = prev


def primitive(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a primitive.

    ``backward_fn(g)`` must return one gradient (or None) per parent. The
    node joins the tape only when some parent requires grad.
    """
    out = Tensor(data)
    out.op = op
    if _RECORDING[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


class Tape:
    """Topologically ordered record of the nodes feeding a root tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    Returns a map from leaf tensor to the gradient contributed by this call.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    contributed: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            contributed[node] = g
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return contributed


# ---------------------------------------------------------------- elementwise


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise _shape_error(op, a.shape, b.shape) from err


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return primitive(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return primitive(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data
    return primitive(
        ad * bd, (a, b), lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)), "mul"
    )


def neg(a: Tensor) -> Tensor:
    return primitive(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)
    return primitive(a.data * k, (a,), lambda g: (g * k,), "scale")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return primitive(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return primitive(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return primitive(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return primitive(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return primitive(np.log(x), (a,), lambda g: (g / x,), "log")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands (numpy semantics)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad @ bd

    if ad.ndim == 2 and bd.ndim == 2:
        def bw(g):
            return g @ bd.T, ad.T @ g
    elif ad.ndim == 2:
        def bw(g):
            return np.outer(g, bd), ad.T @ g
    elif bd.ndim == 2:
        def bw(g):
            return bd @ g, np.outer(ad, g)
    else:
        def bw(g):
            return g * bd, g * ad

    return primitive(out, (a, b), bw, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product (B, n, k) @ (B, k, m) -> (B, n, m)."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise _shape_error("bmm", a.shape, b.shape)
    ad, bd = a.data, b.data
    return primitive(ad @ bd, (a, b), lambda g: (g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g), "bmm")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis of ``x`` (..., in); weight is (out, in)."""
    x = _as_tensor(x)
    if weight.ndim != 2 or x.ndim < 1 or x.shape[-1] != weight.shape[1]:
        raise _shape_error("linear", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise _shape_error("linear", x.shape, weight.shape, bias.shape)
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    n_in, n_out = wd.shape[1], wd.shape[0]

    def bw(g):
        dx = g @ wd
        g2 = g.reshape(-1, n_out)
        dw = g2.T @ xd.reshape(-1, n_in)
        return (dx, dw) if bias is None else (dx, dw, g2.sum(axis=0))

    return primitive(out, parents, bw, "linear")


# ---------------------------------------------------------------- normalizers


def _check_axis(op: str, a: Tensor, axis: int) -> None:
    if a.ndim == 0 or not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for shape {a.shape}")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis("softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return primitive(y, (a,), bw, "softmax")


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (True = valid); masked entries are exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise _shape_error("masked_softmax", a.shape, mask.shape)
    if not mask.any(axis=-1).all():
        raise ShapeError("masked_softmax: a row has no valid entry")
    x = np.where(mask, a.data, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return primitive(y, (a,), bw, "masked_softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis("log_softmax", a, axis)
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return primitive(y, (a,), bw, "log_softmax")


# ---------------------------------------------------------------- structural


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no operands")
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim:
            raise _shape_error("concat", *(u.shape for u in tensors))
        other = [d for i, d in enumerate(t.shape) if i != axis % ref.ndim]
        mine = [d for i, d in enumerate(ref.shape) if i != axis % ref.ndim]
        if other != mine:
            raise _shape_error("concat", *(u.shape for u in tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return primitive(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack: no operands")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise _shape_error("stack", *(t.shape for t in tensors))
    out = np.stack([t.data for t in tensors])
    return primitive(out, tensors, lambda g: tuple(g), "stack")


def take(a: Tensor, idx) -> Tensor:
    """Indexing/slicing (basic or integer-array); gradients scatter-add back."""
    try:
        out = a.data[idx]
    except IndexError as err:
        raise ShapeError(f"slice: index {idx!r} invalid for shape {a.shape}") from err
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return primitive(np.array(out, dtype=np.float64), (a,), bw, "slice")


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    if axis is None:
        return primitive(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
    _check_axis("sum", a, axis)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return primitive(a.data.sum(axis=axis), (a,), bw, "sum")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise _shape_error("reshape", src, shape) from err
    return primitive(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise _shape_error("transpose", a.shape, axes)
    inv = tuple(np.argsort(axes))
    return primitive(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


# ---------------------------------------------------------------- convolution / pooling


def max_pool2d(a: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling over the last two axes of (C, H, W).

    Odd extents are padded with -inf so the output is (C, ceil(H/s), ceil(W/s)).
    """
    if a.ndim != 3:
        raise _shape_error("max_pool", a.shape)
    c, h, w = a.shape
    ho, wo = -(-h // size), -(-w // size)
    padded = np.full((c, ho * size, wo * size), -np.inf)
    padded[:, :h, :w] = a.data
    win = padded.reshape(c, ho, size, wo, size).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros((c, ho, wo, size * size))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        full = gw.reshape(c, ho, wo, size, size).transpose(0, 1, 3, 2, 4).reshape(c, ho * size, wo * size)
        return (full[:, :h, :w].copy(),)

    return primitive(out, (a,), bw, "max_pool")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, pad: int = 1) -> Tensor:
    """Cross-correlation of x (Cin, H, W) with kernel (Cout, Cin, kh, kw), stride 1."""
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise _shape_error("conv2d", x.shape, kernel.shape)
    cout, cin, kh, kw = kernel.shape
    if bias is not None and bias.shape != (cout,):
        raise _shape_error("conv2d", x.shape, kernel.shape, bias.shape)
    _, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    if ho <= 0 or wo <= 0:
        raise _shape_error("conv2d", x.shape, kernel.shape)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (Cin, ho, wo, kh, kw)
    kd = kernel.data
    out = np.tensordot(kd, win, axes=([1, 2, 3], [0, 3, 4]))  # (Cout, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        dk = np.tensordot(g, win, axes=([1, 2], [1, 2]))  # (Cout, Cin, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + ho, j : j + wo] += np.tensordot(kd[:, :, i, j], g, axes=([0], [0]))
        dx = dxp[:, pad : pad + h, pad : pad + w]
        if bias is None:
            return dx, dk
        return dx, dk, g.sum(axis=(1, 2))

    return primitive(out, parents, bw, "conv2d")


def conv1d_same(x: Tensor, kernel: Tensor) -> Tensor:
    """Same-length cross-correlation of signals (T,) or (B, T) with kernel (C, W) -> (T, C) or (B, T, C).

    Even widths pad one more frame on the right than on the left.
    """
    if x.ndim not in (1, 2) or kernel.ndim != 2:
        raise _shape_error("conv1d", x.shape, kernel.shape)
    t = x.shape[-1]
    width = kernel.shape[1]
    left = (width - 1) // 2
    right = width - 1 - left
    pads = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    xp = np.pad(x.data, pads)
    cols = sliding_window_view(xp, width, axis=-1)  # (..., T, W)
    kd = kernel.data
    out = cols @ kd.T
    idx = (np.arange(t)[:, None] + np.arange(width)[None, :]).ravel()

    def bw(g):
        dk = g.reshape(-1, kd.shape[0]).T @ cols.reshape(-1, width)
        dcols = (g @ kd).reshape(-1, t * width)
        dxp = np.stack([np.bincount(idx, weights=row, minlength=t + width - 1) for row in dcols])
        dx = dxp[:, left : left + t]
        return dx.reshape(x.shape), dk

    return primitive(out, (x, kernel), bw, "conv1d")


def flip_padded(x: Tensor, lengths: Sequence[int]) -> Tensor:
    """Reverse each row's first ``lengths[b]`` steps along axis 1; padding stays in place.

    The map is an involution, so the backward pass is the same permutation.
    """
    if x.ndim < 2 or len(lengths) != x.shape[0]:
        raise _shape_error("flip_padded", x.shape, (len(lengths),))
    n = x.shape[1]
    perm = np.tile(np.arange(n), (x.shape[0], 1))
    for b, ln in enumerate(lengths):
        if not 0 < ln <= n:
            raise ShapeError(f"flip_padded: length {ln} outside [1, {n}]")
        perm[b, :ln] = np.arange(ln - 1, -1, -1)
    rows = np.arange(x.shape[0])[:, None]
    return primitive(x.data[rows, perm], (x,), lambda g: (g[rows, perm],), "flip_padded")


# ---------------------------------------------------------------- numerical verification


def numeric_grad(f: Callable[[], float], arrays: Iterable[np.ndarray], step: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``f()`` w.r.t. arrays that ``f`` reads by reference."""
    grads = []
    for arr in arrays:
        g = np.zeros(arr.shape)
        for i in range(arr.size):
            orig = arr.flat[i]
            arr.flat[i] = orig + step
            fp = f()
            arr.flat[i] = orig - step
            fm = f()
            arr.flat[i] = orig
            g.flat[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check(
    f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, step: float = 1e-5, floor: float = 1e-8
) -> float:
    """Max relative error between the tape gradient of scalar ``f`` and central differences."""
    data = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    probe = Tensor(data.copy(), requires_grad=True)
    out = f(probe)
    if not np.isfinite(out.data).all():
        raise ValueError("grad_check: f(x) is not finite")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(data)

    work = data.copy()

    def evaluate() -> float:
        return float(f(Tensor(work)).data)

    (numeric,) = numeric_grad(evaluate, [work], step)
    return _relative_error(analytic, numeric, floor)


def grad_check_params(
    loss_fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5, floor: float = 1e-8
) -> float:
    """grad_check over tensors that ``loss_fn`` reads in place (model parameters)."""
    for p in params:
        p.grad = None
    out = loss_fn()
    if not np.isfinite(out.data).all():
        raise ValueError("grad_check: loss is not finite")
    backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = numeric_grad(lambda: float(loss_fn().data), [p.data for p in params], step)
    return max(_relative_error(a, n, floor) for a, n in zip(analytic, numeric))
