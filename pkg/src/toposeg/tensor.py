"""Small eager tensor engine with reverse-mode differentiation.

Only the operations needed by the box-counting descriptors, the segmentation
losses and the toy training pipeline are provided. Every operation records
its inputs and an adjoint rule on the output tensor; :func:`backward` walks the
recorded graph once in reverse topological order.

There is no implicit broadcasting: elementwise operations require identical
shapes, and :func:`expand` must be used explicitly. All data is float64.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Graph",
    "Gradients",
    "tensor",
    "no_grad",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "shift",
    "neg",
    "exp",
    "log",
    "sqrt",
    "relu",
    "clamp_min",
    "reduce_sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "expand",
    "matmul",
    "linear",
    "softmax_log",
    "stop_gradient",
    "block_max_pool",
    "sliding_max",
    "sliding_min",
    "mean_filter_3x3",
    "conv2d_fixed",
    "conv2d",
    "pad_edge",
    "backward",
    "grad_check",
]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.flags.writeable:
        a.flags.writeable = False
    return a


class Tensor:
    """Dense float64 array plus the record needed to differentiate through it.

    Tensors are treated as immutable; their buffers are marked read-only.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_adjoint", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._adjoint = None
        self.op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], adjoint, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _frozen(data)
        out.op = op
        track = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._adjoint = adjoint if track else None
        return out

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
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; scalars map to scale/shift, tensors must match shapes
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -other)

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axes=None, keepdims: bool = False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False):
        return mean(self, axes, keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return Tensor._result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Pointwise ``add``, ``sub`` or ``mul`` of two equally shaped tensors."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(x.data * c, (x,), lambda g: (g * c,), "scale")


def shift(x: Tensor, c: float) -> Tensor:
    return Tensor._result(x.data + float(c), (x,), lambda g: (g,), "shift")


def neg(x: Tensor) -> Tensor:
    return Tensor._result(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """``max(x, floor)``; the gradient is passed only where ``x > floor``."""
    mask = x.data > floor
    return Tensor._result(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,), "clamp_min")


# --------------------------------------------------------------------------
# reductions and shape plumbing


def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce_sum(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, x.ndim)
    kept = tuple(1 if i in ax else n for i, n in enumerate(x.shape))
    shape = x.shape

    def adjoint(g):
        return (np.broadcast_to(g.reshape(kept), shape),)

    return Tensor._result(x.data.sum(axis=ax, keepdims=keepdims), (x,), adjoint, "sum")


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[i] for i in ax])) if ax else 1
    return scale(reduce_sum(x, ax, keepdims), 1.0 / max(count, 1))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tensors, adjoint, "concat")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast size-1 axes of ``x`` to ``shape`` (same rank required)."""
    shape = tuple(shape)
    if len(shape) != x.ndim or any(a != b and a != 1 for a, b in zip(x.shape, shape)):
        raise ValueError(f"cannot expand {x.shape} to {shape}")
    ax = tuple(i for i, (a, b) in enumerate(zip(x.shape, shape)) if a == 1 and b != 1)

    def adjoint(g):
        return (g.sum(axis=ax, keepdims=True),)

    return Tensor._result(np.broadcast_to(x.data, shape), (x,), adjoint, "expand")


def _getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def adjoint(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Tensor._result(x.data[index], (x,), adjoint, "getitem")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + bias`` for ``x`` of shape [B, Din] and ``w`` of shape [Din, Dout]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    if bias is not None and bias.shape != (w.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({w.shape[1]},)")
    xd, wd = x.data, w.data
    out = xd @ wd
    if bias is None:
        return Tensor._result(out, (x, w), lambda g: (g @ wd.T, xd.T @ g), "linear")
    out = out + bias.data
    return Tensor._result(out, (x, w, bias), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)), "linear")


def softmax_log(x: Tensor, axis: int = -1) -> tuple[Tensor, Tensor]:
    """Numerically stable softmax along ``axis``; returns ``(probs, logprobs)``."""
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    logp = shifted - lse
    p = np.exp(logp)

    def adjoint(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    logprobs = Tensor._result(logp, (x,), adjoint, "logsoftmax")
    probs = exp(logprobs)
    return probs, logprobs


def stop_gradient(x: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out._parents = ()
    out._adjoint = None
    out.op = "stop_gradient"
    return out


# --------------------------------------------------------------------------
# spatial operations on [B, C, H, W]


def _check_nchw(x: Tensor, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} expects a [B, C, H, W] tensor, got shape {x.shape}")


def block_max_pool(m: Tensor, s: int) -> Tensor:
    """Maximum over non-overlapping ``s`` x ``s`` boxes.

    The map is zero-padded on the bottom/right when ``s`` does not divide the
    extent. The adjoint routes each box's gradient to the first maximal entry
    in row-major order.
    """
    if int(s) != s or s < 1:
        raise ValueError(f"box size must be a positive integer, got {s}")
    s = int(s)
    _check_nchw(m, "block_max_pool")
    b, c, h, w = m.shape
    hb, wb = -(-h // s), -(-w // s)
    data = m.data
    if hb * s != h or wb * s != w:
        data = np.pad(data, ((0, 0), (0, 0), (0, hb * s - h), (0, wb * s - w)))
    boxes = data.reshape(b, c, hb, s, wb, s).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hb, wb, s * s)
    arg = boxes.argmax(axis=-1)[..., None]
    out = np.take_along_axis(boxes, arg, axis=-1)[..., 0]

    def adjoint(g):
        gb = np.zeros((b, c, hb, wb, s * s))
        np.put_along_axis(gb, arg, g[..., None], axis=-1)
        full = gb.reshape(b, c, hb, wb, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hb * s, wb * s)
        return (full[:, :, :h, :w],)

    return Tensor._result(out, (m,), adjoint, "block_max_pool")


def _fold_edge(g: np.ndarray, r: int) -> np.ndarray:
    """Adjoint of edge-replication padding by ``r`` on the last two axes."""
    g = g.copy()
    g[..., r, :] += g[..., :r, :].sum(axis=-2)
    g[..., -r - 1, :] += g[..., -r:, :].sum(axis=-2)
    g = g[..., r:-r, :]
    g[..., :, r] += g[..., :, :r].sum(axis=-1)
    g[..., :, -r - 1] += g[..., :, -r:].sum(axis=-1)
    return g[..., :, r:-r]


def pad_edge(x: Tensor, r: int) -> Tensor:
    """Replicate the border rows/columns ``r`` times on each spatial side."""
    _check_nchw(x, "pad_edge")
    if r == 0:
        return x
    out = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    return Tensor._result(out, (x,), lambda g: (_fold_edge(g, r),), "pad_edge")


def sliding_max(m: Tensor, size: int = 3) -> Tensor:
    """Stride-1 window maximum with edge replication (a flat-SE dilation).

    Ties route the gradient to the first maximal window position in
    row-major order.
    """
    _check_nchw(m, "sliding_max")
    if size < 1 or size % 2 == 0:
        raise ValueError(f"window size must be odd and positive, got {size}")
    r = size // 2
    b, c, h, w = m.shape
    padded = np.pad(m.data, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    win = sliding_window_view(padded, (size, size), axis=(2, 3)).reshape(b, c, h, w, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def adjoint(g):
        gp = np.zeros_like(padded)
        for k in range(size * size):
            di, dj = divmod(k, size)
            gp[:, :, di:di + h, dj:dj + w] += np.where(arg == k, g, 0.0)
        return (_fold_edge(gp, r) if r else gp,)

    return Tensor._result(out, (m,), adjoint, "sliding_max")


def sliding_min(m: Tensor, size: int = 3) -> Tensor:
    return neg(sliding_max(neg(m), size))


def _correlate(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    h, w = x.shape[-2:]
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)])
    out = np.zeros(x.shape)
    for u in range(kh):
        for v in range(kw):
            if kernel[u, v] != 0.0:
                out += kernel[u, v] * xp[..., u:u + h, v:v + w]
    return out


def mean_filter_3x3(m: Tensor) -> Tensor:
    """3x3 box mean with zero padding and a fixed divisor of 9."""
    _check_nchw(m, "mean_filter_3x3")
    k = np.full((3, 3), 1.0 / 9.0)
    # the zero-padded box filter is a symmetric operator, so it is its own adjoint
    return Tensor._result(_correlate(m.data, k), (m,), lambda g: (_correlate(g, k),), "mean_filter_3x3")


def conv2d_fixed(m: Tensor, kernel) -> Tensor:
    """Same-size zero-padded cross-correlation with a constant kernel."""
    _check_nchw(m, "conv2d_fixed")
    k = np.asarray(kernel.data if isinstance(kernel, Tensor) else kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] % 2 == 0 or k.shape[1] % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {k.shape}")
    flipped = k[::-1, ::-1]
    return Tensor._result(_correlate(m.data, k), (m,), lambda g: (_correlate(g, flipped),), "conv2d_fixed")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Learnable same-size convolution (cross-correlation), zero padding, stride 1.

    ``x`` is [B, Cin, H, W], ``w`` is [Cout, Cin, k, k] with odd ``k``.
    """
    _check_nchw(x, "conv2d")
    if w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] % 2 == 0 or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d: weight shape {w.shape} incompatible with input {x.shape}")
    b, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    r = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (r, r), (r, r)))
    # cols: [B*H*W, Cin*k*k]
    cols = sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(b * h * wd, cin * k * k)
    wmat = w.data.reshape(cout, cin * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, h, wd, cout).transpose(0, 3, 1, 2)

    def adjoint(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * h * wd, cout)
        gw = (g2.T @ cols).reshape(w.shape)
        gx = None
        if x.requires_grad:
            # full correlation of g with the spatially flipped, channel-swapped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (r, r), (r, r)))
            gcols = sliding_window_view(gp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
            wflip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * k * k)
            gx = (gcols.reshape(b * h * wd, cout * k * k) @ wflip.T).reshape(b, h, wd, cin).transpose(0, 3, 1, 2)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if bias is None else (x, w, bias)
    return Tensor._result(out, parents, adjoint, "conv2d")


# --------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Operations reachable from an output, in topological order (inputs first)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
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

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


class Gradients(dict):
    """Leaf -> gradient mapping; leaves that did not participate get zeros."""

    def __missing__(self, key: Tensor) -> np.ndarray:
        return np.zeros(key.shape)


def backward(loss: Tensor) -> Gradients:
    """Reverse-accumulate d(loss)/d(leaf) for every participating leaf with ``requires_grad``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = Gradients()
    if not loss.requires_grad:
        return grads
    graph = Graph.trace(loss)
    acc: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(graph.nodes):
        g = acc.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            grads[node] = np.array(g, dtype=np.float64)
            continue
        for parent, pg in zip(node._parents, node._adjoint(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            acc[key] = acc[key] + pg if key in acc else pg
    return grads


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-4) -> float:
    """Max relative discrepancy between :func:`backward` and central differences.

    The error per coordinate is ``|analytic - fd| / max(1, |fd|)``.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    out = f(leaf)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    analytic = backward(out)[leaf]
    flat = x0.reshape(-1)
    fd = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += h
            xm = flat.copy()
            xm[i] -= h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            fd[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic.reshape(-1) - fd) / np.maximum(1.0, np.abs(fd))
    return float(err.max()) if err.size else 0.0


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
