"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Every array is float64.  Operations record a node on the active :class:`Tape`
whenever one of their inputs requires a gradient; :func:`backward` and
:func:`grad_wrt_input` sweep the tape in reverse and clear it afterwards.

Only what the simulator needs is here: affine/conv layers, ReLU, pooling,
softmax cross-entropy and a handful of reductions.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "TapeError",
    "Tensor",
    "Tape",
    "current_tape",
    "no_grad",
    "forward_op",
    "backward",
    "grad_wrt_input",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "relu",
    "max_pool2d",
    "avg_pool2d",
    "flatten",
    "reshape",
    "softmax_cross_entropy",
    "sum_squares",
    "scale",
    "tsum",
    "tmean",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


class TapeError(RuntimeError):
    """Raised on invalid backward requests (non-scalar loss, input not on tape)."""


class Tensor:
    """A dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass(eq=False)
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # (upstream grad, mask of inputs needing grads) -> per-input grads
    vjp: Callable[[np.ndarray, Sequence[bool]], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of operations; usable as a context manager."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def record(self, node: _Node) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> Tape:
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)


_TAPES: list[Tape] = [Tape()]
_GRAD_ENABLED = [True]


def current_tape() -> Tape:
    return _TAPES[-1]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; used for frozen-prefix inference."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._node = None
    record = _GRAD_ENABLED[-1] and any(t.requires_grad for t in inputs)
    out.requires_grad = record
    if record:
        node = _Node(op, inputs, out, vjp)
        out._node = node
        current_tape().record(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g, need):
        return (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(g, b.shape) if need[1] else None,
        )

    return _emit("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g, need):
        return (
            _unbroadcast(g, a.shape) if need[0] else None,
            _unbroadcast(-g, b.shape) if need[1] else None,
        )

    return _emit("sub", (a, b), a.data - b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def vjp(g, need):
        return (
            _unbroadcast(g * b.data, a.shape) if need[0] else None,
            _unbroadcast(g * a.data, b.shape) if need[1] else None,
        )

    return _emit("mul", (a, b), a.data * b.data, vjp)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g, need: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g, need: (g * mask,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def vjp(g, need):
        return (
            g @ b.data.T if need[0] else None,
            a.data.T @ g if need[1] else None,
        )

    return _emit("matmul", (a, b), a.data @ b.data, vjp)


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, OIHW kernel. No dilation or groups."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {w.shape} do not conform")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(wd, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def vjp(g, need):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if need[0]:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        if need[1]:
            gw = (g2.T @ cols).reshape(w.shape)
        if b is not None and need[2]:
            gb = g2.sum(axis=0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _emit("conv2d", inputs, out, vjp)


def _pool_windows(x: Tensor, k: int, op: str) -> np.ndarray:
    if x.data.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"{op}: input {x.shape} not divisible into {k}x{k} windows")
    n, c, h, w = x.shape
    return x.data.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties route the gradient to the first maximum."""
    win = _pool_windows(x, k, "max_pool2d")
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    n, c, h, w = x.shape

    def vjp(g, need):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _emit("max_pool2d", (x,), out, vjp)


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    win = _pool_windows(x, k, "avg_pool2d")
    n, c, h, w = x.shape

    def vjp(g, need):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return _emit("avg_pool2d", (x,), win.mean(axis=-1), vjp)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _emit("reshape", (x,), out, lambda g, need: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    if x.data.ndim < 1:
        raise ShapeError("flatten: needs at least one axis")
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------------------
# losses and reductions


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels.

    ``reduction`` is ``"mean"``, ``"sum"`` or ``"none"`` (one loss per row).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    nb, nc = logits.shape
    if labels.shape[0] != nb:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= nc):
        raise ValueError(f"label out of range [0, {nc})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(nb)
    per = -logp[rows, labels]
    if reduction == "mean":
        out, w = np.array(per.mean()), 1.0 / nb
    elif reduction == "sum":
        out, w = np.array(per.sum()), 1.0
    elif reduction == "none":
        out, w = per, None
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def vjp(g, need):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        if w is None:
            return (p * g[:, None],)
        return (p * (g * w),)

    return _emit("softmax_cross_entropy", (logits,), out, vjp)


def sum_squares(x: Tensor, per_sample: bool = False) -> Tensor:
    """Squared l2 norm; per row (axis 0 kept) when ``per_sample``."""
    if per_sample:
        axes = tuple(range(1, x.data.ndim))
        out = (x.data**2).sum(axis=axes)

        def vjp(g, need):
            return (2.0 * x.data * g.reshape(g.shape + (1,) * len(axes)),)

        return _emit("sum_squares", (x,), out, vjp)
    return _emit("sum_squares", (x,), np.array((x.data**2).sum()), lambda g, need: (2.0 * x.data * g,))


def tsum(x: Tensor) -> Tensor:
    return _emit("sum", (x,), np.array(x.data.sum()), lambda g, need: (np.broadcast_to(g, x.shape).copy(),))


def tmean(x: Tensor) -> Tensor:
    n = max(x.size, 1)
    return _emit("mean", (x,), np.array(x.data.mean()), lambda g, need: (np.full(x.shape, g / n),))


_KINDS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "max_pool2d": max_pool2d,
    "avg_pool2d": avg_pool2d,
    "flatten": flatten,
    "softmax_cross_entropy": softmax_cross_entropy,
    "l2_norm_squared": sum_squares,
    "scalar_scale": scale,
    "sum": tsum,
    "mean": tmean,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an operation by name (see ``_KINDS`` for the accepted kinds)."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse sweep


def _sweep(loss: Tensor, targets: set[int] | None) -> dict[int, np.ndarray]:
    """Reverse pass over the tape owning ``loss``.

    With ``targets`` given, only paths leading to those tensor ids are
    differentiated; otherwise every tensor that requires grad is.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    nodes = tape.nodes
    if loss._node is None or not nodes:
        raise TapeError("loss was not produced on the active tape")

    if targets is None:
        def needs(t: Tensor) -> bool:
            return t.requires_grad
    else:
        live = set(targets)
        for node in nodes:
            if any(id(t) in live for t in node.inputs):
                live.add(id(node.output))

        def needs(t: Tensor) -> bool:
            return id(t) in live

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        mask = [needs(t) for t in node.inputs]
        if not any(mask):
            continue
        for t, m, gi in zip(node.inputs, mask, node.vjp(g, mask)):
            if not m or gi is None:
                continue
            store = leaves if t._node is None else grads
            prev = store.get(id(t))
            store[id(t)] = gi if prev is None else prev + gi
    return leaves


def _tape_leaves() -> dict[int, Tensor]:
    out: dict[int, Tensor] = {}
    for node in current_tape().nodes:
        for t in node.inputs:
            if t._node is None and t.requires_grad:
                out[id(t)] = t
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf on the tape that requires grad, then clear the tape.

    Leaves that took part in the forward pass but do not influence the loss
    receive a zero gradient.
    """
    leaves = _tape_leaves()
    grads = _sweep(loss, None)
    for key, t in leaves.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
    current_tape().clear()


def grad_wrt_input(loss: Tensor, inp: Tensor, clear: bool = True) -> np.ndarray:
    """Gradient of ``loss`` with respect to ``inp`` only; parameter ``.grad`` is left alone."""
    if not inp.requires_grad or id(inp) not in _tape_leaves():
        raise TapeError("input did not take part in the recorded forward pass")
    grads = _sweep(loss, {id(inp)})
    g = grads.get(id(inp))
    if clear:
        current_tape().clear()
    return np.zeros_like(inp.data) if g is None else np.asarray(g).reshape(inp.shape)
