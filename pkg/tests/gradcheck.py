"""Random differentiable graphs, one family per op kind, and a central-difference oracle."""

from __future__ import annotations

import numpy as np

from fedprophet import grad_core as gc
from fedprophet.grad_core import Tensor

OP_KINDS = [
    "add", "sub", "mul", "matmul", "conv2d", "relu", "max_pool2d", "avg_pool2d",
    "flatten", "softmax_cross_entropy", "l2_norm_squared", "scalar_scale", "sum", "mean",
]


def _readout(out: Tensor, rng) -> tuple[np.ndarray, callable]:
    r = rng.standard_normal(out.shape)
    return r, lambda t: gc.tsum(gc.mul(t, Tensor(r)))


def random_graph(kind: str, rng: np.random.Generator):
    """(leaf arrays, fn(list of Tensors) -> scalar Tensor) exercising ``kind``."""
    n, d, h = (int(v) for v in rng.integers(2, 5, size=3))
    op = lambda *a, **k: gc.forward_op(kind, *a, **k)  # noqa: E731
    R1 = rng.standard_normal((n, h))

    if kind in ("add", "sub", "mul"):
        shape_b = [(n, d), (1, d), (d,), (n, 1)][int(rng.integers(4))]
        leaves = [rng.standard_normal((n, d)), rng.standard_normal(shape_b), rng.standard_normal((d, h))]

        def fn(t):
            return gc.tsum(gc.mul(gc.matmul(op(t[0], t[1]), t[2]), Tensor(R1)))
    elif kind == "matmul":
        leaves = [rng.standard_normal((n, d)), rng.standard_normal((d, h))]

        def fn(t):
            return gc.tsum(gc.mul(op(t[0], t[1]), Tensor(R1)))
    elif kind == "conv2d":
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        cin, cout, size = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(4, 7))
        leaves = [rng.standard_normal((2, cin, size, size)), rng.standard_normal((cout, cin, 3, 3)),
                  rng.standard_normal(cout)]
        with gc.no_grad():
            probe = op(Tensor(leaves[0]), Tensor(leaves[1]), Tensor(leaves[2]), stride=stride, padding=pad)
        R = rng.standard_normal(probe.shape)

        def fn(t):
            return gc.tsum(gc.mul(op(t[0], t[1], t[2], stride=stride, padding=pad), Tensor(R)))
    elif kind == "relu":
        leaves = [rng.standard_normal((n, d)), rng.standard_normal((d, h))]

        def fn(t):
            return gc.tsum(gc.mul(op(gc.matmul(t[0], t[1])), Tensor(R1)))
    elif kind in ("max_pool2d", "avg_pool2d"):
        c, size = int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
        leaves = [rng.standard_normal((2, c, size, size))]
        R = rng.standard_normal((2, c, size // 2, size // 2))

        def fn(t):
            return gc.tsum(gc.mul(op(t[0], k=2), Tensor(R)))
    elif kind == "flatten":
        c = int(rng.integers(1, 4))
        leaves = [rng.standard_normal((n, c, 2, 3)), rng.standard_normal((c * 6, h))]

        def fn(t):
            return gc.tsum(gc.mul(gc.matmul(op(t[0]), t[1]), Tensor(R1)))
    elif kind == "softmax_cross_entropy":
        reduction = ["mean", "sum"][int(rng.integers(2))]
        labels = rng.integers(0, h, size=n)
        leaves = [rng.standard_normal((n, d)), rng.standard_normal((d, h))]

        def fn(t):
            return op(gc.matmul(t[0], t[1]), labels, reduction=reduction)
    elif kind == "l2_norm_squared":
        per_sample = bool(rng.integers(2))
        r = rng.standard_normal(n)
        leaves = [rng.standard_normal((n, d)), rng.standard_normal((d, h))]

        def fn(t):
            out = op(gc.matmul(t[0], t[1]), per_sample=per_sample)
            return gc.tsum(gc.mul(out, Tensor(r))) if per_sample else out
    elif kind == "scalar_scale":
        c = float(rng.standard_normal())
        leaves = [rng.standard_normal((n, d)), rng.standard_normal((d, h))]

        def fn(t):
            return gc.tsum(gc.mul(op(gc.matmul(t[0], t[1]), c), Tensor(R1)))
    elif kind in ("sum", "mean"):
        leaves = [rng.standard_normal((n, d)), rng.standard_normal((d, h))]

        def fn(t):
            z = gc.matmul(t[0], t[1])
            return op(gc.mul(z, z))
    else:
        raise ValueError(kind)
    return leaves, fn


def autodiff(leaves, fn) -> list[np.ndarray]:
    ts = [Tensor(a.copy(), requires_grad=True) for a in leaves]
    with gc.Tape():
        gc.backward(fn(ts))
    return [t.grad for t in ts]


def finite_diff(leaves, fn, h: float = 1e-5) -> list[np.ndarray]:
    def value(arrs):
        with gc.no_grad():
            return fn([Tensor(a) for a in arrs]).item()

    out = []
    for i, a in enumerate(leaves):
        g = np.zeros_like(a)
        for j in np.ndindex(a.shape):
            plus = [x.copy() for x in leaves]
            minus = [x.copy() for x in leaves]
            plus[i][j] += h
            minus[i][j] -= h
            g[j] = (value(plus) - value(minus)) / (2 * h)
        out.append(g)
    return out


def relative_error(a: list[np.ndarray], b: list[np.ndarray]) -> float:
    va = np.concatenate([x.ravel() for x in a])
    vb = np.concatenate([x.ravel() for x in b])
    return float(np.linalg.norm(va - vb) / max(np.linalg.norm(va), np.linalg.norm(vb), 1e-8))
