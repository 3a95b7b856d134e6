"""Dense float64 tensors with reverse-mode autodiff.

Every operation builds a node graph through parent links; Tape walks that
graph once in reverse topological order and accumulates gradients
additively.  Shapes must match exactly: there is no implicit broadcasting,
mismatches raise immediately.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import ShapeError

# When set, every op asserts finite outputs (debug aid, off by default).
CHECK_FINITE = bool(int(os.environ.get("EVDEBLUR_CHECK_FINITE", "0")))


class Tensor:
    """A float64 array plus the recording needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ShapeError(f"tensors are at most 4-d, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        Tape(self).backward(seed)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{label}, grad={'set' if self.grad is not None else 'none'})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result; records the closure only if a parent needs grads."""
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an operation")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


class Tape:
    """Reverse-topological walker over the graph hanging off one root."""

    def __init__(self, root: Tensor):
        self.root = root
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
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.order = order  # parents before children

    def backward(self, seed: np.ndarray | None = None, retain_grads: bool = False) -> None:
        """Accumulate gradients into every recorded tensor's .grad.

        Non-leaf gradients are freed as soon as their closure has consumed
        them unless retain_grads is set; leaves always keep theirs.
        """
        if seed is None:
            seed = np.ones_like(self.root.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.root.data.shape:
                raise ShapeError(f"seed shape {seed.shape} != root shape {self.root.data.shape}")
        self.root.accumulate_grad(seed)
        for node in reversed(self.order):
            if node.backward_fn is not None and node.grad is not None:
                node.backward_fn(node.grad)
                if not retain_grads:
                    node.grad = None

    def zero_grad(self) -> None:
        for node in self.order:
            node.grad = None


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# Elementwise and shape operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _node(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _node(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _node(a.data * b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _node(a.data * s, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), bw)


def logistic(a: Tensor) -> Tensor:
    x = np.clip(a.data, -60.0, 60.0)
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * out * (1.0 - out))

    return _node(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - out * out))

    return _node(out, (a,), bw)


def abs_(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * sign)

    return _node(np.abs(a.data), (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * 2.0 * a.data)

    return _node(a.data * a.data, (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g) / n))

    return _node(np.asarray(a.data.mean()), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, float(g)))

    return _node(np.asarray(a.data.sum()), (a,), bw)


def concat_channels(tensors: list[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    shapes = {t.data.shape[0] for t in tensors} | {t.data.shape[2:] for t in tensors}
    if len({t.data.ndim for t in tensors}) != 1 or tensors[0].data.ndim != 4:
        raise ShapeError("concat_channels expects 4-d NCHW tensors")
    if len({(t.data.shape[0],) + t.data.shape[2:] for t in tensors}) != 1:
        raise ShapeError(f"concat_channels: incompatible shapes {[t.data.shape for t in tensors]}")
    del shapes
    offsets = np.cumsum([0] + [t.data.shape[1] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t.accumulate_grad(g[:, lo:hi])

    return _node(np.concatenate([t.data for t in tensors], axis=1), tuple(tensors), bw)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if a.data.ndim != 4:
        raise ShapeError("slice_channels expects a 4-d NCHW tensor")
    if not (0 <= start < stop <= a.data.shape[1]):
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {a.data.shape}")

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[:, start:stop] = g
            a.accumulate_grad(full)

    return _node(a.data[:, start:stop].copy(), (a,), bw)


def channel_unit_norm(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each pixel's channel vector to unit length (NCHW)."""
    if a.data.ndim != 4:
        raise ShapeError("channel_unit_norm expects a 4-d NCHW tensor")
    norm = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True) + eps)
    out = a.data / norm

    def bw(g):
        if a.requires_grad:
            dot = np.sum(g * a.data, axis=1, keepdims=True)
            a.accumulate_grad(g / norm - a.data * (dot / (norm**3)))

    return _node(out, (a,), bw)


def avgpool2(a: Tensor) -> Tensor:
    """Factor-2 average pooling over even spatial dims (NCHW)."""
    n, c, h, w = _expect_nchw(a, "avgpool2")
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2 needs even spatial dims, got {(h, w)}")
    out = a.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        if a.requires_grad:
            up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3)
            a.accumulate_grad(0.25 * up)

    return _node(out, (a,), bw)


_UPSAMPLE_CACHE: dict[int, np.ndarray] = {}


def _upsample_matrix(n: int) -> np.ndarray:
    """(2n, n) interpolation matrix; align-corners-false with edge clamping."""
    m = _UPSAMPLE_CACHE.get(n)
    if m is None:
        m = np.zeros((2 * n, n))
        src = (np.arange(2 * n) + 0.5) / 2.0 - 0.5
        i0 = np.floor(src).astype(int)
        frac = src - i0
        lo = np.clip(i0, 0, n - 1)
        hi = np.clip(i0 + 1, 0, n - 1)
        rows = np.arange(2 * n)
        np.add.at(m, (rows, lo), 1.0 - frac)
        np.add.at(m, (rows, hi), frac)
        _UPSAMPLE_CACHE[n] = m
    return m


def upsample_bilinear2(a: Tensor) -> Tensor:
    """Factor-2 bilinear upsampling, sample centers at (i+0.5)/2 - 0.5."""
    n, c, h, w = _expect_nchw(a, "upsample_bilinear2")
    mr = _upsample_matrix(h)
    mc = _upsample_matrix(w)
    out = np.einsum("ij,ncjk,lk->ncil", mr, a.data, mc, optimize=True)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.einsum("ij,ncik,kl->ncjl", mr, g, mc, optimize=True))

    return _node(out, (a,), bw)


def _expect_nchw(a: Tensor, op: str) -> tuple[int, int, int, int]:
    if a.data.ndim != 4:
        raise ShapeError(f"{op} expects a 4-d NCHW tensor, got {a.data.shape}")
    return a.data.shape
