"""Dense float64 tensors with reverse-mode automatic differentiation.

A small numpy-backed autodiff engine: every operation records its inputs and
a backward rule on the output tensor, and ``Tensor.backward()`` replays the
graph in exact reverse topological order, summing gradients into each input
from all of its consumers.  The op set covers exactly what the
encoder-decoder model and its task conditioning need: stacked matmul on 2-d
and 3-d operands, concat/slice/reshape/transpose plumbing, row gathers for
embeddings, softmax, layer norm and cross entropy.

Everything is float64.  Graph construction and the backward pass are single
threaded; tensors themselves are value-like and may be handed between
threads, but a graph belongs to the thread that built it.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """N-dimensional float64 array with an optional gradient buffer.

    ``data`` is row-major (C order) so a flattened view is the canonical flat
    storage.  ``grad`` is allocated lazily during ``backward`` on leaf
    tensors and always matches ``data`` in shape.  Leaf tensors built from
    user data are checked for NaN/Inf at construction; op outputs are not
    re-checked (the training harness and optimizer guard the step boundary
    instead).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in tensor {name or ''!r}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...],
                 backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    # -- backward engine -------------------------------------------------
    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph.

        Gradients flow through intermediate nodes in transient buffers and
        accumulate into ``.grad`` on leaves (parameters and inputs); repeated
        calls keep accumulating unless grads are zeroed first.
        """
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        # Accumulation is out-of-place; a second backward over the same graph
        # (after zeroing) is bit-identical to the first.
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            gout = grads.pop(id(node), None)
            if gout is None:
                continue
            fn = node._backward_fn
            if fn is None:
                node.grad = gout.copy() if node.grad is None else node.grad + gout
                continue
            for parent, contrib in zip(node._parents, fn(gout)):
                if contrib is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                acc = grads.get(pid)
                grads[pid] = contrib if acc is None else acc + contrib


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    return Tensor._from_op(a.data * b.data, (a, b),
                           lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    return Tensor._from_op(a.data * s, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0  # gradient at exactly 0 is defined as 0
    return Tensor._from_op(np.maximum(a.data, 0.0), (a,),
                           lambda g: (g * mask,))


def sum_all(a: Tensor) -> Tensor:
    return Tensor._from_op(np.asarray(a.data.sum()), (a,),
                           lambda g: (np.broadcast_to(g, a.shape).copy(),))


# ---------------------------------------------------------------------------
# matmul on 2-d / 3-d operands
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Dense product; supports (m,k)@(k,n), (B,m,k)@(k,n) and (B,m,k)@(B,k,n)."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul: need 2-d/3-d operands, got {a.shape} and {b.shape}")
    if a.ndim == 2 and b.ndim == 3:
        raise ShapeError(f"matmul: 2-d by stacked 3-d unsupported ({a.shape} @ {b.shape})")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if a.ndim == 3 and b.ndim == 2:
        # shared right operand: one large GEMM beats a stack of small ones
        B, m, k = a.shape
        n = b.shape[1]
        out = (a.data.reshape(B * m, k) @ b.data).reshape(B, m, n)

        def backward(g: np.ndarray):
            g2 = g.reshape(B * m, n)
            ga = (g2 @ b.data.T).reshape(B, m, k)
            gb = a.data.reshape(B * m, k).T @ g2
            return ga, gb

        return Tensor._from_op(out, (a, b), backward)

    out = a.data @ b.data

    def backward(g: np.ndarray):
        if b.ndim == 2:
            ga = g @ b.data.T
            gb = a.data.T @ g
        else:
            ga = g @ b.data.swapaxes(-1, -2)
            gb = a.data.swapaxes(-1, -2) @ g
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return Tensor._from_op(a.data.reshape(shape), (a,),
                           lambda g: (g.reshape(a.shape),))


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    return Tensor._from_op(np.swapaxes(a.data, ax1, ax2), (a,),
                           lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty part list")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {ref} and {p.shape} differ off axis {axis}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor._from_op(out, tuple(parts), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g: np.ndarray):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return Tensor._from_op(a.data[idx].copy(), (a,), backward)


def gather_axis0(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; backward scatters (sums) into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather: index out of range for table of {table.shape[0]} rows")

    def backward(g: np.ndarray):
        full = np.zeros(table.shape)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._from_op(table.data[ids], (table,), backward)


def tile_leading(a: Tensor, reps: int) -> Tensor:
    """Repeat ``a`` ``reps`` times along a flattened leading axis.

    (h, l, e) -> (reps*h, l, e); backward sums over the repeats.
    """
    out = np.tile(a.data, (reps,) + (1,) * (a.ndim - 1))

    def backward(g: np.ndarray):
        return (g.reshape((reps,) + a.shape).sum(axis=0),)

    return Tensor._from_op(out, (a,), backward)


# ---------------------------------------------------------------------------
# normalization and losses
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} in shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return Tensor._from_op(y, (a,), backward)


LAYER_NORM_EPS = 1e-6


def layer_norm(x: Tensor, gain: Tensor) -> Tensor:
    """Zero-mean/unit-variance normalization over the last axis, scaled by gain."""
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError(f"layer_norm: gain {gain.shape} vs last extent {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv
    out = xhat * gain.data

    def backward(g: np.ndarray):
        n = x.shape[-1]
        ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        gx_hat = g * gain.data
        gx = inv * (gx_hat
                    - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain

    return Tensor._from_op(out, (x, gain), backward)


def cross_entropy(logits: Tensor, targets, ignore_index: int) -> Tensor:
    """Mean negative log-softmax probability of targets over non-ignored rows.

    ``logits`` has shape (..., V); ``targets`` holds integer ids of shape
    logits.shape[:-1].  Rows whose target equals ``ignore_index`` contribute
    neither to the mean nor to the gradient; all-ignored input yields 0.
    """
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    flat = logits.data.reshape(-1, vocab)
    tflat = targets.reshape(-1)
    valid = tflat != ignore_index
    if valid.any():
        bad = tflat[valid]
        if bad.min() < 0 or bad.max() >= vocab:
            raise IndexError(f"cross_entropy: target out of range [0, {vocab})")
    n_valid = int(valid.sum())

    shifted = flat - flat.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    if n_valid == 0:
        loss = 0.0
    else:
        rows = np.nonzero(valid)[0]
        loss = -logp[rows, tflat[rows]].mean()

    def backward(g: np.ndarray):
        dflat = np.zeros_like(flat)
        if n_valid:
            p = np.exp(logp)
            rows = np.nonzero(valid)[0]
            dflat[rows] = p[rows]
            dflat[rows, tflat[rows]] -= 1.0
            dflat[rows] /= n_valid
        return (float(g) * dflat.reshape(logits.shape),)

    return Tensor._from_op(np.asarray(loss), (logits,), backward)


def graph_nodes(root: Tensor) -> list[Tensor]:
    """All tensors reachable from ``root`` through recorded parents."""
    seen: set[int] = set()
    out: list[Tensor] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        out.append(node)
        stack.extend(node._parents)
    return out
