"""Array-valued reverse-mode differentiation on numpy.

A forward evaluation builds a graph of ``Tensor`` nodes rooted at a scalar
loss; the graph is the recording of that single evaluation.  ``backward``
replays it once in reverse topological order and accumulates one gradient
array per leaf.  All values are float64.  Graphs are single-use: build,
differentiate, discard.

A ``Tensor`` must not be shared across concurrently running evaluations,
but independent graphs over the same leaf *values* are safe because leaves
are copied into fresh nodes per evaluation.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class TapeError(ValueError):
    """Raised for malformed graph usage (non-scalar root, shape misuse)."""


class Tensor:
    """A node in the evaluation graph: a float64 array plus backward hook."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None, requires_grad=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; floats and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def leaf(value) -> Tensor:
    """A differentiable leaf (parameter or input receiving a gradient)."""
    return Tensor(value, requires_grad=True)


def const(value) -> Tensor:
    """A non-differentiable leaf; backward never visits it."""
    return Tensor(value, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value + b.value, (a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(g, b.value.shape))

    out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value - b.value, (a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.value.shape))
        _accumulate(b, _unbroadcast(-g, b.value.shape))

    out._backward = backward
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.value, (a,))

    def backward(g):
        _accumulate(a, -g)

    out._backward = backward
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.value * b.value, (a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.value, a.value.shape))
        _accumulate(b, _unbroadcast(g * a.value, b.value.shape))

    out._backward = backward
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.value * a.value, (a,))

    def backward(g):
        _accumulate(a, g * (2.0 * a.value))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.value), (a,))

    def backward(g):
        _accumulate(a, g * (1.0 - out.value * out.value))

    out._backward = backward
    return out


def elu(a: Tensor) -> Tensor:
    """Exponential linear unit with unit saturation scale."""
    ex = np.exp(np.minimum(a.value, 0.0))
    out = Tensor(np.where(a.value > 0.0, a.value, ex - 1.0), (a,))

    def backward(g):
        _accumulate(a, g * np.where(a.value > 0.0, 1.0, ex))

    out._backward = backward
    return out


def sin(a: Tensor) -> Tensor:
    out = Tensor(np.sin(a.value), (a,))

    def backward(g):
        _accumulate(a, g * np.cos(a.value))

    out._backward = backward
    return out


def cos(a: Tensor) -> Tensor:
    out = Tensor(np.cos(a.value), (a,))

    def backward(g):
        _accumulate(a, g * (-np.sin(a.value)))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# shape and reduction


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.value.reshape(shape), (a,))

    def backward(g):
        _accumulate(a, g.reshape(a.value.shape))

    out._backward = backward
    return out


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.value.sum(), (a,))

    def backward(g):
        _accumulate(a, np.broadcast_to(g, a.value.shape))

    out._backward = backward
    return out


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out = Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.value.shape))

    out._backward = backward
    return out


def cumsum_last(a: Tensor) -> Tensor:
    out = Tensor(np.cumsum(a.value, axis=-1), (a,))

    def backward(g):
        rev = np.flip(g, axis=-1)
        _accumulate(a, np.flip(np.cumsum(rev, axis=-1), axis=-1))

    out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.value for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    out._backward = backward
    return out


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.stack([t.value for t in tensors], axis=axis), tuple(tensors))

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        for t, part in zip(tensors, parts):
            _accumulate(t, part)

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batch semantics; operands must be >= 2-d."""
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise TapeError(
            f"matmul requires >=2-d operands, got {a.value.shape} @ {b.value.shape}"
        )
    out = Tensor(np.matmul(a.value, b.value), (a, b))

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.value, -1, -2))
        gb = np.matmul(np.swapaxes(a.value, -1, -2), g)
        _accumulate(a, _unbroadcast(ga, a.value.shape))
        _accumulate(b, _unbroadcast(gb, b.value.shape))

    out._backward = backward
    return out


def transpose_last(a: Tensor) -> Tensor:
    out = Tensor(np.swapaxes(a.value, -1, -2), (a,))

    def backward(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    out._backward = backward
    return out


_TRIL_CACHE: dict = {}


def _tril_indices(n: int):
    if n not in _TRIL_CACHE:
        _TRIL_CACHE[n] = np.tril_indices(n)
    return _TRIL_CACHE[n]


def tril_from_vec(z: Tensor, n: int, diag_offset: float = 0.0) -> Tensor:
    """Pack (..., n(n+1)/2) entries into a lower-triangular (..., n, n) matrix.

    ``diag_offset`` is added to every diagonal entry of the result.
    """
    m = n * (n + 1) // 2
    if z.value.shape[-1] != m:
        raise TapeError(f"expected last dim {m} for n={n}, got {z.value.shape[-1]}")
    rows, cols = _tril_indices(n)
    batch = z.value.shape[:-1]
    val = np.zeros(batch + (n, n), dtype=np.float64)
    val[..., rows, cols] = z.value
    if diag_offset:
        idx = np.arange(n)
        val[..., idx, idx] += diag_offset
    out = Tensor(val, (z,))

    def backward(g):
        _accumulate(z, g[..., rows, cols])

    out._backward = backward
    return out


def sym_pinv_solve(gram: Tensor, rhs: Tensor, rel_cutoff: float = 1e-10) -> Tensor:
    """Minimum-norm solve ``pinv(G) @ h`` for symmetric PSD ``G``.

    ``gram``: (..., n, n) symmetric, ``rhs``: (..., n, 1).  Eigenvalues at or
    below ``rel_cutoff`` times the largest are dropped (Moore-Penrose with a
    relative spectral cutoff).  The gradient treats the kept subspace as
    fixed, which is exact whenever no eigenvalue sits at the cutoff; the
    callers keep their Gram matrices positive definite by construction.
    """
    w, v = np.linalg.eigh(gram.value)
    wmax = np.maximum(w.max(axis=-1, keepdims=True), 0.0)
    keep = w > rel_cutoff * np.where(wmax > 0.0, wmax, 1.0)
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    pinv = np.matmul(v * inv[..., None, :], np.swapaxes(v, -1, -2))
    out = Tensor(np.matmul(pinv, rhs.value), (gram, rhs))

    def backward(g):
        pg = np.matmul(pinv, g)
        _accumulate(rhs, _unbroadcast(pg, rhs.value.shape))
        ggram = -np.matmul(pg, np.swapaxes(out.value, -1, -2))
        _accumulate(gram, _unbroadcast(ggram, gram.value.shape))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# backward driver


def _topo_order(root: Tensor) -> list:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable differentiable leaf."""
    if root.value.shape != ():
        raise TapeError(f"backward requires a scalar root, got shape {root.value.shape}")
    if not root.requires_grad:
        return
    root.grad = np.ones((), dtype=np.float64)
    for node in reversed(_topo_order(root)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def gradients(root: Tensor, leaves: Iterable[Tensor]) -> list:
    """Backward pass returning one gradient array per leaf.

    Leaves the root does not depend on get zero gradients of matching shape.
    """
    backward(root)
    out = []
    for t in leaves:
        if t.grad is None:
            out.append(np.zeros_like(t.value))
        else:
            out.append(t.grad)
    return out
