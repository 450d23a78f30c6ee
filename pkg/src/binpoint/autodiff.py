"""Minimal dense-tensor reverse-mode autodiff engine.

Everything is float64 and define-by-run: each operation appends a node to an
implicit tape (the graph of ``TapeNode`` records hanging off the output
tensors), and ``backward`` replays that tape once in reverse topological
order.  The op set is exactly what the point-cloud models need: matmul,
broadcast add, elementwise arithmetic, batch norm, hardtanh/relu, column-wise
pooling over point segments, and softmax cross-entropy.

Gradient conventions:
  matmul:   g_a = g_out @ b.T,  g_b = a.T @ g_out
  hardtanh: gradient passes only where the input lies in the open (-1, 1)
  max pool: the first (lowest-index) argmax row receives the gradient
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An operation was called outside its contract (e.g. backward on a non-scalar)."""


class DegenerateBatchError(ValueError):
    """Train-mode batch norm needs at least two rows."""


@dataclass
class TapeNode:
    """One recorded operation: its inputs and the rule mapping g_out to input grads."""

    inputs: tuple["Tensor", ...]
    grad_fn: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


class Tensor:
    """Dense float64 array plus an optional grad and a link into the tape."""

    __slots__ = ("data", "grad", "node", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wants_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad or t.node is not None for t in tensors)


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(data)
    if _wants_grad(*inputs):
        out.node = TapeNode(inputs=inputs, grad_fn=grad_fn)
        out.requires_grad = True
    return out


def _accumulate(t: Tensor, g: Optional[np.ndarray]):
    if g is None or not (t.requires_grad or t.node is not None):
        return
    if g.shape != t.data.shape:
        raise ContractError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def topological_tape(root: Tensor) -> list[Tensor]:
    """Ordered list of tensors reachable from root; inputs precede outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Populate grads of every tensor the scalar loss depends on.

    Each tape node's backward rule runs exactly once.  Deterministic for a
    fixed graph and inputs.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    order = topological_tape(loss)
    loss.grad = np.asarray(1.0, dtype=np.float64)
    for t in reversed(order):
        if t.node is None or t.grad is None:
            continue
        grads = t.node.grad_fn(t.grad)
        for parent, g in zip(t.node.inputs, grads):
            _accumulate(parent, g)


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports broadcasting a length-c row vector over n x c."""
    if a.data.shape != b.data.shape:
        if not (a.data.ndim == 2 and b.data.ndim == 1 and a.data.shape[1] == b.data.shape[0]):
            raise DimensionError(f"add shapes {a.data.shape} + {b.data.shape}")

    def grad_fn(g):
        gb = g if b.data.shape == g.shape else g.sum(axis=0)
        return g, gb

    return _make(a.data + b.data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"sub shapes {a.data.shape} - {b.data.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shapes {a.data.shape} * {b.data.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a plain (non-learnable) constant."""
    return _make(x.data * c, (x,), lambda g: (g * c,))


def scale_by(alpha: Tensor, x: Tensor) -> Tensor:
    """Multiply a tensor by a learnable scalar; g_alpha = sum(g * x)."""
    if alpha.data.ndim != 0:
        raise ContractError("scale_by expects a scalar parameter")
    a = float(alpha.data)

    def grad_fn(g):
        return np.asarray(np.sum(g * x.data)), g * a

    return _make(x.data * a, (alpha, x), grad_fn)


def shift(x: Tensor, c: float) -> Tensor:
    """Add a plain constant; gradient is the identity."""
    return _make(x.data + c, (x,), lambda g: (g,))


def transpose(x: Tensor) -> Tensor:
    return _make(x.data.T, (x,), lambda g: (g.T,))


def sum_all(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.data.shape).copy(),))


def hardtanh(x: Tensor) -> Tensor:
    """Clamp to [-1, 1]; gradient passes only on the open interval (-1, 1)."""
    mask = np.abs(x.data) < 1.0
    return _make(np.clip(x.data, -1.0, 1.0), (x,), lambda g: (g * mask,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# pooling over point segments
# ---------------------------------------------------------------------------

def segment_pool(x: Tensor, segment_size: int, kind: str) -> Tensor:
    """Pool consecutive blocks of ``segment_size`` rows to one row each.

    ``kind`` is "max" or "avg".  Max backward routes the gradient to the
    first argmax row of each block; avg distributes it uniformly.
    """
    n, c = x.data.shape
    if segment_size < 1 or n == 0:
        raise DimensionError("segment_pool needs at least one row per segment")
    if n % segment_size != 0:
        raise DimensionError(f"{n} rows not divisible by segment size {segment_size}")
    blocks = x.data.reshape(n // segment_size, segment_size, c)
    if kind == "max":
        arg = blocks.argmax(axis=1)  # first index wins on ties
        out = np.take_along_axis(blocks, arg[:, None, :], axis=1)[:, 0, :]

        def grad_fn(g):
            gx = np.zeros_like(blocks)
            np.put_along_axis(gx, arg[:, None, :], g[:, None, :], axis=1)
            return (gx.reshape(n, c),)

    elif kind == "avg":
        out = blocks.mean(axis=1)

        def grad_fn(g):
            gx = np.repeat(g / segment_size, segment_size, axis=0)
            return (gx,)

    else:
        raise ContractError(f"unknown pooling kind {kind!r}")
    return _make(out, (x,), grad_fn)


def pool_points(x: Tensor, kind: str) -> Tensor:
    """Column-wise max or mean over all rows of an n x c tensor (result 1 x c)."""
    if x.data.ndim != 2 or x.data.shape[0] == 0:
        raise DimensionError("pool_points needs a non-empty n x c input")
    return segment_pool(x, x.data.shape[0], kind)


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Running statistics plus the fixed constants recorded in checkpoints."""

    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, eps: float = 1e-5, momentum: float = 0.1) -> "BatchNormState":
        return cls(
            running_mean=np.zeros(channels, dtype=np.float64),
            running_var=np.ones(channels, dtype=np.float64),
            eps=eps,
            momentum=momentum,
        )


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str) -> Tensor:
    """Per-channel standardization then affine.

    Train mode normalizes with batch statistics (biased variance) and updates
    the running stats with momentum; eval mode uses the running stats only.
    """
    n, c = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError("batch_norm parameter length must match channels")
    if mode == "train":
        if n < 2:
            raise DegenerateBatchError("train-mode batch norm needs n >= 2 rows")
        mean = x.data.mean(axis=0)
        xc = x.data - mean
        var = np.einsum("ij,ij->j", xc, xc) / n
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = xc
        xhat *= inv_std  # xc is ours; normalize in place
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * var * n / (n - 1)

        def grad_fn(g):
            g_beta = g.sum(axis=0)
            g_gamma = np.einsum("ij,ij->j", g, xhat)
            gh = g * gamma.data
            gx = inv_std * (gh - gh.mean(axis=0)
                            - xhat * (np.einsum("ij,ij->j", gh, xhat) / n))
            return gx, g_gamma, g_beta

    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * inv_std

        def grad_fn(g):
            g_beta = g.sum(axis=0)
            g_gamma = (g * xhat).sum(axis=0)
            return g * gamma.data * inv_std, g_gamma, g_beta

    else:
        raise ContractError(f"unknown batch_norm mode {mode!r}")
    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), grad_fn)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-softmax at the label positions, max-stabilized."""
    z = logits.data
    if z.ndim != 2:
        raise DimensionError("softmax_cross_entropy expects n x k logits")
    n, k = z.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise IndexError(f"label outside [0, {k})")
    zs = z - z.max(axis=1, keepdims=True)
    log_probs = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()

    def grad_fn(g):
        probs = np.exp(log_probs)
        probs[np.arange(n), labels] -= 1.0
        return (probs * (float(g) / n),)

    return _make(np.asarray(loss), (logits,), grad_fn)


# ---------------------------------------------------------------------------
# point-cloud specific ops (per-segment 3x3 transform and its regularizer)
# ---------------------------------------------------------------------------

def input_transform(x: Tensor, zs: Tensor, segment_size: int) -> Tensor:
    """Apply a per-segment 3x3 matrix: rows of segment b map through zs[b].

    ``zs`` is a B x 9 tensor holding row-major 3x3 matrices, one per segment.
    """
    n, c = x.data.shape
    if c != 3 or zs.data.shape != (n // segment_size, 9) or n % segment_size != 0:
        raise DimensionError("input_transform expects n x 3 rows and B x 9 matrices")
    nseg = n // segment_size
    mats = zs.data.reshape(nseg, 3, 3)
    blocks = x.data.reshape(nseg, segment_size, 3)
    out = np.einsum("bij,bjk->bik", blocks, mats).reshape(n, 3)

    def grad_fn(g):
        gb = g.reshape(nseg, segment_size, 3)
        gx = np.einsum("bik,bjk->bij", gb, mats).reshape(n, 3)
        gz = np.einsum("bji,bjk->bik", blocks, gb).reshape(nseg, 9)
        return gx, gz

    return _make(out, (x, zs), grad_fn)


def orthogonality_penalty(zs: Tensor) -> Tensor:
    """Mean over segments of ||I - Z Z^T||_F^2 for row-major 3x3 matrices in B x 9."""
    nseg = zs.data.shape[0]
    if zs.data.ndim != 2 or zs.data.shape[1] != 9:
        raise DimensionError("orthogonality_penalty expects a B x 9 tensor")
    mats = zs.data.reshape(nseg, 3, 3)
    eye = np.eye(3)
    resid = eye[None, :, :] - np.einsum("bij,bkj->bik", mats, mats)
    value = np.asarray((resid ** 2).sum() / nseg)

    def grad_fn(g):
        # d/dZ ||I - Z Z^T||^2 = -4 (I - Z Z^T) Z  (residual is symmetric)
        gz = -4.0 * np.einsum("bij,bjk->bik", resid, mats) * (float(g) / nseg)
        return (gz.reshape(nseg, 9),)

    return _make(value, (zs,), grad_fn)
