"""Dense float tensors with reverse-mode automatic differentiation.

Everything the models need runs through this module: matrix products,
dilated 1-d convolutions with selectable padding, LSTM cell steps,
softmax variants and the padded negative log-likelihood. A fresh graph
is recorded on every forward pass; ``backward`` replays the recorded
ops in reverse topological order and accumulates gradients into the
leaves.

Arrays are float32 by default. Leaves may be created as float64 (the
numeric test oracles do this); ops preserve the dtype they are given.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "GraphError",
    "NonFiniteError",
    "no_grad",
    "parameter",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "conv1d",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "log_softmax",
    "nll_loss",
    "sum_",
    "reshape",
    "concat",
    "narrow",
    "embedding",
    "lstm_step",
    "clip_gradient_norm",
    "PADDING_MODES",
]

PADDING_MODES = ("symmetric", "causal-left", "causal-right")


class ShapeError(ValueError):
    """Operands cannot be combined with the shapes they arrived with."""


class GraphError(RuntimeError):
    """Misuse of the recorded graph (non-scalar root, repeated sweep, ...)."""


class NonFiniteError(FloatingPointError):
    """A value that must be finite is NaN or infinite."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Skip graph recording inside the block. Use for inference loops."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A dense float array plus its slot in the recorded op graph.

    ``grad`` stays None until a backward sweep reaches the tensor.
    Leaves are tensors with no recorded parents; trainable leaves are
    the ones with ``requires_grad`` set.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_swept")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._swept = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], None]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._swept = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def backward(self) -> None:
        Graph(self).backward()

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        flags = []
        if self.requires_grad:
            flags.append("grad")
        if self._parents:
            flags.append(f"parents={len(self._parents)}")
        tail = (", " + ", ".join(flags)) if flags else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tail})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(rng: np.random.Generator, shape: tuple[int, ...],
              fan_in: int | None = None, dtype=np.float32) -> Tensor:
    """Trainable tensor initialised uniformly in +-1/sqrt(fan_in)."""
    if fan_in is None:
        fan_in = shape[-1] if shape else 1
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    data = rng.uniform(-bound, bound, size=shape)
    return Tensor(data, requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# graph bookkeeping


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative DFS: decoder graphs chain hundreds of LSTM steps, which
    # overflows the recursion limit with the naive version.
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
            if id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


class Graph:
    """The set of tensors reachable from a root, in topological order."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _toposort(root)

    def parameters(self) -> list[Tensor]:
        return [n for n in self.nodes if n.requires_grad and n._backward is None]

    def backward(self) -> None:
        backward(self)

    def reset(self) -> None:
        """Clear every gradient in the graph and re-arm the root."""
        for n in self.nodes:
            n.grad = None
        self.root._swept = False


def backward(graph: Graph | Tensor) -> None:
    """Accumulate d(root)/d(tensor) into .grad for the whole graph.

    The root must be a finite scalar. Sweeping the same root twice
    without a reset is an error rather than a silent double-count.
    """
    if isinstance(graph, Tensor):
        graph = Graph(graph)
    root = graph.root
    if root.data.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.data.shape}")
    if not np.isfinite(root.data).all():
        raise NonFiniteError(f"backward root is not finite: {float(root.data)}")
    if root._swept:
        raise GraphError("backward already ran for this root; reset the graph first")
    root._swept = True
    root.accumulate_grad(np.ones_like(root.data))
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _as_tensor_like(x, ref: Tensor) -> Tensor:
    # Bare python numbers adopt the tensor's dtype instead of promoting
    # the whole expression to float64.
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor_like(b, a)
    data = a.data + b.data

    def bw(g):
        a.accumulate_grad(_unbroadcast(g, a.data.shape))
        b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return Tensor._from_op(data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor_like(b, a)
    data = a.data - b.data

    def bw(g):
        a.accumulate_grad(_unbroadcast(g, a.data.shape))
        b.accumulate_grad(-_unbroadcast(g, b.data.shape))

    return Tensor._from_op(data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor_like(b, a)
    data = a.data * b.data

    def bw(g):
        a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * a.data.dtype.type(s)

    def bw(g):
        a.accumulate_grad(g * a.data.dtype.type(s))

    return Tensor._from_op(data, (a,), bw)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())

    return Tensor._from_op(np.asarray(data), (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = a.data.reshape(shape)

    def bw(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    return Tensor._from_op(data, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty tensor list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def bw(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offset, offset + n)
            t.accumulate_grad(g[tuple(index)])
            offset += n

    return Tensor._from_op(data, tensors, bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} "
            f"of shape {a.data.shape}")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        full[index] = g
        a.accumulate_grad(full)

    return Tensor._from_op(data, (a,), bw)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup: (V, E) table gathered at integer ``indices``."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding index out of range for table with {table.data.shape[0]} rows")
    data = table.data[idx]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        table.accumulate_grad(full)

    return Tensor._from_op(data, (table,), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def sigmoid(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        # exp overflow for very negative inputs saturates to the correct 0.
        data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        a.accumulate_grad(g * data * (1.0 - data))

    return Tensor._from_op(data, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bw(g):
        a.accumulate_grad(g * (1.0 - data * data))

    return Tensor._from_op(data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def bw(g):
        a.accumulate_grad(g * (a.data > 0))

    return Tensor._from_op(data, (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Exponential normalisation along ``axis``, max-subtracted for stability."""
    if a.data.size == 0:
        raise ShapeError("softmax of an empty tensor")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        a.accumulate_grad(data * (g - inner))

    return Tensor._from_op(data, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.size == 0:
        raise ShapeError("log_softmax of an empty tensor")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        a.accumulate_grad(g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return Tensor._from_op(data, (a,), bw)


def nll_loss(log_probs: Tensor, targets, pad_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood over non-padding positions.

    ``log_probs`` is (N, V) rows of log-probabilities, ``targets`` a
    length-N integer vector. Positions equal to ``pad_index`` are left
    out of the mean entirely, so appending padded positions leaves the
    value bitwise unchanged.
    """
    targets = np.asarray(targets)
    if log_probs.data.ndim != 2 or targets.ndim != 1:
        raise ShapeError(
            f"nll_loss expects (N, V) log-probs and (N,) targets, got "
            f"{log_probs.data.shape} and {targets.shape}")
    if targets.shape[0] != log_probs.data.shape[0]:
        raise ShapeError(
            f"nll_loss row mismatch: {log_probs.data.shape[0]} log-prob rows "
            f"vs {targets.shape[0]} targets")
    n_classes = log_probs.data.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise ShapeError(
            f"target index out of range for {n_classes} classes: "
            f"min {targets.min()}, max {targets.max()}")
    if pad_index is None:
        rows = np.arange(targets.shape[0])
    else:
        rows = np.nonzero(targets != pad_index)[0]
    if rows.size == 0:
        raise ValueError("no contributing positions: every target is padding")
    picked = log_probs.data[rows, targets[rows]]
    data = np.asarray(-picked.mean(), dtype=log_probs.data.dtype)

    def bw(g):
        full = np.zeros_like(log_probs.data)
        full[rows, targets[rows]] = -g / rows.size
        log_probs.accumulate_grad(full)

    return Tensor._from_op(data, (log_probs,), bw)


# ---------------------------------------------------------------------------
# matrix product and convolution


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimension mismatch: {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        a.accumulate_grad(_unbroadcast(ga, a.data.shape))
        b.accumulate_grad(_unbroadcast(gb, b.data.shape))

    return Tensor._from_op(data, (a, b), bw)


def _conv_offsets(k: int, dilation: int, padding: str) -> tuple[int, list[int]]:
    """Left pad width and, per kernel tap, the start inside the padded array.

    Tap j of a causal-left kernel reads lag j*dilation (tap 0 sits on the
    current position); causal-right mirrors that with leads. Symmetric
    kernels read the window left to right around the centre.
    """
    span = (k - 1) * dilation
    if padding == "causal-left":
        left = span
        starts = [span - j * dilation for j in range(k)]
    elif padding == "causal-right":
        left = 0
        starts = [j * dilation for j in range(k)]
    elif padding == "symmetric":
        left = span // 2
        starts = [j * dilation for j in range(k)]
    else:
        raise ShapeError(f"unknown padding mode {padding!r}, expected one of {PADDING_MODES}")
    return left, starts


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           dilation: int = 1, padding: str = "symmetric") -> Tensor:
    """Dilated 1-d convolution with same-length output.

    ``x`` is (channels, length) or (batch, channels, length); ``w`` is
    (out_channels, in_channels, kernel). Zero padding keeps the output
    the same length as the input for every mode: symmetric splits the
    padding around the window, causal-left pads only on the left (the
    output at t depends on positions <= t), causal-right is its mirror.
    """
    if dilation < 1:
        raise ShapeError(f"dilation must be >= 1, got {dilation}")
    if w.data.ndim != 3:
        raise ShapeError(f"conv1d weight must be (out, in, k), got {w.data.shape}")
    squeeze = x.data.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(f"conv1d input must be (channels, length) or "
                         f"(batch, channels, length), got {x.data.shape}")
    n_out, n_in, k = w.data.shape
    if xd.shape[1] != n_in:
        raise ShapeError(
            f"conv1d channel mismatch: input has {xd.shape[1]} channels, "
            f"weight expects {n_in}")
    length = xd.shape[2]
    left, starts = _conv_offsets(k, dilation, padding)
    span = (k - 1) * dilation
    xp = np.pad(xd, ((0, 0), (0, 0), (left, span - left)))
    out = np.zeros((xd.shape[0], n_out, length),
                   dtype=np.result_type(xd.dtype, w.data.dtype))
    for j, s in enumerate(starts):
        # (out, in) @ (batch, in, length) -> (batch, out, length)
        out += np.matmul(w.data[:, :, j], xp[:, :, s:s + length])
    if bias is not None:
        if bias.data.shape != (n_out,):
            raise ShapeError(
                f"conv1d bias must have shape ({n_out},), got {bias.data.shape}")
        out += bias.data[:, None]

    parents = (x, w) if bias is None else (x, w, bias)

    def bw(g):
        g3 = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for j, s in enumerate(starts):
            seg = xp[:, :, s:s + length]
            gw[:, :, j] = np.einsum("bol,bil->oi", g3, seg)
            gxp[:, :, s:s + length] += np.matmul(w.data[:, :, j].T, g3)
        gx = gxp[:, :, left:left + length]
        x.accumulate_grad(gx[0] if squeeze else gx)
        w.accumulate_grad(gw)
        if bias is not None:
            bias.accumulate_grad(g3.sum(axis=(0, 2)))

    return Tensor._from_op(out[0] if squeeze else out, parents, bw)


# ---------------------------------------------------------------------------
# LSTM cell


def lstm_step(x: Tensor, state: tuple[Tensor, Tensor], w_x: Tensor,
              w_h: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM cell update for a batch of inputs.

    ``x`` is (batch, in), state is (h, c) each (batch, hidden); the
    weights pack the four gates as columns in i, f, g, o order, so
    ``w_x`` is (in, 4*hidden), ``w_h`` (hidden, 4*hidden), ``b``
    (4*hidden,).
    """
    h, c = state
    hidden = h.data.shape[-1]
    if w_x.data.shape[-1] != 4 * hidden or w_h.data.shape[-1] != 4 * hidden:
        raise ShapeError(
            f"lstm_step gate width mismatch: hidden {hidden} needs 4*hidden "
            f"columns, got {w_x.data.shape} and {w_h.data.shape}")
    gates = add(add(matmul(x, w_x), matmul(h, w_h)), b)
    i = sigmoid(narrow(gates, -1, 0, hidden))
    f = sigmoid(narrow(gates, -1, hidden, hidden))
    g = tanh(narrow(gates, -1, 2 * hidden, hidden))
    o = sigmoid(narrow(gates, -1, 3 * hidden, hidden))
    c_next = add(mul(f, c), mul(i, g))
    h_next = mul(o, tanh(c_next))
    return h_next, c_next


def clip_gradient_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale all gradients down so their joint L2 norm is <= max_norm.

    Returns the norm before clipping. Parameters without a gradient
    are skipped.
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if max_norm > 0 and total > max_norm:
        factor = np.float32(max_norm / total)
        for g in grads:
            g *= g.dtype.type(factor)
    return total
