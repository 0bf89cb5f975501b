"""Dense float64 tensors with reverse-mode automatic differentiation.

Deliberately small: only the operations needed to express the classifiers
and losses in this project. Values are 64-bit throughout so that bound and
proximal diagnostics can be checked at tight tolerances. The graph is
linearized into a fresh tape on every backward call; nothing persists
between steps.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NumericError, ShapeError

_GRAD_MODE = [True]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (frozen-target forwards)."""
    _GRAD_MODE.append(False)
    try:
        yield
    finally:
        _GRAD_MODE.pop()


def grad_enabled() -> bool:
    return _GRAD_MODE[-1]


class Tensor:
    """N-dimensional float64 array, optionally participating in a graph.

    Leaf tensors created with ``requires_grad=True`` own a zero-initialized
    ``grad`` accumulator. Interior nodes carry parent handles and one local
    gradient closure per parent; they are created through ``_node`` by the
    operations below.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "grad_fns", "tape_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.parents = ()
        self.grad_fns = ()
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        """Same values, no graph participation."""
        return Tensor(self.data.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def require_finite(self, context=""):
        if not self.is_finite():
            where = f" in {context}" if context else ""
            raise NumericError(f"non-finite values{where}")
        return self

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Graph nodes in topological order; each parent precedes its children."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order, seen, stack = [], set(), [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        for i, node in enumerate(order):
            node.tape_id = i
        return cls(order)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data, parent_specs) -> Tensor:
    """Create an op output. parent_specs is a list of (tensor, grad_fn)."""
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad or p.parents for p, _ in parent_specs):
        out.parents = tuple(p for p, _ in parent_specs)
        out.grad_fns = tuple(fn for _, fn in parent_specs)
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's grad slot.

    Repeated calls without zero_grad add up. Leaves that do not appear in
    the graph keep their existing (zero) gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        out_grad = grads.pop(id(node), None)
        if out_grad is None:
            continue
        if node.requires_grad:
            node.grad = node.grad + out_grad if node.grad is not None else out_grad.copy()
        for parent, fn in zip(node.parents, node.grad_fns):
            contribution = fn(out_grad)
            prev = grads.get(id(parent))
            grads[id(parent)] = contribution if prev is None else prev + contribution


# ---------------------------------------------------------------------------
# elementwise / linear ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.data.shape} with {b.data.shape}")
    return _node(data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.data.shape} with {b.data.shape}")
    return _node(data, [
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(-g, b.data.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.data.shape} with {b.data.shape}")
    return _node(data, [
        (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
    ])


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    return _node(a.data @ b.data, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ])


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0
    return _node(np.where(mask, x.data, 0.0), [(x, lambda g: g * mask)])


def log(x) -> Tensor:
    x = _as_tensor(x)
    return _node(np.log(x.data), [(x, lambda g: g / x.data)])


def exp(x) -> Tensor:
    x = _as_tensor(x)
    data = np.exp(x.data)
    return _node(data, [(x, lambda g: g * data)])


def clamp(x, lo, hi) -> Tensor:
    """Clip values to [lo, hi]; gradient is zero outside the open interval."""
    x = _as_tensor(x)
    data = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)
    return _node(data, [(x, lambda g: g * inside)])


def softmax(x) -> Tensor:
    """Row-wise softmax over the last axis. Output rows sum to 1."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return p * (g - dot)

    return _node(p, [(x, grad_fn)])


# ---------------------------------------------------------------------------
# shape / reduction ops

def flatten(x) -> Tensor:
    """Collapse all axes after the first (batch) axis."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"flatten needs a batch dimension, got shape {x.data.shape}")
    shape = x.data.shape
    return _node(x.data.reshape(shape[0], -1), [(x, lambda g: g.reshape(shape))])


def mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    return _node(np.asarray(x.data.mean()), [(x, lambda g: np.full_like(x.data, g / n))])


def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)
    return _node(np.asarray(x.data.sum()), [(x, lambda g: np.full_like(x.data, g))])


def weighted_sum(values, weights) -> Tensor:
    """sum_i w_i * v_i with constant weights; (B,) tensor to a scalar."""
    values = _as_tensor(values)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != values.data.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs values {values.data.shape}")
    return _node(np.asarray(float(values.data @ w)), [(values, lambda g: g * w)])


# ---------------------------------------------------------------------------
# convolution (stride 1, zero padding, square kernel)

def _conv_geometry(c_in, h, w, k, padding):
    h_out = h + 2 * padding - k + 1
    w_out = w + 2 * padding - k + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(
            f"conv2d: kernel {k}x{k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    return h_out, w_out


def _im2col_indices(c_in, h, w, k, padding):
    h_out, w_out = _conv_geometry(c_in, h, w, k, padding)
    rows0 = np.repeat(np.arange(k), k)
    rows0 = np.tile(rows0, c_in)
    cols0 = np.tile(np.arange(k), k * c_in)
    rows1 = np.repeat(np.arange(h_out), w_out)
    cols1 = np.tile(np.arange(w_out), h_out)
    rows = rows0[:, None] + rows1[None, :]
    cols = cols0[:, None] + cols1[None, :]
    chan = np.repeat(np.arange(c_in), k * k)[:, None]
    return chan, rows, cols, h_out, w_out


def conv2d(x, kernel, padding=0) -> Tensor:
    """2-D correlation of a (B, C_in, H, W) batch with a (C_out, C_in, k, k) kernel.

    Stride is fixed at 1 and padding is zero-fill; kernels must be square.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d: need (B,C,H,W) input and (Co,Ci,k,k) kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    b, c_in, h, w = x.data.shape
    c_out, kc_in, k1, k2 = kernel.data.shape
    if kc_in != c_in:
        raise ShapeError(f"conv2d: input channels {c_in} vs kernel channels {kc_in}")
    if k1 != k2:
        raise ShapeError(f"conv2d: kernel must be square, got {k1}x{k2}")
    chan, rows, cols, h_out, w_out = _im2col_indices(c_in, h, w, k1, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    patches = xp[:, chan, rows, cols]                      # (B, Ci*k*k, P)
    kmat = kernel.data.reshape(c_out, -1)                  # (Co, Ci*k*k)
    out = np.matmul(kmat, patches).reshape(b, c_out, h_out, w_out)

    def grad_x(g):
        g2 = g.reshape(b, c_out, -1)
        dpatches = np.matmul(kmat.T, g2)                   # (B, Ci*k*k, P)
        dxp = np.zeros_like(xp)
        np.add.at(dxp, (np.arange(b)[:, None, None], chan, rows, cols), dpatches)
        if padding:
            return dxp[:, :, padding:-padding, padding:-padding]
        return dxp

    def grad_k(g):
        g2 = g.reshape(b, c_out, -1)
        dk = np.matmul(g2, patches.transpose(0, 2, 1)).sum(axis=0)
        return dk.reshape(kernel.data.shape)

    return _node(out, [(x, grad_x), (kernel, grad_k)])
