"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Calling
:func:`backward` on a scalar walks the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_node_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an operation is called outside its contract."""


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "id")

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.id = next(_node_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap a forward result, linking it into the graph if any parent needs a gradient."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen or not node.requires_grad:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in node.parents:
            if parent.id not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Populate ``.grad`` for every node reachable from the scalar ``loss``.

    Gradients from a previous call are discarded first.  Tensors listed in
    ``wrt`` that are not reachable from the loss receive a zero gradient.
    Returns the gradient map keyed by node id.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if wrt is not None:
        for t in wrt:
            t.grad = None
    if not loss.requires_grad:
        grads: dict[int, np.ndarray] = {}
    else:
        order = topological_order(loss)
        for node in order:
            node.grad = None
        grads = {loss.id: np.ones_like(loss.data)}
        for node in reversed(order):
            g = grads.get(node.id)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        for node in order:
            node.grad = grads.get(node.id)
    if wrt is not None:
        for t in wrt:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
                grads[t.id] = t.grad
    return grads


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return make_node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    return make_node(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def batch_slice(a: Tensor, lo: int, hi: int) -> Tensor:
    """Rows ``lo:hi`` along the batch axis 0."""
    if not 0 <= lo < hi <= a.shape[0]:
        raise ShapeError(f"batch slice {lo}:{hi} out of range for batch axis 0 of size {a.shape[0]}")

    def back(g):
        full = np.zeros(a.shape)
        full[lo:hi] = g
        return (full,)

    return make_node(a.data[lo:hi].copy(), (a,), back, "batch_slice")


def add_scalars(terms: Sequence[Tensor]) -> Tensor:
    """Sum of 0-d tensors, in order."""
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over axis 1 of a (b, c, h, w) tensor."""
    if x.data.ndim != 4 or x.shape[1] < 2:
        raise ShapeError(f"softmax_channel expects (b, c>=2, h, w), got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_node(p, (x,), back, "softmax_channel")


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix of shape (b, k*k*c, ho*wo); rows ordered (ki, kj, c)."""
    b, c = xp.shape[:2]
    cols = np.empty((b, k, k, c, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
    return cols.reshape(b, k * k * c, ho * wo)


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    o, c, k, _ = w.shape
    return w.transpose(0, 2, 3, 1).reshape(o, k * k * c)


def _padded_flat(b: int, c: int, hp: int, wp: int, k: int):
    """Zero buffer holding a (b, c, hp, wp) image row-major, with k-1 spare slots."""
    buf = np.zeros((b, c, hp * wp + k - 1))
    return buf, buf[:, :, :hp * wp].reshape(b, c, hp, wp)


def _flat_correlate(buf: np.ndarray, hp: int, wp: int, w: np.ndarray):
    """Valid stride-1 correlation of the image stored in ``buf``.

    Each kernel offset is one contiguous slice of the flattened image; the
    last k-1 output columns of every row wrap around and are discarded.
    """
    b, c = buf.shape[:2]
    o, _, k, _ = w.shape
    ho, wo = hp - k + 1, wp - k + 1
    span = ho * wp
    cols = np.empty((b, k, k, c, span))
    for i in range(k):
        for j in range(k):
            off = i * wp + j
            cols[:, i, j] = buf[:, :, off:off + span]
    cols = cols.reshape(b, k * k * c, span)
    out = np.matmul(_kernel_matrix(w), cols).reshape(b, o, ho, wp)
    return out[:, :, :, :wo], cols, wp


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    """Returns (output, patch matrix, row pitch of the patch-matrix columns)."""
    b, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho, wo = _out_extent(h, k, stride, padding), _out_extent(wd, k, stride, padding)
    if k == 1 and padding == 0:
        xs = x[:, :, ::stride, ::stride][:, :, :ho, :wo] if stride > 1 else x
        cols = xs.reshape(b, c, ho * wo)
        return np.matmul(_kernel_matrix(w), cols).reshape(b, o, ho, wo), cols, wo
    if stride == 1:
        hp, wp = h + 2 * padding, wd + 2 * padding
        buf, view = _padded_flat(b, c, hp, wp, k)
        view[:, :, padding:padding + h, padding:padding + wd] = x
        return _flat_correlate(buf, hp, wp, w)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, k, stride, ho, wo)
    return np.matmul(_kernel_matrix(w), cols).reshape(b, o, ho, wo), cols, wo


def _pitched(g: np.ndarray, pitch: int) -> np.ndarray:
    """(b, o, ho, wo) gradient laid out with row pitch ``pitch`` as (b, o, ho*pitch)."""
    b, o, ho, wo = g.shape
    if pitch == wo:
        return g.reshape(b, o, ho * wo)
    gp = np.zeros((b, o, ho, pitch))
    gp[:, :, :, :wo] = g
    return gp.reshape(b, o, ho * pitch)


def _patch_grad(a: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """sum_b a[b] @ cols[b].T for a (b, m, n) and cols (b, r, n)."""
    acc = a[0] @ cols[0].T
    for i in range(1, a.shape[0]):
        acc += a[i] @ cols[i].T
    return acc


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, padding: int, in_hw: tuple) -> np.ndarray:
    """Adjoint of the conv forward with respect to its input."""
    b, o, ho, wo = g.shape
    _, c, k, _ = w.shape
    h, wd = in_hw
    if k == 1 and padding == 0:
        gi = np.matmul(w.reshape(o, c).T, g.reshape(b, o, ho * wo)).reshape(b, c, ho, wo)
        if stride == 1:
            return gi
        out = np.zeros((b, c, h, wd))
        out[:, :, ::stride, ::stride][:, :, :ho, :wo] = gi
        return out
    if padding > k - 1:
        raise ContractError("padding larger than kernel-1 is not supported")
    lead = k - 1 - padding
    hp, wp = h + k - 1, wd + k - 1
    buf, view = _padded_flat(b, o, hp, wp, k)
    view[:, :, lead:lead + (ho - 1) * stride + 1:stride, lead:lead + (wo - 1) * stride + 1:stride] = g
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return np.ascontiguousarray(_flat_correlate(buf, hp, wp, wf)[0])


def _check_conv_args(x: np.ndarray, w: np.ndarray, bias: np.ndarray, in_axis: int, out_axis: int, name: str):
    if x.ndim != 4:
        raise ShapeError(f"{name}: input must be 4-d (b, c, h, w), got {x.shape}")
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ShapeError(f"{name}: kernel must be 4-d with square spatial extent, got {w.shape}")
    if x.shape[1] != w.shape[in_axis]:
        raise ShapeError(f"{name}: input channel axis 1 ({x.shape[1]}) != kernel axis {in_axis} ({w.shape[in_axis]})")
    if bias.shape != (w.shape[out_axis],):
        raise ShapeError(f"{name}: bias shape {bias.shape} != (kernel axis {out_axis} = {w.shape[out_axis]},)")


def conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (b, c_in, h, w) with ``w`` (c_out, c_in, k, k)."""
    _check_conv_args(x.data, w.data, bias.data, 1, 0, "conv2d")
    if stride < 1 or padding < 0:
        raise ContractError("conv2d: stride must be >= 1 and padding >= 0")
    k = w.shape[2]
    h, wd = x.shape[2:]
    if _out_extent(h, k, stride, padding) < 1 or _out_extent(wd, k, stride, padding) < 1:
        raise ShapeError(f"conv2d: spatial axes 2,3 {x.shape[2:]} too small for kernel {k} with padding {padding}")
    out, cols, pitch = _conv_forward(x.data, w.data, stride, padding)
    out = out + bias.data[None, :, None, None]

    def back(g):
        gx = _conv_input_grad(g, w.data, stride, padding, (h, wd)) if x.requires_grad else None
        gw = None
        if w.requires_grad:
            o, c, k, _ = w.shape
            gw = _patch_grad(_pitched(g, pitch), cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return make_node(out, (x, w, bias), back, "conv2d")


def transposed_conv2d(x: Tensor, w: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """Fractionally-strided convolution with output extent ``stride * input``.

    ``w`` has shape (c_in, c_out, k, k).  Without bias this is exactly the
    adjoint of ``conv2d(., w, stride=stride, padding=(k - 1) // 2)`` applied to
    an input of the upsampled size.
    """
    _check_conv_args(x.data, w.data, bias.data, 0, 1, "transposed_conv2d")
    if stride < 1:
        raise ContractError("transposed_conv2d: stride must be >= 1")
    k = w.shape[2]
    padding = (k - 1) // 2
    h, wd = x.shape[2:]
    out_hw = (h * stride, wd * stride)
    if _out_extent(out_hw[0], k, stride, padding) != h or _out_extent(out_hw[1], k, stride, padding) != wd:
        raise ShapeError(f"transposed_conv2d: kernel {k} with stride {stride} cannot map {x.shape[2:]} to {out_hw}")
    out = _conv_input_grad(x.data, w.data, stride, padding, out_hw) + bias.data[None, :, None, None]

    def back(g):
        gx, cols, pitch = _conv_forward(g, w.data, stride, padding)
        gw = None
        if w.requires_grad:
            ci, co, k, _ = w.shape
            gw = _patch_grad(_pitched(x.data, pitch), cols).reshape(ci, k, k, co).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        return gx, gw, gb

    return make_node(out, (x, w, bias), back, "transposed_conv2d")


def maxpool2d(x: Tensor, window: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    """Max pooling; ties go to the first position of the window in row-major order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be 4-d, got {x.shape}")
    b, c, h, wd = x.shape
    ho, wo = _out_extent(h, window, stride, padding), _out_extent(wd, window, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: spatial axes 2,3 {x.shape[2:]} smaller than window {window}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(b, c, ho, wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gp = np.zeros(xp.shape)
        for idx in range(window * window):
            di, dj = divmod(idx, window)
            sel = arg == idx
            if not sel.any():
                continue
            region = gp[:, :, di:di + stride * (ho - 1) + 1:stride, dj:dj + stride * (wo - 1) + 1:stride]
            region += np.where(sel, g, 0.0)
        return (gp[:, :, padding:padding + h, padding:padding + wd],)

    return make_node(out, (x,), back, "maxpool2d")


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def fd_check(fn: Callable[..., Tensor], point, h: float = 1e-3) -> float:
    """Max relative error between backprop and central differences.

    ``point`` is an array or a sequence of arrays; ``fn`` receives one
    tensor per array and must return a scalar tensor.  The relative error
    uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    if h <= 0:
        raise ContractError("fd_check: step must be positive")
    arrays = [np.array(point, dtype=np.float64)] if isinstance(point, np.ndarray) or np.isscalar(point) \
        else [np.array(p, dtype=np.float64) for p in point]
    inputs = [parameter(a) for a in arrays]
    backward(fn(*inputs), wrt=inputs)
    analytic = [t.grad.copy() for t in inputs]

    worst = 0.0
    with no_grad():
        for which, arr in enumerate(arrays):
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                f_plus = fn(*[Tensor(a) for a in arrays]).item()
                arr[idx] = orig - h
                f_minus = fn(*[Tensor(a) for a in arrays]).item()
                arr[idx] = orig
                num[idx] = (f_plus - f_minus) / (2 * h)
            denom = np.maximum(np.maximum(np.abs(analytic[which]), np.abs(num)), 1e-8)
            err = np.abs(analytic[which] - num) / denom
            if err.size:
                worst = max(worst, float(err.max()))
    return worst
