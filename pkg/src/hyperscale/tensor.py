"""Dense tensors with define-by-run reverse-mode differentiation.

Only the handful of operations needed by the segmentation network and the
hypernetwork are provided. Every op records a closure that maps the output
gradient to input gradients; ``Tensor.backward`` replays them in reverse
topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "NumericalError",
    "conv2d",
    "linear",
    "leaky_relu",
    "cross_entropy",
    "concat_channels",
    "reshape",
    "slice_flat",
    "count_flops",
]


class NumericalError(ArithmeticError):
    """Raised when a computation produces NaN or Inf."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """N-dimensional array plus the bookkeeping for autodiff.

    ``data`` keeps whatever float dtype it was created with; float32 is the
    default, float64 is used for finite-difference checks.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # Small arithmetic surface, mostly used by tests and the loss plumbing.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, _as_tensor(1.0 / other, self.dtype))

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that is not part of a recorded graph")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        owned: set[int] = set()  # buffers created here, safe to accumulate into in place
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if isinstance(pg, _SliceGrad):
                    buf = grads.get(key)
                    if buf is None or key not in owned:
                        buf = np.zeros(parent.data.size, dtype=pg.values.dtype) if buf is None else buf.reshape(-1).copy()
                        owned.add(key)
                    buf = buf.reshape(-1)
                    buf[pg.start : pg.stop] += pg.values.reshape(-1)
                    grads[key] = buf.reshape(parent.shape)
                elif key in grads:
                    grads[key] = grads[key] + pg
                    owned.add(key)
                else:
                    grads[key] = pg
            # intermediates are not kept once their gradient has been consumed
            node._backward = _consumed
            node._parents = ()


class _SliceGrad:
    """Gradient that is nonzero only on ``flat[start:stop]`` of its parent."""

    __slots__ = ("start", "stop", "values")

    def __init__(self, start: int, stop: int, values: np.ndarray):
        self.start, self.stop, self.values = start, stop, values


def _consumed(g):
    raise RuntimeError("graph has already been differentiated; rerun the forward pass")


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap ``data`` as the output of an op; records the graph edge only if needed."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


# ---------------------------------------------------------------------------
# FLOP instrumentation

_flop_counter: Optional[list[int]] = None


@contextlib.contextmanager
def count_flops() -> Iterator[list[int]]:
    """Count FLOPs executed by conv2d and bilinear resizes inside the block.

    Yields a one-element list whose entry is updated in place. Convention:
    two FLOPs per multiply-accumulate, eight per bilinear output element,
    biases and activations free.
    """
    global _flop_counter
    previous = _flop_counter
    _flop_counter = [0]
    try:
        yield _flop_counter
    finally:
        _flop_counter = previous


def record_flops(n: int) -> None:
    if _flop_counter is not None:
        _flop_counter[0] += int(n)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.data.size != 1:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        gb = g if b.shape == g.shape else np.asarray(g.sum(), dtype=g.dtype).reshape(b.shape)
        return g, gb

    return make_result(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.data.size != 1:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def backward(g):
        ga = g * b.data
        gb = g * a.data
        if b.shape != g.shape:
            gb = np.asarray(gb.sum(), dtype=g.dtype).reshape(b.shape)
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * a.data ** (exponent - 1)).astype(a.dtype, copy=False),

    return make_result(a.data**exponent, (a,), backward, "pow")


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g):
        return np.broadcast_to(g, a.shape).astype(a.dtype),

    return make_result(np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype), (a,), backward, "sum")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        return g.reshape(a.shape),

    return make_result(a.data.reshape(shape), (a,), backward, "reshape")


def slice_flat(a: Tensor, start: int, stop: int, shape: Sequence[int]) -> Tensor:
    """View ``a.flat[start:stop]`` as ``shape``; used to carve weights out of a flat vector."""
    flat = a.data.reshape(-1)
    if stop > flat.size or int(np.prod(shape)) != stop - start:
        raise ValueError(f"slice [{start}:{stop}] does not fit shape {tuple(shape)}")

    def backward(g):
        return _SliceGrad(start, stop, g),

    return make_result(flat[start:stop].reshape(shape), (a,), backward, "slice")


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    if slope < 0:
        raise ValueError("leaky_relu slope must be non-negative")
    negative = x.data < 0
    out = x.data.copy()
    out[negative] *= x.dtype.type(slope)

    def backward(g):
        g = g.copy()
        g[negative] *= g.dtype.type(slope)
        return g,

    return make_result(out, (x,), backward, "leaky_relu")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects 4-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return make_result(np.concatenate([a.data, b.data], axis=1), (a, b), backward, "concat")


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ weight.T + bias for x of shape [B, N] and weight [M, N]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError("linear expects a 2-D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input has {x.shape[1]} features, weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} outputs")

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            # a single-row input makes the weight gradient an outer product
            gw = g.T * x.data if g.shape[0] == 1 else g.T @ x.data
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return make_result(x.data @ weight.data.T + bias.data, (x, weight, bias), backward, "linear")


# ---------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B, C, H, W] -> [B, C*k*k, H*W] patches under same zero padding."""
    b, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    return windows.transpose(0, 1, 4, 5, 2, 3).reshape(b, c * k * k, h * w)


def _conv_same(x: np.ndarray, kernel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, _, h, w = x.shape
    cout, cin, k, _ = kernel.shape
    if k == 1:
        cols = x.reshape(b, cin, h * w)
    else:
        cols = _im2col(x, k)
    out = np.matmul(kernel.reshape(cout, -1), cols)
    return out.reshape(b, cout, h, w), cols


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution with (k-1)/2 zero padding, so spatial size is preserved."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects input [B,C,H,W] and kernel [Cout,Cin,k,k]")
    cout, cin, k, k2 = kernel.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d needs a square odd kernel, got {k}x{k2}")
    if x.shape[1] != cin:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
    b, _, h, w = x.shape
    out, cols = _conv_same(x.data, kernel.data)
    out += bias.data.reshape(1, cout, 1, 1)
    record_flops(2 * k * k * cin * cout * h * w * b)

    def backward(g):
        gx = gk = gb = None
        if x.requires_grad:
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx, _ = _conv_same(g, np.ascontiguousarray(flipped))
        if kernel.requires_grad:
            g2 = g.reshape(b, cout, h * w)
            gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    return make_result(out, (x, kernel, bias), backward, "conv2d")


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.data.ndim != 4:
        raise ValueError("cross_entropy expects logits [B,C,H,W]")
    b, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}); got range [{labels.min()}, {labels.max()}]")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = shifted - np.log(denom)
    idx = labels[:, None, :, :].astype(np.intp)
    picked = np.take_along_axis(log_probs, idx, axis=1)
    n = b * h * w
    loss = -picked.sum(dtype=np.float64) / n
    if not np.isfinite(loss):
        raise NumericalError("cross-entropy produced a non-finite value")

    def backward(g):
        grad = exp / denom
        np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1, axis=1)
        return grad * (np.asarray(g, dtype=z.dtype) / n),

    return make_result(np.asarray(loss, dtype=z.dtype), (logits,), backward, "cross_entropy")
