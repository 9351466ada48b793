"""Dense NHWC tensors with tape-based reverse-mode differentiation.

Only the handful of ops the embedding network needs are provided.  Every op
is a pure function of its inputs; when a :class:`Tape` is active and any input
requires a gradient, the op appends a record holding a vector-Jacobian product
closure over whatever forward values backward needs.

Arrays are float32.  Float64 arrays are accepted as well so the gradient
checker can run the same code in double precision.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "conv2d",
    "maxpool2d",
    "relu",
    "dense",
    "dropout",
    "flatten",
    "l2_normalize",
    "square",
    "tsum",
    "mean",
    "weighted_sum",
]

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class Tensor:
    """An n-dimensional float array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered log of differentiable ops executed while the tape is active.

    Use as a context manager; ops run inside the block are recorded and
    :meth:`backward` replays them in reverse order.  A tape belongs to the
    thread that entered it.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], vjp) -> None:
        out.requires_grad = True
        out.is_leaf = False
        self.records.append(_Record(out, tuple(inputs), vjp, op))

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _track(op: str, out: Tensor, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, vjp)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient.

    Leaf gradients are assigned, not accumulated across calls.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.is_leaf:
                leaves[key] = inp
    for key, leaf in leaves.items():
        leaf.grad = grads.pop(key)
    if loss.is_leaf and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# convolution


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # n,h,w,c,k,k
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * c)


def conv2d(x, kernels, bias=None) -> Tensor:
    """Stride-1 "same" convolution.

    ``x`` is ``[N, H, W, Cin]``, ``kernels`` is ``[k, k, Cin, Cout]`` with odd
    ``k``, and the optional ``bias`` is ``[Cout]``.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects input [N,H,W,C] and kernels [k,k,Cin,Cout], "
            f"got {x.shape} and {kernels.shape}")
    k, k2, cin, cout = kernels.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d needs a square odd kernel, got {k}x{k2}")
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d input has {c} channels but kernels expect {cin}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias must be ({cout},), got {bias.shape}")

    cols = _im2col(x.data, k)
    kmat = kernels.data.reshape(k * k * cin, cout)
    out = cols @ kmat
    if bias is not None:
        out += bias.data
    result = Tensor(out.reshape(n, h, w, cout))

    inputs = (x, kernels) if bias is None else (x, kernels, bias)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        dk = (cols.T @ g2).reshape(kernels.shape)
        dx = None
        if x.requires_grad:
            # transposed convolution: correlate with the flipped, channel-swapped kernel
            flipped = kernels.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
            dx = (_im2col(g, k) @ flipped).reshape(x.shape)
        if bias is None:
            return dx, dk
        return dx, dk, g2.sum(axis=0)

    return _track("conv2d", result, inputs, vjp)


# --------------------------------------------------------------------------
# pooling / activations


def maxpool2d(x, window: int = 2, stride: int = 2) -> Tensor:
    """2x2/stride-2 max pooling.  Odd spatial sizes are padded with -inf.

    Backward routes each gradient to the first maximal element of its window
    in row-major scan order.
    """
    if window != 2 or stride != 2:
        raise ValueError("only window=2, stride=2 is supported")
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects [N,H,W,C], got {x.shape}")
    n, h, w, c = x.shape
    data = x.data
    if h % 2 or w % 2:
        data = np.pad(data, ((0, 0), (0, h % 2), (0, w % 2), (0, 0)),
                      constant_values=-np.inf)
    a = data[:, 0::2, 0::2]
    b = data[:, 0::2, 1::2]
    cc = data[:, 1::2, 0::2]
    d = data[:, 1::2, 1::2]
    out = np.maximum(np.maximum(a, b), np.maximum(cc, d))
    result = Tensor(out)

    def vjp(g):
        take_a = a == out
        take_b = (b == out) & ~take_a
        taken = take_a | take_b
        take_c = (cc == out) & ~taken
        take_d = ~(taken | take_c)
        dx = np.zeros(data.shape, dtype=g.dtype)
        dx[:, 0::2, 0::2] = g * take_a
        dx[:, 0::2, 1::2] = g * take_b
        dx[:, 1::2, 0::2] = g * take_c
        dx[:, 1::2, 1::2] = g * take_d
        return (dx[:, :h, :w],)

    return _track("maxpool2d", result, (x,), vjp)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    result = Tensor(np.maximum(x.data, 0).astype(x.dtype, copy=False))  # keeps NaN visible
    return _track("relu", result, (x,), lambda g: (g * mask,))


def dense(x, weights, bias) -> Tensor:
    """Affine map ``x @ weights + bias`` for ``x`` of shape ``[N, Din]``."""
    x, weights, bias = _as_tensor(x), _as_tensor(weights), _as_tensor(bias)
    if x.data.ndim != 2 or weights.data.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense cannot apply weights {weights.shape} to input {x.shape}")
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias must be ({weights.shape[1]},), got {bias.shape}")
    result = Tensor(x.data @ weights.data + bias.data)

    def vjp(g):
        dx = g @ weights.data.T if x.requires_grad else None
        return dx, x.data.T @ g, g.sum(axis=0)

    return _track("dense", result, (x, weights, bias), vjp)


def dropout(x, keep_prob: float = 0.8, mode: str = "train",
            rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; the identity in ``infer`` mode or when ``keep_prob == 1``."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = _as_tensor(x)
    if mode == "infer" or keep_prob == 1.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a seeded generator")
    scale = np.asarray(1.0 / keep_prob, dtype=x.dtype)
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) * scale
    result = Tensor(x.data * mask)
    return _track("dropout", result, (x,), lambda g: (g * mask,))


def flatten(x) -> Tensor:
    """Collapse all but the leading axis."""
    x = _as_tensor(x)
    shape = x.shape
    result = Tensor(x.data.reshape(shape[0], -1))
    return _track("flatten", result, (x,), lambda g: (g.reshape(shape),))


def l2_normalize(x, eps: float = 1e-12) -> Tensor:
    """Scale each row of ``[N, D]`` to unit Euclidean norm."""
    x = _as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=1, keepdims=True))
    norm = np.maximum(norm, eps).astype(x.dtype, copy=False)
    y = x.data / norm
    result = Tensor(y)

    def vjp(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norm,)

    return _track("l2_normalize", result, (x,), vjp)


def square(x) -> Tensor:
    x = _as_tensor(x)
    result = Tensor(x.data * x.data)
    return _track("square", result, (x,), lambda g: (2 * g * x.data,))


def tsum(x) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    x = _as_tensor(x)
    result = Tensor(np.sum(x.data, dtype=x.dtype))
    return _track("sum", result, (x,),
                  lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),))


def mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    result = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))
    return _track("mean", result, (x,),
                  lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def weighted_sum(x, weights) -> Tensor:
    """``sum(x * weights)`` for a constant ``weights`` array of the same shape."""
    x = _as_tensor(x)
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ShapeError(f"weights {w.shape} do not match input {x.shape}")
    result = Tensor(np.sum(x.data * w, dtype=x.dtype))
    return _track("weighted_sum", result, (x,), lambda g: (g * w,))
