"""Dense tensors with a reverse-mode differentiation tape.

Every differentiable operation applied to a tensor that requires gradients
appends one :class:`Node` to the active :class:`Tape`.  :func:`backward`
walks that tape in strict reverse append order, summing gradient
contributions from all consumers of each value.

Layout conventions: images are ``B x C x H x W``; convolution kernels are
``k x k x C_in x C_out`` and use cross-correlation.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_local = threading.local()


class NumericError(FloatingPointError):
    """Raised when an operation meets or produces non-finite values."""


class DimensionError(ValueError):
    """Raised on incompatible tensor shapes."""


@dataclass
class Node:
    out: "Tensor"
    parents: tuple
    backward: Callable[[np.ndarray], tuple]
    op: str


@dataclass
class Tape:
    """Append-only record of operations; append order is a topological order."""

    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.out._node = None
            node.out._tape = None
        self.nodes.clear()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = [Tape()]
        _local.grad_enabled = True
    return _local.stack


def current_tape() -> Tape:
    return _tape_stack()[-1]


def grad_enabled() -> bool:
    _tape_stack()
    return _local.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block."""
    _tape_stack()
    prev = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    """A dense array that may participate in a differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._node = None
        self._tape = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(out_data, dtype=out_data.dtype)
    if not grad_enabled() or not any(p.requires_grad for p in parents):
        return out
    tape = current_tape()
    for p in parents:
        if p._tape is not None and p._tape is not tape:
            raise RuntimeError(f"{op}: input recorded on a different tape")
    out.requires_grad = True
    out._tape = tape
    out._node = len(tape.nodes)
    tape.nodes.append(Node(out, tuple(parents), backward, op))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)), "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def square(x: Tensor) -> Tensor:
    return _record(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


# -- linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions must match exactly."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _record(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any number of leading axes)."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(*lead, w.shape[1])

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, backward, "linear")


# -- shape manipulation --------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(np.array(x.data[idx]), (x,), backward, "getitem")


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    sl = [slice(None)] * x.ndim
    sl[axis] = indices
    return getitem(x, tuple(sl))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- reductions ----------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _record(np.asarray(out), (x,), backward, "mean")


# -- probabilistic heads -------------------------------------------------------

def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over rows.

    ``logits`` may be a single vector (one sample) or a ``B x n`` matrix.
    """
    labels = np.atleast_1d(np.asarray(labels, dtype=np.intp))
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    if logits.shape[0] != labels.shape[0]:
        raise DimensionError("cross_entropy: batch size mismatch")
    logp = log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(labels.shape[0]), labels))
    return mul(mean(picked), -1.0)


# -- normalization -------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record(out, (x, gamma, beta), backward, "layer_norm")


@dataclass
class BatchStats:
    mean: Tensor
    var: Tensor


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, mode: str = "train",
              running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
              momentum: float = 0.1, eps: float = 1e-5, stats: BatchStats | None = None):
    """Per-channel batch normalization of a ``B x C x H x W`` tensor.

    Modes:

    * ``"train"``: normalize with batch statistics, update the running
      buffers in place (when given); returns ``(out, BatchStats)``.
    * ``"eval"``: normalize with ``running_mean``/``running_var``.
    * ``"stats"``: normalize with externally supplied ``stats`` (tensors,
      differentiable), e.g. statistics of an episode's support batch.
    """
    if mode == "train":
        if x.shape[0] < 2:
            raise NumericError("batchnorm: batch size 1 gives degenerate statistics in train mode")
        mu = mean(x, axis=(0, 2, 3))
        var = _channel_var(x, mu)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.data
            running_var *= 1.0 - momentum
            running_var += momentum * var.data
        return _bn_apply(x, mu, var, gamma, beta, eps), BatchStats(mu, var)
    if mode == "eval":
        mu = Tensor(running_mean, dtype=x.dtype)
        var = Tensor(running_var, dtype=x.dtype)
        return _bn_apply(x, mu, var, gamma, beta, eps), None
    if mode == "stats":
        return _bn_apply(x, stats.mean, stats.var, gamma, beta, eps), stats
    raise ValueError(f"unknown batchnorm mode {mode!r}")


def _channel_var(x: Tensor, mu: Tensor) -> Tensor:
    """Biased per-channel variance of ``B x C x H x W`` around ``mu``."""
    xc = x.data - mu.data.reshape(1, -1, 1, 1)
    count = x.shape[0] * x.shape[2] * x.shape[3]

    def backward(g):
        gx = (2.0 / count) * xc * g.reshape(1, -1, 1, 1)
        return gx, -(2.0 / count) * xc.sum(axis=(0, 2, 3)) * g

    return _record((xc * xc).mean(axis=(0, 2, 3)), (x, mu), backward, "channel_var")


def _bn_apply(x, mu, var, gamma, beta, eps):
    """``(x - mu) / sqrt(var + eps) * gamma + beta`` with mu/var as independent inputs."""
    shape = (1, -1, 1, 1)
    inv = 1.0 / np.sqrt(var.data + eps)
    xc = x.data - mu.data.reshape(shape)
    xhat = xc * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        axes = (0, 2, 3)
        gg = g * gamma.data.reshape(shape)
        gx = gg * inv.reshape(shape)
        gmu = -gx.sum(axis=axes)
        gvar = -0.5 * (gg * xc).sum(axis=axes) * inv ** 3
        return gx, gmu, gvar, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _record(out, (x, mu, var, gamma, beta), backward, "batchnorm")


# -- convolution and pooling ---------------------------------------------------

def _pad_amount(k: int, padding: str) -> int:
    if padding == "SAME":
        if k % 2 == 0:
            raise DimensionError("SAME padding requires an odd kernel size")
        return k // 2
    if padding == "VALID":
        return 0
    raise ValueError(f"unknown padding {padding!r}")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "SAME") -> Tensor:
    """Cross-correlation of ``B x C_in x H x W`` with a ``k x k x C_in x C_out`` kernel.

    With SAME padding the output extent is ``ceil(H / stride)``; VALID gives
    ``(H - k) // stride + 1``.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects a 4-d input and a 4-d kernel")
    k, k2, cin, cout = w.shape
    if k != k2:
        raise DimensionError("conv2d expects square kernels")
    if x.shape[1] != cin:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, kernel expects {cin}")
    B, _, H, W = x.shape
    p = _pad_amount(k, padding)
    if padding == "SAME":
        Ho, Wo = -(-H // stride), -(-W // stride)
        # extra trailing pad so that every SAME output position has a full window
        ph = max((Ho - 1) * stride + k - H - p, p)
        pw = max((Wo - 1) * stride + k - W - p, p)
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, ph), (p, pw)))
    else:
        Ho, Wo = (H - k) // stride + 1, (W - k) // stride + 1
        if Ho < 1 or Wo < 1:
            raise DimensionError("conv2d: kernel larger than input")
        xp = x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1: stride, : (Wo - 1) * stride + 1: stride]
    # columns ordered (i, j, c) to match the kernel layout k x k x C_in
    cols = win.transpose(0, 2, 3, 4, 5, 1).reshape(B * Ho * Wo, k * k * cin)
    wmat = w.data.reshape(k * k * cin, cout)
    out2 = cols @ wmat
    if bias is not None:
        out2 += bias.data
    out = out2.reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(B, Ho, Wo, k, k, cin).transpose(0, 5, 1, 2, 3, 4)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i: i + (Ho - 1) * stride + 1: stride,
                        j: j + (Wo - 1) * stride + 1: stride] += gcols[..., i, j]
            gx = gxp[:, :, p: p + H, p: p + W] if padding == "SAME" else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if bias is None else (x, w, bias)
    return _record(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max over ``window x window`` patches (VALID); ties route to the first index."""
    B, C, H, W = x.shape
    if window > H or window > W:
        raise DimensionError("maxpool2d: window larger than input")
    Ho, Wo = (H - window) // stride + 1, (W - window) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1: stride, : (Wo - 1) * stride + 1: stride]
    flat = win.reshape(B, C, Ho, Wo, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, window)
        rows = np.arange(Ho)[None, None, :, None] * stride + di
        cols = np.arange(Wo)[None, None, None, :] * stride + dj
        bi = np.arange(B)[:, None, None, None]
        ci = np.arange(C)[None, :, None, None]
        np.add.at(gx, (bi, ci, rows, cols), g)
        return (gx,)

    return _record(out, (x,), backward, "maxpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    """Spatial mean of ``B x C x H x W`` -> ``B x C``."""
    return mean(x, axis=(2, 3))


# -- backward ------------------------------------------------------------------

def backward(loss: Tensor, retain: bool = False) -> dict:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a mapping from each leaf tensor with ``requires_grad`` to its
    gradient; the same gradient is accumulated into ``leaf.grad``.  The tape
    is reset afterwards unless ``retain`` is set.
    """
    if loss.size != 1:
        raise DimensionError("backward requires a scalar root")
    if not loss.requires_grad:
        return {}
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss is not recorded on a tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict = {}
    leaves: dict = {}
    for node in reversed(tape.nodes[: loss._node + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if parent._node is None:
                leaves[key] = parent
                if key in leaf_grads:
                    leaf_grads[key] = leaf_grads[key] + pg
                else:
                    leaf_grads[key] = pg
            elif key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result = {}
    for key, leaf in leaves.items():
        g = np.asarray(leaf_grads[key], dtype=leaf.dtype).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    if not retain:
        tape.reset()
    return result


# -- serialization -------------------------------------------------------------

MAGIC_TENSOR = b"HGT1"
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def tensor_to_bytes(t) -> bytes:
    """``HGT1`` blob: magic, dtype byte (0=f64, 1=f32), u32 rank, u64 extents, raw LE data."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    arr = np.asarray(arr, dtype=arr.dtype.newbyteorder("<"), order="C")  # keeps rank 0
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    head = MAGIC_TENSOR + struct.pack("<BI", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one blob starting at ``offset``; returns the tensor and the end offset."""
    if buf[offset: offset + 4] != MAGIC_TENSOR:
        raise ValueError("not an HGT1 tensor blob")
    code, rank = struct.unpack_from("<BI", buf, offset + 4)
    pos = offset + 9
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    nbytes = count * dtype.itemsize
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
    return Tensor(arr, dtype=arr.dtype), pos + nbytes
