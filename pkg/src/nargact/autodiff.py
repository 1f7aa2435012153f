"""Small reverse-mode autodiff engine on top of numpy.

Every differentiable op records a node carrying a monotonically increasing op
id. ``backward`` collects the nodes reachable from the loss and replays their
vector-Jacobian products in exact reverse recording order. All arrays are
float64.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_op_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when op inputs have incompatible dimensions."""


class NumericError(ArithmeticError):
    """Raised when an op produces NaN or Inf from finite inputs."""


class ContractError(ValueError):
    """Raised when a caller violates an API precondition."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    __slots__ = ("op_id", "op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op_id = next(_op_ids)
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """Dense float64 array that can take part in a differentiation graph."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{op}: non-finite value in forward output")
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.data)
            return
        raise ContractError("backward called on a tensor with no recorded graph")

    nodes: dict[int, Node] = {}
    owners: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or node.op_id in nodes:
            continue
        nodes[node.op_id] = node
        owners[node.op_id] = t
        stack.extend(node.inputs)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op_id in sorted(nodes, reverse=True):
        node = nodes[op_id]
        out = owners[op_id]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
            else:
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", out, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: expected (m,k)@(k,n), got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", out, (a, b), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def vjp(g):
        return (g * mask,)

    return _record("relu", out, (x,), vjp)


def tsum(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.asarray(x.data.sum()), (x,), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from exc

    def vjp(g):
        return (g.reshape(x.shape),)

    return _record("reshape", out, (x,), vjp)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for {x.ndim}-d tensor")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _record("transpose", out, (x,), vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``[start, stop)`` along axis 1."""
    if x.ndim < 2 or not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"slice_channels: [{start}, {stop}) out of range for shape {x.shape}")
    out = x.data[:, start:stop].copy()

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _record("slice_channels", out, (x,), vjp)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat_channels: empty input list")
    ref = xs[0].shape
    for t in xs:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in xs])

    def vjp(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record("concat_channels", out, xs, vjp)


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    col = np.empty((n, c, kh, kw, oh, ow), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    col = col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)
    return col, oh, ow


def _col2im(col: np.ndarray, shape, kh: int, kw: int, stride: int, pad: int, oh: int, ow: int):
    n, c, h, w = shape
    col = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += col[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


def conv2d(x: Tensor, k: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D cross-correlation. ``x`` is (N, C, H, W); ``k`` is (F, C, kh, kw)."""
    if x.ndim != 4 or k.ndim != 4 or x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {k.shape}")
    if bias is not None and bias.shape != (k.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({k.shape[0]},)")
    f, c, kh, kw = k.shape
    n = x.shape[0]
    col, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    kmat = k.data.reshape(f, -1)
    out = col @ kmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gk = (g2.T @ col).reshape(k.shape) if k.requires_grad else None
        gx = _col2im(g2 @ kmat, x.shape, kh, kw, stride, padding, oh, ow) if x.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gk, gb

    inputs = (x, k) if bias is None else (x, k, bias)
    return _record("conv2d", out, inputs, vjp)


def maxpool2d(x: Tensor, size: int = 2, stride: int = 2) -> Tensor:
    """Max pooling; ties go to the first element of the window in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"maxpool2d: window {size} larger than input {h}x{w}")
    win = np.empty((n, c, oh, ow, size * size), dtype=DTYPE)
    for i in range(size):
        for j in range(size):
            win[..., i * size + j] = x.data[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros_like(x.data)
        for i in range(size):
            for j in range(size):
                hit = arg == i * size + j
                gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g * hit
        return (gx,)

    return _record("maxpool2d", out, (x,), vjp)


# ---------------------------------------------------------------------------
# normalization, regularization, losses


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each example over all non-batch axes.

    ``gain`` and ``bias`` have one entry per feature (2-D input) or per channel
    (4-D input). A constant input maps to ``bias``.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"layernorm: expected 2-D or 4-D input, got {x.shape}")
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"layernorm: gain/bias must have shape ({x.shape[1]},)")
    axes = tuple(range(1, x.ndim))
    pshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    m = x.data[0].size
    mu = x.data.mean(axis=axes, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_ = gain.data.reshape(pshape)
    out = xhat * g_ + bias.data.reshape(pshape)
    red = (0,) + axes[1:]

    def vjp(g):
        ggain = (g * xhat).sum(axis=red) if gain.requires_grad else None
        gbias = g.sum(axis=red) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * g_
            gx = inv / m * (
                m * gh - gh.sum(axis=axes, keepdims=True) - xhat * (gh * xhat).sum(axis=axes, keepdims=True)
            )
        return gx, ggain, gbias

    return _record("layernorm", out, (x, gain, bias), vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout: p must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout: an rng is required in training mode")
    scale = (rng.random(x.shape) >= p) / (1.0 - p)
    out = x.data * scale

    def vjp(g):
        return (g * scale,)

    return _record("dropout", out, (x,), vjp)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    b = logits.shape[0]
    rows = np.arange(b)
    out = np.asarray(-logp[rows, labels].mean())

    def vjp(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / b),)

    return _record("softmax_cross_entropy", out, (logits,), vjp)


def mse(pred: Tensor, target) -> Tensor:
    target = _wrap(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean())
    scale = 2.0 / max(diff.size, 1)

    def vjp(g):
        d = g * scale * diff
        return d, -d

    return _record("mse", out, (pred, target), vjp)


# ---------------------------------------------------------------------------
# optimizer, randomness, init


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the same seed gives the same stream on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


class AdamState:
    def __init__(self, shapes: Iterable[tuple[int, ...]], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s, dtype=DTYPE) for s in shapes]
        self.v = [np.zeros(s, dtype=DTYPE) for s in shapes]
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """Bias-corrected ADAM update, in place. ``None`` grads count as zero."""
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ContractError("adam_step: params, grads and state have different lengths")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != m.shape:
            raise ContractError(f"adam_step: parameter shape {p.shape} != moment shape {m.shape}")
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ContractError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Optimizer over a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.state = AdamState([p.shape for p in self.params], lr, beta1, beta2, eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)


def xavier_bound(shape: Sequence[int]) -> float:
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        rf = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * rf, shape[0] * rf
    else:
        raise ShapeError(f"xavier init needs a 2-D or 4-D shape, got {tuple(shape)}")
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_xavier(shape: Sequence[int], rng: np.random.Generator) -> Tensor:
    """Xavier-uniform. 2-D shapes are (fan_in, fan_out); 4-D are (out, in, kh, kw)."""
    a = xavier_bound(shape)
    return Tensor(rng.uniform(-a, a, size=tuple(shape)), requires_grad=True)


def init_uniform(shape: Sequence[int], lo: float, hi: float, rng: np.random.Generator) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=tuple(shape)), requires_grad=True)
