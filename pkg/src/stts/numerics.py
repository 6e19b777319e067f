"""Dense tensors with reverse-mode gradient recording.

The op set is deliberately closed: only what the encoder, scorer, packer and
losses use. Every op checks its output for NaN/Inf and raises instead of
propagating non-finite values.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

PRECISIONS = {"float64": np.float64, "float32": np.float32}

GELU_C = math.sqrt(2.0 / math.pi)
NORM_EPS = 1e-12


class NumericsError(ValueError):
    pass


class ShapeError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


class ContractError(NumericsError):
    pass


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None
    return np.dtype(precision)


class Tensor:
    """A dense row-major array plus a flag saying whether gradients flow to it."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; divide by a python scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _const(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------

_local = threading.local()


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op, out, inputs, backward):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradientTape:
    """Ordered record of executed ops; active while used as a context manager.

    Tapes are thread-local: an op only records onto the innermost tape opened
    by the current thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradientTape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


@contextlib.contextmanager
def no_tape():
    """Suspend recording on this thread (ops inside are untracked)."""
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


def _active_tape() -> GradientTape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values (shape {data.shape})")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(op, out, tuple(inputs), backward))
    return out


def backward(tape: GradientTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep over ``tape``; returns gradients of tracked leaves.

    Leaves are tracked tensors that no recorded op produced (parameters and
    explicitly tracked inputs). Untracked tensors never receive a gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.out) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    return {t: grads[k] for k, t in leaves.items() if k in grads}


def finite_diff_grad(f: Callable[[], float], params: Iterable, eps: float = 1e-6) -> list[np.ndarray]:
    """Central differences of ``f()`` with respect to every entry of ``params``.

    ``params`` are Tensors or ndarrays that ``f`` reads; they are perturbed
    in place and restored.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    out = []
    for p in params:
        arr = p.data if isinstance(p, Tensor) else p
        grad = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = _scalar(f())
            flat[i] = orig - eps
            lo = _scalar(f())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        out.append(grad)
    return out


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return v.item()
    return float(v)


# --------------------------------------------------------------------------
# Shape helpers
# --------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None
    if shape != a.shape and shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} would broadcast both operands")
    return shape


# --------------------------------------------------------------------------
# Elementwise arithmetic
# --------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _const(b, a.dtype)
    _binary_shape("add", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _const(b, a.dtype)
    _binary_shape("sub", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _const(b, a.dtype)
    _binary_shape("mul", a, b)

    def bwd(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", a.data * b.data, (a, b), bwd)


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NonFiniteError("log of a non-positive value")

    def bwd(g):
        return (g / x.data,)

    return _emit("log", np.log(x.data), (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    v = x.data
    v2 = v * v
    t = np.tanh(GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def bwd(g):
        d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * v2)
        return (g * d,)

    return _emit("gelu", out, (x,), bwd)


def sigmoid_clamped(x: Tensor, floor: float = 1e-6) -> Tensor:
    """sigmoid(x) clamped below at ``floor``; zero gradient on the clamp."""
    v = x.data
    s = np.empty_like(v)
    pos = v >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    s[~pos] = ev / (1.0 + ev)
    clamped = s < floor
    out = np.where(clamped, floor, s).astype(v.dtype, copy=False)

    def bwd(g):
        return (np.where(clamped, 0.0, g * s * (1.0 - s)),)

    return _emit("sigmoid_clamped", out, (x,), bwd)


# --------------------------------------------------------------------------
# Linear algebra and reductions
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes.

    ``b`` may be a 2-D weight shared across the leading axes of ``a``; ``a``
    may likewise be a 2-D constant applied to a batched ``b``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def bwd(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit("matmul", out, (a, b), bwd)

    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None

    def bwd(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", out, (a, b), bwd)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", np.asarray(out), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _emit("mean", np.asarray(out), (x,), bwd)


# --------------------------------------------------------------------------
# Layout ops
# --------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None

    def bwd(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _emit("transpose", np.transpose(x.data, axes), (x,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    axis = axis % tensors[0].ndim
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tensors, bwd)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along ``axis``; an index of -1 yields zeros at that position."""
    idx = np.asarray(index, dtype=np.int64)
    axis = axis % x.ndim
    if idx.size and (idx.max() >= x.shape[axis] or idx.min() < -1):
        raise ShapeError(f"take: index out of range for axis {axis} of {x.shape}")
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = np.take(x.data, safe, axis=axis)
    all_valid = bool(valid.all())
    if not all_valid:
        vshape = (1,) * axis + idx.shape + (1,) * (x.ndim - axis - 1)
        out = np.where(valid.reshape(vshape), out, 0).astype(x.dtype, copy=False)

    def bwd(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gm = np.moveaxis(gx, axis, 0)
        src = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        src = src.reshape((-1,) + gm.shape[1:])
        flat = safe.reshape(-1)
        if not all_valid:
            keep = valid.reshape(-1)
            flat, src = flat[keep], src[keep]
        np.add.at(gm, flat, src)
        return (gx,)

    return _emit("take", out, (x,), bwd)


# --------------------------------------------------------------------------
# Normalisation and attention
# --------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _emit("layer_norm", out, (x, gamma, beta), bwd)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = NORM_EPS) -> Tensor:
    """x / max(||x||, eps) along ``axis``."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    floored = norm <= eps
    denom = np.where(floored, eps, norm)
    y = x.data / denom

    def bwd(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(floored, g / denom, (g - y * proj) / denom),)

    return _emit("l2_normalize", y, (x,), bwd)


def softmax_biased(logits: Tensor, bias: Tensor | None = None, mask: np.ndarray | None = None,
                   scale: float = 1.0) -> Tensor:
    """Row softmax of ``logits * scale + bias`` over the last axis.

    ``mask`` (boolean, broadcastable to ``logits``; True = allowed) forces
    disallowed keys to probability exactly 0. Rows with no allowed key come
    out as all zeros.
    """
    z = logits.data * scale
    inputs = [logits]
    if bias is not None:
        _binary_shape("softmax_biased", logits, bias)
        z = z + bias.data
        inputs.append(bias)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            np.broadcast_shapes(mask.shape, z.shape)
        except ValueError:
            raise ShapeError(f"softmax_biased: mask {mask.shape} vs logits {z.shape}") from None
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    if mask is not None:
        m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e.sum(axis=-1, keepdims=True)
    p = (e / np.where(s > 0, s, 1.0)).astype(logits.dtype, copy=False)

    def bwd(g):
        gz = p * (g - (g * p).sum(axis=-1, keepdims=True))
        grads = [gz * scale if logits.requires_grad else None]
        if bias is not None:
            grads.append(_unbroadcast(gz, bias.shape) if bias.requires_grad else None)
        return tuple(grads)

    return _emit("softmax_biased", p, inputs, bwd)


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size

    def bwd(g):
        gd = g * 2.0 * d / n
        return gd, -gd

    return _emit("mse", np.asarray((d * d).mean(), dtype=a.dtype), (a, b), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(labels.size)
    loss = -logp[rows, labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / labels.size,)

    return _emit("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bwd)
