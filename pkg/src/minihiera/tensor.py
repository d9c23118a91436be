"""Dense n-d tensors with reverse-mode gradients.

Values live in numpy arrays. Every operation on tensors that require grad
records a node holding its inputs and a closure that maps the output gradient
to input gradients. ``Tensor.backward`` walks the recorded graph once, in
reverse execution order, and then discards it.

Broadcasting between two tensors is limited to leading axes: the shorter
shape must equal the trailing part of the longer one. Anything else needs an
explicit ``reshape`` or ``broadcast_to``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        arr = np.asarray(data, dtype=dtype)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> Tensor:
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    # -- reverse mode -------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires grad.

        Only scalar tensors may be the root unless ``grad`` is given.
        """
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = trace(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            in_grads = t.node.backward(g)
            for inp, ig in zip(t.node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = ig if key not in grads else grads[key] + ig
        if not retain_graph:
            for t in order:
                t.node = None


def trace(root: Tensor) -> list[Tensor]:
    """Recorded graph below ``root`` in execution (topological) order."""
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
            for inp in t.node.inputs:
                if id(inp) not in seen:
                    stack.append((inp, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward)
    return out


def custom_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Record an operation defined outside this module.

    ``backward`` receives the output gradient and returns one gradient (or
    None) per input, in order.
    """
    return _result(op, data, tuple(inputs), backward)


# -- elementwise ---------------------------------------------------------------

def _check_suffix(a: tuple[int, ...], b: tuple[int, ...]) -> None:
    short, long = (a, b) if len(a) <= len(b) else (b, a)
    if long[len(long) - len(short):] != short:
        raise ShapeError(f"shapes {a} and {b} only broadcast over leading axes")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.ndim and b.ndim:
        _check_suffix(a.shape, b.shape)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _result("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return _result("div", a.data / b.data, (a, b), backward)


def power(x: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return _result("pow", x.data**exponent, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _result("exp", out, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return _result("log", np.log(x.data), (x,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of x * Phi(x)."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _result("gelu", out, (x,), backward)


# -- reductions and shape ------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    n = 1
    for a in axes:
        n *= x.shape[a]
    return tsum(x, axes, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        return (g.reshape(x.shape),)

    return _result("reshape", x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inv),)

    return _result("transpose", x.data.transpose(axes), (x,), backward)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Explicit numpy-style broadcast, including size-1 axes."""
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape).copy()

    def backward(g):
        extra = len(shape) - x.ndim
        g = g.sum(axis=tuple(range(extra))) if extra else g
        ones = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if ones:
            g = g.sum(axis=ones, keepdims=True)
        return (g,)

    return _result("broadcast_to", out, (x,), backward)


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _result("getitem", np.array(out, copy=True), (x,), backward)


# -- linear algebra -----------------------------------------------------------

def _unbroadcast_batch(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    ones = tuple(i for i, n in enumerate(shape[:-2]) if n == 1 and g.shape[i] != 1)
    if ones:
        g = g.sum(axis=ones, keepdims=True)
    return g


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch mismatch: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            # shared weight: fold all batch rows into one product
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast_batch(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return _unbroadcast_batch(ga, a.shape), gb

    return _result("matmul", out, (a, b), backward)


# -- normalisation and activations --------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result("softmax", s, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} vs last axis {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _result("layer_norm", out, (x, gamma, beta), backward)


# -- pooling ----------------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def max_pool(x: Tensor, kernel, stride=None, padding=0, pad_value: float = -np.inf) -> Tensor:
    """2-d max pooling over axes (-3, -2) of a ``[..., H, W, C]`` grid.

    Backward routes each output gradient to the first maximal element of its
    window in row-major scan order. Gradient landing on padding is dropped.
    """
    kh, kw = _pair(kernel)
    sh, sw = _pair(kernel if stride is None else stride)
    ph, pw = _pair(padding)
    if min(kh, kw, sh, sw) < 1:
        raise ValueError(f"kernel and stride must be >= 1, got kernel={kernel} stride={stride}")
    if ph > kh // 2 or pw > kw // 2 or min(ph, pw) < 0:
        raise ValueError(f"padding {padding} must be in [0, kernel // 2]")
    if x.ndim < 3:
        raise ShapeError(f"max_pool expects [..., H, W, C], got {x.shape}")
    H, W = x.shape[-3], x.shape[-2]
    ho = (H + 2 * ph - kh) // sh + 1
    wo = (W + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool output extent < 1 for input {H}x{W}, kernel {kh}x{kw}")

    lead = [(0, 0)] * (x.ndim - 3)
    xp = x.data
    if ph or pw:
        xp = np.pad(xp, lead + [(ph, ph), (pw, pw), (0, 0)], constant_values=pad_value)
    offsets = [(i, j) for i in range(kh) for j in range(kw)]

    def window(arr, i, j):
        return arr[..., i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw, :]

    if len(offsets) == 1:
        out = window(xp, 0, 0).copy()
        arg = None
    else:
        stacked = np.stack([window(xp, i, j) for i, j in offsets], axis=-2)
        arg = stacked.argmax(axis=-2)
        out = np.take_along_axis(stacked, arg[..., None, :], axis=-2)[..., 0, :]

    def backward(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for k, (i, j) in enumerate(offsets):
            contrib = g if arg is None else np.where(arg == k, g, 0.0)
            window(gp, i, j)[...] += contrib
        return (gp[..., ph : ph + H, pw : pw + W, :],)

    return _result("max_pool", out, (x,), backward)


# -- losses -------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy of ``[N, K]`` logits against integer labels."""
    n, k = logits.shape
    target = np.full((n, k), label_smoothing / k, dtype=logits.dtype)
    target[np.arange(n), np.asarray(labels)] += 1.0 - label_smoothing
    return -(log_softmax(logits, axis=-1) * target).sum() * (1.0 / n)


# -- gradient checking -------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4, sample: int | None = None,
               seed: int = 0) -> float:
    """Largest relative gap between backprop and central differences.

    ``x`` is promoted to float64; ``f`` must map it to a scalar tensor.
    With ``sample``, only that many randomly chosen coordinates are probed.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True, dtype=np.float64)
    f(xt).backward()
    analytic = np.zeros_like(base) if xt.grad is None else xt.grad

    numeric = np.zeros_like(base)
    probe = base.copy()
    flat = probe.reshape(-1)
    num_flat = numeric.reshape(-1)
    coords = np.arange(flat.size)
    if sample is not None and sample < flat.size:
        coords = np.random.default_rng(seed).choice(flat.size, sample, replace=False)
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(Tensor(probe.copy(), dtype=np.float64)).item()
            flat[i] = orig - eps
            lo = f(Tensor(probe.copy(), dtype=np.float64)).item()
            flat[i] = orig
            num_flat[i] = (hi - lo) / (2 * eps)

    a = analytic.reshape(-1)[coords]
    n = num_flat[coords]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


# -- serialisation -----------------------------------------------------------

def to_bytes(t: Tensor | np.ndarray) -> bytes:
    """Shape header line, then raw little-endian float32 values."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    header = " ".join(str(n) for n in arr.shape) + "\n"
    return header.encode("ascii") + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def from_bytes(buf: bytes) -> Tensor:
    nl = buf.index(b"\n")
    shape = tuple(int(s) for s in buf[:nl].split())
    data = np.frombuffer(buf[nl + 1 :], dtype="<f4").astype(np.float32)
    expected = int(np.prod(shape)) if shape else 1
    if data.size != expected:
        raise ValueError(f"tensor payload holds {data.size} values, header says {shape}")
    return Tensor(data.reshape(shape))
