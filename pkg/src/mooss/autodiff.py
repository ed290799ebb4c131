"""Dense float64 tensors with reverse-mode differentiation.

Every operator records its inputs and a closure that maps the output
gradient back onto them. ``backward`` walks the recorded graph in reverse
topological order and accumulates into ``Parameter.grad``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mooss.errors import ConfigError, UsageError

MASK_NEG = -1e9

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable trace recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An n-dimensional float64 array that remembers how it was produced."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
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
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A trainable leaf. ``grad`` always exists and accumulates across backward calls."""

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, grad_fn) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, _parents=tuple(parents) if track else (), _op=op)
    if track:
        out._backward = grad_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * a.data / b.data**2, b.shape))

    return _make(a.data / b.data, (a, b), "div", grad_fn)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def grad_fn(g):
        _accumulate(x, g * pos)

    return _make(np.where(pos, x.data, 0.0), (x,), "relu", grad_fn)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)

    def grad_fn(g):
        _accumulate(x, g * y)

    return _make(y, (x,), "exp", grad_fn)


def log(x) -> Tensor:
    x = as_tensor(x)

    def grad_fn(g):
        _accumulate(x, g / x.data)

    return _make(np.log(x.data), (x,), "log", grad_fn)


# ---------------------------------------------------------------- reductions / shape

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), "sum", grad_fn)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ConfigError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def grad_fn(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(y, (x,), "reshape", grad_fn)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))

    def grad_fn(g):
        _accumulate(x, g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), "transpose", grad_fn)


def getitem(x, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate on the way back."""
    x = as_tensor(x)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accumulate(x, full)

    return _make(x.data[idx], (x,), "getitem", grad_fn)


def gather(x, indices, axis: int = 0) -> Tensor:
    """Select ``indices`` along ``axis``."""
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    sl = [slice(None)] * x.ndim
    sl[axis] = indices
    return getitem(x, tuple(sl))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(x, g[tuple(sl)])

    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ConfigError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    return _make(y, xs, "concat", grad_fn)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return concat([reshape(x, x.shape[:axis] + (1,) + x.shape[axis:]) for x in xs], axis=axis)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ConfigError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), "matmul", grad_fn)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (in, out)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ConfigError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, lead + (weight.shape[1],))


def conv2d(x, weight, bias=None, stride: int = 1) -> Tensor:
    """Valid (unpadded) 2-D convolution. x: (N, C, H, W), weight: (O, C, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ConfigError(f"conv2d: input {x.shape} incompatible with kernel {weight.shape}")
    kh, kw = weight.shape[2:]
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ConfigError(f"conv2d: input {x.shape} smaller than kernel {weight.shape}")
    s = int(stride)
    # (N, C, Ho, Wo, kh, kw)
    cols = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = cols.shape[2], cols.shape[3]
    y = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    y = y.transpose(0, 3, 1, 2)

    def grad_fn(g):
        # g: (N, O, Ho, Wo)
        if weight.requires_grad:
            _accumulate(weight, np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])))
        if x.requires_grad:
            dcols = np.tensordot(g, weight.data, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
            _accumulate(x, dx)

    out = _make(np.ascontiguousarray(y), (x, weight), "conv2d", grad_fn)
    if bias is not None:
        out = add(out, reshape(bias, (1, -1, 1, 1)))
    return out


# ---------------------------------------------------------------- normalisation / softmax

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), "softmax", grad_fn)


def layer_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (g - gm - xhat * gx))

    out = _make(xhat, (x,), "layer_norm", grad_fn)
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def masked_logsumexp(x, mask: np.ndarray) -> Tensor:
    """Row-wise log-sum-exp over the entries where ``mask`` is True.

    x and mask are (N, K). Rows with no selected entry return 0 and receive
    no gradient; callers are expected to drop them.
    """
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ConfigError(f"masked_logsumexp: mask {mask.shape} does not match {x.shape}")
    has = mask.any(axis=-1)
    z = np.where(mask, x.data, -np.inf)
    m = np.where(has, z.max(axis=-1), 0.0)
    e = np.where(mask, np.exp(z - m[:, None]), 0.0)
    s = e.sum(axis=-1)
    y = np.where(has, m + np.log(np.where(has, s, 1.0)), 0.0)
    w = e / np.where(has, s, 1.0)[:, None]

    def grad_fn(g):
        _accumulate(x, w * g[:, None])

    return _make(y, (x,), "masked_logsumexp", grad_fn)


def scaled_dot_product_attention(q, k, v, additive_mask: np.ndarray | None = None) -> Tensor:
    """softmax(q kᵀ / sqrt(d) + mask) v over the last two axes."""
    d = q.shape[-1]
    logits = mul(matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), 1.0 / np.sqrt(d))
    if additive_mask is not None:
        logits = add(logits, additive_mask)
    return matmul(softmax(logits, axis=-1), v)


def multi_head_attention(x, wq, wk, wv, wo, heads: int, additive_mask: np.ndarray | None = None) -> Tensor:
    """Self-attention over x: (B, T, d) with ``heads`` heads and an output projection."""
    B, T, d = x.shape
    if d % heads:
        raise ConfigError(f"attention: d={d} not divisible by heads={heads}")
    dh = d // heads

    def split(t):
        return transpose(reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(linear(x, wq)), split(linear(x, wk)), split(linear(x, wv))
    o = scaled_dot_product_attention(q, k, v, additive_mask)
    o = reshape(transpose(o, (0, 2, 1, 3)), (B, T, d))
    return linear(o, wo)


def causal_mask(T: int) -> np.ndarray:
    """Additive (T, T) mask letting index k attend only to indices <= k."""
    return np.triu(np.full((T, T), MASK_NEG), k=1)


def sinusoidal_table(n: int, d: int) -> np.ndarray:
    """Standard absolute sinusoidal positional encodings, shape (n, d)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ---------------------------------------------------------------- backward

def topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable trainable leaf."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    # intermediate grads are scratch for this pass only
    for node in order:
        if not isinstance(node, Parameter):
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        node.grad = None


# ---------------------------------------------------------------- optimiser

@dataclass
class Adam:
    params: list[Parameter]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"Adam lr must be positive, got {self.lr}")
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr_scale: Sequence[float] | None = None) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for k, p in enumerate(self.params):
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            lr = self.lr * (lr_scale[k] if lr_scale is not None else 1.0)
            p.data = p.data - lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def adam_step(opt: Adam, lr_scale: Sequence[float] | None = None) -> None:
    opt.step(lr_scale)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_error <= self.tol

    def failures(self) -> list[str]:
        return [k for k, v in self.errors.items() if v > self.tol]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-7) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    closure: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    names: Iterable[str] | None = None,
    floor: float = 1e-7,
) -> GradCheckReport:
    """Compare analytic gradients of ``closure()`` with central differences.

    Only ``params`` are perturbed and reported. ``max_entries`` limits the
    number of probed coordinates per parameter (chosen with ``rng``).
    Report keys come from ``names`` when given, else from ``Parameter.name``.
    ``floor`` bounds the relative-error denominator from below; raise it when
    the loss is large enough that difference round-off (~1e-16 |f| / eps)
    swamps near-zero gradient entries.
    """
    params = list(params)
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        p.zero_grad()
    backward(closure())
    analytic = [p.grad.copy() for p in params]
    errors: dict[str, float] = {}
    for idx, (p, a) in enumerate(zip(params, analytic)):
        coords = np.arange(p.data.size)
        if max_entries is not None and p.data.size > max_entries:
            r = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(r.choice(p.data.size, size=max_entries, replace=False))
        a_flat = a.reshape(-1)[coords]
        n_flat = np.empty(len(coords))
        with no_grad():
            for k, c in enumerate(coords):
                ix = np.unravel_index(c, p.data.shape)
                old = p.data[ix]
                p.data[ix] = old + eps
                fp = closure().item()
                p.data[ix] = old - eps
                fm = closure().item()
                p.data[ix] = old
                n_flat[k] = (fp - fm) / (2 * eps)
        errors[names[idx]] = float(relative_error(a_flat, n_flat, floor).max()) if len(coords) else 0.0
    return GradCheckReport(errors, tol)
