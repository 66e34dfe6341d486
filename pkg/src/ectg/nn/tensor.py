"""Dense tensors with reverse-mode automatic differentiation.

Every tensor holds a numpy array plus an optional gradient buffer and a
closure that routes adjoints to its parents.  Broadcasting is restricted
to the case where one operand's shape is a trailing suffix of the
other's (covers bias vectors and scalars); anything else is a shape
error, on purpose.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for newly created tensors (float64/float32)."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt.kind != "f":
        raise ValueError(f"default dtype must be floating, got {dt}")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def backward(self) -> None:
        """Accumulate adjoints of this scalar into every upstream .grad."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative DFS; training graphs get deep enough to break recursion
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
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _suffix_shapes(op: str, a: Tensor, b: Tensor) -> tuple:
    """Result shape for elementwise ops; the smaller shape must be a trailing
    suffix of the larger (no size-1 stretching)."""
    sa, sb = a.data.shape, b.data.shape
    if len(sa) >= len(sb):
        big, small = sa, sb
    else:
        big, small = sb, sa
    if small != big[len(big) - len(small):]:
        raise ShapeError(f"{op}: shapes {sa} vs {sb}")
    return big


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _suffix_shapes("add", a, b)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    out._backward = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _suffix_shapes("sub", a, b)
    out = Tensor(a.data - b.data, _parents=(a, b))

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    out._backward = bw
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, _parents=(a,))
    out._backward = lambda g: _accum(a, -g)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _suffix_shapes("mul", a, b)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    out._backward = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, batched 3-D x 3-D (equal batch), 2-D x 1-D,
    or 1-D x 2-D.  No implicit batch broadcasting."""
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 1:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError(f"matmul: shapes {ad.shape} vs {bd.shape}")
        out = Tensor(ad @ bd, _parents=(a, b))

        def bw(g):
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)

        out._backward = bw
        return out
    if ad.ndim == 1 and bd.ndim == 2:
        if ad.shape[0] != bd.shape[0]:
            raise ShapeError(f"matmul: shapes {ad.shape} vs {bd.shape}")
        out = Tensor(ad @ bd, _parents=(a, b))

        def bw(g):
            _accum(a, bd @ g)
            _accum(b, np.outer(ad, g))

        out._backward = bw
        return out
    if ad.ndim == bd.ndim and ad.ndim in (2, 3):
        if ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
            raise ShapeError(f"matmul: shapes {ad.shape} vs {bd.shape}")
        out = Tensor(ad @ bd, _parents=(a, b))

        def bw(g):
            _accum(a, g @ np.swapaxes(bd, -1, -2))
            _accum(b, np.swapaxes(ad, -1, -2) @ g)

        out._backward = bw
        return out
    raise ShapeError(f"matmul: unsupported ranks {ad.shape} vs {bd.shape}")


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"dot: shapes {a.data.shape} vs {b.data.shape}")
    out = Tensor(np.dot(a.data, b.data), _parents=(a, b))

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    out._backward = bw
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat: empty input")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), _parents=tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]

    def bw(g):
        offset = 0
        for p, size in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + size)
            _accum(p, g[tuple(idx)])
            offset += size

    out._backward = bw
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), _parents=(a,))
    out._backward = lambda g: _accum(a, g.reshape(a.data.shape))
    return out


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes), _parents=(a,))
    out._backward = lambda g: _accum(a, g.transpose(inv))
    return out


def slice_(a: Tensor, key) -> Tensor:
    out = Tensor(a.data[key], _parents=(a,))

    def bw(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accum(a, full)

    out._backward = bw
    return out


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of a 2-D table by integer index."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-D, got {table.data.shape}")
    out = Tensor(table.data[idx], _parents=(table,))

    def bw(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, idx, g)

    out._backward = bw
    return out


def pick(a: Tensor, rows, cols) -> Tensor:
    """Gather a[rows[i], cols[i]] into a vector."""
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    out = Tensor(a.data[r, c], _parents=(a,))

    def bw(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, (r, c), g)

    out._backward = bw
    return out


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,))

    def bw(g):
        if axis is None:
            _accum(a, np.full_like(a.data, 1.0) * g)
            return
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    out._backward = bw
    return out


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def exp_(a: Tensor) -> Tensor:
    val = np.exp(a.data)
    out = Tensor(val, _parents=(a,))
    out._backward = lambda g: _accum(a, g * val)
    return out


def log_(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), _parents=(a,))
    out._backward = lambda g: _accum(a, g / a.data)
    return out


def sigmoid(a: Tensor) -> Tensor:
    val = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(val, _parents=(a,))
    out._backward = lambda g: _accum(a, g * val * (1.0 - val))
    return out


def tanh_(a: Tensor) -> Tensor:
    val = np.tanh(a.data)
    out = Tensor(val, _parents=(a,))
    out._backward = lambda g: _accum(a, g * (1.0 - val * val))
    return out


def relu(a: Tensor) -> Tensor:
    val = np.maximum(a.data, 0.0)
    out = Tensor(val, _parents=(a,))
    out._backward = lambda g: _accum(a, g * (a.data > 0.0))
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along an axis.  -inf entries come out exactly 0; rows must
    keep at least one finite entry."""
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    val = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(val, _parents=(a,))

    def bw(g):
        inner = (g * val).sum(axis=axis, keepdims=True)
        _accum(a, val * (g - inner))

    out._backward = bw
    return out


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    val = shifted - lse
    out = Tensor(val, _parents=(a,))
    soft = np.exp(val)

    def bw(g):
        _accum(a, g - soft * g.sum(axis=axis, keepdims=True))

    out._backward = bw
    return out


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where mask is True by a constant (usually -inf)."""
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    out = Tensor(np.where(m, value, a.data), _parents=(a,))
    out._backward = lambda g: _accum(a, np.where(m, 0.0, g))
    return out


def dropout_mask(a: Tensor, keep: np.ndarray, p: float) -> Tensor:
    """Inverted dropout with a precomputed boolean keep-mask."""
    scale = 1.0 / (1.0 - p)
    k = np.asarray(keep, dtype=bool)
    out = Tensor(np.where(k, a.data * scale, 0.0), _parents=(a,))
    out._backward = lambda g: _accum(a, np.where(k, g * scale, 0.0))
    return out


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    y = (a.data - mu) / std
    out = Tensor(y, _parents=(a,))
    n = a.data.shape[-1]

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, (g - gm - y * gym) / std)

    out._backward = bw
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    t = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or t.ndim != 1 or t.shape[0] != logits.data.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.data.shape} vs targets {t.shape}")
    ls = log_softmax(logits, axis=-1)
    picked = pick(ls, np.arange(t.shape[0]), t)
    return neg(mean_(picked))


def parameter(rng: np.random.Generator, shape, scheme: str = "xavier") -> Tensor:
    """Fresh trainable tensor.  Matrices get Xavier-uniform init, vectors
    zeros unless asked otherwise."""
    shape = tuple(shape)
    if scheme == "zeros" or (scheme == "xavier" and len(shape) < 2):
        data = np.zeros(shape, dtype=_DEFAULT_DTYPE)
    elif scheme == "xavier":
        fan_out, fan_in = shape[0], shape[-1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        data = rng.uniform(-limit, limit, size=shape).astype(_DEFAULT_DTYPE)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Tensor(data, requires_grad=True)


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    rng: np.random.Generator,
    probes: int = 20,
    eps: float = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central-difference
    gradients at randomly probed parameter coordinates.

    Central differences cannot resolve gradients below roughly
    ulp(|f|)/eps; probes where both sides sit under that floor (e.g. the
    exactly-flat softmax-shift direction of a layer-norm bias) are
    re-drawn, since agreement or disagreement there is pure roundoff.
    A genuinely wrong gradient always leaves one side above the floor.
    """
    for p in params.values():
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise ValueError("grad_check: non-finite objective")
    out.backward()
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    fd_floor = 16.0 * np.finfo(np.float64).eps * max(1.0, abs(float(out.data))) / (2.0 * eps)
    names = sorted(params)
    worst = 0.0
    informative = 0
    attempts = 0
    while informative < probes and attempts < probes * 50:
        attempts += 1
        name = names[int(rng.integers(len(names)))]
        p = params[name]
        flat = int(rng.integers(p.data.size))
        idx = np.unravel_index(flat, p.data.shape)
        orig = p.data[idx]
        p.data[idx] = orig + eps
        hi = float(f().data)
        p.data[idx] = orig - eps
        lo = float(f().data)
        p.data[idx] = orig
        g_fd = (hi - lo) / (2.0 * eps)
        g_ad = float(grads[name][idx])
        if abs(g_ad) < fd_floor and abs(g_fd) < fd_floor:
            continue
        informative += 1
        rel = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
        worst = max(worst, rel)
    for p in params.values():
        p.zero_grad()
    return worst
