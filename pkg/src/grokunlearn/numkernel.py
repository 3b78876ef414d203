"""Dense tensors with reverse-mode autodiff on top of numpy.

Only the handful of primitives the model zoo needs are implemented. Every
primitive checks its output for NaN/Inf and raises ``NonFiniteError`` instead
of letting bad values flow through a long training run.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Tensor",
    "GradVector",
    "RngState",
    "ShapeError",
    "NonFiniteError",
    "DegenerateInputError",
    "precision",
    "get_dtype",
    "matmul",
    "relu",
    "gelu",
    "exp",
    "log_softmax",
    "softmax",
    "cross_entropy",
    "kl_divergence",
    "embedding",
    "conv2d",
    "backward",
    "cosine_similarity",
    "per_example_cross_entropy",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class DegenerateInputError(ValueError):
    pass


_DTYPE = [np.float32]


def get_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the float dtype new tensors are created with.

    Gradient checks run under ``precision(np.float64)``; everything else uses
    the float32 default.
    """
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


def _finite(arr: np.ndarray, op: str) -> np.ndarray:
    if arr.dtype.kind == "f" and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Callable | None = None,
    ):
        arr = np.asarray(data)
        if arr.dtype.kind == "f":
            if arr.dtype != get_dtype() and _backward is None:
                arr = arr.astype(get_dtype())
        elif requires_grad:
            raise TypeError("only floating tensors can require grad")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_lift(other, self), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by tensors is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return reduce_sum(self, axis, keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None and like.data.dtype.kind == "f" else get_dtype()
    return _make(np.asarray(x, dtype=dtype), (), None, "const")


def _make(data: np.ndarray, parents: tuple, fn: Callable, op: str) -> Tensor:
    _finite(data, op)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = any(p.requires_grad for p in parents)
    t.grad = None
    t._parents = parents if t.requires_grad else ()
    t._backward = fn if t.requires_grad else None
    return t


# primitives ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    out = a.data + b.data

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), fn, "add")


def mul(a, b) -> Tensor:
    a = _lift(a)
    b = _lift(b, a)
    out = a.data * b.data

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), fn, "mul")


def matmul(a, b) -> Tensor:
    """Matrix product; 2-D operands or stacks of matrices with equal batch dims."""
    a = _lift(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim and b.ndim != 2:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), fn, "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype)
    return _make(out, (x,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * dinner),)

    return _make(out.astype(v.dtype), (x,), fn, "gelu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def fn(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), fn, "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), fn, "softmax")


def _check_labels(labels, n: int, c: int) -> np.ndarray:
    lab = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if lab.shape != (n,):
        raise ShapeError(f"labels shape {lab.shape} does not match batch {n}")
    if lab.dtype.kind not in "iu":
        raise TypeError("labels must be integers")
    if n and (lab.min() < 0 or lab.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    return lab.astype(np.int64)


def per_example_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    """Per-row negative log-likelihood, computed in float64 (no graph)."""
    z = np.asarray(logits, dtype=np.float64)
    lab = _check_labels(labels, z.shape[0], z.shape[1])
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(lab)), lab]


def cross_entropy(logits: Tensor, labels, weights: np.ndarray | None = None) -> Tensor:
    """Mean cross-entropy with fused, max-shifted log-softmax.

    ``weights`` optionally reweights rows (they are normalised to sum to one).
    """
    if logits.ndim != 2:
        raise ShapeError("cross_entropy expects [n, c] logits")
    n, c = logits.shape
    lab = _check_labels(labels, n, c)
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    nll = np.log(s[:, 0]) - z[np.arange(n), lab]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, np.float64) / np.sum(weights)
    loss = np.asarray(np.dot(w, nll), dtype=logits.data.dtype)
    probs = ez / s

    def fn(g):
        d = probs.copy()
        d[np.arange(n), lab] -= 1.0
        return ((float(g) * d * w[:, None]).astype(logits.data.dtype),)

    return _make(loss, (logits,), fn, "cross_entropy")


def kl_divergence(p_logits: Tensor, q_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Batch-mean KL(p || q) between softmax(p_logits/T) and softmax(q_logits/T)."""
    if p_logits.shape != q_logits.shape:
        raise ShapeError("kl_divergence operands differ in shape")
    lp = log_softmax(p_logits * (1.0 / temperature))
    lq = log_softmax(q_logits * (1.0 / temperature))
    per = (exp(lp) * (lp - lq)).sum(axis=-1)
    return per.mean()


def embedding(weight: Tensor, idx) -> Tensor:
    ids = np.asarray(idx)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding indices must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ValueError("embedding index out of range")
    out = weight.data[ids]

    def fn(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(out, (weight,), fn, "embedding")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW layout, square kernels."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: {x.shape} * {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding : padding + h, padding : padding + wd]
        res = (gx, gw)
        if b is not None:
            res = res + (g2.sum(axis=0),)
        return res

    return _make(np.ascontiguousarray(out), parents, fn, "conv2d")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _make(out, (x,), fn, "sum")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _make(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = np.array(x.data[idx])

    def fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, (x,), fn, "getitem")


# backward -----------------------------------------------------------------


@dataclass(frozen=True)
class GradVector:
    """Flat gradient (or parameter) vector with a name -> slice index map."""

    values: np.ndarray
    index_map: tuple

    def __post_init__(self):
        offset = 0
        for name, off, length in self.index_map:
            if off != offset or length < 0:
                raise ValueError(f"index_map not contiguous at {name!r}")
            offset += length
        if offset != self.values.size or self.values.ndim != 1:
            raise ValueError("index_map does not cover values")
        self.values.setflags(write=False)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], dtype=np.float32) -> "GradVector":
        index, off = [], 0
        for name, arr in arrays.items():
            index.append((name, off, int(np.size(arr))))
            off += int(np.size(arr))
        flat = np.concatenate([np.ravel(a) for a in arrays.values()]) if arrays else np.zeros(0)
        return cls(np.asarray(flat, dtype=dtype).copy(), tuple(index))

    def block(self, name: str) -> np.ndarray:
        for n, off, length in self.index_map:
            if n == name:
                return self.values[off : off + length]
        raise KeyError(name)

    def to_arrays(self, shapes: Mapping[str, tuple]) -> dict[str, np.ndarray]:
        return {n: self.values[o : o + l].reshape(shapes[n]).copy() for n, o, l in self.index_map}

    def _same(self, other: "GradVector"):
        if self.index_map != other.index_map:
            raise ValueError("GradVectors have different index maps")

    def __add__(self, other: "GradVector") -> "GradVector":
        self._same(other)
        return GradVector(self.values + other.values, self.index_map)

    def __sub__(self, other: "GradVector") -> "GradVector":
        self._same(other)
        return GradVector(self.values - other.values, self.index_map)

    def __mul__(self, s: float) -> "GradVector":
        return GradVector((self.values * s).astype(self.values.dtype), self.index_map)

    __rmul__ = __mul__

    def dot(self, other: "GradVector") -> float:
        self._same(other)
        return float(np.dot(self.values.astype(np.float64), other.values.astype(np.float64)))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values.astype(np.float64)))

    def __len__(self) -> int:
        return self.values.size


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> GradVector:
    """Back-propagate a scalar loss.

    Returns the gradient with respect to ``params`` (in mapping order) as a
    GradVector and also stores each leaf's gradient in ``.grad``. Without
    ``params`` the leaves are discovered from the graph and named ``p0, p1, ...``.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError("backward needs a scalar loss")
    grads: dict[int, np.ndarray] = {}
    order = _topo(loss) if loss.requires_grad else []
    if order:
        grads[id(loss)] = np.ones_like(loss.data)
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    if params is None:
        leaves = [t for t in order if not t._parents]
        params = {f"p{i}": t for i, t in enumerate(leaves)}
    out = {}
    for name, t in params.items():
        g = grads.get(id(t))
        g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
        _finite(g, "backward")
        t.grad = g
        out[name] = g
    dtype = next(iter(params.values())).data.dtype if params else np.float32
    return GradVector.from_arrays(out, dtype=dtype)


def cosine_similarity(u: GradVector, v: GradVector) -> tuple[float, float]:
    """Cosine and angle in degrees between two gradient vectors."""
    u._same(v)
    a = u.values.astype(np.float64)
    b = v.values.astype(np.float64)
    nu, nv = float(np.dot(a, a)), float(np.dot(b, b))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine of a zero-norm vector")
    cos = float(np.clip(np.dot(a, b) / math.sqrt(nu * nv), -1.0, 1.0))
    return cos, math.degrees(math.acos(cos))


# randomness ---------------------------------------------------------------

_MASK64 = (1 << 64) - 1


def _hash64(*parts) -> int:
    h = hashlib.blake2b(repr(parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngState:
    """Counter-based (Philox) random stream keyed by (seed, stream)."""

    seed: int
    stream: int = 0
    counter: int = 0

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        ctr = np.array([self.counter & _MASK64, 0, 0, 0], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key, counter=ctr))

    def fork(self, *labels) -> "RngState":
        """Independent child stream derived from this one and ``labels``."""
        return RngState(self.seed, _hash64(self.stream, *labels), 0)


def as_tensors(arrays: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in arrays.items()}
