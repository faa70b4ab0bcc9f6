"""Dense float tensors with taped reverse-mode differentiation.

Storage is float32 by default; reductions accumulate in float64 before
casting back. Every tensor is checked for NaN/Inf at construction, so a
non-finite value anywhere in a graph raises instead of propagating.
Gradients are recorded on an explicitly managed tape:

    with Tape():
        loss = ...
        backward(loss)

The tape is dropped (or reset) each step, which is the whole lifetime story.
"""

from __future__ import annotations

import numpy as np


class NumericsError(Exception):
    pass


class ShapeMismatch(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


class FrozenParameterError(NumericsError):
    pass


DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_frozen")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES:
                arr = data
            elif isinstance(data, np.floating):
                # numpy collapses 0-d array math to scalars; keep their dtype
                arr = np.asarray(data)
            else:
                arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            raise NumericsError(f"unsupported dtype {arr.dtype}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor holds NaN or Inf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._frozen = False

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
    def dtype(self):
        return self.data.dtype

    @property
    def frozen(self) -> bool:
        return self._frozen

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def freeze(self) -> "Tensor":
        """Seal the tensor: no more gradient writes, ever."""
        self.requires_grad = False
        self._frozen = True
        return self

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self._frozen:
            raise FrozenParameterError("gradient write to a frozen tensor")
        if g.shape != self.data.shape:
            raise ShapeMismatch(f"grad shape {g.shape} vs data shape {self.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operators delegate to module-level ops so everything goes through one tape path.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records op applications in execution order for one backward pass."""

    def __init__(self) -> None:
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def reset(self) -> None:
        self._nodes.clear()

    def __len__(self) -> int:
        return len(self._nodes)


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> None:
    tape = active_tape()
    if tape is None:
        return
    if not any(p.requires_grad for p in parents):
        return
    out.requires_grad = True
    tape._nodes.append(_Node(out, parents, backward_fn))


def backward(loss: Tensor) -> None:
    """Reverse sweep over the active tape; accumulates .grad on leaf tensors."""
    tape = active_tape()
    if tape is None:
        raise NumericsError("backward() needs an active tape")
    if loss.size != 1:
        raise ShapeMismatch("loss must be scalar")
    produced = {id(n.out) for n in tape._nodes}
    if id(loss) not in produced:
        raise NumericsError("loss was not produced on the active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            if id(parent) in produced:
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg
            else:
                parent.accumulate_grad(pg)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` (reverse of numpy broadcasting)."""
    dtype = g.dtype
    while g.ndim > len(shape):
        g = g.sum(axis=0, dtype=np.float64)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True, dtype=np.float64)
    return g.astype(dtype, copy=False).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    _record(out, (a, b), bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    _record(out, (a, b), bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    _record(out, (a, b), bw)
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)

    def bw(g):
        return (-g,)

    _record(out, (a,), bw)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(c))

    def bw(g):
        return (g * a.data.dtype.type(c),)

    _record(out, (a,), bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a (m, k) @ b (k, n) -> (m, n)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    _record(out, (a, b), bw)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatch("transpose expects a 2-D tensor")
    out = Tensor(np.ascontiguousarray(a.data.T))

    def bw(g):
        return (np.ascontiguousarray(g.T),)

    _record(out, (a,), bw)
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        return (g.reshape(a.data.shape),)

    _record(out, (a,), bw)
    return out


def concat(parts: list[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeMismatch("concat of zero tensors")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(parts))
        )

    _record(out, tuple(parts), bw)
    return out


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.shape[0]):
        raise ShapeMismatch(f"row slice [{start}:{stop}] out of range for {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data[start:stop]))

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    _record(out, (a,), bw)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatch("slice_cols expects a 2-D tensor")
    if not (0 <= start <= stop <= a.shape[1]):
        raise ShapeMismatch(f"col slice [{start}:{stop}] out of range for {a.shape}")
    out = Tensor(np.ascontiguousarray(a.data[:, start:stop]))

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)

    _record(out, (a,), bw)
    return out


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """table (V, d), ids length T -> (T, d) gathered rows."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeMismatch("embedding_lookup needs a non-empty 1-D id list")
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise IndexError("embedding id outside table")
    out = Tensor(np.ascontiguousarray(table.data[idx]))

    def bw(g):
        acc = np.zeros(table.data.shape, dtype=np.float64)
        np.add.at(acc, idx, g.astype(np.float64, copy=False))
        return (acc.astype(table.data.dtype, copy=False),)

    _record(out, (table,), bw)
    return out


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU; the backward uses the same approximation."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    out = Tensor((0.5 * x * (1.0 + t)).astype(x.dtype, copy=False))

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        return (g * d,)

    _record(out, (a,), bw)
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y)

    def bw(g):
        return (g * (1.0 - y * y),)

    _record(out, (a,), bw)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis of x (T, d) or (d,); affine scale and shift."""
    if gamma.ndim != 1 or beta.ndim != 1 or x.shape[-1] != gamma.shape[0] or x.shape[-1] != beta.shape[0]:
        raise ShapeMismatch("layer_norm parameter shapes do not match input")
    xd = x.data.astype(np.float64, copy=False)
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    y = xhat * gamma.data.astype(np.float64) + beta.data.astype(np.float64)
    out = Tensor(y.astype(x.data.dtype, copy=False))
    d = x.shape[-1]

    def bw(g):
        g64 = g.astype(np.float64, copy=False)
        dxhat = g64 * gamma.data.astype(np.float64)
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(g64.ndim - 1))
        dgamma = (g64 * xhat).sum(axis=axes) if axes else g64 * xhat
        dbeta = g64.sum(axis=axes) if axes else g64
        return (
            dx.astype(x.data.dtype, copy=False),
            np.asarray(dgamma, dtype=gamma.data.dtype).reshape(d),
            np.asarray(dbeta, dtype=beta.data.dtype).reshape(d),
        )

    _record(out, (x, gamma, beta), bw)
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data.astype(np.float64, copy=False)
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    y64 = e / e.sum(axis=axis, keepdims=True)
    y = y64.astype(a.data.dtype, copy=False)
    out = Tensor(y)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64)
        return ((y.astype(np.float64) * (g - inner)).astype(a.data.dtype, copy=False),)

    _record(out, (a,), bw)
    return out


def _log_softmax64(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64, copy=False)
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logits vector."""
    if logits.ndim != 1:
        raise ShapeMismatch("softmax_cross_entropy expects 1-D logits")
    if not (0 <= target < logits.shape[0]):
        raise IndexError(f"target {target} outside logits of length {logits.shape[0]}")
    ls = _log_softmax64(logits.data)
    out = Tensor(np.asarray(-ls[target], dtype=logits.data.dtype))

    def bw(g):
        p = np.exp(ls)
        p[target] -= 1.0
        return ((g * p).astype(logits.data.dtype, copy=False),)

    _record(out, (logits,), bw)
    return out


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """logits (T, V), targets length T -> per-row cross entropy (T,)."""
    if logits.ndim != 2:
        raise ShapeMismatch("cross_entropy_rows expects 2-D logits")
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.ndim != 1 or tgt.shape[0] != logits.shape[0]:
        raise ShapeMismatch("targets length must match logits rows")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= logits.shape[1]):
        raise IndexError("target id outside vocabulary")
    ls = _log_softmax64(logits.data)
    rows = np.arange(tgt.shape[0])
    out = Tensor((-ls[rows, tgt]).astype(logits.data.dtype, copy=False))

    def bw(g):
        p = np.exp(ls)
        p[rows, tgt] -= 1.0
        return ((p * g[:, None].astype(np.float64)).astype(logits.data.dtype, copy=False),)

    _record(out, (logits,), bw)
    return out


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """KL(softmax(p) || softmax(q)), averaged over rows; gradient flows into q only."""
    if p_logits.shape != q_logits.shape:
        raise ShapeMismatch(f"KL operands differ: {p_logits.shape} vs {q_logits.shape}")
    lp = _log_softmax64(p_logits.data)
    lq = _log_softmax64(q_logits.data)
    p = np.exp(lp)
    rows = 1 if p.ndim == 1 else p.shape[0]
    val = (p * (lp - lq)).sum(dtype=np.float64) / rows
    out = Tensor(np.asarray(val, dtype=q_logits.data.dtype))

    def bw(g):
        q = np.exp(lq)
        dq = (q - p) * (float(g) / rows)
        return None, dq.astype(q_logits.data.dtype, copy=False)

    _record(out, (p_logits, q_logits), bw)
    return out


def reduce_sum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(dtype=np.float64), dtype=a.data.dtype))

    def bw(g):
        return (np.full_like(a.data, g),)

    _record(out, (a,), bw)
    return out


def reduce_mean(a: Tensor) -> Tensor:
    n = a.data.size
    if n == 0:
        raise ShapeMismatch("mean of empty tensor")
    out = Tensor(np.asarray(a.data.sum(dtype=np.float64) / n, dtype=a.data.dtype))

    def bw(g):
        return (np.full_like(a.data, g / n),)

    _record(out, (a,), bw)
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two 1-D tensors, accumulated in float64."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatch(f"dot expects matching 1-D tensors, got {a.shape} and {b.shape}")
    val = np.dot(a.data.astype(np.float64), b.data.astype(np.float64))
    out = Tensor(np.asarray(val, dtype=a.data.dtype))

    def bw(g):
        return g * b.data, g * a.data

    _record(out, (a, b), bw)
    return out


def stack_scalars(parts: list[Tensor]) -> Tensor:
    """Scalar tensors -> 1-D vector of length len(parts)."""
    if not parts:
        raise ShapeMismatch("stack_scalars of zero tensors")
    for p in parts:
        if p.size != 1:
            raise ShapeMismatch("stack_scalars expects scalar tensors")
    out = Tensor(np.stack([p.data.reshape(()) for p in parts]))

    def bw(g):
        return tuple(np.asarray(g[i], dtype=parts[i].data.dtype).reshape(parts[i].data.shape) for i in range(len(parts)))

    _record(out, tuple(parts), bw)
    return out
