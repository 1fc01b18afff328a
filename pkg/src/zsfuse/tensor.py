"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Every tensor produced by an operation gets a monotonically increasing node id,
so creation order is a topological order of the computation graph.  ``backward``
collects the nodes reachable from a scalar loss into a :class:`Tape` and walks
them in strictly decreasing id order, summing adjoints of nodes with several
consumers.

Only 2-operand broadcasting between identical shapes or a scalar and a tensor is
supported; ops that need row broadcasting (bias add, layer norm affine) are fused.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np

__all__ = [
    "DimensionError",
    "NumericInputError",
    "Tape",
    "Tensor",
    "add",
    "affine",
    "apply_linear_map",
    "backward",
    "concat",
    "exp",
    "gather_rows",
    "grad_check",
    "grad_check_params",
    "index_select",
    "l2_normalize",
    "inject_backward_fault",
    "layer_norm",
    "log",
    "log_softmax",
    "logsumexp",
    "matmul",
    "mul",
    "neg",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "stack",
    "sub",
    "transpose",
    "weighted_gather_rows",
]

_node_ids = itertools.count()
_faults: set[str] = set()
_fault_lock = threading.Lock()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericInputError(ValueError):
    """An operation received non-finite input it cannot handle."""


class Tensor:
    """A dense real array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_id", "_parents", "_backward", "_op")
    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            probe = np.asarray(data)
            dtype = probe.dtype if probe.dtype in (np.float32, np.float64) else np.float64
        self.data = np.array(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def node_id(self) -> int:
        return self._id

    @property
    def op(self) -> str:
        return self._op

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out._id = next(_node_ids)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        if op in _faults:
            inner = backward_fn

            def backward_fn(g, _inner=inner):
                return tuple(None if gi is None else gi * 1.5 for gi in _inner(g))

        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


@contextlib.contextmanager
def inject_backward_fault(op: str):
    """Scale the adjoints produced by ``op`` by 1.5 inside the block (test hook)."""
    with _fault_lock:
        _faults.add(op)
    try:
        yield
    finally:
        with _fault_lock:
            _faults.discard(op)


def _as_tensor(x: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _pair(a: Any, b: Any) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    if isinstance(b, Tensor):
        return _as_tensor(a, b), b
    return Tensor(a), Tensor(b)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.data.size == 1 or b.data.size == 1:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a: Any, b: Any) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def neg(x: Tensor) -> Tensor:
    return _result(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must agree."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` for ``x`` of shape [n, d_in]; the bias is broadcast over rows."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"affine: input {x.shape}, weight {w.shape}, bias {b.shape}")

    def bw(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return _result(x.data @ w.data + b.data, (x, w, b), bw, "affine")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size and -1 not in shape:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat: no inputs")
    ax = axis % parts[0].ndim
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
            s != t for i, (s, t) in enumerate(zip(p.shape, parts[0].shape)) if i != ax
        ):
            raise DimensionError(f"concat: shapes {parts[0].shape} and {p.shape} differ off axis {axis}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([p.data for p in parts], axis=ax), parts, bw, "concat")


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("stack: no inputs")
    for p in parts[1:]:
        if p.shape != parts[0].shape:
            raise DimensionError(f"stack: shapes {parts[0].shape} and {p.shape} differ")
    ax = axis % (parts[0].ndim + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(parts)))

    return _result(np.stack([p.data for p in parts], axis=ax), parts, bw, "stack")


def index_select(x: Tensor, idx: Sequence[int] | np.ndarray, axis: int = 0) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    n = x.shape[axis]
    bad = idx[(idx < 0) | (idx >= n)]
    if bad.size:
        raise IndexError(f"index_select: index {int(bad[0])} out of range for axis of length {n}")
    ax = axis % x.ndim

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (slice(None),) * ax + (idx,), g)
        return (out,)

    return _result(np.take(x.data, idx, axis=ax), (x,), bw, "index_select")


def gather_rows(x: Tensor, idx: Sequence[int] | np.ndarray) -> Tensor:
    return index_select(x, idx, axis=0)


def weighted_gather_rows(x: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """Row ``t`` of the result is ``sum_k weights[t, k] * x[idx[t, k]]``.

    ``x`` is [n, d]; ``idx`` and ``weights`` are [T, K] constants.
    """
    if x.ndim != 2:
        raise DimensionError(f"weighted_gather_rows: expected a matrix, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    w = np.asarray(weights, dtype=x.dtype)
    if idx.shape != w.shape or idx.ndim != 2:
        raise DimensionError(f"weighted_gather_rows: idx {idx.shape} vs weights {w.shape}")
    bad = idx[(idx < 0) | (idx >= x.shape[0])]
    if bad.size:
        raise IndexError(f"weighted_gather_rows: row index {int(bad[0])} out of range for {x.shape[0]} rows")
    out = np.einsum("tk,tkd->td", w, x.data[idx])

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx.reshape(-1), (w[:, :, None] * g[:, None, :]).reshape(-1, x.shape[1]))
        return (gx,)

    return _result(out, (x,), bw, "weighted_gather_rows")


def apply_linear_map(x: Tensor, forward: Callable[[np.ndarray], np.ndarray],
                     adjoint: Callable[[np.ndarray], np.ndarray], op: str = "linear_map") -> Tensor:
    """Wrap a fixed linear map given as a forward function and its adjoint."""
    return _result(forward(x.data), (x,), lambda g: (adjoint(g),), op)


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "reduce_sum")


def reduce_mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# normalizations


def _require_finite(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericInputError(f"{op}: non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _require_finite(x, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _require_finite(x, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(y, (x,), bw, "log_softmax")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Stable ``log(sum(exp(x)))`` along ``axis`` (axis removed)."""
    _require_finite(x, "logsumexp")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    y = (np.log(s) + m).squeeze(axis)
    p = e / s

    def bw(g):
        return (np.expand_dims(g, axis) * p,)

    return _result(y, (x,), bw, "logsumexp")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then ``gamma * xhat + beta``."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), bw, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """x / sqrt(sum(x^2) + eps) along ``axis``."""
    if eps <= 0:
        raise ValueError("l2_normalize: eps must be positive")
    inv = 1.0 / np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    y = x.data * inv

    def bw(g):
        return (inv * (g - y * (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), bw, "l2_normalize")


# ---------------------------------------------------------------------------
# differentiation


class Tape:
    """The differentiation record of one scalar loss.

    ``nodes`` holds every non-constant tensor reachable from the loss, sorted by
    decreasing node id; ``gradients`` is filled by :meth:`run`.
    """

    def __init__(self, loss: Tensor):
        if loss.data.size != 1:
            raise DimensionError(f"backward: loss must be scalar, got shape {loss.shape}")
        self.loss = loss
        seen: dict[int, Tensor] = {}
        pending = [loss] if loss.requires_grad else []
        while pending:
            t = pending.pop()
            if t._id in seen:
                continue
            seen[t._id] = t
            pending.extend(p for p in t._parents if p.requires_grad)
        self.nodes = [seen[i] for i in sorted(seen, reverse=True)]
        self.gradients: dict[int, np.ndarray] = {}

    def run(self) -> dict[Tensor, np.ndarray]:
        if not self.nodes:
            return {}
        acc = {self.loss._id: np.ones_like(self.loss.data)}
        leaves: dict[Tensor, np.ndarray] = {}
        for node in self.nodes:
            g = acc.pop(node._id, None)
            if g is None:
                continue
            self.gradients[node._id] = g
            if node._backward is None:
                leaves[node] = g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = acc.get(parent._id)
                acc[parent._id] = pg if prev is None else prev + pg
        return leaves


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every leaf tensor that requires grad.

    Leaves the loss does not depend on are absent from the returned map.
    """
    return Tape(loss).run()


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-5,
               coords: Sequence[int] | None = None) -> float:
    """Max relative error between the autodiff gradient of ``f`` at ``x`` and central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``coords`` restricts the check to a subset of flat indices.
    """
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base, requires_grad=True)
    analytic = backward(f(xt)).get(xt)
    if analytic is None:
        analytic = np.zeros_like(base)
    flat = analytic.reshape(-1)
    idx = range(base.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = base.copy().reshape(-1)
        xm = xp.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(base.shape))).item()
        fm = f(Tensor(xm.reshape(base.shape))).item()
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, abs(flat[i] - numeric) / max(1.0, abs(numeric)))
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      max_coords: int | None = 12, seed: int = 0) -> float:
    """Like :func:`grad_check` but for leaf tensors read by a closure.

    Each tensor's ``data`` is perturbed in place and restored.  At most
    ``max_coords`` randomly chosen coordinates are checked per tensor.
    """
    if h <= 0:
        raise ValueError("grad_check: step h must be positive")
    rng = np.random.default_rng(seed)
    grads = backward(loss_fn())
    worst = 0.0
    for p in params:
        g = grads.get(p)
        g = np.zeros_like(p.data) if g is None else g
        n = p.data.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        flat = p.data.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            worst = max(worst, abs(g.reshape(-1)[i] - numeric) / max(1.0, abs(numeric)))
    return worst
