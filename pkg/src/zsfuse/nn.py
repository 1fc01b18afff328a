"""Parameterized blocks: linear layers, MLPs, multi-head attention, transformer decoder."""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

NEG_INF = -1e9


@dataclass
class LinearParams:
    weight: Tensor  # [d_in, d_out]
    bias: Tensor  # [d_out]

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class MlpParams:
    layers: list[LinearParams]


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("layer norm eps must be positive")


@dataclass
class MhaParams:
    wq: LinearParams
    wk: LinearParams
    wv: LinearParams
    wo: LinearParams
    heads: int

    def __post_init__(self):
        d = self.wq.d_out
        if self.heads < 1 or d % self.heads:
            raise ValueError(f"model dim {d} is not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.wq.d_out


@dataclass
class TdParams:
    attn: MhaParams
    mlp: MlpParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    out: LinearParams


# ---------------------------------------------------------------------------
# initialization


def xavier_uniform(rng: np.random.Generator, d_in: int, d_out: int, dtype=np.float64) -> np.ndarray:
    bound = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, dtype=np.float64) -> LinearParams:
    if d_in < 1 or d_out < 1:
        raise ValueError(f"linear dims must be positive, got {d_in}x{d_out}")
    return LinearParams(
        Tensor(xavier_uniform(rng, d_in, d_out, dtype), requires_grad=True),
        Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True),
    )


def init_mlp(rng: np.random.Generator, dims: list[int], dtype=np.float64) -> MlpParams:
    return MlpParams([init_linear(rng, a, b, dtype) for a, b in zip(dims[:-1], dims[1:])])


def init_layer_norm(d: int, dtype=np.float64, eps: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(
        Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
        eps,
    )


def init_mha(rng: np.random.Generator, d: int, heads: int, dtype=np.float64) -> MhaParams:
    return MhaParams(*(init_linear(rng, d, d, dtype) for _ in range(4)), heads=heads)


def init_td(rng: np.random.Generator, d: int, heads: int, hidden: int | None = None, dtype=np.float64) -> TdParams:
    hidden = 4 * d if hidden is None else hidden
    return TdParams(
        attn=init_mha(rng, d, heads, dtype),
        mlp=init_mlp(rng, [d, hidden, d], dtype),
        ln1=init_layer_norm(d, dtype),
        ln2=init_layer_norm(d, dtype),
        out=init_linear(rng, d, d, dtype),
    )


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` for every tensor inside nested dataclasses/lists/dicts."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for k in obj:
            yield from named_parameters(obj[k], f"{prefix}.{k}" if prefix else str(k))


def count_parameters(obj) -> int:
    return sum(t.data.size for _, t in named_parameters(obj))


# ---------------------------------------------------------------------------
# forward functions


def linear(p: LinearParams, x: Tensor) -> Tensor:
    if x.shape[-1] != p.d_in:
        raise DimensionError(f"linear: input {x.shape} does not match weight {p.weight.shape}")
    return T.affine(x, p.weight, p.bias)


def mlp(p: MlpParams, x: Tensor) -> Tensor:
    """ReLU between layers, none after the last."""
    for i, layer in enumerate(p.layers):
        x = linear(layer, x)
        if i < len(p.layers) - 1:
            x = T.relu(x)
    return x


def layer_norm(p: LayerNormParams, x: Tensor) -> Tensor:
    return T.layer_norm(x, p.gamma, p.beta, p.eps)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return T.transpose(T.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def mha(p: MhaParams, q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product attention.

    Returns the projected output [n_q, d] and the attention weights [H, n_q, n_k].
    ``key_mask`` (bool [n_k]) excludes keys whose entry is False.
    """
    if k.shape[0] == 0:
        raise DimensionError("mha: attention over an empty key set")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"mha: keys {k.shape} and values {v.shape} differ in length")
    d = p.dim
    for name, x in (("query", q), ("key", k), ("value", v)):
        if x.ndim != 2 or x.shape[1] != d:
            raise DimensionError(f"mha: {name} shape {x.shape} does not match model dim {d}")
    h = p.heads
    qh = _split_heads(linear(p.wq, q), h)
    kh = _split_heads(linear(p.wk, k), h)
    vh = _split_heads(linear(p.wv, v), h)
    logits = T.scale(T.matmul(qh, T.transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(d // h))
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if not key_mask.any():
            raise DimensionError("mha: every key is masked")
        bias = np.where(key_mask, 0.0, NEG_INF).astype(logits.dtype)
        logits = T.add(logits, Tensor(np.broadcast_to(bias, logits.shape), dtype=logits.dtype))
    attn = T.softmax(logits, axis=-1)
    ctx = T.matmul(attn, vh)  # [H, n_q, d_h]
    merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (q.shape[0], d))
    return linear(p.wo, merged), attn


def td(p: TdParams, q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """Transformer decoder block: Linear(LN(MLP(Q) + Q)) with Q = LN(CrossAttn(q, k, v) + q)."""
    attended, _ = mha(p.attn, q, k, v, key_mask)
    hidden = layer_norm(p.ln1, T.add(attended, q))
    return linear(p.out, layer_norm(p.ln2, T.add(mlp(p.mlp, hidden), hidden)))


def self_attention_block(p: TdParams, x: Tensor) -> Tensor:
    return td(p, x, x, x)
