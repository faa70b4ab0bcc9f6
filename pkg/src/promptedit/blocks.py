"""Transformer building blocks shared by the decoder LM and the sequence encoder.

Parameters live in an ordered dict of named tensors so checkpoints can be
written and restored by name. All blocks are pre-norm; the feed-forward
hidden width is FFN_MULT * d.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    scale,
    slice_cols,
    softmax,
    transpose,
)

FFN_MULT = 2
MASK_FILL = -1e9  # large finite negative keeps the no-NaN invariant

ParamDict = dict[str, Tensor]


def normal_init(rng: np.random.Generator, shape: tuple[int, ...], dtype, std: float = 0.02) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


def add_param(params: ParamDict, name: str, arr: np.ndarray) -> None:
    if name in params:
        raise ValueError(f"duplicate parameter name {name}")
    params[name] = Tensor(arr, requires_grad=True)


def make_linear(params: ParamDict, name: str, n_in: int, n_out: int, rng: np.random.Generator, dtype) -> None:
    add_param(params, f"{name}.w", normal_init(rng, (n_in, n_out), dtype))
    add_param(params, f"{name}.b", np.zeros(n_out, dtype=dtype))


def linear(params: ParamDict, name: str, x: Tensor) -> Tensor:
    """x (T, n_in) -> (T, n_out)."""
    return add(matmul(x, params[f"{name}.w"]), params[f"{name}.b"])


def make_layer_norm(params: ParamDict, name: str, d: int, dtype) -> None:
    add_param(params, f"{name}.gamma", np.ones(d, dtype=dtype))
    add_param(params, f"{name}.beta", np.zeros(d, dtype=dtype))


def apply_layer_norm(params: ParamDict, name: str, x: Tensor) -> Tensor:
    return layer_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"])


def make_block(params: ParamDict, prefix: str, d: int, rng: np.random.Generator, dtype) -> None:
    make_layer_norm(params, f"{prefix}.ln1", d, dtype)
    for proj in ("wq", "wk", "wv", "wo"):
        make_linear(params, f"{prefix}.attn.{proj}", d, d, rng, dtype)
    make_layer_norm(params, f"{prefix}.ln2", d, dtype)
    make_linear(params, f"{prefix}.ffn.fc1", d, FFN_MULT * d, rng, dtype)
    make_linear(params, f"{prefix}.ffn.fc2", FFN_MULT * d, d, rng, dtype)


_MASK_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _causal_bias(t: int, dtype) -> np.ndarray:
    key = (t, np.dtype(dtype).name)
    cached = _MASK_CACHE.get(key)
    if cached is None:
        cached = np.triu(np.full((t, t), MASK_FILL, dtype=dtype), k=1)
        _MASK_CACHE[key] = cached
    return cached


def attention(params: ParamDict, prefix: str, x: Tensor, n_heads: int, causal: bool) -> Tensor:
    """Multi-head self-attention over x (T, d)."""
    t, d = x.shape
    if d % n_heads != 0:
        raise ValueError(f"width {d} not divisible by {n_heads} heads")
    hd = d // n_heads
    q = linear(params, f"{prefix}.attn.wq", x)
    k = linear(params, f"{prefix}.attn.wk", x)
    v = linear(params, f"{prefix}.attn.wv", x)
    bias = Tensor(_causal_bias(t, x.dtype)) if causal else None
    heads = []
    for h in range(n_heads):
        lo, hi = h * hd, (h + 1) * hd
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        scores = scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(hd))
        if bias is not None:
            scores = add(scores, bias)
        heads.append(matmul(softmax(scores, axis=-1), vh))
    merged = heads[0] if n_heads == 1 else concat(heads, axis=1)
    return linear(params, f"{prefix}.attn.wo", merged)


def block_forward(params: ParamDict, prefix: str, x: Tensor, n_heads: int, causal: bool) -> Tensor:
    x = add(x, attention(params, prefix, apply_layer_norm(params, f"{prefix}.ln1", x), n_heads, causal))
    h = linear(params, f"{prefix}.ffn.fc2", gelu(linear(params, f"{prefix}.ffn.fc1", apply_layer_norm(params, f"{prefix}.ln2", x))))
    return add(x, h)
