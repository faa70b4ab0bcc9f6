"""Sequence encoder that turns knowledge statements into retrieval keys and
continuous prompts, and queries into probe vectors.

One bidirectional transformer embeds token sequences (a learned CLS row is
prepended). Pooled features feed three residual projection heads:
  mlp_k: knowledge key (d_r,)     mlp_q: query probe (d_r,)
  mlp_p: key -> flat prompt, reshaped row-major to (l, d_llm)
The sentinel is a trainable (c, d_enc) matrix injected after the embedding
layer; its key through mlp_k is the retrieval gate's reference score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks
from .tensor import Tensor, _record, add, concat, embedding_lookup, gelu, matmul, reshape
from .tokens import VOCAB_SIZE, TokenSeq

ENC_HEADS = 2
MAX_ENCODER_POSITIONS = 96


@dataclass
class EncoderConfig:
    d_enc: int = 64
    enc_layers: int = 2
    d_r: int = 64
    l: int = 3
    c: int = 10
    d_llm: int = 64
    mlp_hidden: int = 256

    def __post_init__(self) -> None:
        if min(self.d_enc, self.enc_layers, self.d_r, self.l, self.c, self.d_llm, self.mlp_hidden) < 1:
            raise ValueError("all EncoderConfig fields must be positive")
        if self.d_enc % ENC_HEADS != 0:
            raise ValueError(f"d_enc must be divisible by {ENC_HEADS}")
        if self.c + 1 > MAX_ENCODER_POSITIONS:
            raise ValueError("sentinel length exceeds encoder positions")


class EncoderStack:
    def __init__(self, config: EncoderConfig, params: blocks.ParamDict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: EncoderConfig, seed: int, dtype=np.float32) -> "EncoderStack":
        rng = np.random.default_rng(seed)
        params: blocks.ParamDict = {}
        blocks.add_param(params, "tok_emb", blocks.normal_init(rng, (VOCAB_SIZE, config.d_enc), dtype))
        blocks.add_param(params, "pos_emb", blocks.normal_init(rng, (MAX_ENCODER_POSITIONS, config.d_enc), dtype))
        blocks.add_param(params, "cls", blocks.normal_init(rng, (1, config.d_enc), dtype))
        blocks.add_param(params, "sentinel", blocks.normal_init(rng, (config.c, config.d_enc), dtype))
        for i in range(config.enc_layers):
            blocks.make_block(params, f"layer{i}", config.d_enc, rng, dtype)
        blocks.make_layer_norm(params, "ln_f", config.d_enc, dtype)
        _make_residual_mlp(params, "mlp_k", 3 * config.d_enc, config.mlp_hidden, config.d_r, rng, dtype)
        _make_residual_mlp(params, "mlp_q", 3 * config.d_enc, config.mlp_hidden, config.d_r, rng, dtype)
        _make_residual_mlp(params, "mlp_p", config.d_r, config.mlp_hidden, config.l * config.d_llm, rng, dtype)
        return cls(config, params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def _blocks(self, rows: Tensor) -> Tensor:
        t = rows.shape[0]
        if t > MAX_ENCODER_POSITIONS:
            raise ValueError(f"sequence of {t} rows exceeds encoder positions {MAX_ENCODER_POSITIONS}")
        x = rows + embedding_lookup(self.params["pos_emb"], list(range(t)))
        for i in range(self.config.enc_layers):
            x = blocks.block_forward(self.params, f"layer{i}", x, ENC_HEADS, causal=False)
        return blocks.apply_layer_norm(self.params, "ln_f", x)

    def token_reps(self, ids) -> Tensor:
        """Contextual representations (len(ids)+1, d_enc); row 0 is CLS."""
        emb = embedding_lookup(self.params["tok_emb"], list(ids))
        return self._blocks(concat([self.params["cls"], emb], axis=0))

    def sentinel_token_reps(self) -> Tensor:
        """Representations of [CLS; sentinel rows], sentinel injected post-embedding."""
        return self._blocks(concat([self.params["cls"], self.params["sentinel"]], axis=0))


def _make_residual_mlp(params: blocks.ParamDict, name: str, n_in: int, hidden: int, n_out: int, rng, dtype) -> None:
    blocks.make_linear(params, f"{name}.fc1", n_in, hidden, rng, dtype)
    blocks.make_linear(params, f"{name}.fc2", hidden, n_out, rng, dtype)
    blocks.add_param(params, f"{name}.skip.w", blocks.normal_init(rng, (n_in, n_out), dtype))


def residual_mlp(params: blocks.ParamDict, name: str, x: Tensor) -> Tensor:
    """x (n_in,) -> (n_out,): fc2(gelu(fc1(x))) + skip(x)."""
    row = reshape(x, (1, x.shape[0]))
    h = blocks.linear(params, f"{name}.fc2", gelu(blocks.linear(params, f"{name}.fc1", row)))
    y = add(h, matmul(row, params[f"{name}.skip.w"]))
    return reshape(y, (y.shape[1],))


def pool_concat(token_reps: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Rows (T, d) -> (3d,): per-dimension max, min, mean over unmasked rows."""
    t, d = token_reps.shape
    if mask is None:
        valid = np.ones(t, dtype=bool)
    else:
        valid = np.asarray(mask, dtype=bool)
        if valid.shape != (t,):
            raise ValueError(f"mask shape {valid.shape} does not match {t} rows")
    if not valid.any():
        raise ValueError("pool_concat needs at least one unmasked row")
    rows = np.where(valid)[0]
    sub = token_reps.data[rows].astype(np.float64, copy=False)
    mx_idx = rows[np.argmax(sub, axis=0)]
    mn_idx = rows[np.argmin(sub, axis=0)]
    pooled = np.concatenate([sub.max(axis=0), sub.min(axis=0), sub.mean(axis=0)])
    out = Tensor(pooled.astype(token_reps.data.dtype, copy=False))

    def bw(g):
        full = np.zeros_like(token_reps.data, dtype=np.float64)
        cols = np.arange(d)
        np.add.at(full, (mx_idx, cols), g[:d].astype(np.float64))
        np.add.at(full, (mn_idx, cols), g[d : 2 * d].astype(np.float64))
        full[rows] += g[2 * d :].astype(np.float64) / rows.size
        return (full.astype(token_reps.data.dtype, copy=False),)

    _record(out, (token_reps,), bw)
    return out


def encode_knowledge(stack: EncoderStack, k: TokenSeq) -> Tensor:
    """Knowledge statement -> retrieval key (d_r,)."""
    if len(k) == 0:
        raise ValueError("empty knowledge statement")
    return residual_mlp(stack.params, "mlp_k", pool_concat(stack.token_reps(k.ids)))


def encode_query(stack: EncoderStack, q: TokenSeq) -> Tensor:
    """Query -> probe vector (d_r,)."""
    if len(q) == 0:
        raise ValueError("empty query")
    return residual_mlp(stack.params, "mlp_q", pool_concat(stack.token_reps(q.ids)))


def knowledge_to_prompt(stack: EncoderStack, r_k: Tensor) -> Tensor:
    """Key (d_r,) -> continuous prompt (l, d_llm), row-major reshape."""
    cfg = stack.config
    if r_k.shape != (cfg.d_r,):
        raise ValueError(f"key shape {r_k.shape} does not match d_r {cfg.d_r}")
    flat = residual_mlp(stack.params, "mlp_p", r_k)
    return reshape(flat, (cfg.l, cfg.d_llm))


def sentinel_rep(stack: EncoderStack) -> Tensor:
    """Sentinel key (d_r,): encoder over the injected sentinel rows, then mlp_k."""
    return residual_mlp(stack.params, "mlp_k", pool_concat(stack.sentinel_token_reps()))
