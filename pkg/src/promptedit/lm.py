"""Tiny byte-level decoder-only LM.

The model is trained once on a plain-text corpus, then frozen. Edited
behavior comes only from continuous prompt rows prefixed to the token
embeddings; the unprompted path is byte-identical to the pretrained model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import blocks
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, backward, concat, cross_entropy_rows, embedding_lookup, reduce_mean, reduce_sum, slice_rows, stack_scalars
from .tokens import EOS, PAD, VOCAB_SIZE, TokenSeq


class ContextOverflowError(Exception):
    pass


@dataclass
class LmConfig:
    vocab_size: int = VOCAB_SIZE
    d_llm: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 128

    def __post_init__(self) -> None:
        if min(self.vocab_size, self.d_llm, self.n_layers, self.n_heads, self.context_len) < 1:
            raise ValueError("all LmConfig fields must be positive")
        if self.d_llm % self.n_heads != 0:
            raise ValueError("d_llm must be divisible by n_heads")


class FrozenLm:
    """Decoder LM; construct with init(), seal with freeze()."""

    def __init__(self, config: LmConfig, params: blocks.ParamDict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: LmConfig, seed: int, dtype=np.float32) -> "FrozenLm":
        rng = np.random.default_rng(seed)
        params: blocks.ParamDict = {}
        blocks.add_param(params, "tok_emb", blocks.normal_init(rng, (config.vocab_size, config.d_llm), dtype))
        blocks.add_param(params, "pos_emb", blocks.normal_init(rng, (config.context_len, config.d_llm), dtype))
        for i in range(config.n_layers):
            blocks.make_block(params, f"layer{i}", config.d_llm, rng, dtype)
        blocks.make_layer_norm(params, "ln_f", config.d_llm, dtype)
        blocks.make_linear(params, "head", config.d_llm, config.vocab_size, rng, dtype)
        return cls(config, params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> "FrozenLm":
        for p in self.parameters():
            p.freeze()
        return self

    @property
    def frozen(self) -> bool:
        return all(p.frozen for p in self.parameters())

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def embed_tokens(self, ids) -> Tensor:
        """Token embedding rows (T, d_llm); no positions yet."""
        return embedding_lookup(self.params["tok_emb"], list(ids))

    def logits_from_embeddings(self, rows: Tensor) -> Tensor:
        """rows (T, d_llm) -> logits (T, vocab). Positions are assigned 0..T-1."""
        t = rows.shape[0]
        if t > self.config.context_len:
            raise ContextOverflowError(f"sequence of {t} rows exceeds context {self.config.context_len}")
        x = rows + embedding_lookup(self.params["pos_emb"], list(range(t)))
        for i in range(self.config.n_layers):
            x = blocks.block_forward(self.params, f"layer{i}", x, self.config.n_heads, causal=True)
        x = blocks.apply_layer_norm(self.params, "ln_f", x)
        return blocks.linear(self.params, "head", x)


def _prompt_rows(lm: FrozenLm, prefix_prompt) -> Tensor | None:
    if prefix_prompt is None:
        return None
    rows = prefix_prompt if isinstance(prefix_prompt, Tensor) else Tensor(np.asarray(prefix_prompt, dtype=np.float32))
    if rows.ndim != 2 or rows.shape[1] != lm.config.d_llm:
        raise ValueError(f"prompt must be (rows, {lm.config.d_llm}), got {rows.shape}")
    return rows


def _forward_logits(lm: FrozenLm, prefix_prompt, ids) -> Tensor:
    emb = lm.embed_tokens(ids)
    rows = emb if prefix_prompt is None else concat([prefix_prompt, emb], axis=0)
    return lm.logits_from_embeddings(rows)


def generate(lm: FrozenLm, prefix_prompt, query: TokenSeq, max_new: int) -> TokenSeq:
    """Greedy decode after the query; stops on EOS, PAD, or max_new tokens."""
    prompt = _prompt_rows(lm, prefix_prompt)
    if len(query) == 0:
        raise ValueError("query must be non-empty")
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    p = 0 if prompt is None else prompt.shape[0]
    if p + len(query) + max_new > lm.config.context_len:
        raise ContextOverflowError("query plus generation budget exceeds the context window")
    ids = list(query.ids)
    out: list[int] = []
    while len(out) < max_new:
        logits = _forward_logits(lm, prompt, ids + out)
        nxt = int(np.argmax(logits.data[-1]))
        out.append(nxt)
        if nxt == EOS or nxt == PAD:
            break
    return TokenSeq(tuple(out))


def answer_logprob(lm: FrozenLm, prefix_prompt, query: TokenSeq, answer: TokenSeq) -> Tensor:
    """Teacher-forced sum of log-probs of the answer tokens; differentiable in the prompt."""
    prompt = _prompt_rows(lm, prefix_prompt)
    if len(query) == 0 or len(answer) == 0:
        raise ValueError("query and answer must be non-empty")
    p = 0 if prompt is None else prompt.shape[0]
    if p + len(query) + len(answer) > lm.config.context_len:
        raise ContextOverflowError("query plus answer exceeds the context window")
    logits = _forward_logits(lm, prompt, query.ids + answer.ids)
    start = p + len(query) - 1
    rows = slice_rows(logits, start, start + len(answer))
    ce = cross_entropy_rows(rows, list(answer.ids))
    return -reduce_sum(ce)


def answer_logits(lm: FrozenLm, prefix_prompt, query: TokenSeq, forced: TokenSeq) -> Tensor:
    """Logits (len(forced), vocab) at the positions that predict each forced token."""
    prompt = _prompt_rows(lm, prefix_prompt)
    if len(query) == 0 or len(forced) == 0:
        raise ValueError("query and forced continuation must be non-empty")
    p = 0 if prompt is None else prompt.shape[0]
    if p + len(query) + len(forced) > lm.config.context_len:
        raise ContextOverflowError("query plus continuation exceeds the context window")
    logits = _forward_logits(lm, prompt, query.ids + forced.ids)
    start = p + len(query) - 1
    return slice_rows(logits, start, start + len(forced))


def split_corpus(corpus: list[TokenSeq]) -> tuple[list[TokenSeq], list[TokenSeq]]:
    """Deterministic 90/10 split by position; every 10th line is held out."""
    train = [s for i, s in enumerate(corpus) if i % 10 != 9]
    held = [s for i, s in enumerate(corpus) if i % 10 == 9]
    if not train:
        raise ValueError("corpus too small to split")
    return train, held


def corpus_loss(lm: FrozenLm, seqs: list[TokenSeq]) -> float:
    """Mean next-token cross entropy per position over all sequences."""
    total = 0.0
    count = 0
    for seq in seqs:
        if len(seq) < 2:
            continue
        logits = _forward_logits(lm, None, seq.ids)
        ce = cross_entropy_rows(slice_rows(logits, 0, len(seq) - 1), list(seq.ids[1:]))
        total += float(ce.data.sum(dtype=np.float64))
        count += len(seq) - 1
    if count == 0:
        raise ValueError("no scorable positions in corpus")
    return total / count


def pretrain_lm(
    corpus: list[TokenSeq],
    config: LmConfig,
    steps: int,
    seed: int,
    batch_size: int = 8,
    learning_rate: float = 3e-3,
) -> FrozenLm:
    """Train from scratch on the corpus, then freeze."""
    if not corpus:
        raise ValueError("empty corpus")
    for seq in corpus:
        if len(seq) < 2:
            raise ValueError("corpus lines must have at least two tokens")
        if len(seq) > config.context_len:
            raise ContextOverflowError("corpus line exceeds the context window")
    lm = FrozenLm.init(config, seed=seed)
    train, _ = split_corpus(corpus)
    rng = np.random.default_rng(seed + 1)
    params = lm.parameters()
    state = AdamState.for_params(params, learning_rate)
    for _ in range(steps):
        idx = rng.integers(0, len(train), size=min(batch_size, len(train)))
        with Tape():
            losses = []
            for i in idx:
                seq = train[int(i)]
                logits = _forward_logits(lm, None, seq.ids)
                ce = cross_entropy_rows(slice_rows(logits, 0, len(seq) - 1), list(seq.ids[1:]))
                losses.append(reduce_mean(ce))
            loss = reduce_mean(stack_scalars(losses))
            backward(loss)
        grads = [p.grad for p in params]
        adam_step(params, grads, state)
        for p in params:
            p.zero_grad()
    return lm.freeze()
