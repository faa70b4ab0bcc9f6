"""Losses and the training loop for the prompt encoder.

Per step, a batch of edit samples is drawn; each contributes one generality
and one locality pair. The edit loss teaches the frozen LM-with-prompt the
new answers while pinning behavior on locality queries via KL to the
unprompted model. The contrastive loss shapes the key space so queries land
on their own record and unrelated queries land on the sentinel. Only encoder
parameters train; the LM stays frozen throughout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, EncoderStack, encode_knowledge, encode_query, knowledge_to_prompt, sentinel_rep
from .lm import FrozenLm, answer_logits, answer_logprob, generate
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, backward, dot, kl_divergence, reduce_mean, scale, softmax_cross_entropy, stack_scalars
from .tokens import TokenSeq, knowledge_tokens

LOCALITY_KL_CAP = 16
EMA_DECAY = 0.99

QA = tuple[TokenSeq, TokenSeq]


@dataclass
class EditSample:
    edit: QA
    generality: list[QA]
    locality: list[QA]

    def __post_init__(self) -> None:
        if len(self.edit[0]) == 0 or len(self.edit[1]) == 0:
            raise ValueError("edit pair must be non-empty")
        if not self.generality or not self.locality:
            raise ValueError("need at least one generality and one locality pair")
        for q, a in list(self.generality) + list(self.locality):
            if len(q) == 0 or len(a) == 0:
                raise ValueError("probe pairs must be non-empty")


@dataclass
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-3
    max_iterations: int = 1000
    temperature: float = 1.0
    seed: int = 0
    checkpoint_every: int = 200

    def __post_init__(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ValueError("learning_rate and temperature must be positive")
        if self.max_iterations < 0 or self.checkpoint_every < 1:
            raise ValueError("bad iteration/checkpoint settings")


def info_nce(q: Tensor, k_plus: Tensor, candidates: list[Tensor], tau: float = 1.0) -> Tensor:
    """-log softmax of dot(q, .)/tau over candidates, target slot = k_plus."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    pos = next((i for i, c in enumerate(candidates) if c is k_plus), None)
    if pos is None:
        raise ValueError("k_plus must be one of the candidates")
    scores = stack_scalars([scale(dot(q, c), 1.0 / tau) for c in candidates])
    return softmax_cross_entropy(scores, pos)


def prompt_learning_from_reps(
    r_k: list[Tensor],
    r_qe: list[Tensor],
    r_qg: list[Tensor],
    r_ql: list[Tensor],
    r_theta: Tensor,
    tau: float = 1.0,
) -> dict[str, Tensor]:
    """Contrastive terms from precomputed representations (test seam).

    Returns batch means: 'no' pulls edit/generality queries onto their own
    key; 'so' pulls locality queries onto the sentinel and pushes edit and
    generality queries onto the sentinel once their own key is excluded.
    """
    b = len(r_k)
    if not (len(r_qe) == len(r_qg) == len(r_ql) == b) or b == 0:
        raise ValueError("representation lists must share a positive length")
    pool = list(r_k) + [r_theta]
    no_terms = []
    so_terms = []
    for i in range(b):
        no_terms.append(info_nce(r_qe[i], r_k[i], pool, tau) + info_nce(r_qg[i], r_k[i], pool, tau))
        without_i = [c for j, c in enumerate(pool) if j != i]
        so_terms.append(
            info_nce(r_ql[i], r_theta, pool, tau)
            + info_nce(r_qe[i], r_theta, without_i, tau)
            + info_nce(r_qg[i], r_theta, without_i, tau)
        )
    return {
        "no": reduce_mean(stack_scalars(no_terms)),
        "so": reduce_mean(stack_scalars(so_terms)),
    }


def _batch_reps(batch: list[EditSample], stack: EncoderStack):
    r_k, r_qe, r_qg, r_ql = [], [], [], []
    for s in batch:
        q_e, a_e = s.edit
        r_k.append(encode_knowledge(stack, knowledge_tokens(q_e, a_e)))
        r_qe.append(encode_query(stack, q_e))
        r_qg.append(encode_query(stack, s.generality[0][0]))
        r_ql.append(encode_query(stack, s.locality[0][0]))
    return r_k, r_qe, r_qg, r_ql


def prompt_learning_loss(batch: list[EditSample], stack: EncoderStack, tau: float = 1.0) -> Tensor:
    """Batch-mean contrastive loss; uses each sample's first generality/locality pair."""
    r_k, r_qe, r_qg, r_ql = _batch_reps(batch, stack)
    parts = prompt_learning_from_reps(r_k, r_qe, r_qg, r_ql, sentinel_rep(stack), tau)
    return parts["no"] + parts["so"]


def locality_continuation(lm: FrozenLm, q_l: TokenSeq, cap: int = LOCALITY_KL_CAP) -> TokenSeq:
    """Unprompted greedy continuation the locality KL is computed along."""
    return generate(lm, None, q_l, max_new=cap)


class LocalityCache:
    """Per-query cache of the frozen model's continuation and logits along it."""

    def __init__(self, lm: FrozenLm):
        self.lm = lm
        self._store: dict[tuple[int, ...], tuple[TokenSeq, np.ndarray]] = {}

    def lookup(self, q_l: TokenSeq) -> tuple[TokenSeq, np.ndarray]:
        hit = self._store.get(q_l.ids)
        if hit is None:
            cont = locality_continuation(self.lm, q_l)
            base = answer_logits(self.lm, None, q_l, cont).data.copy()
            hit = (cont, base)
            self._store[q_l.ids] = hit
        return hit


def _edit_terms(
    batch: list[EditSample],
    lm: FrozenLm,
    prompts: list[Tensor],
    cache: LocalityCache,
) -> dict[str, Tensor]:
    rel, gen, loc = [], [], []
    for s, p_k in zip(batch, prompts):
        q_e, a_e = s.edit
        q_g, a_g = s.generality[0]
        q_l, _ = s.locality[0]
        rel.append(-answer_logprob(lm, p_k, q_e, a_e))
        gen.append(-answer_logprob(lm, p_k, q_g, a_g))
        cont, base = cache.lookup(q_l)
        loc.append(kl_divergence(Tensor(base), answer_logits(lm, p_k, q_l, cont)))
    return {
        "rel": reduce_mean(stack_scalars(rel)),
        "gen": reduce_mean(stack_scalars(gen)),
        "loc": reduce_mean(stack_scalars(loc)),
    }


def edit_loss(batch: list[EditSample], lm: FrozenLm, stack: EncoderStack, locality_cache: LocalityCache | None = None) -> Tensor:
    """Batch mean of reliability + generality + locality terms."""
    cache = locality_cache or LocalityCache(lm)
    prompts = []
    for s in batch:
        q_e, a_e = s.edit
        prompts.append(knowledge_to_prompt(stack, encode_knowledge(stack, knowledge_tokens(q_e, a_e))))
    terms = _edit_terms(batch, lm, prompts, cache)
    return terms["rel"] + terms["gen"] + terms["loc"]


def _step_losses(
    batch: list[EditSample],
    lm: FrozenLm,
    stack: EncoderStack,
    tau: float,
    cache: LocalityCache,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Edit and contrastive losses sharing one set of knowledge encodings."""
    r_k, r_qe, r_qg, r_ql = _batch_reps(batch, stack)
    prompts = [knowledge_to_prompt(stack, r) for r in r_k]
    terms = _edit_terms(batch, lm, prompts, cache)
    terms.update(prompt_learning_from_reps(r_k, r_qe, r_qg, r_ql, sentinel_rep(stack), tau))
    total = (terms["rel"] + terms["gen"] + terms["loc"]) + (terms["no"] + terms["so"])
    return total, terms


def _snapshot(stack: EncoderStack) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in stack.params.items()}


def _restore(stack: EncoderStack, snap: dict[str, np.ndarray]) -> None:
    for name, arr in snap.items():
        stack.params[name].data[...] = arr


def train(
    dataset: list[EditSample],
    lm: FrozenLm,
    config: TrainConfig,
    encoder_config: EncoderConfig | None = None,
    init_stack: EncoderStack | None = None,
    log_path: str | Path | None = None,
) -> EncoderStack:
    """Train the encoder; returns the checkpoint with the lowest loss EMA.

    Checkpoints are taken every `checkpoint_every` steps and at the final
    step; selection uses an exponential moving average of the total loss.
    """
    if len(dataset) < config.batch_size:
        raise ValueError("dataset smaller than one batch")
    if not lm.frozen:
        raise ValueError("the LM must be frozen before encoder training")
    if encoder_config is not None and encoder_config.d_llm != lm.config.d_llm:
        raise ValueError("encoder d_llm must match the LM width")
    stack = init_stack or EncoderStack.init(encoder_config or EncoderConfig(d_llm=lm.config.d_llm), seed=config.seed)
    params = stack.parameters()
    state = AdamState.for_params(params, config.learning_rate)
    rng = np.random.default_rng(config.seed)
    cache = LocalityCache(lm)
    ema: float | None = None
    best: tuple[float, dict[str, np.ndarray]] | None = None
    rows: list[list] = []
    for step in range(1, config.max_iterations + 1):
        idx = rng.choice(len(dataset), size=config.batch_size, replace=False)
        batch = []
        for i in idx:
            s = dataset[int(i)]
            g = s.generality[int(rng.integers(len(s.generality)))]
            l = s.locality[int(rng.integers(len(s.locality)))]
            batch.append(EditSample(edit=s.edit, generality=[g], locality=[l]))
        with Tape():
            total, terms = _step_losses(batch, lm, stack, config.temperature, cache)
            backward(total)
        adam_step(params, [p.grad for p in params], state)
        for p in params:
            p.zero_grad()
        val = total.item()
        ema = val if ema is None else EMA_DECAY * ema + (1.0 - EMA_DECAY) * val
        if log_path is not None:
            rows.append(
                [step]
                + [f"{terms[k].item():.6f}" for k in ("rel", "gen", "loc", "no", "so")]
                + [f"{val:.6f}"]
            )
        if step % config.checkpoint_every == 0 or step == config.max_iterations:
            if best is None or ema < best[0]:
                best = (ema, _snapshot(stack))
    if best is not None:
        _restore(stack, best[1])
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "L_rel", "L_gen", "L_loc", "L_no", "L_so", "L_total"])
            writer.writerows(rows)
    return stack
