"""Append-only store of (key, prompt) pairs with a sentinel-gated retriever.

Each edit appends one record. Retrieval scores the query probe against every
stored key by plain dot product; the best key wins only if it strictly beats
the query's dot product with the sentinel key snapshot. Otherwise retrieval
reports absent and callers fall back to the unedited model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderStack, encode_knowledge, encode_query, knowledge_to_prompt, sentinel_rep
from .tokens import TokenSeq, knowledge_tokens


@dataclass
class KnowledgeRecord:
    key: np.ndarray  # (d_r,) float32
    value: np.ndarray  # (l, d_llm) float32
    source_text: str
    insert_index: int


@dataclass
class Repository:
    d_r: int
    l: int
    d_llm: int
    sentinel: np.ndarray  # (d_r,) float32, snapshot taken when the encoder was frozen
    records: list[KnowledgeRecord] = field(default_factory=list)

    @classmethod
    def for_stack(cls, stack: EncoderStack) -> "Repository":
        cfg = stack.config
        snap = sentinel_rep(stack).data.astype(np.float32).copy()
        return cls(d_r=cfg.d_r, l=cfg.l, d_llm=cfg.d_llm, sentinel=snap)

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class RetrievalReport:
    best_index: int
    best_score: float
    sentinel_score: float
    admitted: bool


def apply_edit(repo: Repository, stack: EncoderStack, q_e: TokenSeq, a_e: TokenSeq) -> Repository:
    """Append one edit: encode q+SEP+a into a key and prompt, never touching older records."""
    k = knowledge_tokens(q_e, a_e)
    r_k = encode_knowledge(stack, k)
    p_k = knowledge_to_prompt(stack, r_k)
    if p_k.shape != (repo.l, repo.d_llm) or r_k.shape != (repo.d_r,):
        raise ValueError("encoder output shapes do not match repository dims")
    repo.records.append(
        KnowledgeRecord(
            key=r_k.data.astype(np.float32).copy(),
            value=p_k.data.astype(np.float32).copy(),
            source_text=k.text(),
            insert_index=len(repo.records),
        )
    )
    return repo


def score_keys(query_rep: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Dot products (t,) in float64; keys (t, d_r), query (d_r,)."""
    return keys.astype(np.float64) @ query_rep.astype(np.float64)


def gate_decision(query_rep: np.ndarray, keys: np.ndarray, sentinel: np.ndarray) -> RetrievalReport:
    """Argmax over key scores, admitted only if strictly above the sentinel score."""
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("gate_decision needs at least one key")
    scores = score_keys(query_rep, keys)
    best = int(np.argmax(scores))  # ties resolve to the earliest insert
    s_ref = float(np.dot(sentinel.astype(np.float64), query_rep.astype(np.float64)))
    return RetrievalReport(
        best_index=best,
        best_score=float(scores[best]),
        sentinel_score=s_ref,
        admitted=bool(scores[best] > s_ref),
    )


def retrieval_report(repo: Repository, stack: EncoderStack, q: TokenSeq) -> RetrievalReport:
    if len(repo) == 0:
        raise ValueError("retrieval_report on an empty repository")
    rq = encode_query(stack, q).data
    keys = np.stack([rec.key for rec in repo.records])
    return gate_decision(rq, keys, repo.sentinel)


def retrieve(repo: Repository, stack: EncoderStack, q: TokenSeq) -> np.ndarray | None:
    """Prompt of the gate-admitted best record, or None when the gate rejects."""
    if len(repo) == 0:
        return None
    report = retrieval_report(repo, stack, q)
    if not report.admitted:
        return None
    return repo.records[report.best_index].value


def fixed_threshold_retrieve(repo: Repository, stack: EncoderStack, q: TokenSeq, theta_abs: float) -> np.ndarray | None:
    """Sentinel-free variant: admit the argmax key iff its score exceeds theta_abs."""
    if len(repo) == 0:
        return None
    rq = encode_query(stack, q).data
    keys = np.stack([rec.key for rec in repo.records])
    scores = score_keys(rq, keys)
    best = int(np.argmax(scores))
    if scores[best] > theta_abs:
        return repo.records[best].value
    return None
