"""Lifelong model editing for a tiny frozen LM via retrieved continuous prompts."""

from .encoder import EncoderConfig, EncoderStack, encode_knowledge, encode_query, knowledge_to_prompt, pool_concat, sentinel_rep
from .evaluation import MetricsReport, ablation_run, exact_match, metrics_to_csv, run_lifelong
from .lm import FrozenLm, LmConfig, answer_logits, answer_logprob, generate, pretrain_lm
from .optim import AdamState, adam_step
from .repository import KnowledgeRecord, Repository, apply_edit, fixed_threshold_retrieve, retrieval_report, retrieve
from .tensor import Tape, Tensor, backward
from .tokens import TokenSeq, decode, encode_answer, encode_text, knowledge_tokens
from .training import EditSample, TrainConfig, edit_loss, info_nce, prompt_learning_loss, train

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "EditSample",
    "EncoderConfig",
    "EncoderStack",
    "FrozenLm",
    "KnowledgeRecord",
    "LmConfig",
    "MetricsReport",
    "Repository",
    "Tape",
    "Tensor",
    "TokenSeq",
    "TrainConfig",
    "ablation_run",
    "adam_step",
    "answer_logits",
    "answer_logprob",
    "apply_edit",
    "backward",
    "decode",
    "edit_loss",
    "encode_answer",
    "encode_knowledge",
    "encode_query",
    "encode_text",
    "exact_match",
    "fixed_threshold_retrieve",
    "generate",
    "info_nce",
    "knowledge_to_prompt",
    "knowledge_tokens",
    "metrics_to_csv",
    "pool_concat",
    "pretrain_lm",
    "prompt_learning_loss",
    "retrieval_report",
    "retrieve",
    "run_lifelong",
    "sentinel_rep",
    "train",
]
