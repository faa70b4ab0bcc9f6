"""Byte-level tokenization.

Ids 0..255 are raw UTF-8 bytes; four special ids follow. Sequences are
immutable tuples so they can be cached and compared by value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

BOS = 256
EOS = 257
PAD = 258
SEP = 259
VOCAB_SIZE = 260

_SPECIAL_NAMES = {BOS: "<bos>", EOS: "<eos>", PAD: "<pad>", SEP: "<sep>"}


@dataclass(frozen=True)
class TokenSeq:
    """Immutable token id sequence. PAD may only appear as a trailing run."""

    ids: tuple[int, ...]

    def __post_init__(self) -> None:
        for t in self.ids:
            if not (0 <= t < VOCAB_SIZE):
                raise ValueError(f"token id {t} outside vocabulary of size {VOCAB_SIZE}")
        seen_pad = False
        for t in self.ids:
            if t == PAD:
                seen_pad = True
            elif seen_pad:
                raise ValueError("PAD tokens must form a trailing run")

    def __len__(self) -> int:
        return len(self.ids)

    def text(self) -> str:
        return decode(self.ids)


def encode_text(text: str) -> TokenSeq:
    """UTF-8 bytes of `text`, no specials."""
    return TokenSeq(tuple(text.encode("utf-8")))


def encode_answer(text: str) -> TokenSeq:
    """Answer encoding: UTF-8 bytes followed by EOS so decoding has a stop target."""
    return TokenSeq(tuple(text.encode("utf-8")) + (EOS,))


def decode(ids: Iterable[int]) -> str:
    """Inverse of encode for byte ids; specials render as <bos>/<eos>/<pad>/<sep>."""
    out: list[str] = []
    pending: list[int] = []
    for t in ids:
        if t < 256:
            pending.append(t)
        else:
            if pending:
                out.append(bytes(pending).decode("utf-8", errors="replace"))
                pending = []
            out.append(_SPECIAL_NAMES[t])
    if pending:
        out.append(bytes(pending).decode("utf-8", errors="replace"))
    return "".join(out)


def knowledge_tokens(q: TokenSeq, a: TokenSeq) -> TokenSeq:
    """Knowledge statement: question, SEP, answer."""
    if len(q) == 0 or len(a) == 0:
        raise ValueError("knowledge statement needs non-empty question and answer")
    return TokenSeq(q.ids + (SEP,) + a.ids)
