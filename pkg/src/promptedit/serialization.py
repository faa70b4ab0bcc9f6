"""RCP1 binary container for checkpoints and repositories.

Layout (all integers little-endian u32, floats little-endian f32):
  magic "RCP1" | version | kind | config-JSON (length-prefixed)
  kind lm/encoder: tensor count, then per tensor name, ndim, dims, raw data
  kind repository: record count, then per record insert_index, source_text,
  key[d_r], value[l*d_llm]; a trailing sentinel key closes the file.
Every read is length-checked; a short or malformed file raises CheckpointError.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, EncoderStack
from .lm import FrozenLm, LmConfig
from .repository import KnowledgeRecord, Repository

MAGIC = b"RCP1"
VERSION = 1
KIND_LM = 1
KIND_ENCODER = 2
KIND_REPOSITORY = 3


class CheckpointError(Exception):
    pass


def _u32(x: int) -> bytes:
    return struct.pack("<I", x)


def _blob(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated file")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("invalid UTF-8 in container") from e

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").copy()

    def done(self) -> None:
        if self.pos != len(self.raw):
            raise CheckpointError("trailing bytes after container payload")


def _header(kind: int, config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _u32(VERSION) + _u32(kind) + _u32(len(cfg)) + cfg


def _read_header(r: _Reader, expect_kind: int) -> dict:
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic; not an RCP1 file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    kind = r.u32()
    if kind != expect_kind:
        raise CheckpointError(f"container kind {kind} does not match expected {expect_kind}")
    try:
        cfg = json.loads(r.text())
    except json.JSONDecodeError as e:
        raise CheckpointError("invalid config block") from e
    if not isinstance(cfg, dict):
        raise CheckpointError("config block must be a JSON object")
    return cfg


def _write_tensors(params: dict) -> bytes:
    out = [_u32(len(params))]
    for name, p in params.items():
        nb = name.encode("utf-8")
        out.append(_u32(len(nb)) + nb + _u32(p.data.ndim))
        for d in p.data.shape:
            out.append(_u32(d))
        out.append(_blob(p.data))
    return b"".join(out)


def _read_tensors(r: _Reader, params: dict) -> None:
    count = r.u32()
    if count != len(params):
        raise CheckpointError(f"tensor count {count} does not match model ({len(params)})")
    for _ in range(count):
        name = r.text()
        if name not in params:
            raise CheckpointError(f"unknown tensor {name!r}")
        target = params[name]
        ndim = r.u32()
        shape = tuple(r.u32() for _ in range(ndim))
        if shape != target.data.shape:
            raise CheckpointError(f"tensor {name!r} shape {shape} does not match {target.data.shape}")
        target.data[...] = r.f32(int(np.prod(shape, dtype=np.int64))).reshape(shape)


def save_lm(path: str | Path, lm: FrozenLm) -> None:
    cfg = {
        "vocab_size": lm.config.vocab_size,
        "d_llm": lm.config.d_llm,
        "n_layers": lm.config.n_layers,
        "n_heads": lm.config.n_heads,
        "context_len": lm.config.context_len,
    }
    Path(path).write_bytes(_header(KIND_LM, cfg) + _write_tensors(lm.params))


def load_lm(path: str | Path) -> FrozenLm:
    r = _Reader(Path(path).read_bytes())
    cfg = _read_header(r, KIND_LM)
    try:
        config = LmConfig(**cfg)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"bad LM config: {e}") from e
    lm = FrozenLm.init(config, seed=0)
    _read_tensors(r, lm.params)
    r.done()
    return lm.freeze()


def save_encoder(path: str | Path, stack: EncoderStack) -> None:
    c = stack.config
    cfg = {
        "d_enc": c.d_enc,
        "enc_layers": c.enc_layers,
        "d_r": c.d_r,
        "l": c.l,
        "c": c.c,
        "d_llm": c.d_llm,
        "mlp_hidden": c.mlp_hidden,
    }
    Path(path).write_bytes(_header(KIND_ENCODER, cfg) + _write_tensors(stack.params))


def load_encoder(path: str | Path) -> EncoderStack:
    r = _Reader(Path(path).read_bytes())
    cfg = _read_header(r, KIND_ENCODER)
    try:
        config = EncoderConfig(**cfg)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"bad encoder config: {e}") from e
    stack = EncoderStack.init(config, seed=0)
    _read_tensors(r, stack.params)
    r.done()
    return stack


def save_repository(path: str | Path, repo: Repository) -> None:
    cfg = {"d_r": repo.d_r, "l": repo.l, "d_llm": repo.d_llm}
    out = [_header(KIND_REPOSITORY, cfg), _u32(len(repo.records))]
    for rec in repo.records:
        tb = rec.source_text.encode("utf-8")
        out.append(_u32(rec.insert_index) + _u32(len(tb)) + tb)
        out.append(_blob(rec.key))
        out.append(_blob(rec.value))
    out.append(_blob(repo.sentinel))
    Path(path).write_bytes(b"".join(out))


def load_repository(path: str | Path) -> Repository:
    r = _Reader(Path(path).read_bytes())
    cfg = _read_header(r, KIND_REPOSITORY)
    for key in ("d_r", "l", "d_llm"):
        if key not in cfg or not isinstance(cfg[key], int) or cfg[key] < 1:
            raise CheckpointError(f"bad repository config field {key!r}")
    d_r, l, d_llm = cfg["d_r"], cfg["l"], cfg["d_llm"]
    count = r.u32()
    records = []
    for i in range(count):
        insert_index = r.u32()
        if insert_index != i:
            raise CheckpointError(f"record {i} carries insert_index {insert_index}")
        text = r.text()
        key = r.f32(d_r)
        value = r.f32(l * d_llm).reshape(l, d_llm)
        records.append(KnowledgeRecord(key=key, value=value, source_text=text, insert_index=insert_index))
    sentinel = r.f32(d_r)
    r.done()
    return Repository(d_r=d_r, l=l, d_llm=d_llm, sentinel=sentinel, records=records)
