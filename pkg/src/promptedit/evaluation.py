"""Lifelong editing metrics.

Edits are applied sequentially; at each requested checkpoint every edit seen
so far is re-probed. Reliability and generality are exact-match rates on the
edit and paraphrase queries; locality is the fraction of locality probes
whose greedy output still equals the unedited model's output. Ablation modes
swap out the continuous prompt (no_cpt: word embeddings of the knowledge
statement) or the sentinel gate (no_ks: one absolute score threshold).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderStack
from .lm import FrozenLm, generate
from .repository import Repository, apply_edit, retrieval_report
from .tokens import EOS, TokenSeq, knowledge_tokens
from .training import EditSample

MODES = ("full", "no_cpt", "no_ks", "neither")
ANSWER_MAX_NEW = 24


@dataclass
class MetricsReport:
    edits_applied: int
    reliability: float | None
    generality: float | None
    locality: float | None
    average: float | None
    retrieval_hit_rate: float | None


def _upto_eos(ids: tuple[int, ...]) -> tuple[int, ...]:
    out = []
    for t in ids:
        if t == EOS:
            break
        out.append(t)
    return tuple(out)


def _gate(repo: Repository, stack: EncoderStack, q: TokenSeq, mode: str, theta_abs: float | None):
    """(best record position, admitted) under the mode's gate; None on empty repo."""
    if len(repo) == 0:
        return None
    rep = retrieval_report(repo, stack, q)
    if mode in ("no_ks", "neither"):
        if theta_abs is None:
            raise ValueError("absolute-threshold modes need theta_abs")
        return rep.best_index, rep.best_score > theta_abs
    return rep.best_index, rep.admitted


def _prompt_for(lm: FrozenLm, repo: Repository, mode: str, best: int, k_ids: list[tuple[int, ...]]) -> np.ndarray:
    if mode in ("no_cpt", "neither"):
        return lm.embed_tokens(list(k_ids[best])).data
    return repo.records[best].value


def _answer(
    lm: FrozenLm,
    repo: Repository,
    stack: EncoderStack,
    q: TokenSeq,
    mode: str,
    theta_abs: float | None,
    k_ids: list[tuple[int, ...]],
    max_new: int,
) -> tuple[TokenSeq, tuple[int, bool] | None]:
    gate = _gate(repo, stack, q, mode, theta_abs)
    if gate is None or not gate[1]:
        return generate(lm, None, q, max_new), gate
    prompt = _prompt_for(lm, repo, mode, gate[0], k_ids)
    return generate(lm, prompt, q, max_new), gate


def exact_match(lm: FrozenLm, repo: Repository, stack: EncoderStack, q: TokenSeq, a: TokenSeq, max_new: int = ANSWER_MAX_NEW) -> bool:
    """Retrieve, greedy-decode, compare to the target answer up to EOS."""
    got, _ = _answer(lm, repo, stack, q, "full", None, [], max_new)
    return _upto_eos(got.ids) == _upto_eos(a.ids)


def run_lifelong(
    dataset: list[EditSample],
    lm: FrozenLm,
    stack: EncoderStack,
    checkpoints: list[int],
    mode: str = "full",
    theta_abs: float | None = None,
    max_new: int = ANSWER_MAX_NEW,
) -> list[MetricsReport]:
    """Apply dataset edits in order, reporting metrics at each checkpoint."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    marks = sorted(set(checkpoints))
    if not marks:
        raise ValueError("no checkpoints requested")
    if marks[0] < 0 or marks[-1] > len(dataset):
        raise ValueError("checkpoints must lie in [0, len(dataset)]")
    base_out: dict[tuple[int, ...], tuple[int, ...]] = {}
    for s in dataset[: marks[-1]]:
        for q_l, _ in s.locality:
            if q_l.ids not in base_out:
                base_out[q_l.ids] = generate(lm, None, q_l, max_new).ids
    repo = Repository.for_stack(stack)
    k_ids = [knowledge_tokens(s.edit[0], s.edit[1]).ids for s in dataset[: marks[-1]]]
    reports: list[MetricsReport] = []
    if marks[0] == 0:
        reports.append(MetricsReport(0, None, None, 1.0, None, None))
        marks = marks[1:]
    for t in range(1, (marks[-1] if marks else 0) + 1):
        q_e, a_e = dataset[t - 1].edit
        apply_edit(repo, stack, q_e, a_e)
        if t not in marks:
            continue
        rel_hits, gen_hits, loc_hits, gate_hits, probes = 0, 0, 0, 0, 0
        rel_n, gen_n, loc_n = 0, 0, 0
        for tau in range(t):
            s = dataset[tau]
            for kind, pairs in (("rel", [s.edit]), ("gen", s.generality), ("loc", s.locality)):
                for q, a in pairs:
                    got, gate = _answer(lm, repo, stack, q, mode, theta_abs, k_ids, max_new)
                    admitted = gate is not None and gate[1]
                    on_target = admitted and repo.records[gate[0]].insert_index == tau
                    probes += 1
                    if kind == "loc":
                        loc_n += 1
                        loc_hits += got.ids == base_out[q.ids]
                        gate_hits += not admitted
                    else:
                        ok = _upto_eos(got.ids) == _upto_eos(a.ids)
                        gate_hits += on_target
                        if kind == "rel":
                            rel_n += 1
                            rel_hits += ok
                        else:
                            gen_n += 1
                            gen_hits += ok
        rel = rel_hits / rel_n
        gen = gen_hits / gen_n
        loc = loc_hits / loc_n
        reports.append(MetricsReport(t, rel, gen, loc, (rel + gen + loc) / 3.0, gate_hits / probes))
    return reports


def calibrate_threshold(stack: EncoderStack, samples: list[EditSample]) -> float:
    """Absolute gate threshold maximizing admit/reject accuracy on held-out samples.

    Builds a throwaway repository from the samples' edits; edit and
    generality probes should be admitted, locality probes rejected.
    """
    if not samples:
        raise ValueError("calibration needs at least one sample")
    repo = Repository.for_stack(stack)
    for s in samples:
        apply_edit(repo, stack, s.edit[0], s.edit[1])
    pos, neg = [], []
    for s in samples:
        for q, _ in [s.edit] + list(s.generality):
            pos.append(retrieval_report(repo, stack, q).best_score)
        for q, _ in s.locality:
            neg.append(retrieval_report(repo, stack, q).best_score)
    scores = sorted(set(pos + neg))
    candidates = [scores[0] - 1.0]
    candidates += [(a + b) / 2.0 for a, b in zip(scores, scores[1:])]
    candidates.append(scores[-1] + 1.0)
    best_theta, best_acc = candidates[0], -1.0
    total = len(pos) + len(neg)
    for theta in candidates:
        acc = (sum(s > theta for s in pos) + sum(s <= theta for s in neg)) / total
        if acc > best_acc:
            best_theta, best_acc = theta, acc
    return float(best_theta)


def ablation_run(
    mode: str,
    dataset: list[EditSample],
    lm: FrozenLm,
    stack: EncoderStack,
    checkpoints: list[int],
    calibration: list[EditSample] | None = None,
    theta_abs: float | None = None,
) -> list[MetricsReport]:
    """run_lifelong under an ablation mode; calibrates theta_abs when needed."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode in ("no_ks", "neither") and theta_abs is None:
        if calibration is None:
            raise ValueError("no_ks/neither need calibration samples or an explicit theta_abs")
        theta_abs = calibrate_threshold(stack, calibration)
    return run_lifelong(dataset, lm, stack, checkpoints, mode=mode, theta_abs=theta_abs)


def metrics_to_csv(reports: list[MetricsReport]) -> str:
    """Deterministic CSV; absent metrics are empty fields."""
    def fmt(x: float | None) -> str:
        return "" if x is None else f"{x:.6f}"

    lines = ["edits,rel,gen,loc,avg,hit_rate"]
    for r in reports:
        lines.append(
            f"{r.edits_applied},{fmt(r.reliability)},{fmt(r.generality)},{fmt(r.locality)},"
            f"{fmt(r.average)},{fmt(r.retrieval_hit_rate)}"
        )
    return "\n".join(lines) + "\n"


def embedding_rows(repo: Repository, stack: EncoderStack | None = None, samples: list[EditSample] | None = None):
    """(label, vector) pairs for external visualization: keys, sentinel, query probes."""
    from .encoder import encode_query

    rows = [(f"key_{rec.insert_index}", rec.key.astype(np.float64)) for rec in repo.records]
    rows.append(("sentinel", repo.sentinel.astype(np.float64)))
    if samples is not None:
        if stack is None:
            raise ValueError("query embeddings need the encoder")
        for i, s in enumerate(samples):
            rows.append((f"edit_q_{i}", encode_query(stack, s.edit[0]).data.astype(np.float64)))
            for j, (q, _) in enumerate(s.generality):
                rows.append((f"gen_q_{i}_{j}", encode_query(stack, q).data.astype(np.float64)))
            for j, (q, _) in enumerate(s.locality):
                rows.append((f"loc_q_{i}_{j}", encode_query(stack, q).data.astype(np.float64)))
    return rows
