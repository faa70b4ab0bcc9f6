"""Lifelong evaluation: exact-match semantics, checkpoint bookkeeping against
a brute-force rebuild oracle, threshold calibration, ablation gating, CSV."""

from __future__ import annotations

import numpy as np
import pytest

from promptedit.encoder import EncoderConfig, EncoderStack
from promptedit.evaluation import (
    MODES,
    MetricsReport,
    ablation_run,
    calibrate_threshold,
    embedding_rows,
    exact_match,
    metrics_to_csv,
    run_lifelong,
)
from promptedit.lm import FrozenLm, LmConfig, generate
from promptedit.repository import Repository, apply_edit, retrieval_report
from promptedit.tokens import EOS, TokenSeq, encode_answer, encode_text, knowledge_tokens
from promptedit.training import EditSample

LM_TINY = LmConfig(d_llm=16, n_layers=1, n_heads=2, context_len=64)
ENC_TINY = EncoderConfig(d_enc=8, enc_layers=1, d_r=6, l=2, c=3, d_llm=16, mlp_hidden=16)
MAX_NEW = 6


@pytest.fixture(scope="module")
def lm():
    return FrozenLm.init(LM_TINY, seed=2).freeze()


@pytest.fixture(scope="module")
def stack():
    return EncoderStack.init(ENC_TINY, seed=4)


def sample(i: int, n_gen: int = 1, n_loc: int = 1) -> EditSample:
    subj = f"s{i}a"
    return EditSample(
        edit=(encode_text(f"Q: {subj} likes? "), encode_answer("fog")),
        generality=[(encode_text(f"v{j} {subj} likes? "), encode_answer("fog")) for j in range(n_gen)],
        locality=[(encode_text(f"Q: z{i}{j} owns? "), encode_answer("oak")) for j in range(n_loc)],
    )


def upto_eos(ids):
    out = []
    for t in ids:
        if t == EOS:
            break
        out.append(t)
    return tuple(out)


def probe_answer(lm, repo, stack, q, mode="full", theta=None, k_ids=None):
    """Independent re-derivation of the gated answer for one query."""
    if len(repo) == 0:
        return generate(lm, None, q, MAX_NEW), None, None
    rep = retrieval_report(repo, stack, q)
    admitted = rep.best_score > theta if mode in ("no_ks", "neither") else rep.admitted
    if not admitted:
        return generate(lm, None, q, MAX_NEW), rep.best_index, False
    if mode in ("no_cpt", "neither"):
        prompt = lm.embed_tokens(list(k_ids[rep.best_index])).data
    else:
        prompt = repo.records[rep.best_index].value
    return generate(lm, prompt, q, MAX_NEW), rep.best_index, True


def oracle_metrics(dataset, lm, stack, t_mark, mode="full", theta=None):
    """Rebuild the repository from scratch and recount every probe."""
    repo = Repository.for_stack(stack)
    for s in dataset[:t_mark]:
        apply_edit(repo, stack, s.edit[0], s.edit[1])
    k_ids = [knowledge_tokens(s.edit[0], s.edit[1]).ids for s in dataset]
    counts = {"rel": [0, 0], "gen": [0, 0], "loc": [0, 0]}
    gate_ok, probes = 0, 0
    for tau in range(t_mark):
        s = dataset[tau]
        for q, a in [s.edit]:
            got, best, adm = probe_answer(lm, repo, stack, q, mode, theta, k_ids)
            counts["rel"][0] += upto_eos(got.ids) == upto_eos(a.ids)
            counts["rel"][1] += 1
            gate_ok += bool(adm) and repo.records[best].insert_index == tau
            probes += 1
        for q, a in s.generality:
            got, best, adm = probe_answer(lm, repo, stack, q, mode, theta, k_ids)
            counts["gen"][0] += upto_eos(got.ids) == upto_eos(a.ids)
            counts["gen"][1] += 1
            gate_ok += bool(adm) and repo.records[best].insert_index == tau
            probes += 1
        for q, _ in s.locality:
            got, best, adm = probe_answer(lm, repo, stack, q, mode, theta, k_ids)
            counts["loc"][0] += got.ids == generate(lm, None, q, MAX_NEW).ids
            counts["loc"][1] += 1
            gate_ok += not adm
            probes += 1
    rel = counts["rel"][0] / counts["rel"][1]
    gen = counts["gen"][0] / counts["gen"][1]
    loc = counts["loc"][0] / counts["loc"][1]
    return MetricsReport(t_mark, rel, gen, loc, (rel + gen + loc) / 3.0, gate_ok / probes)


def test_exact_match_agrees_with_manual_probe(lm, stack):
    repo = Repository.for_stack(stack)
    ds = [sample(i) for i in range(3)]
    for s in ds:
        apply_edit(repo, stack, s.edit[0], s.edit[1])
    for s in ds:
        for q, a in [s.edit] + s.generality + s.locality:
            got, _, _ = probe_answer(lm, repo, stack, q)
            want = upto_eos(got.ids) == upto_eos(a.ids)
            assert exact_match(lm, repo, stack, q, a, max_new=MAX_NEW) == want


def test_exact_match_empty_repo_uses_plain_model(lm, stack):
    repo = Repository.for_stack(stack)
    q = encode_text("Q: aa bb? ")
    out = generate(lm, None, q, MAX_NEW)
    assert exact_match(lm, repo, stack, q, TokenSeq(out.ids), max_new=MAX_NEW)


@pytest.mark.parametrize("mode,theta", [("full", None), ("no_cpt", None), ("no_ks", 0.0), ("neither", 0.0)])
def test_run_lifelong_matches_bruteforce_oracle(lm, stack, mode, theta):
    ds = [sample(i, n_gen=2, n_loc=2) for i in range(5)]
    marks = [1, 3, 5]
    got = run_lifelong(ds, lm, stack, marks, mode=mode, theta_abs=theta, max_new=MAX_NEW)
    assert [r.edits_applied for r in got] == marks
    for r, t in zip(got, marks):
        want = oracle_metrics(ds, lm, stack, t, mode, theta)
        assert r.reliability == pytest.approx(want.reliability, abs=0)
        assert r.generality == pytest.approx(want.generality, abs=0)
        assert r.locality == pytest.approx(want.locality, abs=0)
        assert r.average == pytest.approx(want.average, abs=1e-12)
        assert r.retrieval_hit_rate == pytest.approx(want.retrieval_hit_rate, abs=0)


def test_run_lifelong_zero_checkpoint_row(lm, stack):
    ds = [sample(i) for i in range(2)]
    got = run_lifelong(ds, lm, stack, [0, 2], max_new=MAX_NEW)
    first = got[0]
    assert first == MetricsReport(0, None, None, 1.0, None, None)
    assert got[1].edits_applied == 2


def test_run_lifelong_checkpoint_validation(lm, stack):
    ds = [sample(0)]
    with pytest.raises(ValueError):
        run_lifelong(ds, lm, stack, [])
    with pytest.raises(ValueError):
        run_lifelong(ds, lm, stack, [2])
    with pytest.raises(ValueError):
        run_lifelong(ds, lm, stack, [-1])
    with pytest.raises(ValueError):
        run_lifelong(ds, lm, stack, [1], mode="bogus")


def test_run_lifelong_no_ks_requires_theta(lm, stack):
    with pytest.raises(ValueError):
        run_lifelong([sample(0)], lm, stack, [1], mode="no_ks", theta_abs=None)


def test_no_ks_infinite_thresholds(lm, stack):
    ds = [sample(i) for i in range(3)]
    never = run_lifelong(ds, lm, stack, [3], mode="no_ks", theta_abs=float("inf"), max_new=MAX_NEW)[0]
    # nothing admitted: locality is perfect and every non-locality gate probe misses
    assert never.locality == 1.0
    always = run_lifelong(ds, lm, stack, [3], mode="no_ks", theta_abs=float("-inf"), max_new=MAX_NEW)[0]
    n_loc = sum(len(s.locality) for s in ds)
    n_all = sum(1 + len(s.generality) + len(s.locality) for s in ds)
    assert always.retrieval_hit_rate <= (n_all - n_loc) / n_all


def test_calibrate_threshold_maximizes_candidate_accuracy(stack):
    ds = [sample(i) for i in range(4)]
    theta = calibrate_threshold(stack, ds)
    repo = Repository.for_stack(stack)
    for s in ds:
        apply_edit(repo, stack, s.edit[0], s.edit[1])
    pos, neg = [], []
    for s in ds:
        for q, _ in [s.edit] + s.generality:
            pos.append(retrieval_report(repo, stack, q).best_score)
        for q, _ in s.locality:
            neg.append(retrieval_report(repo, stack, q).best_score)

    def acc(th):
        return (sum(x > th for x in pos) + sum(x <= th for x in neg)) / (len(pos) + len(neg))

    grid = sorted(set(pos + neg))
    cands = [grid[0] - 1.0] + [(a + b) / 2 for a, b in zip(grid, grid[1:])] + [grid[-1] + 1.0]
    assert acc(theta) == max(acc(c) for c in cands)
    with pytest.raises(ValueError):
        calibrate_threshold(stack, [])


def test_ablation_run_calibrates_when_needed(lm, stack):
    ds = [sample(i) for i in range(3)]
    cal = [sample(i + 10) for i in range(3)]
    got = ablation_run("no_ks", ds, lm, stack, [3], calibration=cal)
    assert got[0].edits_applied == 3
    with pytest.raises(ValueError):
        ablation_run("no_ks", ds, lm, stack, [3])
    with pytest.raises(ValueError):
        ablation_run("bogus", ds, lm, stack, [3])
    explicit = ablation_run("neither", ds, lm, stack, [3], theta_abs=1e9)
    assert explicit[0].locality == 1.0


def test_metrics_to_csv_format():
    reports = [
        MetricsReport(0, None, None, 1.0, None, None),
        MetricsReport(2, 0.5, 0.25, 1.0, 7.0 / 12.0, 0.75),
    ]
    got = metrics_to_csv(reports)
    want = "edits,rel,gen,loc,avg,hit_rate\n0,,,1.000000,,\n2,0.500000,0.250000,1.000000,0.583333,0.750000\n"
    assert got == want


def test_embedding_rows_labels(stack):
    repo = Repository.for_stack(stack)
    ds = [sample(i, n_gen=2, n_loc=1) for i in range(2)]
    for s in ds:
        apply_edit(repo, stack, s.edit[0], s.edit[1])
    rows = embedding_rows(repo, stack, ds)
    labels = [lbl for lbl, _ in rows]
    assert labels[:3] == ["key_0", "key_1", "sentinel"]
    assert "edit_q_0" in labels and "gen_q_1_1" in labels and "loc_q_0_0" in labels
    assert all(v.dtype == np.float64 for _, v in rows)
    with pytest.raises(ValueError):
        embedding_rows(repo, None, ds)
    bare = embedding_rows(repo)
    assert [lbl for lbl, _ in bare] == ["key_0", "key_1", "sentinel"]


def test_modes_tuple_is_stable():
    assert MODES == ("full", "no_cpt", "no_ks", "neither")
