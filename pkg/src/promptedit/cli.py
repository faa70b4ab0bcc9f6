"""Command-line pipeline: data generation, pretraining, encoder training,
editing, inference, evaluation, ablations, and embedding export.

Every command validates its inputs up front and exits nonzero with a
one-line diagnostic on failure. All randomness flows from --seed.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import data as data_mod
from .config import ConfigError, RunConfig, load_run_config
from .evaluation import MODES, ablation_run, embedding_rows, metrics_to_csv, run_lifelong
from .lm import generate, pretrain_lm
from .repository import Repository, apply_edit, retrieve
from .serialization import load_encoder, load_lm, load_repository, save_encoder, save_lm, save_repository
from .tokens import encode_text
from .training import train


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _parse_checkpoints(text: str) -> list[int]:
    try:
        marks = [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as e:
        raise ValueError(f"bad --checkpoints value {text!r}") from e
    if not marks:
        raise ValueError("empty --checkpoints")
    return marks


def _cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, corpus = data_mod.gen_synthetic(args.n_facts, seed=_seed(args, cfg))
    data_mod.save_dataset(out / "dataset.jsonl", records)
    data_mod.save_corpus(out / "corpus.txt", corpus)
    print(f"wrote {len(records)} records and {len(corpus)} corpus lines to {out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _config(args)
    corpus = data_mod.load_corpus(_require(args.corpus, "corpus"))
    steps = args.steps if args.steps is not None else cfg.pretrain_steps
    lm = pretrain_lm(corpus, cfg.lm, steps=steps, seed=_seed(args, cfg))
    save_lm(args.out, lm)
    print(f"pretrained {lm.num_params()} params for {steps} steps -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _config(args)
    dataset = data_mod.load_dataset(_require(args.dataset, "dataset"))
    lm = load_lm(_require(args.lm, "LM checkpoint"))
    enc_cfg = cfg.encoder
    if args.cpt_count is not None:
        if args.cpt_count < 1:
            raise ValueError("--cpt-count must be positive")
        enc_cfg = type(enc_cfg)(**{**{f: getattr(enc_cfg, f) for f in enc_cfg.__dataclass_fields__}, "l": args.cpt_count})
    train_cfg = cfg.train
    if args.steps is not None:
        train_cfg = type(train_cfg)(**{**{f: getattr(train_cfg, f) for f in train_cfg.__dataclass_fields__}, "max_iterations": args.steps})
    if args.seed is not None:
        train_cfg = type(train_cfg)(**{**{f: getattr(train_cfg, f) for f in train_cfg.__dataclass_fields__}, "seed": args.seed})
    stack = train(dataset, lm, train_cfg, encoder_config=enc_cfg, log_path=args.log)
    save_encoder(args.out, stack)
    print(f"trained encoder ({stack.num_params()} params, l={enc_cfg.l}) -> {args.out}")
    return 0


def _cmd_edit(args) -> int:
    dataset = data_mod.load_dataset(_require(args.dataset, "dataset"))
    stack = load_encoder(_require(args.encoder, "encoder checkpoint"))
    if args.repo is not None:
        repo = load_repository(_require(args.repo, "repository"))
    else:
        repo = Repository.for_stack(stack)
    count = args.count if args.count is not None else len(dataset)
    if not (0 < count <= len(dataset)):
        raise ValueError(f"--count must be in [1, {len(dataset)}]")
    for s in dataset[:count]:
        apply_edit(repo, stack, s.edit[0], s.edit[1])
    save_repository(args.out, repo)
    print(f"repository now holds {len(repo)} records -> {args.out}")
    return 0


def _cmd_infer(args) -> int:
    lm = load_lm(_require(args.lm, "LM checkpoint"))
    q = encode_text(args.query)
    prompt = None
    if not args.no_retrieval and args.repo is not None:
        if args.encoder is None:
            raise ValueError("--repo needs --encoder to embed the query")
        stack = load_encoder(_require(args.encoder, "encoder checkpoint"))
        repo = load_repository(_require(args.repo, "repository"))
        prompt = retrieve(repo, stack, q)
    out = generate(lm, prompt, q, max_new=args.max_new)
    print(out.text())
    return 0


def _cmd_eval(args) -> int:
    dataset = data_mod.load_dataset(_require(args.dataset, "dataset"))
    lm = load_lm(_require(args.lm, "LM checkpoint"))
    stack = load_encoder(_require(args.encoder, "encoder checkpoint"))
    marks = _parse_checkpoints(args.checkpoints)
    reports = run_lifelong(dataset, lm, stack, marks)
    Path(args.out).write_text(metrics_to_csv(reports), encoding="utf-8")
    print(f"wrote {len(reports)} checkpoint rows -> {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    dataset = data_mod.load_dataset(_require(args.dataset, "dataset"))
    lm = load_lm(_require(args.lm, "LM checkpoint"))
    stack = load_encoder(_require(args.encoder, "encoder checkpoint"))
    marks = _parse_checkpoints(args.checkpoints)
    calibration = None
    if args.mode in ("no_ks", "neither") and args.theta_abs is None:
        top = max(marks)
        calibration = dataset[top : top + 50]
        if len(calibration) < 5:
            raise ValueError("need at least 5 dataset records beyond the last checkpoint to calibrate the threshold")
    reports = ablation_run(args.mode, dataset, lm, stack, marks, calibration=calibration, theta_abs=args.theta_abs)
    Path(args.out).write_text(metrics_to_csv(reports), encoding="utf-8")
    print(f"wrote {len(reports)} checkpoint rows ({args.mode}) -> {args.out}")
    return 0


def _cmd_export_embeddings(args) -> int:
    repo = load_repository(_require(args.repo, "repository"))
    stack = None
    samples = None
    if args.dataset is not None:
        if args.encoder is None:
            raise ValueError("--dataset needs --encoder to embed the query probes")
        samples = data_mod.load_dataset(_require(args.dataset, "dataset"))
        stack = load_encoder(_require(args.encoder, "encoder checkpoint"))
    rows = embedding_rows(repo, stack=stack, samples=samples)
    with open(args.out, "w", encoding="utf-8") as fh:
        dim = rows[0][1].shape[0]
        fh.write("label," + ",".join(f"d{i}" for i in range(dim)) + "\n")
        for label, vec in rows:
            fh.write(label + "," + ",".join(f"{x:.8g}" for x in vec) + "\n")
    print(f"wrote {len(rows)} embedding rows -> {args.out}")
    return 0


def _config(args) -> RunConfig:
    return load_run_config(getattr(args, "config", None))


def _seed(args, cfg: RunConfig) -> int:
    return args.seed if args.seed is not None else cfg.seed


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptedit", description="Lifelong editing of a tiny frozen LM via retrieved continuous prompts.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True, seed=True):
        if config:
            p.add_argument("--config", default=None, help="JSON run config")
        if seed:
            p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset and pretraining corpus")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-facts", type=int, default=200)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain and freeze the LM")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("train", help="train the prompt encoder against a frozen LM")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--log", default=None, help="per-step loss CSV")
    p.add_argument("--cpt-count", type=int, default=None, help="override prompt row count l")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("edit", help="apply dataset edits to a repository file")
    common(p, seed=False)
    p.add_argument("--dataset", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--repo", default=None, help="existing repository to extend")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=None, help="number of leading dataset records to apply")
    p.set_defaults(fn=_cmd_edit)

    p = sub.add_parser("infer", help="answer one query, retrieving a prompt if admitted")
    common(p, seed=False)
    p.add_argument("--query", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--encoder", default=None)
    p.add_argument("--repo", default=None)
    p.add_argument("--no-retrieval", action="store_true", help="force the unedited model")
    p.add_argument("--max-new", type=int, default=24)
    p.set_defaults(fn=_cmd_infer)

    p = sub.add_parser("eval", help="lifelong editing metrics CSV")
    common(p, seed=False)
    p.add_argument("--dataset", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--checkpoints", default="1,10,100")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("ablate", help="metrics CSV under an ablation mode")
    common(p, seed=False)
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--dataset", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--checkpoints", default="1,10,100")
    p.add_argument("--theta-abs", type=float, default=None, help="absolute gate threshold (otherwise calibrated)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("export-embeddings", help="repository keys, sentinel, and optional query probes as CSV")
    common(p, config=False, seed=False)
    p.add_argument("--repo", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--encoder", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_export_embeddings)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # single diagnostic line, nonzero exit
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
