"""Synthetic counterfactual editing data.

Facts are (subject, relation, object) triples rendered through fixed
templates. The pretraining corpus states every original fact, in the
canonical form and in every paraphrase form, so question formats are
familiar to the model; each edit swaps in a different object from the same
pool, so edits always contradict the pretrained model. Generality probes
are paraphrase templates of the edit query; locality probes are facts
about subjects no edit ever mentions.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tokens import TokenSeq, encode_answer, encode_text
from .training import EditSample

RELATIONS = ["likes", "owns", "visits", "fears", "plays", "eats", "paints", "studies", "builds", "grows"]

OBJECTS = [
    "amber", "basil", "cedar", "coral", "delta", "ebony", "fjord", "grape",
    "hazel", "ivory", "jade", "kiwi", "lemon", "mango", "navy", "olive",
    "pearl", "quartz", "rose", "slate", "topaz", "umber", "violet", "wheat",
    "yarn", "zinc", "apple", "birch", "cloud", "dune", "fern", "glass",
    "honey", "iris", "jet", "kelp", "lava", "moss", "night", "oak",
]

_CONSONANTS = "bcdfglmnprstvz"
_VOWELS = "aeiou"


def _subject(rng: np.random.Generator) -> str:
    parts = []
    for _ in range(3):
        parts.append(_CONSONANTS[int(rng.integers(len(_CONSONANTS)))])
        parts.append(_VOWELS[int(rng.integers(len(_VOWELS)))])
    return "".join(parts)


def canonical_query(subject: str, relation: str) -> str:
    return f"Q: {subject} {relation}? "


def paraphrase_queries(subject: str, relation: str) -> list[str]:
    return [
        f"Tell me, {subject} {relation}? ",
        f"answer this: {subject} {relation}? ",
    ]


def gen_synthetic(n_facts: int, seed: int, locality_per_fact: int = 2) -> tuple[list[dict], list[str]]:
    """Build n_facts edit records plus the pretraining corpus lines.

    Returns (records, corpus). Records follow the dataset JSON schema; corpus
    lines state the original object for every edit fact and locality fact.
    """
    if n_facts < 1:
        raise ValueError("n_facts must be positive")
    rng = np.random.default_rng(seed)
    n_loc_facts = max(4, n_facts // 2)
    subjects: list[str] = []
    seen = set()
    while len(subjects) < n_facts + n_loc_facts:
        s = _subject(rng)
        if s not in seen:
            seen.add(s)
            subjects.append(s)
    edit_subjects = subjects[:n_facts]
    loc_subjects = subjects[n_facts:]

    loc_facts = []
    for s in loc_subjects:
        rel = RELATIONS[int(rng.integers(len(RELATIONS)))]
        obj = OBJECTS[int(rng.integers(len(OBJECTS)))]
        loc_facts.append((s, rel, obj))

    records: list[dict] = []
    corpus: list[str] = []
    for s in edit_subjects:
        rel = RELATIONS[int(rng.integers(len(RELATIONS)))]
        orig = OBJECTS[int(rng.integers(len(OBJECTS)))]
        new = orig
        while new == orig:
            new = OBJECTS[int(rng.integers(len(OBJECTS)))]
        corpus.append(canonical_query(s, rel) + orig)
        for p in paraphrase_queries(s, rel):
            corpus.append(p + orig)
        loc_idx = rng.choice(len(loc_facts), size=min(locality_per_fact, len(loc_facts)), replace=False)
        locality = []
        for i in loc_idx:
            ls, lrel, lobj = loc_facts[int(i)]
            locality.append({"q": canonical_query(ls, lrel), "a": lobj})
        records.append(
            {
                "edit": {"q": canonical_query(s, rel), "a": new},
                "generality": [{"q": p, "a": new} for p in paraphrase_queries(s, rel)],
                "locality": locality,
            }
        )
    for ls, lrel, lobj in loc_facts:
        corpus.append(canonical_query(ls, lrel) + lobj)
    return records, corpus


def save_dataset(path: str | Path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def save_corpus(path: str | Path, lines: list[str]) -> None:
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _pair(obj: dict, where: str) -> tuple[TokenSeq, TokenSeq]:
    if not isinstance(obj, dict) or "q" not in obj or "a" not in obj:
        raise ValueError(f"{where}: expected an object with 'q' and 'a'")
    q, a = obj["q"], obj["a"]
    if not isinstance(q, str) or not isinstance(a, str) or not q or not a:
        raise ValueError(f"{where}: 'q' and 'a' must be non-empty strings")
    return encode_text(q), encode_answer(a)


def load_dataset(path: str | Path) -> list[EditSample]:
    """Parse and validate the JSONL dataset; answers gain a trailing EOS."""
    samples: list[EditSample] = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"line {n}: invalid JSON ({e})") from e
            for key in ("edit", "generality", "locality"):
                if key not in rec:
                    raise ValueError(f"line {n}: missing '{key}'")
            if not rec["generality"] or not rec["locality"]:
                raise ValueError(f"line {n}: generality and locality must be non-empty")
            samples.append(
                EditSample(
                    edit=_pair(rec["edit"], f"line {n} edit"),
                    generality=[_pair(p, f"line {n} generality") for p in rec["generality"]],
                    locality=[_pair(p, f"line {n} locality") for p in rec["locality"]],
                )
            )
    if not samples:
        raise ValueError("dataset is empty")
    return samples


def load_corpus(path: str | Path) -> list[TokenSeq]:
    """Corpus lines as token sequences with a trailing EOS each."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln]
    if not lines:
        raise ValueError("corpus is empty")
    return [encode_answer(ln) for ln in lines]
