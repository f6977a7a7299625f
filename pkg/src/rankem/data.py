"""Synthetic multilingual corpora with ground-truth semantic ranks, and the
JSONL corpus format.

Meaning lives in a three-level hierarchy (supertopic > topic > paraphrase
group). Every group owns a distribution over *base* token ids; language l
renders base id b as surface id ``l * base_vocab + b``, so languages never
share a surface token.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Optional

import numpy as np

from .encoder import Sentence
from .numerics import make_rng


class DataError(ValueError):
    pass


@dataclass
class SyntheticCorpusSpec:
    num_languages: int = 6
    base_vocab: int = 50
    min_len: int = 12
    max_len: int = 24
    num_supertopics: int = 2
    topics_per_supertopic: int = 5
    groups_per_topic: int = 4
    sentences_per_group: int = 10
    parallel_per_group: int = 10
    head_language_pairs: Optional[list] = None
    noise: float = 0.02
    supertopic_tokens: int = 3
    topic_tokens: int = 2
    group_tokens: int = 4
    # mixture weights of supertopic / topic / group tokens in a group's bag
    level_weights: tuple = (0.15, 0.25, 0.6)

    def __post_init__(self):
        if self.head_language_pairs is None:
            firsts = range(1, max(2, self.num_languages // 2))
            self.head_language_pairs = [(0, l) for l in firsts if l < self.num_languages]
        self.head_language_pairs = [tuple(sorted(int(v) for v in p)) for p in self.head_language_pairs]
        self.level_weights = tuple(float(w) for w in self.level_weights)
        self.validate()

    @property
    def num_topics(self) -> int:
        return self.num_supertopics * self.topics_per_supertopic

    @property
    def num_groups(self) -> int:
        return self.num_topics * self.groups_per_topic

    @property
    def vocab_size(self) -> int:
        return self.num_languages * self.base_vocab

    @property
    def head_languages(self) -> list:
        return sorted({l for p in self.head_language_pairs for l in p})

    @property
    def long_tail_languages(self) -> list:
        head = set(self.head_languages)
        return [l for l in range(self.num_languages) if l not in head]

    def validate(self) -> None:
        if self.num_languages < 2:
            raise DataError("need at least two languages")
        for name in ("num_supertopics", "topics_per_supertopic", "groups_per_topic",
                     "min_len", "sentences_per_group", "supertopic_tokens", "topic_tokens",
                     "group_tokens"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.parallel_per_group < 0:
            raise DataError("parallel_per_group must be >= 0")
        if self.max_len < self.min_len:
            raise DataError("max_len must be >= min_len")
        if not 0.0 <= self.noise <= 1.0:
            raise DataError("noise must lie in [0, 1]")
        if len(self.level_weights) != 3 or min(self.level_weights) < 0 or sum(self.level_weights) <= 0:
            raise DataError("level_weights must be three non-negative weights")
        core = (self.num_supertopics * self.supertopic_tokens + self.num_topics * self.topic_tokens)
        if core + self.group_tokens > self.base_vocab:
            raise DataError(f"base_vocab {self.base_vocab} too small for the token hierarchy "
                            f"(needs {core + self.group_tokens})")
        all_pairs = set(combinations(range(self.num_languages), 2))
        for p in self.head_language_pairs:
            if p not in all_pairs:
                raise DataError(f"head pair {p} is not a pair of distinct valid languages")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["head_language_pairs"] = [list(p) for p in self.head_language_pairs]
        doc["level_weights"] = list(self.level_weights)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SyntheticCorpusSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise DataError(f"unknown corpus spec fields: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class CorpusRecord:
    sentence: Sentence
    group: Optional[int] = None
    topic: Optional[int] = None
    supertopic: Optional[int] = None

    @property
    def language(self) -> int:
        return self.sentence.language

    def to_json(self) -> dict:
        doc = {"lang": self.sentence.language, "tokens": list(self.sentence.tokens)}
        for key in ("group", "topic", "supertopic"):
            val = getattr(self, key)
            if val is not None:
                doc[key] = val
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "CorpusRecord":
        if not isinstance(doc, dict):
            raise DataError("record must be a JSON object")
        lang, tokens = doc.get("lang"), doc.get("tokens")
        if not isinstance(lang, int) or isinstance(lang, bool):
            raise DataError("field 'lang' must be an integer")
        if not isinstance(tokens, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in tokens):
            raise DataError("field 'tokens' must be a list of integers")
        extra = {}
        for key in ("group", "topic", "supertopic"):
            val = doc.get(key)
            if val is not None and (not isinstance(val, int) or isinstance(val, bool)):
                raise DataError(f"field '{key}' must be an integer")
            extra[key] = val
        try:
            sentence = Sentence(tuple(tokens), lang)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        return cls(sentence, **extra)


@dataclass
class SyntheticCorpus:
    spec: SyntheticCorpusSpec
    monolingual: dict = field(default_factory=dict)   # lang -> list[CorpusRecord]
    parallel: list = field(default_factory=list)      # list of (CorpusRecord, CorpusRecord)
    heldout: list = field(default_factory=list)       # one record per (group, language)


class _Hierarchy:
    """Token bags of every paraphrase group, over base ids."""

    def __init__(self, spec: SyntheticCorpusSpec, rng: np.random.Generator):
        self.spec = spec
        perm = rng.permutation(spec.base_vocab)
        pos = 0
        super_sets = []
        for _ in range(spec.num_supertopics):
            super_sets.append(perm[pos:pos + spec.supertopic_tokens])
            pos += spec.supertopic_tokens
        topic_sets = []
        for _ in range(spec.num_topics):
            topic_sets.append(perm[pos:pos + spec.topic_tokens])
            pos += spec.topic_tokens
        pool = np.sort(perm[pos:])
        self.probs = np.zeros((spec.num_groups, spec.base_vocab))
        self.topic_of = np.zeros(spec.num_groups, dtype=np.int64)
        self.super_of = np.zeros(spec.num_groups, dtype=np.int64)
        w_s, w_t, w_g = np.array(spec.level_weights) / sum(spec.level_weights)
        g = 0
        for t in range(spec.num_topics):
            s = t // spec.topics_per_supertopic
            # independent draws: chance collisions are equally likely at every rank
            for _ in range(spec.groups_per_topic):
                own = rng.choice(pool, size=spec.group_tokens, replace=False)
                p = np.zeros(spec.base_vocab)
                p[super_sets[s]] += w_s / len(super_sets[s])
                p[topic_sets[t]] += w_t / len(topic_sets[t])
                p[own] += w_g / len(own)
                p = (1.0 - spec.noise) * p + spec.noise / spec.base_vocab
                self.probs[g] = p / p.sum()
                self.topic_of[g] = t
                self.super_of[g] = s
                g += 1

    def sample(self, rng: np.random.Generator, group: int, language: int) -> CorpusRecord:
        spec = self.spec
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        base = rng.choice(spec.base_vocab, size=length, p=self.probs[group])
        tokens = tuple(int(language * spec.base_vocab + b) for b in base)
        return CorpusRecord(Sentence(tokens, language), group=group,
                            topic=int(self.topic_of[group]), supertopic=int(self.super_of[group]))


def generate(spec: SyntheticCorpusSpec, seed: int) -> SyntheticCorpus:
    spec.validate()
    rng = make_rng(seed)
    hier = _Hierarchy(spec, rng)
    corpus = SyntheticCorpus(spec=spec)
    for lang in range(spec.num_languages):
        corpus.monolingual[lang] = [hier.sample(rng, g, lang)
                                    for g in range(spec.num_groups)
                                    for _ in range(spec.sentences_per_group)]
    for a, b in spec.head_language_pairs:
        for g in range(spec.num_groups):
            for _ in range(spec.parallel_per_group):
                ra, rb = hier.sample(rng, g, a), hier.sample(rng, g, b)
                corpus.parallel.append((ra, rb) if rng.random() < 0.5 else (rb, ra))
    corpus.heldout = [hier.sample(rng, g, lang)
                      for lang in range(spec.num_languages)
                      for g in range(spec.num_groups)]
    return corpus


def expected_counts(spec: SyntheticCorpusSpec) -> dict:
    return {"monolingual_per_language": spec.num_groups * spec.sentences_per_group,
            "parallel": len(spec.head_language_pairs) * spec.num_groups * spec.parallel_per_group,
            "heldout": spec.num_groups * spec.num_languages}


def ground_truth_rank(a: CorpusRecord, b: CorpusRecord, num_ranks: int = 4) -> int:
    """1 same group, 2 same topic, 3 same supertopic, otherwise ``num_ranks``."""
    if num_ranks < 4:
        raise DataError("the hierarchy mapping needs at least 4 ranks")
    for rec in (a, b):
        if rec.group is None or rec.topic is None or rec.supertopic is None:
            raise DataError("record is missing ground-truth hierarchy ids")
    if a.group == b.group:
        return 1
    if a.topic == b.topic:
        return 2
    if a.supertopic == b.supertopic:
        return 3
    return num_ranks


def ground_truth_matrix(left: list, right: list, num_ranks: int = 4) -> np.ndarray:
    """Vectorised :func:`ground_truth_rank` over all ``left x right`` pairs."""
    def ids(records, key):
        vals = [getattr(r, key) for r in records]
        if any(v is None for v in vals):
            raise DataError("record is missing ground-truth hierarchy ids")
        return np.array(vals)

    g = ids(left, "group")[:, None] == ids(right, "group")[None]
    t = ids(left, "topic")[:, None] == ids(right, "topic")[None]
    s = ids(left, "supertopic")[:, None] == ids(right, "supertopic")[None]
    return np.where(g, 1, np.where(t, 2, np.where(s, 3, num_ranks)))


# ---------------------------------------------------------------------------
# JSONL


def save_jsonl(path, records) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")
    os.replace(tmp, path)


def load_jsonl(path) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(CorpusRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, DataError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
    return records


def save_corpus(corpus: SyntheticCorpus, out_dir) -> None:
    """Write a corpus directory: spec, monolingual, line-aligned bitext, held-out."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "spec.json"), "w", encoding="utf-8") as fh:
        json.dump(corpus.spec.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    mono = [r for lang in sorted(corpus.monolingual) for r in corpus.monolingual[lang]]
    save_jsonl(os.path.join(out_dir, "monolingual.jsonl"), mono)
    save_jsonl(os.path.join(out_dir, "parallel.src.jsonl"), [a for a, _ in corpus.parallel])
    save_jsonl(os.path.join(out_dir, "parallel.tgt.jsonl"), [b for _, b in corpus.parallel])
    save_jsonl(os.path.join(out_dir, "heldout.jsonl"), corpus.heldout)


def load_corpus(data_dir) -> SyntheticCorpus:
    spec_path = os.path.join(data_dir, "spec.json")
    if not os.path.exists(spec_path):
        raise DataError(f"missing corpus file {spec_path}")
    with open(spec_path, encoding="utf-8") as fh:
        try:
            spec = SyntheticCorpusSpec.from_json(json.load(fh))
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"{spec_path}: {exc}") from exc
    corpus = SyntheticCorpus(spec=spec)

    def maybe(name):
        path = os.path.join(data_dir, name)
        return load_jsonl(path) if os.path.exists(path) else []

    for rec in maybe("monolingual.jsonl"):
        corpus.monolingual.setdefault(rec.language, []).append(rec)
    src, tgt = maybe("parallel.src.jsonl"), maybe("parallel.tgt.jsonl")
    if len(src) != len(tgt):
        raise DataError("parallel.src.jsonl and parallel.tgt.jsonl differ in length")
    corpus.parallel = list(zip(src, tgt))
    corpus.heldout = maybe("heldout.jsonl")
    return corpus


def training_streams(corpus: SyntheticCorpus):
    """Split a corpus into what training may see.

    Returns ``(parallel, monolingual)``: parallel is a list of Sentence pairs,
    monolingual a flat list of Sentences with every ground-truth id dropped.
    """
    parallel = [(a.sentence, b.sentence) for a, b in corpus.parallel]
    mono = [r.sentence for lang in sorted(corpus.monolingual) for r in corpus.monolingual[lang]]
    return parallel, mono
