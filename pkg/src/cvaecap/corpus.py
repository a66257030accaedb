"""Synthetic scene-description corpus.

Each scene holds 1-3 object categories, five template-grammar captions, a
feature vector derived from its categories, and (for val/test) a noisy
detector output used as the test-time cluster vector.

On-disk layout (one directory per corpus, format version 1)::

    train.jsonl / val.jsonl / test.jsonl
        line 1: {"format": "cvaecap-corpus", "version": 1, "config": {...}}
        then one scene per line:
        {"id", "split", "categories", "detected", "feat", "references"}
    vocab.txt   one token per line; index = line number (0-based)
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .priors import ClusterVector
from .vocab import Vocabulary

FORMAT = "cvaecap-corpus"
VERSION = 1
FEATURE_DIM = 16
SPLITS = ("train", "val", "test")

GLUE = frozenset("a the and with next to near on in at by there is along down past above of".split())


@dataclass(frozen=True)
class Category:
    name: str
    nouns: tuple
    verbs: tuple  # verb phrases, each a tuple of words
    attrs: tuple

    def words(self):
        ws = set(self.nouns) | set(self.attrs) | {w for vp in self.verbs for w in vp}
        return ws - GLUE


def _cat(name, nouns, verbs, attrs):
    return Category(name, tuple(nouns.split()), tuple(tuple(v.split()) for v in verbs), tuple(attrs.split()))


DEFAULT_LEXICON = (
    _cat("dog", "dog puppy hound", ["running on grass", "fetching stick"], "brown fluffy"),
    _cat("cat", "cat kitten", ["sleeping on sofa", "licking paw"], "black striped"),
    _cat("car", "car sedan taxi", ["parked on street", "driving down road"], "red shiny"),
    _cat("person", "man woman person boy", ["walking along sidewalk", "smiling at camera"], "young tall"),
    _cat("boat", "boat sailboat canoe", ["floating in water", "docked at harbor"], "white wooden"),
    _cat("pizza", "pizza slice", ["sitting on plate", "covered with cheese"], "hot cheesy"),
    _cat("chair", "chair stool seat", ["standing in corner", "placed by table"], "empty metal"),
    _cat("kite", "kite glider", ["flying in sky", "soaring above beach"], "colorful large"),
    _cat("horse", "horse pony stallion", ["grazing in field", "galloping past fence"], "gray wild"),
    _cat("bird", "bird parrot pigeon", ["perched on branch", "eating seeds"], "small green"),
)

CONNECTORS = (("and", "a"), ("next", "to", "a"), ("near", "a"), ("with", "a"))


def check_lexicon(lexicon):
    """Category word sets must be pairwise disjoint and free of glue words in nouns."""
    seen = {}
    for cat in lexicon:
        if not 2 <= len(cat.nouns) <= 4 or not 1 <= len(cat.verbs) <= 2 or not 1 <= len(cat.attrs) <= 2:
            raise ValueError(f"category {cat.name}: lexicon sizes out of range")
        if GLUE & set(cat.nouns):
            raise ValueError(f"category {cat.name}: noun collides with glue words")
        for w in cat.words():
            if w in seen:
                raise ValueError(f"word {w!r} shared by {seen[w]} and {cat.name}")
            seen[w] = cat.name


check_lexicon(DEFAULT_LEXICON)


@dataclass
class SceneRecord:
    id: int
    split: str
    categories: List[int]
    feat: np.ndarray
    references: List[str]
    detected: Optional[List[int]] = field(default=None)

    def to_json(self):
        return {"id": self.id, "split": self.split, "categories": self.categories,
                "detected": self.detected, "feat": self.feat.tolist(), "references": self.references}

    @classmethod
    def from_json(cls, d):
        return cls(d["id"], d["split"], list(d["categories"]), np.array(d["feat"], dtype=np.float64),
                   list(d["references"]), None if d.get("detected") is None else list(d["detected"]))


@dataclass
class CorpusSplit:
    train: List[SceneRecord]
    val: List[SceneRecord]
    test: List[SceneRecord]
    vocab: Vocabulary
    K: int
    config: dict = field(default_factory=dict)

    def split(self, name):
        return getattr(self, name)

    def scene(self, scene_id):
        for name in SPLITS:
            for s in self.split(name):
                if s.id == scene_id:
                    return s
        raise KeyError(f"no scene with id {scene_id}")


def cluster_vector_from_labels(labels, K):
    labels = sorted(set(labels))
    if not labels:
        raise ValueError("empty label set")
    if labels[0] < 0 or labels[-1] >= K:
        raise ValueError(f"labels {labels} out of range for K={K}")
    w = np.zeros(K)
    w[labels] = 1.0 / len(labels)
    return ClusterVector(w)


def simulate_detector(true_categories, miss_rate, false_rate, rng, K):
    if not (0 <= miss_rate < 1 and 0 <= false_rate < 1):
        raise ValueError("detector rates must lie in [0, 1)")
    true = sorted(set(true_categories))
    keep = rng.uniform(size=len(true)) >= miss_rate
    extra = rng.uniform(size=K) < false_rate
    out = {k for k, kept in zip(true, keep) if kept}
    out |= {k for k in range(K) if extra[k] and k not in true}
    if not out:
        out = {true[-1]}
    return sorted(out)


def _noun_phrase(cat, rng, with_attr_prob=0.4):
    words = []
    if rng.uniform() < with_attr_prob:
        words.append(cat.attrs[rng.integers(len(cat.attrs))])
    words.append(cat.nouns[rng.integers(len(cat.nouns))])
    return words


def generate_caption(categories, lexicon, rng):
    """One caption mentioning a random nonempty ordered subset of ``categories``."""
    cats = list(categories)
    n_mention = int(rng.integers(1, len(cats) + 1))
    order = rng.permutation(len(cats))[:n_mention]
    first = lexicon[cats[order[0]]]
    words = []
    if rng.uniform() < 0.2:
        words += ["there", "is"]
    words.append("a" if rng.uniform() < 0.6 else "the")
    words += _noun_phrase(first, rng)
    if rng.uniform() < 0.7:
        words += list(first.verbs[rng.integers(len(first.verbs))])
    for j in order[1:]:
        words += list(CONNECTORS[rng.integers(len(CONNECTORS))])
        words += _noun_phrase(lexicon[cats[j]], rng)
    return " ".join(words)


def generate_corpus(K=8, n_train=2000, n_val=200, n_test=200, seed=0,
                    miss_rate=0.1, false_rate=0.02, lexicon=DEFAULT_LEXICON, n_refs=5):
    if not 2 <= K <= len(lexicon):
        raise ValueError(f"K must be in [2, {len(lexicon)}]")
    if min(n_train, n_val, n_test) < 1:
        raise ValueError("split sizes must be >= 1")
    rng = np.random.default_rng(seed)
    lex = lexicon[:K]
    proj = rng.standard_normal((K, FEATURE_DIM)) / np.sqrt(FEATURE_DIM)
    splits = {}
    next_id = 0
    for name, n in zip(SPLITS, (n_train, n_val, n_test)):
        scenes = []
        for _ in range(n):
            size = int(rng.integers(1, 4))
            cats = sorted(int(k) for k in rng.choice(K, size=size, replace=False))
            ind = np.zeros(K)
            ind[cats] = 1.0
            feat = ind @ proj + 0.05 * rng.standard_normal(FEATURE_DIM)
            refs = [generate_caption(cats, lex, rng) for _ in range(n_refs)]
            detected = None if name == "train" else simulate_detector(cats, miss_rate, false_rate, rng, K)
            scenes.append(SceneRecord(next_id, name, cats, feat, refs, detected))
            next_id += 1
        splits[name] = scenes
    vocab = Vocabulary.build(r for s in splits["train"] for r in s.references)
    config = {"K": K, "n_train": n_train, "n_val": n_val, "n_test": n_test, "seed": seed,
              "miss_rate": miss_rate, "false_rate": false_rate}
    return CorpusSplit(splits["train"], splits["val"], splits["test"], vocab, K, config)


def category_nouns(K, lexicon=DEFAULT_LEXICON):
    return [set(c.nouns) for c in lexicon[:K]]


def category_index(name, K, lexicon=DEFAULT_LEXICON):
    for i, c in enumerate(lexicon[:K]):
        if c.name == name:
            return i
    raise KeyError(f"unknown category {name!r}")


def save_corpus(corpus, directory, extra_header=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT, "version": VERSION, "config": corpus.config}
    if extra_header:
        header.update(extra_header)
    for name in SPLITS:
        tmp = directory / f".{name}.jsonl.tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for s in corpus.split(name):
                f.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
        os.replace(tmp, directory / f"{name}.jsonl")
    corpus.vocab.save(directory / "vocab.txt")


def load_corpus(directory):
    directory = Path(directory)
    splits = {}
    header = None
    for name in SPLITS:
        path = directory / f"{name}.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"missing corpus file {path}")
        with open(path, encoding="utf-8") as f:
            header = json.loads(f.readline())
            if header.get("format") != FORMAT or header.get("version") != VERSION:
                raise ValueError(f"{path}: unsupported corpus format {header.get('format')} v{header.get('version')}")
            splits[name] = [SceneRecord.from_json(json.loads(line)) for line in f if line.strip()]
    vocab = Vocabulary.load(directory / "vocab.txt")
    cfg = header["config"]
    return CorpusSplit(splits["train"], splits["val"], splits["test"], vocab, cfg["K"], cfg)
