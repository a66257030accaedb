"""Caption metrics and the candidate-set evaluation protocol.

Sentences are whitespace-tokenized strings; exact string equality after
``" ".join(s.split())`` defines duplicates and novelty.

CIDEr here is the CIDEr-D variant: TF-IDF n-gram vectors (n = 1..4) with
document frequencies counted per scene over a fixed reference corpus,
candidate weights clipped at the reference weight, a Gaussian length
penalty exp(-(l_c - l_r)^2 / (2 * 6^2)) on token counts, averaged over
references and n, times 10.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .corpus import cluster_vector_from_labels

METRICS = ("B4", "B3", "B2", "B1", "C")
CIDER_SIGMA = 6.0


def canonical(sentence):
    return " ".join(sentence.split())


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class CandidateSet:
    scene_id: int
    candidates: List[str]
    provenance: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.candidates:
            raise ValueError(f"scene {self.scene_id}: empty candidate set")
        if not self.provenance:
            self.provenance = [str(i) for i in range(len(self.candidates))]


# ---------------------------------------------------------------------------
# BLEU


def bleu(candidate, references, max_n=4):
    """Sentence BLEU-1..max_n (no smoothing) as {n: score}.

    Orders longer than the candidate contribute no precision term, so a
    candidate equal to a short reference still scores 1.
    """
    if not references:
        raise ValueError("BLEU needs at least one reference")
    cand = candidate.split()
    refs = [r.split() for r in references]
    if not cand:
        return {n: 0.0 for n in range(1, max_n + 1)}
    c = len(cand)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    log_p = []
    out = {}
    for n in range(1, max_n + 1):
        cn = ngrams(cand, n)
        total = sum(cn.values())
        max_ref = Counter()
        for ref in refs:
            for g, k in ngrams(ref, n).items():
                max_ref[g] = max(max_ref[g], k)
        clipped = sum(min(k, max_ref[g]) for g, k in cn.items())
        if total:
            log_p.append(math.log(clipped / total) if clipped > 0 else -math.inf)
        out[n] = 0.0 if -math.inf in log_p else bp * math.exp(sum(log_p) / len(log_p))
    return out


# ---------------------------------------------------------------------------
# CIDEr-D


class NgramStats:
    """Document frequencies over a reference corpus (one document per scene)."""

    def __init__(self, reference_sets: Sequence[Sequence[str]], n=4):
        self.n = n
        self.df = Counter()
        for refs in reference_sets:
            seen = set()
            for r in refs:
                toks = r.split()
                for k in range(1, n + 1):
                    seen.update(ngrams(toks, k))
            self.df.update(seen)
        self.n_docs = len(reference_sets)
        if self.n_docs == 0:
            raise ValueError("NgramStats needs a nonempty reference corpus")
        self.log_n_docs = math.log(self.n_docs)

    def vector(self, sentence):
        """Per-n TF-IDF dicts, their norms, and the token length."""
        toks = sentence.split()
        vecs, norms = [], []
        for k in range(1, self.n + 1):
            v = {g: tf * (self.log_n_docs - math.log(max(1.0, self.df[g])))
                 for g, tf in ngrams(toks, k).items()}
            vecs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vecs, norms, len(toks)


def _cider_pair(cand, ref):
    (cv, cn, cl), (rv, rn, rl) = cand, ref
    penalty = math.exp(-((cl - rl) ** 2) / (2 * CIDER_SIGMA ** 2))
    total = 0.0
    for vc, vr, nc_, nr in zip(cv, rv, cn, rn):
        val = sum(min(w, vr.get(g, 0.0)) * vr.get(g, 0.0) for g, w in vc.items())
        if nc_ != 0 and nr != 0:
            val /= nc_ * nr
        total += val * penalty
    return total / len(cv)


def cider_from_vectors(cand_vec, ref_vecs):
    if cand_vec[2] == 0:
        return 0.0
    return 10.0 * sum(_cider_pair(cand_vec, r) for r in ref_vecs) / len(ref_vecs)


def cider(candidate, references, stats):
    if not references:
        raise ValueError("CIDEr needs at least one reference")
    return cider_from_vectors(stats.vector(candidate), [stats.vector(r) for r in references])


# ---------------------------------------------------------------------------
# protocol


def score_candidate(candidate, references, stats, ref_vecs=None):
    b = bleu(candidate, references)
    ref_vecs = ref_vecs if ref_vecs is not None else [stats.vector(r) for r in references]
    return {"B4": b[4], "B3": b[3], "B2": b[2], "B1": b[1],
            "C": cider_from_vectors(stats.vector(candidate), ref_vecs)}


def oracle_scores(sets, references: Dict[int, List[str]], stats):
    """Per-scene maximum of each metric over candidates, averaged over scenes."""
    if not sets:
        raise ValueError("no candidate sets")
    sums = dict.fromkeys(METRICS, 0.0)
    for cs in sets:
        refs = references[cs.scene_id]
        ref_vecs = [stats.vector(r) for r in refs]
        best = dict.fromkeys(METRICS, 0.0)
        for cand in dict.fromkeys(canonical(c) for c in cs.candidates):
            s = score_candidate(cand, refs, stats, ref_vecs)
            for m in METRICS:
                best[m] = max(best[m], s[m])
        for m in METRICS:
            sums[m] += best[m]
    return {m: sums[m] / len(sets) for m in METRICS}


def mean_scores(pairs, references, stats):
    """Average metrics of one chosen sentence per scene: ``pairs`` = [(scene_id, sentence)]."""
    sums = dict.fromkeys(METRICS, 0.0)
    for sid, sent in pairs:
        s = score_candidate(sent, references[sid], stats)
        for m in METRICS:
            sums[m] += s[m]
    return {m: sums[m] / len(pairs) for m in METRICS}


def nearest_neighbors(query, train_vectors, m):
    """Indices of the ``m`` rows of ``train_vectors`` most cosine-similar to ``query``."""
    tv = np.asarray(train_vectors, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    sims = tv @ q / (np.linalg.norm(tv, axis=1) * np.linalg.norm(q))
    return list(np.argsort(-sims, kind="stable")[:m])


def consensus_rerank(cset, query_c, train_scenes, m_neighbors, stats, train_vectors=None):
    """Candidates sorted by mean CIDEr against the pooled references of nearest training scenes.

    ``query_c`` is the test scene's cluster weights; ``train_vectors`` may be
    passed precomputed (one cluster-weight row per training scene).
    Returns (sentence, provenance, score) triples, best first; ties keep input order.
    """
    if m_neighbors < 1:
        raise ValueError("m_neighbors must be >= 1")
    if train_vectors is None:
        train_vectors = [cluster_vector_from_labels(s.categories, len(query_c)).weights for s in train_scenes]
    idx = nearest_neighbors(query_c, train_vectors, m_neighbors)
    pooled = [r for i in idx for r in train_scenes[i].references]
    ref_vecs = [stats.vector(r) for r in pooled]
    cache = {}
    scored = []
    for pos, (cand, prov) in enumerate(zip(cset.candidates, cset.provenance)):
        key = canonical(cand)
        if key not in cache:
            cache[key] = cider_from_vectors(stats.vector(key), ref_vecs)
        scored.append((cache[key], pos, cand, prov))
    scored.sort(key=lambda x: (-x[0], x[1]))
    return [(cand, prov, score) for score, _, cand, prov in scored]


def unique_fraction(sets):
    return float(np.mean([len({canonical(c) for c in cs.candidates}) / len(cs.candidates) for cs in sets]))


def novel_fraction(ranked_sets, train_sentences, top_m=10):
    """Share of the first ``top_m`` distinct sentences per scene (pooled) unseen in training."""
    train = {canonical(s) for s in train_sentences}
    pooled = []
    for cs in ranked_sets:
        top = list(dict.fromkeys(canonical(c) for c in cs.candidates))[:top_m]
        pooled.extend(top)
    if not pooled:
        raise ValueError("no sentences to score")
    return sum(s not in train for s in pooled) / len(pooled)


def diversity_metrics(ranked_sets, train_sentences, top_m=10):
    """(unique_fraction, novel_fraction); ``ranked_sets`` must be in re-ranked order."""
    if not ranked_sets:
        raise ValueError("no candidate sets")
    return unique_fraction(ranked_sets), novel_fraction(ranked_sets, train_sentences, top_m)


def evaluate_sets(sets, scenes, train_scenes, K, m_neighbors=16, top_m=10):
    """Full report row: oracle scores, consensus top-1 scores, uniqueness, novelty.

    ``scenes`` are the evaluated scenes (references and detected categories);
    re-ranking neighbors come from ``train_scenes``.
    """
    by_id = {s.id: s for s in scenes}
    missing = [cs.scene_id for cs in sets if cs.scene_id not in by_id]
    if missing:
        raise KeyError(f"candidate scenes not in corpus: {missing[:5]}")
    refs = {s.id: s.references for s in scenes}
    eval_stats = NgramStats([s.references for s in scenes])
    train_stats = NgramStats([s.references for s in train_scenes])
    train_vectors = np.array([cluster_vector_from_labels(s.categories, K).weights for s in train_scenes])
    ranked = []
    for cs in sorted(sets, key=lambda x: x.scene_id):
        sc = by_id[cs.scene_id]
        query = cluster_vector_from_labels(sc.detected or sc.categories, K).weights
        order = consensus_rerank(cs, query, train_scenes, m_neighbors, train_stats, train_vectors)
        ranked.append(CandidateSet(cs.scene_id, [o[0] for o in order], [o[1] for o in order]))
    row = {f"oracle_{m}": v for m, v in oracle_scores(ranked, refs, eval_stats).items()}
    top1 = mean_scores([(cs.scene_id, cs.candidates[0]) for cs in ranked], refs, eval_stats)
    row.update({f"rerank_{m}": v for m, v in top1.items()})
    train_sents = [r for s in train_scenes for r in s.references]
    row["unique"], row["novel"] = diversity_metrics(ranked, train_sents, top_m)
    row["n_scenes"] = len(ranked)
    return row, ranked
