"""Test-time candidate generation for trained models."""
from __future__ import annotations

import numpy as np

from . import priors as P
from .corpus import category_nouns, cluster_vector_from_labels
from .evalsuite import CandidateSet, NgramStats, oracle_scores
from .seqmodel import beam_search, generate


def scene_cluster_vector(scene, K):
    """Detector output when available (held-out splits), ground truth otherwise."""
    return cluster_vector_from_labels(scene.detected or scene.categories, K)


def scene_rng(seed, scene_id):
    # one stream per scene keeps results independent of processing order
    return np.random.default_rng([seed, scene_id])


def sample_scene(model, scene, n_z, test_std, seed, c=None, beam_width=10):
    c = scene_cluster_vector(scene, model.config.K) if c is None else c
    vocab = model.vocab
    if model.prior is None:
        hyps = beam_search(model.decoder, scene.feat, c, beam_width)
        return CandidateSet(scene.id, [vocab.decode(seq) for seq, _ in hyps],
                            [f"beam:{i}" for i in range(len(hyps))])
    rng = scene_rng(seed, scene.id)
    sents, prov = [], []
    for i in range(n_z):
        z = P.sample_prior(model.prior, c, test_std, rng)
        sents.append(vocab.decode(generate(model.decoder, scene.feat, c, z)))
        prov.append(f"z:{i}" if z.component is None else f"z:{i}:k{z.component}")
    return CandidateSet(scene.id, sents, prov)


def sample_candidates(model, scenes, n_z=20, test_std=1.0, seed=0, beam_width=10):
    return [sample_scene(model, s, n_z, test_std, seed, beam_width=beam_width)
            for s in sorted(scenes, key=lambda s: s.id)]


def tune_test_std(model, val_scenes, stds=(0.1, 1.0, 2.0), n_z=20, seed=0, metric="B4"):
    """Pick the test-time std with the best validation oracle score (first wins ties)."""
    stats = NgramStats([s.references for s in val_scenes])
    refs = {s.id: s.references for s in val_scenes}
    scores = {}
    for std in stds:
        sets = sample_candidates(model, val_scenes, n_z, std, seed)
        scores[std] = oracle_scores(sets, refs, stats)[metric]
    best = max(stds, key=lambda s: (scores[s], -stds.index(s)))
    return best, scores


def noun_frequencies(sentences, K):
    """Mean count of each category's nouns per sentence."""
    nouns = category_nouns(K)
    counts = np.zeros(K)
    for s in sentences:
        toks = s.split()
        for k in range(K):
            counts[k] += sum(t in nouns[k] for t in toks)
    return counts / max(1, len(sentences))


def edit_labels(labels, add=(), remove=()):
    out = (set(labels) | set(add)) - set(remove)
    if not out:
        raise ValueError("category edit removes every category")
    return sorted(out)


def control_scene(model, scene, add=(), remove=(), n_z=20, test_std=1.0, seed=0):
    """Candidates under the scene's detected categories and under an edited set.

    Both runs reuse the same random stream, so an empty edit reproduces the
    first list exactly.
    """
    if model.prior is None or model.prior.kind not in ("additive", "gmm"):
        raise ValueError("controllable generation needs an ag-cvae or gmm-cvae model")
    K = model.config.K
    before = sorted(set(scene.detected or scene.categories))
    after = edit_labels(before, add, remove)
    out = {"scene_id": scene.id, "labels_before": before, "labels_after": after}
    for tag, labels in (("before", before), ("after", after)):
        cs = sample_scene(model, scene, n_z, test_std, seed, c=cluster_vector_from_labels(labels, K))
        out[tag] = cs
        out[f"noun_freq_{tag}"] = noun_frequencies(cs.candidates, K).tolist()
    return out
