import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvaecap.corpus import SceneRecord
from cvaecap.evalsuite import (CandidateSet, NgramStats, bleu, cider, consensus_rerank,
                               diversity_metrics, evaluate_sets, nearest_neighbors,
                               novel_fraction, oracle_scores, unique_fraction)

words = st.sampled_from("a b c d e".split())
sentences = st.lists(words, min_size=1, max_size=7).map(" ".join)


# -- BLEU -------------------------------------------------------------------

def test_bleu_hand_value():
    b = bleu("the cat sat", ["the cat sat down"])
    assert b[1] == pytest.approx(math.exp(1 - 4 / 3), abs=1e-9)
    assert b[1] == pytest.approx(0.7165, abs=1e-4)
    # all available precisions are 1, so every BLEU-n equals the brevity penalty;
    # the 3-token candidate has no 4-grams and BLEU-4 uses orders 1..3 only
    assert b[3] == pytest.approx(math.exp(1 - 4 / 3), abs=1e-9)
    assert b[4] == pytest.approx(math.exp(1 - 4 / 3), abs=1e-9)


def test_bleu_short_candidate_skips_missing_orders():
    b = bleu("a dog", ["a dog"])
    assert b == {1: 1.0, 2: 1.0, 3: 1.0, 4: 1.0}
    # a wrong bigram still zeroes every order from 2 up
    assert bleu("dog a", ["a dog"])[4] == 0.0


def test_bleu_clipping_and_mixed_precision():
    # candidate "the the the the", ref "the cat": clipped unigram precision 1/4, no bp (c > r)
    b = bleu("the the the the", ["the cat"])
    assert b[1] == pytest.approx(0.25, abs=1e-12)
    assert b[2] == 0.0
    # p1 = 3/4, p2 = 1/3 -> BLEU-2 = sqrt(1/4)
    b = bleu("a b c x", ["a b c y z"])
    bp = math.exp(1 - 5 / 4)
    assert b[1] == pytest.approx(bp * 0.75, abs=1e-12)
    assert b[2] == pytest.approx(bp * math.sqrt(0.75 * 2 / 3), abs=1e-12)


def test_bleu_closest_reference_length():
    # references of length 2 and 6; candidate of length 5 is closest to 6 -> bp = exp(1 - 6/5)
    b = bleu("a b c d e", ["a b", "a b c d e f"])
    assert b[1] == pytest.approx(math.exp(1 - 6 / 5), abs=1e-12)


def test_bleu_trivial_cases():
    assert bleu("a dog runs", ["a dog runs", "x"])[4] == 1.0
    assert bleu("x y z", ["a b c"])[1] == 0.0
    assert bleu("", ["a b"]) == {1: 0.0, 2: 0.0, 3: 0.0, 4: 0.0}
    with pytest.raises(ValueError):
        bleu("a", [])


@settings(max_examples=100, deadline=None)
@given(sentences, st.lists(sentences, min_size=1, max_size=4), st.randoms())
def test_bleu_reference_permutation_invariant(cand, refs, rnd):
    shuffled = refs[:]
    rnd.shuffle(shuffled)
    assert bleu(cand, refs) == bleu(cand, shuffled)


@settings(max_examples=100, deadline=None)
@given(sentences, st.lists(sentences, min_size=1, max_size=4))
def test_bleu_nonincreasing_in_n(cand, refs):
    b = bleu(cand, refs)
    for n in range(1, 4):
        if b[n + 1] > 0:
            assert b[n + 1] <= b[n] + 1e-12


# -- CIDEr ------------------------------------------------------------------

def test_cider_hand_value():
    stats = NgramStats([["a c"], ["b c"], ["a b"]])
    # unigram cosine (log1.5^2) / (2 log1.5^2) = 0.5; bigrams disjoint; no 3/4-grams
    assert cider("a b", ["a c"], stats) == pytest.approx(10 * 0.5 / 4, abs=1e-9)


def _dense_cider(cand, refs, ref_corpus, sigma=6.0):
    """Independent dense-vector CIDEr-D used as an oracle."""
    def grams(s, n):
        t = s.split()
        return [tuple(t[i:i + n]) for i in range(len(t) - n + 1)]

    N = len(ref_corpus)
    total = 0.0
    for n in range(1, 5):
        df = Counter()
        for doc in ref_corpus:
            df.update({g for r in doc for g in grams(r, n)})
        keys = sorted({g for s in [cand] + refs for g in grams(s, n)})
        idx = {g: i for i, g in enumerate(keys)}

        def vec(s):
            v = np.zeros(len(keys))
            for g in grams(s, n):
                v[idx[g]] += 1.0
            idf = np.array([math.log(N) - math.log(max(1, df[g])) for g in keys])
            return v * idf

        vc = vec(cand)
        for r in refs:
            vr = vec(r)
            num = float(np.minimum(vc, vr) @ vr)
            den = np.linalg.norm(vc) * np.linalg.norm(vr)
            val = num / den if den else num
            lc, lr = len(cand.split()), len(r.split())
            total += val * math.exp(-((lc - lr) ** 2) / (2 * sigma ** 2)) / len(refs)
    return 10 * total / 4


def test_cider_matches_dense_oracle():
    corpus = [["a b c d", "a b e"], ["c d e", "a c"], ["b b a c d e", "e d"]]
    stats = NgramStats(corpus)
    rng = np.random.default_rng(3)
    vocab = "a b c d e".split()
    for _ in range(40):
        cand = " ".join(rng.choice(vocab, size=rng.integers(1, 7)))
        refs = corpus[rng.integers(3)]
        assert cider(cand, refs, stats) == pytest.approx(_dense_cider(cand, refs, corpus), abs=1e-9)


def test_cider_trivial_cases():
    stats = NgramStats([["a b c"], ["d e"]])
    assert cider("a b c", ["a b c"], stats) > 0
    assert cider("d e", ["a b c"], stats) == 0.0
    assert cider("", ["a b c"], stats) == 0.0


@settings(max_examples=60, deadline=None)
@given(sentences, st.lists(sentences, min_size=1, max_size=4), st.randoms())
def test_cider_reference_permutation_invariant(cand, refs, rnd):
    stats = NgramStats([refs, ["a b"], ["c d e"]])
    shuffled = refs[:]
    rnd.shuffle(shuffled)
    assert cider(cand, refs, stats) == pytest.approx(cider(cand, shuffled, stats), abs=1e-12)


# -- oracle / re-ranking / diversity -----------------------------------------

def test_oracle_takes_maximum():
    refs = {0: ["a b c d e f"]}
    stats = NgramStats([refs[0]])
    lo, hi = "a b c d x y", "a b c d e x"
    sets = [CandidateSet(0, [lo, hi])]
    assert oracle_scores(sets, refs, stats)["B4"] == pytest.approx(bleu(hi, refs[0])[4])
    single = oracle_scores([CandidateSet(0, [lo])], refs, stats)
    assert single["B4"] == pytest.approx(bleu(lo, refs[0])[4])
    for m, v in single.items():
        assert oracle_scores(sets, refs, stats)[m] >= v


@settings(max_examples=40, deadline=None)
@given(st.lists(sentences, min_size=1, max_size=6), st.lists(sentences, min_size=1, max_size=3))
def test_oracle_monotone_and_dedup_invariant(cands, refs):
    stats = NgramStats([refs])
    base = oracle_scores([CandidateSet(0, cands)], {0: refs}, stats)
    dedup = oracle_scores([CandidateSet(0, list(dict.fromkeys(cands)))], {0: refs}, stats)
    assert base == dedup
    more = oracle_scores([CandidateSet(0, cands + ["e d c"])], {0: refs}, stats)
    assert all(more[m] >= base[m] for m in base)


def _scene(i, cats, refs):
    return SceneRecord(i, "train", cats, np.zeros(4), refs)


def test_rerank_prefers_training_reference():
    train = [_scene(i, [0], ["a dog runs on grass", "the dog sleeps"]) for i in range(5)]
    # idf comes from a broader corpus; five identical documents alone give idf = 0 everywhere
    stats = NgramStats([s.references for s in train] + [["a cat flies"], ["the car parks"], ["a boat floats"]])
    cs = CandidateSet(9, ["a cat flies", "a dog runs on grass", "dog"])
    out = consensus_rerank(cs, np.array([1.0, 0.0]), train, 5, stats)
    assert out[0][0] == "a dog runs on grass"
    assert sorted(o[0] for o in out) == sorted(cs.candidates)
    one = consensus_rerank(CandidateSet(9, ["x"]), np.array([1.0, 0.0]), train, 2, stats)
    assert [o[0] for o in one] == ["x"]
    with pytest.raises(ValueError):
        consensus_rerank(cs, np.array([1.0, 0.0]), train, 0, stats)


def test_rerank_ties_keep_input_order():
    train = [_scene(0, [0], ["a b c"])]
    stats = NgramStats([["a b c"], ["d e"]])
    cs = CandidateSet(1, ["x y", "a b c", "z w", "x y"], ["p0", "p1", "p2", "p3"])
    out = consensus_rerank(cs, np.array([1.0]), train, 1, stats)
    assert [o[1] for o in out] == ["p1", "p0", "p2", "p3"]
    perm = CandidateSet(1, ["z w", "x y", "x y", "a b c"], ["p2", "p0", "p3", "p1"])
    out2 = consensus_rerank(perm, np.array([1.0]), train, 1, stats)
    assert [o[1] for o in out2] == ["p1", "p2", "p0", "p3"]
    assert {o[1]: o[2] for o in out} == {o[1]: o[2] for o in out2}


def test_nearest_neighbors_cosine_stable():
    tv = np.array([[1.0, 0], [0, 1.0], [0.5, 0.5], [1.0, 0]])
    assert nearest_neighbors(np.array([1.0, 0]), tv, 3) == [0, 3, 2]


def test_unique_fraction_hand_counts():
    same = [CandidateSet(0, ["a b"] * 20)]
    assert unique_fraction(same) == pytest.approx(0.05)
    distinct = [CandidateSet(0, [f"w{i}" for i in range(20)])]
    assert unique_fraction(distinct) == 1.0
    # whitespace variants are duplicates
    assert unique_fraction([CandidateSet(0, ["a  b", "a b"])]) == 0.5


def test_novel_fraction_hand_count():
    train = ["s1", "s2", "s3", "s4", "x"]
    ranked = [CandidateSet(0, ["s1", "n1"]), CandidateSet(1, ["s2", "s3"]), CandidateSet(2, ["n2", "s4"])]
    assert novel_fraction(ranked, train, top_m=2) == pytest.approx(1 / 3)
    # only the first top_m distinct sentences per scene count
    assert novel_fraction([CandidateSet(0, ["s1", "s1", "n1", "n2"])], train, top_m=2) == 0.5
    u, n = diversity_metrics(ranked, train, 2)
    assert (u, n) == (1.0, pytest.approx(1 / 3))


def test_candidate_set_nonempty():
    with pytest.raises(ValueError):
        CandidateSet(0, [])


def test_evaluate_self_references_is_perfect():
    train = [_scene(0, [0], ["a b c d"]), _scene(1, [1], ["e f g h"])]
    test = [SceneRecord(5, "test", [0], np.zeros(4), ["a b c d", "a b x y"], [0]),
            SceneRecord(6, "test", [1], np.zeros(4), ["e f g h"], [1])]
    sets = [CandidateSet(s.id, list(s.references)) for s in test]
    row, ranked = evaluate_sets(sets, test, train, K=2, m_neighbors=1)
    assert row["oracle_B4"] == 1.0
    assert row["rerank_B4"] == 1.0
    assert row["n_scenes"] == 2
    with pytest.raises(KeyError):
        evaluate_sets([CandidateSet(99, ["a"])], test, train, K=2)
