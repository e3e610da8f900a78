import math
from itertools import product

import numpy as np
import pytest

from dustlab.decode import Fusion, beam_search, best_hypothesis, greedy_ctc
from dustlab.lm import fit_ngram
from dustlab.nnet.ctc import log_softmax


# ---------------------------------------------------------------------------
# Exhaustive oracle: enumerate every alignment path, collapse, and sum the
# probability mass per label string.  Ground truth for small inputs.
# ---------------------------------------------------------------------------

def marginalize_all_labels(logits, alphabet):
    T, V = logits.shape
    blank = V - 1
    probs = np.exp(log_softmax(logits))
    mass = {}
    for path in product(range(V), repeat=T):
        label = []
        prev = -1
        for s in path:
            if s != prev and s != blank:
                label.append(alphabet[s])
            prev = s
        text = "".join(label)
        p = 1.0
        for t, s in enumerate(path):
            p *= probs[t, s]
        mass[text] = mass.get(text, 0.0) + p
    return mass


def make_logits(rng, T, V, spread=2.0):
    return rng.normal(0.0, spread, size=(T, V))


# ---------------------------------------------------------------------------
# Greedy
# ---------------------------------------------------------------------------

def test_greedy_all_blank_is_empty():
    logits = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 5.0]])
    assert greedy_ctc(logits, "ab") == ""


def test_greedy_collapse_rule():
    # argmax path: a a blank a  ->  "aa"
    a, b, blank = 0, 1, 2
    logits = np.full((4, 3), -5.0)
    logits[0, a] = logits[1, a] = logits[3, a] = 0.0
    logits[2, blank] = 0.0
    assert greedy_ctc(logits, "ab") == "aa"


def test_greedy_tie_breaks_to_lowest_index():
    logits = np.zeros((1, 3))
    assert greedy_ctc(logits, "ab") == "a"


def test_greedy_rejects_empty_input():
    with pytest.raises(ValueError):
        greedy_ctc(np.zeros((0, 3)), "ab")


# ---------------------------------------------------------------------------
# Beam search core
# ---------------------------------------------------------------------------

def test_beam_one_equals_greedy_random():
    rng = np.random.default_rng(41)
    for _ in range(200):
        T = int(rng.integers(1, 7))
        logits = make_logits(rng, T, 3)
        top, _ = beam_search(logits, "ab", beam=1)[0], None
        assert top[0] == greedy_ctc(logits, "ab")


def test_wide_beam_matches_exhaustive_marginalization():
    rng = np.random.default_rng(17)
    for _ in range(40):
        T = int(rng.integers(1, 4))
        logits = make_logits(rng, T, 3)
        oracle = marginalize_all_labels(logits, "ab")
        hyps = dict(beam_search(logits, "ab", beam=10_000))
        # every reachable label present, with the exact marginal mass
        assert set(hyps) == set(oracle)
        for text, mass in oracle.items():
            assert hyps[text] == pytest.approx(math.log(mass), abs=1e-9)
        top_label = beam_search(logits, "ab", beam=10_000)[0][0]
        assert top_label == max(oracle, key=oracle.get)


def test_ranked_output_is_sorted_and_clean():
    rng = np.random.default_rng(3)
    logits = make_logits(rng, 5, 4)
    hyps = beam_search(logits, "abc", beam=6)
    scores = [s for _, s in hyps]
    assert scores == sorted(scores, reverse=True)
    for text, score in hyps:
        assert math.isfinite(score)
        assert all(c in "abc" for c in text)


def test_deterministic():
    rng = np.random.default_rng(9)
    logits = make_logits(rng, 6, 4)
    assert beam_search(logits, "abc", beam=4) == beam_search(logits, "abc", beam=4)


def test_tie_break_lexicographic():
    # perfectly uniform logits: all same-length labels get equal mass
    logits = np.zeros((1, 3))
    hyps = beam_search(logits, "ab", beam=100)
    same = [t for t, s in hyps if s == pytest.approx(hyps[-1][1])]
    # "a" and "b" tie; "a" must come first
    assert hyps[0][0] == ""  # blank mass only 1/3 each for a,b; "" has 1/3 too
    texts = [t for t, _ in hyps]
    assert texts.index("a") < texts.index("b")


def test_beam_monotone_top_score():
    rng = np.random.default_rng(23)
    for _ in range(20):
        logits = make_logits(rng, 5, 4)
        prev = -np.inf
        for beam in (1, 2, 4, 8, 16, 64):
            top_score = beam_search(logits, "abc", beam=beam)[0][1]
            assert top_score >= prev - 1e-12
            prev = max(prev, top_score)


def test_invalid_args():
    with pytest.raises(ValueError):
        beam_search(np.zeros((2, 3)), "ab", beam=0)
    with pytest.raises(ValueError):
        beam_search(np.zeros((0, 3)), "ab")
    with pytest.raises(ValueError):
        beam_search(np.zeros((2, 5)), "ab")


# ---------------------------------------------------------------------------
# Shallow fusion
# ---------------------------------------------------------------------------

def _toy_lm():
    return fit_ngram(["abab", "ababab", "abba"], order=3, discount=0.5)


def test_fusion_weight_zero_is_noop():
    rng = np.random.default_rng(31)
    lmod = _toy_lm()
    for _ in range(10):
        logits = make_logits(rng, 5, 3)
        plain = beam_search(logits, "ab", beam=8)
        fused0 = beam_search(logits, "ab", beam=8, fusion=Fusion(lmod, 0.0))
        assert plain == fused0


def test_fusion_changes_scores_and_prefers_lm_likely_strings():
    lmod = _toy_lm()
    # logits prefer "b" then "a", LM strongly prefers strings starting "a"
    logits = np.array(
        [
            [2.0, 2.4, -3.0],
            [2.4, 2.0, -3.0],
        ]
    )
    plain_top = beam_search(logits, "ab", beam=16)[0][0]
    fused_top = beam_search(logits, "ab", beam=16, fusion=Fusion(lmod, 4.0))[0][0]
    assert plain_top == "ba"
    assert fused_top.startswith("a")


def test_fusion_applies_per_emitted_label():
    # One label, one frame: fused score = acoustic + w * lm(a | "").
    lmod = _toy_lm()
    logits = np.array([[4.0, -4.0, -4.0]])
    w = 0.7
    plain = dict(beam_search(logits, "ab", beam=10))
    fused = dict(beam_search(logits, "ab", beam=10, fusion=Fusion(lmod, w)))
    shift = fused["a"] - plain["a"]
    assert shift == pytest.approx(w * lmod.log_prob_next("", "a"), abs=1e-12)
    # the empty hypothesis emits nothing, so its score is untouched
    assert fused[""] == pytest.approx(plain[""], abs=1e-12)


def test_length_bonus_favors_longer_output():
    rng = np.random.default_rng(67)
    logits = make_logits(rng, 6, 3)
    no_bonus = {t for t, _ in beam_search(logits, "ab", beam=4)}
    bonus = beam_search(logits, "ab", beam=4, length_bonus=3.0)
    assert max(len(t) for t, _ in bonus) >= max(len(t) for t in no_bonus)


def test_best_hypothesis_helper():
    logits = np.array([[3.0, -3.0, -3.0]])
    text, score = best_hypothesis(logits, "ab", beam=4)
    assert text == "a"
    assert math.isfinite(score)
