import math

import numpy as np
import pytest

from dustlab.lm import (
    BOS,
    EOS,
    UNK,
    LmFormatError,
    NGramModel,
    fit_from_transcripts,
    fit_ngram,
    load_lm,
    log_prob_next,
    save_lm,
)


# ---------------------------------------------------------------------------
# Hand-computed oracle for the tiny corpus ["ab"], order 2, discount 0.5.
#
# Events: contexts () -> {a:1, b:1, $:1}, (^) -> {a:1}, (a) -> {b:1},
# (b) -> {$:1}.  Vocab = [a, b, $, #], 4 tokens.
#   p_uni(t)   = (1 - 0.5)/3 [if seen] + (0.5 * 3/3) * 1/4
#   p(a | ^)   = 0.5 + 0.5 * p_uni(a)
# ---------------------------------------------------------------------------

P_UNI_SEEN = 0.5 / 3 + 0.5 * 0.25  # = 0.291666...
P_SEEN_CTX = 0.5 + 0.5 * P_UNI_SEEN  # = 0.645833...


def test_hand_oracle_single_text():
    m = fit_ngram(["ab"], order=2, discount=0.5)
    assert m.prob_next("", "a") == pytest.approx(P_SEEN_CTX, abs=1e-12)
    assert m.prob_next("a", "b") == pytest.approx(P_SEEN_CTX, abs=1e-12)
    assert m.prob_next("ab", EOS) == pytest.approx(P_SEEN_CTX, abs=1e-12)
    want = 3 * math.log(P_SEEN_CTX)
    assert m.sequence_log_prob("ab") == pytest.approx(want, abs=1e-12)


def test_highest_continuation_is_observed_one():
    m = fit_ngram(["ab"], order=2, discount=0.5)
    scores = {tok: m.prob_next("a", tok) for tok in m.vocab}
    assert max(scores, key=scores.get) == "b"


def test_order1_discount0_gives_empirical_frequencies():
    # events: a,b,$ from "ab"; b,$ from "b"  ->  a:1, b:2, $:2 of 5
    m = fit_ngram(["ab", "b"], order=1, discount=0.0)
    assert m.prob_next("", "a") == pytest.approx(1 / 5, abs=1e-12)
    assert m.prob_next("", "b") == pytest.approx(2 / 5, abs=1e-12)
    assert m.prob_next("", EOS) == pytest.approx(2 / 5, abs=1e-12)
    assert m.prob_next("", UNK) == 0.0
    # log score stays finite even for the zero-probability token
    assert math.isfinite(m.log_prob_next("", UNK))


def _normalization_holds(model, prefix):
    total = sum(model.prob_next(prefix, tok) for tok in model.vocab)
    return total == pytest.approx(1.0, abs=1e-6)


def test_normalization_over_trained_and_unseen_contexts():
    rng = np.random.default_rng(4)
    texts = ["".join(rng.choice(list("abcd"), size=rng.integers(2, 10))) for _ in range(60)]
    for order in (1, 2, 3, 5):
        m = fit_ngram(texts, order=order, discount=0.5)
        for prefix in ["", "a", "ab", "dcba", "aaaa", "zzz", "abcdabcd", "xq"]:
            assert _normalization_holds(m, prefix), (order, prefix)


def test_normalization_discount_zero():
    m = fit_ngram(["abcab", "bca"], order=3, discount=0.0)
    for prefix in ["", "a", "bc", "ca"]:
        assert _normalization_holds(m, prefix)


def test_markov_truncation_long_prefixes():
    m = fit_ngram(["abcabc", "cabca"], order=3, discount=0.5)
    # order 3 -> only the last 2 tokens matter once the prefix is long enough
    assert m.log_prob_next("abcab", "c") == m.log_prob_next("xyzab"[-2:], "c")
    assert m.log_prob_next("ccccab", "c") == m.log_prob_next("ab", "c")


def test_unknown_tokens_map_to_unk():
    m = fit_ngram(["abab"], order=2, discount=0.5)
    assert m.prob_next("", "z") == m.prob_next("", UNK)
    assert math.isfinite(m.log_prob_next("q!", "a"))


def test_monotone_data_effect():
    base = fit_ngram(["ab", "ac"], order=2, discount=0.5)
    more = fit_ngram(["ab", "ac", "ab"], order=2, discount=0.5)
    assert more.prob_next("a", "b") > base.prob_next("a", "b")


def test_chain_rule_matches_stepwise_sum():
    m = fit_ngram(["abcab", "cabc"], order=3, discount=0.5)
    text = "abca"
    steps = [m.log_prob_next(text[:i], text[i]) for i in range(len(text))]
    steps.append(m.log_prob_next(text, EOS))
    assert m.sequence_log_prob(text) == pytest.approx(sum(steps), abs=1e-12)


def test_more_training_data_never_breaks_normalization():
    texts = ["ab"] * 50 + ["ba"] * 3 + ["aab"] * 7
    m = fit_ngram(texts, order=4, discount=0.3)
    for prefix in ["", "a", "aa", "ba", "bbb"]:
        assert _normalization_holds(m, prefix)


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        fit_ngram([], order=2)
    with pytest.raises(ValueError):
        fit_ngram(["ab"], order=0)
    with pytest.raises(ValueError):
        fit_ngram(["ab"], order=2, discount=1.0)


def test_module_level_scorer_matches_method():
    m = fit_ngram(["abc"], order=2)
    assert log_prob_next(m, "a", "b") == m.log_prob_next("a", "b")


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    m = fit_ngram(["abcab", "cabc", "bbca"], order=3, discount=0.5)
    path = tmp_path / "lm.json"
    save_lm(path, m)
    m2 = load_lm(path)
    assert m2.order == m.order
    assert m2.vocab == m.vocab
    for prefix in ["", "a", "bc", "abc", "zzz"]:
        for tok in m.vocab:
            assert m2.prob_next(prefix, tok) == pytest.approx(
                m.prob_next(prefix, tok), abs=1e-15
            )


def test_load_rejects_bad_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{definitely not json")
    with pytest.raises(LmFormatError):
        load_lm(p)
    p.write_text('{"format": "other", "version": 1}')
    with pytest.raises(LmFormatError):
        load_lm(p)
    m = fit_ngram(["ab"], order=2)
    d = m.to_dict()
    d["version"] = 42
    p.write_text(__import__("json").dumps(d))
    with pytest.raises(LmFormatError):
        load_lm(p)


def test_fit_from_transcript_files(tmp_path):
    f1 = tmp_path / "src.txt"
    f2 = tmp_path / "tgt.txt"
    f1.write_text("abab\nbaba\n")
    f2.write_text("bbbb\n\n")
    m = fit_from_transcripts([f1, f2], order=2, discount=0.5)
    both = fit_ngram(["abab", "baba", "bbbb"], order=2, discount=0.5)
    for prefix in ["", "a", "b"]:
        for tok in m.vocab:
            assert m.prob_next(prefix, tok) == both.prob_next(prefix, tok)
