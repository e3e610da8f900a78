import math
from itertools import product

import numpy as np
import pytest

from dustlab.nnet.ctc import (
    CtcInfeasibleError,
    ctc_loss_grad,
    decode_ids,
    encode_labels,
    log_softmax,
    min_frames_needed,
)


# ---------------------------------------------------------------------------
# Brute-force oracle: enumerate every alignment path, collapse it, and sum
# the probabilities of paths that collapse to the target label.
# ---------------------------------------------------------------------------

def collapse_path(path, alphabet):
    blank = len(alphabet)
    out = []
    prev = None
    for s in path:
        if s != prev and s != blank:
            out.append(alphabet[s])
        prev = s
    return "".join(out)


def ctc_loss_bruteforce(logits, label, alphabet):
    T, V = logits.shape
    probs = np.exp(log_softmax(logits))
    total = 0.0
    for path in product(range(V), repeat=T):
        if collapse_path(path, alphabet) == label:
            p = 1.0
            for t, s in enumerate(path):
                p *= probs[t, s]
            total += p
    if total == 0.0:
        raise CtcInfeasibleError(label)
    return -math.log(total)


def all_feasible_labels(alphabet, max_len, n_frames):
    labels = [""]
    for n in range(1, max_len + 1):
        labels += ["".join(p) for p in product(alphabet, repeat=n)]
    return [lab for lab in labels if lab and min_frames_needed(lab) <= n_frames]


# ---------------------------------------------------------------------------
# Frozen hand-derived cases
# ---------------------------------------------------------------------------

def test_single_frame_uniform_logits():
    logits = np.zeros((1, 3))
    loss, grad = ctc_loss_grad(logits, "a", alphabet="ab")
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    assert grad.shape == (1, 3)


def test_two_frames_uniform_logits():
    # paths collapsing to "a": aa, a-, -a  →  3/9, loss = ln 3
    logits = np.zeros((2, 3))
    loss, _ = ctc_loss_grad(logits, "a", alphabet="ab")
    assert loss == pytest.approx(math.log(3), abs=1e-12)


def test_infeasible_label_raises():
    with pytest.raises(CtcInfeasibleError):
        ctc_loss_grad(np.zeros((1, 3)), "ab", alphabet="ab")
    # repeats need a separating blank frame
    with pytest.raises(CtcInfeasibleError):
        ctc_loss_grad(np.zeros((2, 3)), "aa", alphabet="ab")
    # exactly at the bound is fine
    loss, _ = ctc_loss_grad(np.zeros((3, 3)), "aa", alphabet="ab")
    assert np.isfinite(loss)


def test_min_frames_needed():
    assert min_frames_needed("") == 0
    assert min_frames_needed("a") == 1
    assert min_frames_needed("ab") == 2
    assert min_frames_needed("aa") == 3
    assert min_frames_needed("aabb") == 6
    assert min_frames_needed("aba") == 3


def test_label_encoding_round_trip():
    ids = encode_labels("badc", "abcd")
    assert ids.tolist() == [1, 0, 3, 2]
    assert decode_ids(ids, "abcd") == "badc"
    with pytest.raises(ValueError, match="not in alphabet"):
        encode_labels("axe", "abc")


def test_vocab_size_mismatch_rejected():
    with pytest.raises(ValueError, match="classes"):
        ctc_loss_grad(np.zeros((3, 5)), "a", alphabet="ab")


# ---------------------------------------------------------------------------
# Exhaustive equivalence with the path-enumeration oracle
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("alphabet", ["a", "ab"])
@pytest.mark.parametrize("T", [1, 2, 3, 4])
def test_matches_bruteforce_exhaustively(alphabet, T):
    rng = np.random.default_rng(100 * T + len(alphabet))
    logits = rng.normal(0.0, 2.0, size=(T, len(alphabet) + 1))
    for label in all_feasible_labels(alphabet, max_len=T, n_frames=T):
        loss, _ = ctc_loss_grad(logits, label, alphabet)
        expect = ctc_loss_bruteforce(logits, label, alphabet)
        assert loss == pytest.approx(expect, abs=1e-9), (alphabet, T, label)


def test_loss_is_proper_over_labels():
    # Probabilities of all feasible labels (plus empty) must sum to 1.
    alphabet = "ab"
    T = 3
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(T, 3))
    probs = np.exp(log_softmax(logits))
    total = 0.0
    for path in product(range(3), repeat=T):
        p = 1.0
        for t, s in enumerate(path):
            p *= probs[t, s]
        total += p
    assert total == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# Gradient vs central finite differences
# ---------------------------------------------------------------------------

def fd_gradient(logits, label, alphabet, h=1e-4):
    g = np.zeros_like(logits, dtype=np.float64)
    for i in range(logits.shape[0]):
        for j in range(logits.shape[1]):
            lp = logits.copy()
            lm = logits.copy()
            lp[i, j] += h
            lm[i, j] -= h
            fp, _ = ctc_loss_grad(lp, label, alphabet)
            fm, _ = ctc_loss_grad(lm, label, alphabet)
            g[i, j] = (fp - fm) / (2 * h)
    return g


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(77)
    alphabets = ["a", "ab", "abc"]
    checked = 0
    while checked < 50:
        alphabet = alphabets[int(rng.integers(len(alphabets)))]
        T = int(rng.integers(1, 6))
        logits = rng.normal(0.0, 1.5, size=(T, len(alphabet) + 1))
        labels = all_feasible_labels(alphabet, max_len=T, n_frames=T)
        if not labels:
            continue
        label = labels[int(rng.integers(len(labels)))]
        _, grad = ctc_loss_grad(logits, label, alphabet)
        fd = fd_gradient(logits, label, alphabet)
        rel = np.linalg.norm(grad - fd) / max(np.linalg.norm(grad), np.linalg.norm(fd), 1e-12)
        assert rel < 1e-4, (alphabet, T, label, rel)
        checked += 1


def test_gradient_rows_sum_to_zero():
    # d(-log p)/d(logits) over a softmax row always sums to 0.
    rng = np.random.default_rng(8)
    logits = rng.normal(size=(5, 4))
    _, grad = ctc_loss_grad(logits, "abc", alphabet="abc")
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)
