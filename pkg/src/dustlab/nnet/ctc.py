"""CTC loss and its exact gradient, computed in the log domain.

The label is expanded to the usual blank-augmented state sequence
(blank, l1, blank, l2, ..., blank) and scored with the forward-backward
recursion.  The gradient w.r.t. the unnormalized logits is the classic
"softmax minus state-posterior" form, assembled entirely from the log-domain
alpha/beta tables so it stays correct for peaked distributions.

The blank symbol is always the LAST logit column: column k < V-1 scores
alphabet[k], column V-1 scores blank.
"""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

NEG_INF = -np.inf


class CtcInfeasibleError(ValueError):
    """Label cannot be emitted in the available frames (too few timesteps)."""


def encode_labels(label: Sequence[str], alphabet: str) -> np.ndarray:
    """Map a token sequence to integer ids under ``alphabet`` ordering."""
    try:
        return np.array([alphabet.index(t) for t in label], dtype=np.int64)
    except ValueError:
        bad = [t for t in label if t not in alphabet]
        raise ValueError(f"label tokens {bad!r} not in alphabet {alphabet!r}") from None


def decode_ids(ids: Sequence[int], alphabet: str) -> str:
    return "".join(alphabet[i] for i in ids)


def min_frames_needed(label: Sequence[str]) -> int:
    """Frames required by CTC: one per token plus one per adjacent repeat."""
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _extended_label(label_ids: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * len(label_ids) + 1, blank, dtype=np.int64)
    ext[1::2] = label_ids
    return ext


def ctc_loss_grad(
    logits: np.ndarray,
    label: Sequence[str],
    alphabet: str,
) -> Tuple[float, np.ndarray]:
    """Negative log-likelihood of ``label`` under CTC, and d(loss)/d(logits).

    ``logits`` is (frames, len(alphabet)+1) with the blank last.  Raises
    CtcInfeasibleError when the label cannot fit in the frames; an infeasible
    pair is a data bug the caller must handle, not a large loss.
    """
    T, V = logits.shape
    if V != len(alphabet) + 1:
        raise ValueError(f"logits have {V} classes but alphabet+blank needs {len(alphabet) + 1}")
    label_ids = encode_labels(label, alphabet)
    need = min_frames_needed(label)
    if T < need:
        raise CtcInfeasibleError(
            f"label of length {len(label_ids)} needs >= {need} frames, got {T}"
        )
    blank = V - 1
    ext = _extended_label(label_ids, blank)
    S = len(ext)
    logp = log_softmax(logits.astype(np.float64))
    lp = logp[:, ext]  # (T, S): per-frame log-prob of each extended state

    # "skip" transitions s-2 -> s are legal where ext[s] is a label differing
    # from ext[s-2]; precompute the mask once.
    can_skip = np.zeros(S, dtype=bool)
    if S > 2:
        can_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    def shift(row: np.ndarray, k: int) -> np.ndarray:
        out = np.full(S, NEG_INF)
        out[k:] = row[: S - k]
        return out

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, 0]
    if S > 1:
        alpha[0, 1] = lp[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = shift(prev, 1)
        skip = np.where(can_skip, shift(prev, 2), NEG_INF)
        alpha[t] = lp[t] + np.logaddexp(np.logaddexp(stay, step), skip)

    tail = [alpha[T - 1, S - 1]]
    if S > 1:
        tail.append(alpha[T - 1, S - 2])
    log_lik = float(np.logaddexp.reduce(tail))
    if not np.isfinite(log_lik):
        # Unreachable for feasible labels and finite logits; kept as a guard
        # against NaN inputs.
        raise FloatingPointError("CTC likelihood underflowed to zero")

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = lp[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = lp[T - 1, S - 2]

    def shift_back(row: np.ndarray, k: int) -> np.ndarray:
        out = np.full(S, NEG_INF)
        out[: S - k] = row[k:]
        return out

    can_skip_fwd = np.zeros(S, dtype=bool)
    if S > 2:
        # from s we may jump to s+2 when that target is a label != ext[s]
        can_skip_fwd[: S - 2] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = shift_back(nxt, 1)
        skip = np.where(can_skip_fwd, shift_back(nxt, 2), NEG_INF)
        beta[t] = lp[t] + np.logaddexp(np.logaddexp(stay, step), skip)

    # State posteriors: gamma[t,s] = alpha*beta with the doubled emission
    # divided back out, normalized by the total likelihood.
    gamma = alpha + beta - lp
    # Accumulate per-class occupancy in the log domain.
    grad = np.exp(logp)  # softmax term
    occ = np.full((T, V), NEG_INF)
    for k in range(V):
        cols = np.nonzero(ext == k)[0]
        if len(cols):
            occ[:, k] = np.logaddexp.reduce(gamma[:, cols], axis=1)
    grad -= np.exp(occ - log_lik)
    return -log_lik, grad
