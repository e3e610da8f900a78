"""CTC decoding: greedy collapse and prefix beam search with shallow fusion.

The beam search keeps, for every prefix, both state probabilities under two
semantics at once:

  * a SUM track (log-sum-exp over all alignment paths) - this is proper CTC
    marginalization and is what final hypotheses are ranked by;
  * a MAX track (best single alignment path, i.e. Viterbi) - this is what
    beam pruning uses.

Pruning on the max track is what makes beam width 1 coincide with greedy
decoding: the greedy frame-argmax path is always the global Viterbi path
prefix, so the single surviving prefix is exactly the greedy collapse.
Pruning on the sum track does not have that property (mass spread over many
alignments of a short prefix can outweigh the single best path of the greedy
prefix), and pruning on max-of-sums fails in the other direction.  With a
beam at least as wide as the number of reachable prefixes no pruning happens
at all and the sum track makes the result exact marginalization.

Shallow fusion adds weight * lm_log_prob(next | prefix) on label emissions
only (blank extensions and same-label continuations emit nothing), plus an
optional per-label length bonus, to both tracks alike.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Tuple

import numpy as np

from .nnet.ctc import log_softmax

NEG_INF = -np.inf


class FusionModel(Protocol):
    def log_prob_next(self, prefix: str, token: str) -> float: ...


@dataclass(frozen=True)
class Fusion:
    model: FusionModel
    weight: float


def greedy_ctc(logits: np.ndarray, alphabet: str) -> str:
    """Frame-argmax path, collapsed: merge adjacent repeats, drop blanks.

    np.argmax resolves ties toward the lowest index, which makes the output
    deterministic even for degenerate logits.
    """
    if logits.shape[0] == 0:
        raise ValueError("cannot decode an empty logit sequence")
    blank = logits.shape[1] - 1
    path = logits.argmax(axis=1)
    out = []
    prev = -1
    for s in path:
        if s != prev and s != blank:
            out.append(alphabet[s])
        prev = s
    return "".join(out)


# Beam entry layout: [sum_blank, sum_nonblank, max_blank, max_nonblank],
# all log-domain, split by whether the alignment path ends in blank.
_NEW = (NEG_INF, NEG_INF, NEG_INF, NEG_INF)


def beam_search(
    logits: np.ndarray,
    alphabet: str,
    beam: int = 8,
    fusion: Optional[Fusion] = None,
    length_bonus: float = 0.0,
) -> List[Tuple[str, float]]:
    """Ranked (prefix, log-score) list from CTC prefix beam search.

    Scores are the sum-track totals: log of the summed probability of every
    alignment of that prefix (plus fusion/bonus terms collected along the
    way).  Sorting is by score descending, ties broken lexicographically.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    T, V = logits.shape
    if T == 0:
        raise ValueError("cannot decode an empty logit sequence")
    if V != len(alphabet) + 1:
        raise ValueError(f"logits have {V} classes, alphabet+blank needs {len(alphabet) + 1}")
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    blank = V - 1
    lm_weight = float(fusion.weight) if fusion is not None else 0.0

    entries: Dict[str, Tuple[float, float, float, float]] = {"": (0.0, NEG_INF, 0.0, NEG_INF)}
    lm_cache: Dict[Tuple[str, str], float] = {}

    def lm_term(prefix: str, token: str) -> float:
        if fusion is None or lm_weight == 0.0:
            return length_bonus
        key = (prefix, token)
        got = lm_cache.get(key)
        if got is None:
            got = lm_cache[key] = fusion.model.log_prob_next(prefix, token)
        return lm_weight * got + length_bonus

    for t in range(T):
        lpt = logp[t]
        new: Dict[str, List[float]] = {}

        def slot(prefix: str) -> List[float]:
            e = new.get(prefix)
            if e is None:
                e = new[prefix] = list(_NEW)
            return e

        for prefix, (sb, snb, mb, mnb) in entries.items():
            tot_s = np.logaddexp(sb, snb)
            tot_m = mb if mb > mnb else mnb
            # stay on this prefix via blank
            e = slot(prefix)
            cand = tot_s + lpt[blank]
            e[0] = np.logaddexp(e[0], cand)
            m_cand = tot_m + lpt[blank]
            if m_cand > e[2]:
                e[2] = m_cand
            # stay on this prefix by continuing its last label's emission
            if prefix:
                ci = alphabet.index(prefix[-1])
                cont_s = snb + lpt[ci]
                e[1] = np.logaddexp(e[1], cont_s)
                cont_m = mnb + lpt[ci]
                if cont_m > e[3]:
                    e[3] = cont_m
            # emit each label, extending the prefix
            for ci in range(V - 1):
                c = alphabet[ci]
                bonus = lm_term(prefix, c)
                lp = lpt[ci] + bonus
                if prefix and c == prefix[-1]:
                    base_s, base_m = sb, mb  # must cross a blank to repeat
                else:
                    base_s, base_m = tot_s, tot_m
                if base_s == NEG_INF and base_m == NEG_INF:
                    continue
                e2 = slot(prefix + c)
                e2[1] = np.logaddexp(e2[1], base_s + lp)
                m2 = base_m + lp
                if m2 > e2[3]:
                    e2[3] = m2
        ranked = sorted(
            new.items(),
            key=lambda kv: (-max(kv[1][2], kv[1][3]), kv[0]),
        )
        entries = {k: tuple(v) for k, v in ranked[:beam]}

    final = [
        (prefix, float(np.logaddexp(sb, snb)))
        for prefix, (sb, snb, _, _) in entries.items()
    ]
    final.sort(key=lambda kv: (-kv[1], kv[0]))
    return final


def best_hypothesis(
    logits: np.ndarray,
    alphabet: str,
    beam: int = 8,
    fusion: Optional[Fusion] = None,
    length_bonus: float = 0.0,
) -> Tuple[str, float]:
    return beam_search(logits, alphabet, beam=beam, fusion=fusion, length_bonus=length_bonus)[0]
