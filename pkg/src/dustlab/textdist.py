"""Token-sequence edit distance and the error/recovery metrics built on it.

All distances are plain Levenshtein over label tokens (characters here):
unit costs for substitution, insertion and deletion, no transpositions.
Conventions follow ASR scoring: the second argument is the reference, so
deletions are reference tokens missing from the hypothesis and insertions
are extra hypothesis tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

# A token sequence is any sequence of hashable tokens; plain strings are the
# common case (one character per label token).
TokenSeq = Sequence[str]


@dataclass(frozen=True)
class EditStats:
    """Counts of one minimal edit script turning the hypothesis into the reference."""

    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def distance(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def levenshtein(hyp: TokenSeq, ref: TokenSeq) -> EditStats:
    """Minimal edit distance between ``hyp`` and ``ref`` with per-op counts.

    Ties between scripts of equal total cost are broken deterministically
    (substitution/match preferred, then deletion, then insertion), so the
    individual counts are reproducible even when several minimal scripts
    exist.  The total is symmetric in the two arguments.
    """
    n, m = len(hyp), len(ref)
    # dp[i][j] = (cost, subs, ins, dels) for hyp[:i] vs ref[:j]
    dp = [[(0, 0, 0, 0)] * (m + 1) for _ in range(n + 1)]
    for j in range(1, m + 1):
        dp[0][j] = (j, 0, 0, j)  # hyp empty: every ref token is a deletion
    for i in range(1, n + 1):
        dp[i][0] = (i, 0, i, 0)  # ref empty: every hyp token is an insertion
    for i in range(1, n + 1):
        hi = hyp[i - 1]
        row, prev = dp[i], dp[i - 1]
        for j in range(1, m + 1):
            cost = 0 if hi == ref[j - 1] else 1
            d, s, ins, dl = prev[j - 1]
            best = (d + cost, s + cost, ins, dl)
            d, s, ins, dl = prev[j]
            cand = (d + 1, s, ins + 1, dl)
            if cand[0] < best[0]:
                best = cand
            d, s, ins, dl = row[j - 1]
            cand = (d + 1, s, ins, dl + 1)
            if cand[0] < best[0]:
                best = cand
            row[j] = best
    d, s, ins, dl = dp[n][m]
    return EditStats(substitutions=s, insertions=ins, deletions=dl, ref_len=m)


def error_rate(hyp: TokenSeq, ref: TokenSeq) -> float:
    """Edit distance normalized by the reference length.  May exceed 1.0.

    Raises ValueError on an empty reference; policy for that case lives with
    the caller (see the pseudo-label filter).
    """
    if len(ref) == 0:
        raise ValueError("error_rate undefined for an empty reference")
    return levenshtein(hyp, ref).distance / len(ref)


def corpus_error_rate(pairs: Iterable[Tuple[TokenSeq, TokenSeq]]) -> float:
    """Corpus-level token error rate in percent.

    Sums edit distances over all pairs and divides by the summed reference
    length.  A pair with an empty reference contributes its full hypothesis
    as insertions (and nothing to the denominator).
    """
    total_edits = 0
    total_ref = 0
    n_pairs = 0
    for hyp, ref in pairs:
        n_pairs += 1
        if len(ref) == 0:
            total_edits += len(hyp)
        else:
            total_edits += levenshtein(hyp, ref).distance
            total_ref += len(ref)
    if n_pairs == 0:
        raise ValueError("corpus_error_rate needs at least one pair")
    if total_ref == 0:
        raise ValueError("corpus_error_rate undefined: all references empty")
    return 100.0 * total_edits / total_ref


def werr(baseline: float, topline: float, model: float) -> float:
    """Error-recovery rate in percent: the share of the baseline-to-topline
    gap closed by ``model``.  Negative when the model is worse than the
    baseline; 0 at the baseline and 100 at the topline by construction.
    """
    if baseline <= topline:
        raise ValueError(
            f"recovery rate undefined: baseline ({baseline}) must exceed topline ({topline})"
        )
    return 100.0 * (baseline - model) / (baseline - topline)
