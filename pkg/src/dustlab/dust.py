"""Dropout-agreement pseudo-label filtering for self-training.

The idea: decode each unlabeled utterance once deterministically (dropout
off) to get a candidate pseudo-label, then decode it a few more times with
dropout active under fixed seeds.  If the model is confident, the stochastic
decodes barely move; if it is guessing, they scatter.  An utterance is kept
only when every stochastic decode stays within an edit-distance budget
proportional to the candidate's length:

    accept  iff  max_t dist(ref, sample_t) < tau * len(ref)

The inequality is strict, so tau=0 accepts nothing and an empty reference
(len 0) is rejected by default.  With dropout probability 0 every sample
equals the reference and the filter degenerates to "accept everything with a
nonempty reference", which is a useful sanity probe.

Decisions depend only on the model, the utterance and the config, never on
batch order, so filtering a shuffled corpus yields the same pool.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from .corpus import Utterance
from .decode import Fusion, beam_search, greedy_ctc
from .nnet.model import DropoutMode, Params, forward
from .textdist import corpus_error_rate, levenshtein


class Transcriber(Protocol):
    """Anything that maps a feature matrix to a transcript, dropout-aware."""

    def transcribe(self, features: np.ndarray, mode: DropoutMode) -> str: ...


@dataclass
class NeuralTranscriber:
    """Transcriber backed by the CTC recognizer.

    beam=1 with no fusion takes the greedy path; anything else runs the
    prefix beam search.  The same decoding settings are used for the
    deterministic reference and for the dropout samples, so disagreement
    measures model uncertainty rather than decoder mismatch.
    """

    params: Params
    alphabet: str
    beam: int = 1
    fusion: Optional[Fusion] = None
    length_bonus: float = 0.0

    def transcribe(self, features: np.ndarray, mode: DropoutMode) -> str:
        logits = forward(self.params, np.asarray(features, dtype=np.float64), mode)
        if self.beam <= 1 and self.fusion is None and self.length_bonus == 0.0:
            return greedy_ctc(logits, self.alphabet)
        return beam_search(
            logits,
            self.alphabet,
            beam=self.beam,
            fusion=self.fusion,
            length_bonus=self.length_bonus,
        )[0][0]


@dataclass(frozen=True)
class DustConfig:
    """Filter settings.

    sample_seeds both counts and seeds the stochastic decodes; three seeded
    samples is the default.  empty_ref_policy handles utterances whose
    deterministic decode is empty: "reject" drops them, "accept_if_all_empty"
    keeps them only when every dropout sample is empty too (unanimous
    "nothing here" is still agreement).
    """

    tau: float = 0.3
    dropout_p: float = 0.1
    sample_seeds: Tuple[int, ...] = (1, 2, 3)
    empty_ref_policy: str = "reject"

    def __post_init__(self) -> None:
        if self.tau < 0.0:
            raise ValueError("tau must be >= 0")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError("dropout_p must lie in [0, 1)")
        if len(self.sample_seeds) == 0:
            raise ValueError("need at least one sample seed")
        if len(set(self.sample_seeds)) != len(self.sample_seeds):
            raise ValueError("sample seeds must be distinct")
        if self.empty_ref_policy not in ("reject", "accept_if_all_empty"):
            raise ValueError(f"unknown empty_ref_policy {self.empty_ref_policy!r}")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau,
            "dropout_p": self.dropout_p,
            "sample_seeds": list(self.sample_seeds),
            "empty_ref_policy": self.empty_ref_policy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DustConfig":
        return cls(
            tau=float(d["tau"]),
            dropout_p=float(d["dropout_p"]),
            sample_seeds=tuple(int(s) for s in d["sample_seeds"]),
            empty_ref_policy=str(d["empty_ref_policy"]),
        )


@dataclass(frozen=True)
class FilterDecision:
    """Audit record for one utterance passed through the filter."""

    utt_id: str
    reference: str
    distances: Tuple[int, ...]
    threshold: float
    accepted: bool
    reason: str

    def to_json(self, tau: float) -> str:
        return json.dumps(
            {
                "id": self.utt_id,
                "ref": self.reference,
                "ref_len": len(self.reference),
                "distances": list(self.distances),
                "tau": tau,
                "accepted": self.accepted,
                "reason": self.reason,
            },
            sort_keys=True,
        )


@dataclass
class PseudoLabelPool:
    """Accepted utterances carrying their pseudo-labels as transcripts."""

    utterances: List[Utterance]
    decisions: List[FilterDecision]
    config: DustConfig

    @property
    def size(self) -> int:
        return len(self.utterances)

    @property
    def acceptance_rate(self) -> float:
        if not self.decisions:
            return 0.0
        return self.size / len(self.decisions)


def _decide(transcriber: Transcriber, utt: Utterance, config: DustConfig) -> FilterDecision:
    try:
        ref = transcriber.transcribe(utt.features, DropoutMode.off())
        samples = [
            transcriber.transcribe(utt.features, DropoutMode.seeded(s, config.dropout_p))
            for s in config.sample_seeds
        ]
    except ValueError as exc:
        return FilterDecision(
            utt_id=utt.id,
            reference="",
            distances=(),
            threshold=0.0,
            accepted=False,
            reason=f"decode-failed: {exc}",
        )
    distances = tuple(levenshtein(ref, s).distance for s in samples)
    threshold = config.tau * len(ref)
    if len(ref) == 0:
        if config.empty_ref_policy == "accept_if_all_empty" and all(s == "" for s in samples):
            return FilterDecision(utt.id, ref, distances, threshold, True, "empty-unanimous")
        return FilterDecision(utt.id, ref, distances, threshold, False, "empty-reference")
    if max(distances) < threshold:
        return FilterDecision(utt.id, ref, distances, threshold, True, "agreement")
    return FilterDecision(utt.id, ref, distances, threshold, False, "disagreement")


def dust_filter(
    transcriber: Transcriber,
    utterances: Sequence[Utterance],
    config: DustConfig,
    log_path: Optional[Path] = None,
    jobs: int = 1,
) -> PseudoLabelPool:
    """Run the agreement filter over a corpus and build the accepted pool.

    Pool members are copies of the input utterances with the transcript
    replaced by the deterministic decode; original transcripts (if any) are
    never consulted.  When log_path is given, one JSON line per decision is
    written for offline inspection.  jobs > 1 decides utterances on a thread
    pool; every sample decode is seeded per utterance, so the decision list
    is identical to the sequential one.
    """
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            decisions = list(ex.map(lambda u: _decide(transcriber, u, config), utterances))
    else:
        decisions = [_decide(transcriber, u, config) for u in utterances]
    pool: List[Utterance] = []
    for utt, dec in zip(utterances, decisions):
        if dec.accepted:
            pool.append(
                Utterance(
                    id=utt.id,
                    domain=utt.domain,
                    features=utt.features,
                    transcript=dec.reference,
                )
            )
    if log_path is not None:
        log_path = Path(log_path)
        with log_path.open("w", encoding="utf-8") as fh:
            for dec in decisions:
                fh.write(dec.to_json(config.tau) + "\n")
    return PseudoLabelPool(utterances=pool, decisions=decisions, config=config)


def replay_accepted(decisions: Sequence[FilterDecision], tau: float) -> List[FilterDecision]:
    """Decisions that would be accepted if thresholded at tau.

    Distances are recorded raw, so any tau can be replayed without decoding
    again.  Decisions that never produced a usable reference (decode errors,
    empty references) stay rejected at every tau; unanimous-empty acceptances
    stay accepted, since no threshold was involved in the first place.
    """
    out = []
    for dec in decisions:
        if dec.reason == "empty-unanimous":
            out.append(dec)
            continue
        if dec.reason.startswith("decode-failed") or len(dec.reference) == 0:
            continue
        if dec.distances and max(dec.distances) < tau * len(dec.reference):
            out.append(dec)
    return out


def replay_with_tau(decisions: Sequence[FilterDecision], tau: float) -> int:
    """Count acceptances if the same decode evidence were thresholded at tau."""
    return len(replay_accepted(decisions, tau))


def load_decision_log(path: Path) -> List[FilterDecision]:
    decisions = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            decisions.append(
                FilterDecision(
                    utt_id=d["id"],
                    reference=d["ref"],
                    distances=tuple(d["distances"]),
                    threshold=d["tau"] * d["ref_len"],
                    accepted=bool(d["accepted"]),
                    reason=d["reason"],
                )
            )
    return decisions


@dataclass(frozen=True)
class UncertaintyRecord:
    """Per-utterance dispersion of dropout decodes around the reference."""

    utt_id: str
    domain: str
    reference: str
    variance: float  # population variance of length-normalized distances
    empty_reference: bool


def uncertainty_profile(
    transcriber: Transcriber,
    utterances: Sequence[Utterance],
    dropout_p: float = 0.1,
    n_samples: int = 10,
    seed_base: int = 1000,
) -> List[UncertaintyRecord]:
    """Measure decode dispersion per utterance.

    For each utterance: one deterministic reference decode and n_samples
    dropout decodes under seeds seed_base+1 .. seed_base+n_samples; the
    statistic is the population variance of dist(ref, sample)/len(ref).
    Utterances with an empty reference cannot be normalized; they come back
    flagged with variance NaN and should be excluded from aggregates.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples for a variance")
    records = []
    for utt in utterances:
        ref = transcriber.transcribe(utt.features, DropoutMode.off())
        if len(ref) == 0:
            records.append(UncertaintyRecord(utt.id, utt.domain, ref, float("nan"), True))
            continue
        dists = np.array(
            [
                levenshtein(
                    ref,
                    transcriber.transcribe(
                        utt.features, DropoutMode.seeded(seed_base + i + 1, dropout_p)
                    ),
                ).distance
                for i in range(n_samples)
            ],
            dtype=np.float64,
        )
        norm = dists / len(ref)
        records.append(
            UncertaintyRecord(utt.id, utt.domain, ref, float(norm.var(ddof=0)), False)
        )
    return records


def variance_quartiles(records: Sequence[UncertaintyRecord]) -> Dict[str, Tuple[float, float, float]]:
    """(Q1, median, Q3) of decode variance per domain, empty refs excluded."""
    by_domain: Dict[str, List[float]] = {}
    for rec in records:
        if rec.empty_reference:
            continue
        by_domain.setdefault(rec.domain, []).append(rec.variance)
    out = {}
    for domain, vals in by_domain.items():
        q1, q2, q3 = np.percentile(vals, [25, 50, 75])
        out[domain] = (float(q1), float(q2), float(q3))
    return out


def pool_ler(pool_utterances: Sequence[Utterance], truth: Mapping[str, str]) -> float:
    """Corpus-level label error rate of pseudo-labels against gold text.

    Diagnostic only: the filter itself never sees gold transcripts.  Raises
    KeyError if a pool member has no gold reference to compare against.
    """
    pairs = [(u.transcript or "", truth[u.id]) for u in pool_utterances]
    return corpus_error_rate(pairs)
