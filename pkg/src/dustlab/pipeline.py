"""Iterative self-training orchestration: filter, retrain, evaluate, report.

One run lives in a directory.  Iteration i leaves behind

    decisions_000i.jsonl   agreement-filter audit log (DUST mode)
    pool_000i.json         accepted utterance ids and their pseudo-labels
    model_000i.ckpt        the freshly retrained student
    report_000i.json       sizes, error rates, recovery rates
    timings_000i.json      wall-clock sidecar

plus a cumulative reports.csv.  Everything except the timings sidecar is a
pure function of (corpora, plan, seeds), so re-running a stage must
reproduce those bytes exactly; timing is kept out of the canonical reports
for that reason.  A run is resumable: completed iterations are detected by
their artifacts and skipped, and the teacher model is reloaded from the
last checkpoint.

Each iteration trains a brand-new model on labeled + pool rather than
fine-tuning the previous one, and the pool is re-filtered from the full
unlabeled set by the previous iteration's model.  Ground-truth transcripts
on the unlabeled corpus are used only to score pool quality; the filter
sees stripped copies.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .corpus import Utterance
from .decode import Fusion, beam_search, greedy_ctc
from .dust import DustConfig, NeuralTranscriber, dust_filter, pool_ler
from .lm import NGramModel
from .nnet.checkpoint import average_checkpoints, load_checkpoint, save_checkpoint
from .nnet.model import DropoutMode, ModelConfig, Params, forward
from .nnet.train import TrainHyper, TrainResult, train
from .textdist import corpus_error_rate, werr

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalCondition:
    """One decoding setup used at evaluation time (dropout always off)."""

    name: str
    beam: int = 1
    lm: Optional[NGramModel] = None
    lm_weight: float = 0.0
    length_bonus: float = 0.0

    def fusion(self) -> Optional[Fusion]:
        if self.lm is None or self.lm_weight == 0.0:
            return None
        return Fusion(model=self.lm, weight=self.lm_weight)


def _decode(params: Params, features: np.ndarray, alphabet: str, cond: EvalCondition) -> str:
    logits = forward(params, np.asarray(features, dtype=np.float64), DropoutMode.off())
    fusion = cond.fusion()
    if cond.beam <= 1 and fusion is None and cond.length_bonus == 0.0:
        return greedy_ctc(logits, alphabet)
    return beam_search(logits, alphabet, beam=cond.beam, fusion=fusion,
                       length_bonus=cond.length_bonus)[0][0]


def evaluate(
    params: Params,
    test_sets: Mapping[str, Sequence[Utterance]],
    conditions: Sequence[EvalCondition],
    alphabet: str,
    jobs: int = 1,
) -> Dict[str, Dict[str, float]]:
    """Corpus error rate per (test set, decode condition).

    Every test utterance must carry its reference transcript.  jobs > 1
    decodes utterances on a thread pool; decoding is deterministic per
    utterance, so the result never depends on the worker count.
    """
    out: Dict[str, Dict[str, float]] = {}
    for set_name, utts in test_sets.items():
        missing = [u.id for u in utts if u.transcript is None]
        if missing:
            raise ValueError(f"test set {set_name!r} lacks transcripts: {missing[:3]}")
        out[set_name] = {}
        for cond in conditions:
            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as ex:
                    hyps = list(ex.map(
                        lambda u: _decode(params, u.features, alphabet, cond), utts))
            else:
                hyps = [_decode(params, u.features, alphabet, cond) for u in utts]
            out[set_name][cond.name] = corpus_error_rate(
                [(h, u.transcript) for h, u in zip(hyps, utts)])
    return out


@dataclass
class IterationPlan:
    """Settings for a full self-training run.

    dust may be a single config (applied to every iteration) or one per
    iteration.  lm_schedule says per iteration whether the fusion LM is used
    while generating pseudo-labels; evaluation conditions are independent of
    it.  Retraining uses retrain.seed + iteration as its seed so every
    iteration initializes a genuinely new model while staying reproducible.
    """

    n_iterations: int
    model: ModelConfig
    retrain: TrainHyper
    dust: Sequence[DustConfig]
    mode: str = "DUST"
    lm_schedule: Sequence[bool] = ()
    gen_beam: int = 1
    gen_lm: Optional[NGramModel] = None
    gen_lm_weight: float = 0.0
    gen_length_bonus: float = 0.0
    eval_conditions: Sequence[EvalCondition] = ()
    avg_checkpoints: int = 1

    def __post_init__(self) -> None:
        if self.n_iterations < 1:
            raise ValueError("need at least one iteration")
        if self.mode not in ("DUST", "ST_ALL"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if isinstance(self.dust, DustConfig):
            self.dust = [self.dust] * self.n_iterations
        else:
            self.dust = list(self.dust)
            if len(self.dust) == 1:
                self.dust = self.dust * self.n_iterations
        if len(self.dust) != self.n_iterations:
            raise ValueError("need one filter config per iteration")
        if not self.lm_schedule:
            self.lm_schedule = [False] * self.n_iterations
        else:
            self.lm_schedule = [bool(b) for b in self.lm_schedule]
        if len(self.lm_schedule) != self.n_iterations:
            raise ValueError("lm_schedule length must equal n_iterations")
        if any(self.lm_schedule) and self.gen_lm is None:
            raise ValueError("lm_schedule enables fusion but no gen_lm given")
        if not self.eval_conditions:
            self.eval_conditions = [EvalCondition(name="greedy")]
        if self.avg_checkpoints < 1:
            raise ValueError("avg_checkpoints must be >= 1")


@dataclass
class IterationReport:
    iteration: int
    mode: str
    tau: float
    dropout_p: float
    lm_used: bool
    pool_size: int
    pool_ler: Optional[float]
    wers: Dict[str, Dict[str, float]]
    baseline_wers: Dict[str, Dict[str, float]]
    topline_wers: Dict[str, Dict[str, float]]
    werrs: Dict[str, Dict[str, Optional[float]]]
    checkpoint: str
    pool_file: str
    wall_clock_sec: float = float("nan")  # sidecar only, never in report JSON

    def to_json_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "mode": self.mode,
            "tau": self.tau,
            "dropout_p": self.dropout_p,
            "lm_used": self.lm_used,
            "pool_size": self.pool_size,
            "pool_ler": self.pool_ler,
            "wers": self.wers,
            "baseline_wers": self.baseline_wers,
            "topline_wers": self.topline_wers,
            "werrs": self.werrs,
            "checkpoint": self.checkpoint,
            "pool_file": self.pool_file,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "IterationReport":
        return cls(
            iteration=d["iteration"],
            mode=d["mode"],
            tau=d["tau"],
            dropout_p=d["dropout_p"],
            lm_used=d["lm_used"],
            pool_size=d["pool_size"],
            pool_ler=d["pool_ler"],
            wers=d["wers"],
            baseline_wers=d["baseline_wers"],
            topline_wers=d["topline_wers"],
            werrs=d["werrs"],
            checkpoint=d["checkpoint"],
            pool_file=d["pool_file"],
        )


def report_path(run_dir: Path, i: int) -> Path:
    return Path(run_dir) / f"report_{i:04d}.json"


def checkpoint_path(run_dir: Path, i: int) -> Path:
    return Path(run_dir) / f"model_{i:04d}.ckpt"


def pool_path(run_dir: Path, i: int) -> Path:
    return Path(run_dir) / f"pool_{i:04d}.json"


def decisions_path(run_dir: Path, i: int) -> Path:
    return Path(run_dir) / f"decisions_{i:04d}.jsonl"


def timings_path(run_dir: Path, i: int) -> Path:
    return Path(run_dir) / f"timings_{i:04d}.json"


def csv_path(run_dir: Path) -> Path:
    return Path(run_dir) / "reports.csv"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def save_pool(path: Path, pool_utts: Sequence[Utterance]) -> None:
    entries = [{"id": u.id, "label": u.transcript or ""} for u in pool_utts]
    entries.sort(key=lambda e: e["id"])
    _write_json(Path(path), {"size": len(entries), "entries": entries})


def load_pool(path: Path, source: Sequence[Utterance]) -> List[Utterance]:
    """Rehydrate pool members by joining stored labels onto their features."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    by_id = {u.id: u for u in source}
    out = []
    for entry in doc["entries"]:
        base = by_id.get(entry["id"])
        if base is None:
            raise ValueError(f"pool references unknown utterance {entry['id']!r}")
        out.append(Utterance(id=base.id, domain=base.domain, features=base.features,
                             transcript=entry["label"]))
    return out


def _strip_transcripts(utts: Sequence[Utterance]) -> List[Utterance]:
    return [Utterance(id=u.id, domain=u.domain, features=u.features, transcript=None)
            for u in utts]


def pseudo_label_all(
    transcriber: NeuralTranscriber, utterances: Sequence[Utterance]
) -> List[Utterance]:
    """Deterministic decode of everything; the ST-all teacher signal."""
    out = []
    for u in utterances:
        try:
            label = transcriber.transcribe(u.features, DropoutMode.off())
        except ValueError:
            label = ""
        out.append(Utterance(id=u.id, domain=u.domain, features=u.features, transcript=label))
    return out


def _student_params(result: TrainResult, k: int) -> Params:
    if k <= 1:
        return result.best(1)[0].params
    return average_checkpoints([r.params for r in result.best(k)])


def train_student(
    model: ModelConfig,
    corpus: Sequence[Utterance],
    hyper: TrainHyper,
    alphabet: str,
    avg_checkpoints: int = 1,
) -> Params:
    """Fresh model trained on the given corpus, optionally weight-averaged
    over the lowest-validation-loss epochs."""
    result = train(model, corpus, hyper, alphabet)
    return _student_params(result, avg_checkpoints)


def _compute_werrs(
    wers: Dict[str, Dict[str, float]],
    baseline: Dict[str, Dict[str, float]],
    topline: Dict[str, Dict[str, float]],
) -> Dict[str, Dict[str, Optional[float]]]:
    out: Dict[str, Dict[str, Optional[float]]] = {}
    for set_name, conds in wers.items():
        out[set_name] = {}
        for cond_name, adapted in conds.items():
            b = baseline.get(set_name, {}).get(cond_name)
            t = topline.get(set_name, {}).get(cond_name)
            if b is None or t is None or b <= t:
                out[set_name][cond_name] = None
            else:
                out[set_name][cond_name] = werr(b, t, adapted)
    return out


def write_reports_csv(run_dir: Path, reports: Sequence[IterationReport]) -> None:
    """Cumulative one-row-per-iteration summary for quick plotting.

    Uses the first eval condition and the test sets named source / target.
    """
    path = csv_path(run_dir)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "pool_size", "pool_ler",
                         "wer_source", "wer_target", "werr_target"])
        for rep in reports:
            conds = rep.wers.get("target") or rep.wers.get("source") or {}
            cond = next(iter(conds), None)

            def cell(value):
                return "" if value is None else f"{value:.4f}"

            wer_src = rep.wers.get("source", {}).get(cond) if cond else None
            wer_tgt = rep.wers.get("target", {}).get(cond) if cond else None
            werr_tgt = rep.werrs.get("target", {}).get(cond) if cond else None
            writer.writerow([
                rep.iteration,
                rep.pool_size,
                cell(rep.pool_ler),
                cell(wer_src),
                cell(wer_tgt),
                cell(werr_tgt),
            ])


def _completed(run_dir: Path, i: int) -> bool:
    return (report_path(run_dir, i).exists()
            and checkpoint_path(run_dir, i).exists()
            and pool_path(run_dir, i).exists())


def run_self_training(
    labeled: Sequence[Utterance],
    unlabeled: Sequence[Utterance],
    test_sets: Mapping[str, Sequence[Utterance]],
    plan: IterationPlan,
    run_dir: str | Path,
    base_params: Params,
    baseline_wers: Dict[str, Dict[str, float]],
    topline_wers: Dict[str, Dict[str, float]],
    alphabet: str,
    jobs: int = 1,
) -> List[IterationReport]:
    """Execute (or resume) a full self-training run; see the module docstring.

    base_params is the iteration-1 teacher, normally the stored baseline
    checkpoint.  baseline_wers / topline_wers are the stored reference
    points that recovery rates are computed against.  jobs bounds the
    per-utterance parallelism of filtering and evaluation only; training
    stays sequential so checkpoints are reproduced bit for bit.
    """
    if not labeled or not unlabeled:
        raise ValueError("labeled and unlabeled corpora must be nonempty")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    truth = {u.id: u.transcript for u in unlabeled if u.transcript}
    blind = _strip_transcripts(unlabeled)

    reports: List[IterationReport] = []
    teacher = base_params
    start = 1
    while start <= plan.n_iterations and _completed(run_dir, start):
        doc = json.loads(report_path(run_dir, start).read_text(encoding="utf-8"))
        reports.append(IterationReport.from_json_dict(doc))
        teacher = load_checkpoint(checkpoint_path(run_dir, start))
        log.info("iteration %d already complete, skipping", start)
        start += 1

    for i in range(start, plan.n_iterations + 1):
        t0 = time.perf_counter()
        dust_cfg = plan.dust[i - 1]
        lm_on = plan.lm_schedule[i - 1]
        fusion = (Fusion(model=plan.gen_lm, weight=plan.gen_lm_weight)
                  if lm_on and plan.gen_lm is not None else None)
        transcriber = NeuralTranscriber(
            params=teacher,
            alphabet=alphabet,
            beam=plan.gen_beam,
            fusion=fusion,
            length_bonus=plan.gen_length_bonus,
        )

        if plan.mode == "ST_ALL":
            pool_utts = pseudo_label_all(transcriber, blind)
        else:
            pool = dust_filter(transcriber, blind, dust_cfg,
                               log_path=decisions_path(run_dir, i), jobs=jobs)
            pool_utts = pool.utterances
        pool_utts = sorted(pool_utts, key=lambda u: u.id)
        save_pool(pool_path(run_dir, i), pool_utts)

        ler = None
        if pool_utts and all(u.id in truth for u in pool_utts):
            ler = pool_ler(pool_utts, truth)

        hyper_i = replace(plan.retrain, seed=plan.retrain.seed + i)
        student = train_student(plan.model, list(labeled) + pool_utts, hyper_i,
                                alphabet, plan.avg_checkpoints)
        save_checkpoint(checkpoint_path(run_dir, i), student)
        # reload so downstream decoding sees exactly the persisted weights
        student = load_checkpoint(checkpoint_path(run_dir, i))

        wers = evaluate(student, test_sets, plan.eval_conditions, alphabet, jobs=jobs)
        werrs = _compute_werrs(wers, baseline_wers, topline_wers)
        elapsed = time.perf_counter() - t0

        rep = IterationReport(
            iteration=i,
            mode=plan.mode,
            tau=dust_cfg.tau,
            dropout_p=dust_cfg.dropout_p,
            lm_used=lm_on,
            pool_size=len(pool_utts),
            pool_ler=ler,
            wers=wers,
            baseline_wers=dict(baseline_wers),
            topline_wers=dict(topline_wers),
            werrs=werrs,
            checkpoint=checkpoint_path(run_dir, i).name,
            pool_file=pool_path(run_dir, i).name,
            wall_clock_sec=elapsed,
        )
        _write_json(report_path(run_dir, i), rep.to_json_dict())
        _write_json(timings_path(run_dir, i), {"iteration": i, "wall_clock_sec": elapsed})
        reports.append(rep)
        write_reports_csv(run_dir, reports)
        log.info("iteration %d: |pool|=%d pool_ler=%s wall=%.1fs",
                 i, rep.pool_size, f"{ler:.2f}" if ler is not None else "n/a", elapsed)
        teacher = student

    write_reports_csv(run_dir, reports)
    return reports
