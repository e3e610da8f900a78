"""Command-line front end for scripted experiments.

Subcommands cover the whole desk workflow: synthesize corpora (gen-data),
train the reference checkpoints (train-base, train-topline), fit a character
LM (fit-lm), run the agreement filter once (filter), run iterative
self-training from a plan file (iterate), score checkpoints (evaluate) and
regenerate summary tables (report).

All randomness flows from explicit --seed flags or seeds recorded in config
files; nothing reads the clock.  Commands refuse to overwrite an existing
output unless --force is given, so rerunning with identical arguments either
reproduces the same bytes or leaves everything untouched.

Exit codes: 0 success, 2 configuration or usage error, 3 missing or corrupt
data, 4 numeric failure during training.  All errors are one line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .corpus import (
    CorpusFormatError,
    CorpusManifest,
    DOMAIN_PRESETS,
    Utterance,
    load_manifest,
    save_manifest,
    synth_corpus,
)
from .dust import DustConfig, NeuralTranscriber, dust_filter, load_decision_log, \
    replay_accepted, uncertainty_profile
from .decode import Fusion
from .lm import LmFormatError, fit_ngram, load_lm, save_lm
from .nnet.checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .nnet.model import ModelConfig
from .nnet.train import AugmentPolicy, TrainHyper, TrainingDivergedError
from .pipeline import (
    EvalCondition,
    IterationPlan,
    IterationReport,
    csv_path,
    evaluate,
    report_path,
    run_self_training,
    save_pool,
    train_student,
    write_reports_csv,
)
from .textdist import corpus_error_rate

log = logging.getLogger(__name__)


class CliError(Exception):
    """Carries the exit code; the message is printed as the one-line error."""

    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config_error(msg: str) -> CliError:
    return CliError(2, f"config error: {msg}")


def _data_error(msg: str) -> CliError:
    return CliError(3, f"data error: {msg}")


def _refuse_existing(force: bool, *paths: Path) -> None:
    if force:
        return
    present = [str(p) for p in paths if Path(p).exists()]
    if present:
        raise _config_error(
            f"output exists: {', '.join(present)} (pass --force to overwrite)")


def _load_corpus(path: str) -> CorpusManifest:
    p = Path(path)
    if not p.exists():
        raise _data_error(f"corpus manifest not found: {p}")
    return load_manifest(p)


def _merge_corpora(paths: Sequence[str]) -> Tuple[List[Utterance], str]:
    """Concatenate manifests, insisting they share alphabet and feature dim."""
    utts: List[Utterance] = []
    alphabet = None
    dim = None
    for path in paths:
        man = _load_corpus(path)
        if alphabet is None:
            alphabet, dim = man.spec.alphabet, man.spec.dim
        elif man.spec.alphabet != alphabet or man.spec.dim != dim:
            raise _data_error(f"{path} disagrees on alphabet or feature dim")
        utts.extend(man.utterances)
    if not utts:
        raise _data_error("no utterances in the given manifests")
    return utts, alphabet


def _parse_named(values: Sequence[str], flag: str) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for item in values:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise _config_error(f"{flag} wants NAME=PATH, got {item!r}")
        if name in out:
            raise _config_error(f"duplicate {flag} name {name!r}")
        out[name] = path
    return out


def _parse_seeds(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise _config_error(f"--seeds wants comma-separated integers, got {text!r}")


def _require_transcripts(utts: Sequence[Utterance], what: str) -> None:
    missing = [u.id for u in utts if not u.transcript]
    if missing:
        raise _data_error(f"{what} lacks transcripts for {len(missing)} "
                          f"utterances (first: {missing[0]})")


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    if args.preset not in DOMAIN_PRESETS:
        raise _config_error(
            f"unknown preset {args.preset!r} (choose from {sorted(DOMAIN_PRESETS)})")
    if args.n < 1:
        raise _config_error("--n must be >= 1")
    if args.len_min < 1 or args.len_max < args.len_min:
        raise _config_error("need 1 <= --len-min <= --len-max")
    out = Path(args.out)
    _refuse_existing(args.force, out, out.with_suffix(".blob"))
    spec = DOMAIN_PRESETS[args.preset]()
    manifest = synth_corpus(spec, args.n, (args.len_min, args.len_max), args.seed)
    if args.drop_transcripts:
        for u in manifest.utterances:
            u.transcript = None
    out.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(out, manifest)
    print(f"gen-data: {args.n} {args.preset} utterances (seed {args.seed}) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# train-base / train-topline
# ---------------------------------------------------------------------------

def _cmd_train(args: argparse.Namespace) -> int:
    out = Path(args.out)
    meta_path = out.with_suffix(".meta.json")
    _refuse_existing(args.force, out, meta_path)
    utts, alphabet = _merge_corpora(args.train)
    _require_transcripts(utts, "training corpus")
    dim = utts[0].features.shape[1]
    config = ModelConfig(
        input_dim=dim,
        vocab_size=len(alphabet) + 1,
        subsample_stride=args.stride,
        n_blocks=args.n_blocks,
        d_model=args.d_model,
        n_heads=args.n_heads,
        ff_dim=args.ff_dim,
        dropout_p=args.dropout,
    )
    hyper = TrainHyper(
        epochs=args.epochs,
        batch_size=args.batch_size,
        warmup=args.warmup,
        factor=args.factor,
        seed=args.seed,
        augment=AugmentPolicy() if args.augment else None,
        val_fraction=args.val_fraction,
    )
    params = train_student(config, utts, hyper, alphabet,
                           avg_checkpoints=args.avg_checkpoints)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, params)
    meta = {
        "model": config.to_dict(),
        "train": {
            "epochs": hyper.epochs, "batch_size": hyper.batch_size,
            "warmup": hyper.warmup, "factor": hyper.factor, "seed": hyper.seed,
            "augment": args.augment, "val_fraction": hyper.val_fraction,
            "avg_checkpoints": args.avg_checkpoints,
        },
        "corpora": list(args.train),
        "n_utterances": len(utts),
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    print(f"{args.command}: trained on {len(utts)} utterances -> {out}")
    return 0


# ---------------------------------------------------------------------------
# fit-lm
# ---------------------------------------------------------------------------

def cmd_fit_lm(args: argparse.Namespace) -> int:
    out = Path(args.out)
    _refuse_existing(args.force, out)
    utts, _ = _merge_corpora(args.train)
    texts = [list(u.transcript) for u in utts if u.transcript]
    if not texts:
        raise _data_error("no transcripts to fit the LM on")
    model = fit_ngram(texts, order=args.order, discount=args.discount)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_lm(out, model)
    print(f"fit-lm: order-{args.order} model from {len(texts)} transcripts -> {out}")
    return 0


# ---------------------------------------------------------------------------
# filter
# ---------------------------------------------------------------------------

def _transcriber_from_flags(params, alphabet: str, args) -> NeuralTranscriber:
    fusion = None
    if args.lm is not None:
        if args.lm_weight == 0.0:
            raise _config_error("--lm given but --lm-weight is 0")
        fusion = Fusion(model=load_lm(args.lm), weight=args.lm_weight)
    return NeuralTranscriber(params=params, alphabet=alphabet, beam=args.beam,
                             fusion=fusion, length_bonus=args.length_bonus)


def cmd_filter(args: argparse.Namespace) -> int:
    out_pool = Path(args.out_pool)
    out_dec = Path(args.out_decisions)
    _refuse_existing(args.force, out_pool, out_dec)
    params = load_checkpoint(args.model)
    man = _load_corpus(args.corpus)
    config = DustConfig(tau=args.tau, dropout_p=args.dropout_p,
                        sample_seeds=_parse_seeds(args.seeds),
                        empty_ref_policy=args.empty_ref_policy)
    transcriber = _transcriber_from_flags(params, man.spec.alphabet, args)
    blind = [Utterance(id=u.id, domain=u.domain, features=u.features)
             for u in man.utterances]
    out_pool.parent.mkdir(parents=True, exist_ok=True)
    out_dec.parent.mkdir(parents=True, exist_ok=True)
    pool = dust_filter(transcriber, blind, config, log_path=out_dec, jobs=args.jobs)
    save_pool(out_pool, pool.utterances)
    print(f"filter: accepted {pool.size}/{len(blind)} "
          f"({100.0 * pool.acceptance_rate:.1f}%) at tau={args.tau} -> {out_pool}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _auto_cond_name(args) -> str:
    if args.name:
        return args.name
    if args.beam <= 1 and args.lm is None and args.length_bonus == 0.0:
        return "greedy"
    name = f"beam{args.beam}"
    if args.lm is not None:
        name += "+lm"
    return name


def cmd_evaluate(args: argparse.Namespace) -> int:
    out = Path(args.out) if args.out else None
    if out is not None:
        _refuse_existing(args.force, out)
    params = load_checkpoint(args.model)
    named = _parse_named(args.test, "--test")
    test_sets = {}
    alphabet = None
    for name, path in named.items():
        man = _load_corpus(path)
        _require_transcripts(man.utterances, f"test set {name!r}")
        test_sets[name] = man.utterances
        alphabet = man.spec.alphabet
    lm = load_lm(args.lm) if args.lm is not None else None
    cond = EvalCondition(name=_auto_cond_name(args), beam=args.beam, lm=lm,
                         lm_weight=args.lm_weight, length_bonus=args.length_bonus)
    wers = evaluate(params, test_sets, [cond], alphabet, jobs=args.jobs)
    for set_name, conds in wers.items():
        for cond_name, wer in conds.items():
            print(f"{set_name:>12s}  {cond_name:>10s}  {wer:6.2f}")
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(wers, indent=2, sort_keys=True) + "\n",
                       encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# iterate
# ---------------------------------------------------------------------------

_PLAN_KEYS = {"n_iterations", "mode", "model", "retrain", "dust", "lm_schedule",
              "gen_beam", "gen_lm", "gen_lm_weight", "gen_length_bonus",
              "eval_conditions", "avg_checkpoints"}
_RETRAIN_KEYS = {"epochs", "batch_size", "warmup", "factor", "seed", "augment",
                 "val_fraction"}
_DUST_KEYS = {"tau", "dropout_p", "sample_seeds", "empty_ref_policy"}
_COND_KEYS = {"name", "beam", "lm", "lm_weight", "length_bonus"}


def _check_keys(doc: dict, allowed: set, what: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise _config_error(f"unknown {what} keys: {sorted(unknown)}")


def _dust_from(doc: dict) -> DustConfig:
    _check_keys(doc, _DUST_KEYS, "dust")
    return DustConfig(
        tau=float(doc.get("tau", 0.3)),
        dropout_p=float(doc.get("dropout_p", 0.1)),
        sample_seeds=tuple(doc.get("sample_seeds", (1, 2, 3))),
        empty_ref_policy=doc.get("empty_ref_policy", "reject"),
    )


def _retrain_from(doc: dict) -> TrainHyper:
    _check_keys(doc, _RETRAIN_KEYS, "retrain")
    aug = doc.get("augment")
    if isinstance(aug, dict):
        augment = AugmentPolicy(**aug)
    elif aug:
        augment = AugmentPolicy()
    else:
        augment = None
    return TrainHyper(
        epochs=int(doc.get("epochs", 30)),
        batch_size=int(doc.get("batch_size", 16)),
        warmup=int(doc.get("warmup", 400)),
        factor=float(doc.get("factor", 0.7)),
        seed=int(doc.get("seed", 0)),
        augment=augment,
        val_fraction=float(doc.get("val_fraction", 0.1)),
    )


def _cond_from(doc: dict, base_dir: Path) -> EvalCondition:
    _check_keys(doc, _COND_KEYS, "eval condition")
    if "name" not in doc:
        raise _config_error("eval condition needs a name")
    lm = None
    if doc.get("lm"):
        lm = load_lm(base_dir / doc["lm"])
    return EvalCondition(name=doc["name"], beam=int(doc.get("beam", 1)), lm=lm,
                         lm_weight=float(doc.get("lm_weight", 0.0)),
                         length_bonus=float(doc.get("length_bonus", 0.0)))


def _plan_from_file(path: Path, model_default: ModelConfig,
                    input_dim: int, vocab_size: int) -> IterationPlan:
    """Build the iteration plan from a JSON file.

    LM paths inside the file are resolved relative to the file itself.  The
    model section may be omitted (the baseline teacher's architecture is
    reused) or given without input_dim / vocab_size (filled from the data).
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise _data_error(f"cannot read plan: {exc}")
    except json.JSONDecodeError as exc:
        raise _config_error(f"plan is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise _config_error("plan must be a JSON object")
    _check_keys(doc, _PLAN_KEYS, "plan")
    if "n_iterations" not in doc:
        raise _config_error("plan needs n_iterations")
    base_dir = Path(path).parent

    if "model" in doc:
        model_doc = dict(doc["model"])
        model_doc.setdefault("input_dim", input_dim)
        model_doc.setdefault("vocab_size", vocab_size)
        try:
            model = ModelConfig.from_dict(model_doc)
        except TypeError as exc:
            raise _config_error(f"bad model section: {exc}")
    else:
        model = model_default

    dust_doc = doc.get("dust", {})
    if isinstance(dust_doc, list):
        dust = [_dust_from(d) for d in dust_doc]
    else:
        dust = [_dust_from(dust_doc)]

    gen_lm = None
    if doc.get("gen_lm"):
        gen_lm = load_lm(base_dir / doc["gen_lm"])

    conds = [_cond_from(c, base_dir) for c in doc.get("eval_conditions", [])]

    try:
        return IterationPlan(
            n_iterations=int(doc["n_iterations"]),
            model=model,
            retrain=_retrain_from(doc.get("retrain", {})),
            dust=dust,
            mode=doc.get("mode", "DUST"),
            lm_schedule=doc.get("lm_schedule", ()),
            gen_beam=int(doc.get("gen_beam", 1)),
            gen_lm=gen_lm,
            gen_lm_weight=float(doc.get("gen_lm_weight", 0.0)),
            gen_length_bonus=float(doc.get("gen_length_bonus", 0.0)),
            eval_conditions=conds,
            avg_checkpoints=int(doc.get("avg_checkpoints", 1)),
        )
    except ValueError as exc:
        raise _config_error(f"bad plan: {exc}")


def _stored_wers(run_dir: Path, tag: str, ckpt: Optional[str], test_sets,
                 conditions, alphabet: str, jobs: int) -> Dict[str, Dict[str, float]]:
    """Evaluate a reference checkpoint once and keep the result in the run dir.

    The checkpoint itself is copied next to the reports so the run directory
    stays self-contained; on resume the stored numbers are reused untouched.
    """
    if ckpt is None:
        return {}
    wers_path = run_dir / f"{tag}_wers.json"
    if wers_path.exists():
        return json.loads(wers_path.read_text(encoding="utf-8"))
    params = load_checkpoint(ckpt)
    wers = evaluate(params, test_sets, conditions, alphabet, jobs=jobs)
    stored_ckpt = run_dir / f"{tag}.ckpt"
    if not stored_ckpt.exists():
        shutil.copyfile(ckpt, stored_ckpt)
    wers_path.write_text(json.dumps(wers, indent=2, sort_keys=True) + "\n",
                         encoding="utf-8")
    return wers


def cmd_iterate(args: argparse.Namespace) -> int:
    labeled = _load_corpus(args.labeled)
    unlabeled = _load_corpus(args.unlabeled)
    if labeled.spec.alphabet != unlabeled.spec.alphabet:
        raise _data_error("labeled and unlabeled corpora disagree on alphabet")
    alphabet = labeled.spec.alphabet
    _require_transcripts(labeled.utterances, "labeled corpus")

    named = _parse_named(args.test, "--test")
    test_sets = {}
    for name, path in named.items():
        man = _load_corpus(path)
        _require_transcripts(man.utterances, f"test set {name!r}")
        test_sets[name] = man.utterances

    base = load_checkpoint(args.baseline)
    dim = labeled.utterances[0].features.shape[1]
    plan = _plan_from_file(Path(args.plan), base.config, dim, len(alphabet) + 1)

    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    baseline_wers = _stored_wers(run_dir, "baseline", args.baseline, test_sets,
                                 plan.eval_conditions, alphabet, args.jobs)
    topline_wers = _stored_wers(run_dir, "topline", args.topline, test_sets,
                                plan.eval_conditions, alphabet, args.jobs)

    reports = run_self_training(
        labeled.utterances, unlabeled.utterances, test_sets, plan, run_dir,
        base, baseline_wers, topline_wers, alphabet, jobs=args.jobs)
    for rep in reports:
        cond = plan.eval_conditions[0].name
        wer_bits = "  ".join(f"{s}={rep.wers[s][cond]:.2f}" for s in rep.wers)
        ler = f"{rep.pool_ler:.2f}" if rep.pool_ler is not None else "n/a"
        print(f"iter {rep.iteration}: |P|={rep.pool_size} poolLER={ler} {wer_bits}")
    print(f"iterate: {len(reports)} reports in {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _replay_sweep(decisions_file: Path, corpus_file: str, taus: Sequence[float],
                  out: Path) -> None:
    decisions = load_decision_log(decisions_file)
    man = _load_corpus(corpus_file)
    truth = {u.id: u.transcript for u in man.utterances if u.transcript}
    missing = [d.utt_id for d in decisions if d.utt_id not in truth]
    if missing:
        raise _data_error(f"corpus lacks transcripts for {len(missing)} decided "
                          f"utterances (first: {missing[0]})")
    lines = ["tau,accepted,acceptance_rate,pool_ler"]
    for tau in taus:
        acc = replay_accepted(decisions, tau)
        if acc:
            ler = corpus_error_rate([(d.reference, truth[d.utt_id]) for d in acc])
            ler_cell = f"{ler:.4f}"
        else:
            ler_cell = ""
        lines.append(f"{tau:.4f},{len(acc)},{len(acc) / len(decisions):.4f},{ler_cell}")
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _profile_out(model_file: str, sets: Dict[str, str], dropout_p: float,
                 samples: int, out: Path) -> None:
    params = load_checkpoint(model_file)
    doc = {}
    for name, path in sets.items():
        man = _load_corpus(path)
        transcriber = NeuralTranscriber(params=params, alphabet=man.spec.alphabet)
        records = uncertainty_profile(transcriber, man.utterances,
                                      dropout_p=dropout_p, n_samples=samples)
        usable = [r for r in records if not r.empty_reference]
        usable_sorted = sorted(r.variance for r in usable)
        doc[name] = {
            "n": len(records),
            "empty_references": len(records) - len(usable),
            "variances": {r.utt_id: r.variance for r in usable},
            "sorted_variances": usable_sorted,
        }
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")


def cmd_report(args: argparse.Namespace) -> int:
    if not (args.run_dir or args.sweep_out or args.profile_out):
        raise _config_error("nothing to report: need --run-dir, --sweep-out or --profile-out")
    if args.run_dir:
        run_dir = Path(args.run_dir)
        if not run_dir.is_dir():
            raise _data_error(f"run directory not found: {run_dir}")
        reports = []
        i = 1
        while report_path(run_dir, i).exists():
            doc = json.loads(report_path(run_dir, i).read_text(encoding="utf-8"))
            reports.append(IterationReport.from_json_dict(doc))
            i += 1
        if not reports:
            raise _data_error(f"no iteration reports under {run_dir}")
        write_reports_csv(run_dir, reports)
        print(f"report: {len(reports)} iterations -> {csv_path(run_dir)}")

    if args.sweep_out:
        if not (args.decisions and args.corpus):
            raise _config_error("--sweep-out needs --decisions and --corpus")
        sweep_out = Path(args.sweep_out)
        _refuse_existing(args.force, sweep_out)
        taus = [float(t) for t in args.taus.split(",") if t.strip()]
        if not taus:
            raise _config_error("--taus is empty")
        _replay_sweep(Path(args.decisions), args.corpus, taus, sweep_out)
        print(f"report: threshold sweep ({len(taus)} points) -> {sweep_out}")

    if args.profile_out:
        if not (args.profile_model and args.profile_set):
            raise _config_error("--profile-out needs --profile-model and --profile-set")
        profile_out = Path(args.profile_out)
        _refuse_existing(args.force, profile_out)
        sets = _parse_named(args.profile_set, "--profile-set")
        _profile_out(args.profile_model, sets, args.dropout_p, args.samples,
                     profile_out)
        print(f"report: agreement-variance profile -> {profile_out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--train", action="append", required=True, metavar="MANIFEST",
                    help="training corpus manifest (repeatable)")
    sp.add_argument("--out", required=True, help="checkpoint output path")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--epochs", type=int, default=15)
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--warmup", type=int, default=400)
    sp.add_argument("--factor", type=float, default=1.0)
    sp.add_argument("--val-fraction", type=float, default=0.1)
    sp.add_argument("--augment", action="store_true",
                    help="train with feature masking")
    sp.add_argument("--avg-checkpoints", type=int, default=1,
                    help="weight-average the k best epochs")
    sp.add_argument("--stride", type=int, default=2)
    sp.add_argument("--n-blocks", type=int, default=2)
    sp.add_argument("--d-model", type=int, default=32)
    sp.add_argument("--n-heads", type=int, default=2)
    sp.add_argument("--ff-dim", type=int, default=64)
    sp.add_argument("--dropout", type=float, default=0.1)


def _add_decode_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--beam", type=int, default=1)
    sp.add_argument("--lm", default=None, help="language model file for fusion")
    sp.add_argument("--lm-weight", type=float, default=0.0)
    sp.add_argument("--length-bonus", type=float, default=0.0)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--verbose", "-v", action="store_true",
                        help="log progress to stderr")
    common.add_argument("--force", action="store_true",
                        help="overwrite existing outputs")
    common.add_argument("--jobs", type=int, default=1,
                        help="worker threads for filtering and evaluation")

    parser = argparse.ArgumentParser(
        prog="dustlab",
        description="Uncertainty-filtered self-training experiments, end to end.")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", parents=[common],
                        help="synthesize a corpus manifest from a domain preset")
    sp.add_argument("--preset", required=True,
                    help=f"one of {sorted(DOMAIN_PRESETS)}")
    sp.add_argument("--n", type=int, required=True, help="number of utterances")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--len-min", type=int, default=3)
    sp.add_argument("--len-max", type=int, default=12)
    sp.add_argument("--drop-transcripts", action="store_true",
                    help="omit transcripts (truly unlabeled output)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    for name, blurb in (("train-base", "train the source-only reference model"),
                        ("train-topline", "train the source+target reference model")):
        sp = sub.add_parser(name, parents=[common], help=blurb)
        _add_train_flags(sp)
        sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("fit-lm", parents=[common],
                        help="fit a character n-gram LM on corpus transcripts")
    sp.add_argument("--train", action="append", required=True, metavar="MANIFEST")
    sp.add_argument("--order", type=int, default=5)
    sp.add_argument("--discount", type=float, default=0.5)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_fit_lm)

    sp = sub.add_parser("filter", parents=[common],
                        help="one agreement-filter pass over a corpus")
    sp.add_argument("--model", required=True, help="teacher checkpoint")
    sp.add_argument("--corpus", required=True, help="corpus manifest to filter")
    sp.add_argument("--tau", type=float, required=True)
    sp.add_argument("--dropout-p", type=float, default=0.1)
    sp.add_argument("--seeds", default="1,2,3",
                    help="comma-separated seeds for the stochastic decodes")
    sp.add_argument("--empty-ref-policy", default="reject",
                    choices=["reject", "accept_if_all_empty"])
    _add_decode_flags(sp)
    sp.add_argument("--out-pool", required=True)
    sp.add_argument("--out-decisions", required=True)
    sp.set_defaults(func=cmd_filter)

    sp = sub.add_parser("evaluate", parents=[common],
                        help="score a checkpoint on labeled test sets")
    sp.add_argument("--model", required=True)
    sp.add_argument("--test", action="append", required=True, metavar="NAME=MANIFEST")
    sp.add_argument("--name", default=None, help="label for this decode condition")
    _add_decode_flags(sp)
    sp.add_argument("--out", default=None, help="also write the table as JSON")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("iterate", parents=[common],
                        help="run iterative self-training from a plan file")
    sp.add_argument("--plan", required=True, help="JSON plan file")
    sp.add_argument("--labeled", required=True, metavar="MANIFEST")
    sp.add_argument("--unlabeled", required=True, metavar="MANIFEST")
    sp.add_argument("--test", action="append", required=True, metavar="NAME=MANIFEST")
    sp.add_argument("--baseline", required=True, help="baseline checkpoint (teacher)")
    sp.add_argument("--topline", default=None, help="topline checkpoint for WERR")
    sp.add_argument("--run-dir", required=True)
    sp.set_defaults(func=cmd_iterate)

    sp = sub.add_parser("report", parents=[common],
                        help="rebuild summary CSV and plot-ready sweeps")
    sp.add_argument("--run-dir", default=None)
    sp.add_argument("--decisions", default=None, help="decision log to replay")
    sp.add_argument("--corpus", default=None, help="ground-truth manifest for the log")
    sp.add_argument("--taus", default=",".join(f"{0.05 * i:.2f}" for i in range(1, 20)))
    sp.add_argument("--sweep-out", default=None)
    sp.add_argument("--profile-model", default=None)
    sp.add_argument("--profile-set", action="append", default=[],
                    metavar="NAME=MANIFEST")
    sp.add_argument("--dropout-p", type=float, default=0.1)
    sp.add_argument("--samples", type=int, default=10)
    sp.add_argument("--profile-out", default=None)
    sp.set_defaults(func=cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"dustlab: {exc}", file=sys.stderr)
        return exc.code
    except (CorpusFormatError, CheckpointFormatError, LmFormatError,
            FileNotFoundError) as exc:
        print(f"dustlab: data error: {exc}", file=sys.stderr)
        return 3
    except TrainingDivergedError as exc:
        print(f"dustlab: numeric error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"dustlab: config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
