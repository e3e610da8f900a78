"""Adam training under the inverse-sqrt warmup schedule, with CTC loss.

The loop is deliberately simple: shuffle utterances each epoch with a
seeded generator, accumulate gradients over a mini-batch (variable-length
sequences, so batching is accumulation, not padding), take one Adam step per
batch, and record a parameter snapshot with its validation loss after every
epoch.  All randomness (shuffling, dropout seeds, augmentation seeds) flows
from the single training seed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..corpus import Utterance, spec_augment
from .ctc import CtcInfeasibleError, ctc_loss_grad, min_frames_needed
from .model import DropoutMode, ModelConfig, Params, backward, forward_cached, init_params, subsampled_length

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.98)
ADAM_EPS = 1e-9


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the step at which it happened."""


def lr_schedule(step: int, factor: float, d_model: int, warmup: int) -> float:
    """Inverse-sqrt schedule with linear warmup; peaks exactly at step=warmup."""
    if step < 1:
        raise ValueError("schedule is defined for step >= 1")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class AugmentPolicy:
    n_freq_masks: int = 2
    freq_width: int = 2
    n_time_masks: int = 2
    time_width: int = 4


@dataclass
class TrainHyper:
    epochs: int = 30
    batch_size: int = 16
    warmup: int = 400
    factor: float = 0.7
    seed: int = 0
    augment: Optional[AugmentPolicy] = None
    val_fraction: float = 0.1


@dataclass
class EpochRecord:
    epoch: int
    val_loss: float
    params: Params


@dataclass
class TrainResult:
    records: List[EpochRecord]
    skipped_infeasible: int

    @property
    def final(self) -> Params:
        return self.records[-1].params

    def best(self, k: int) -> List[EpochRecord]:
        """The k epochs with the lowest validation loss, stable on ties."""
        order = sorted(self.records, key=lambda r: (r.val_loss, r.epoch))
        return order[: max(1, min(k, len(order)))]


class AdamState:
    def __init__(self, tensors: Dict[str, np.ndarray]):
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.t = 0

    def step(self, params: Params, grads: Dict[str, np.ndarray], lr: float) -> None:
        b1, b2 = ADAM_BETAS
        self.t += 1
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for key, gval in grads.items():
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (1 - b1) * gval
            v *= b2
            v += (1 - b2) * gval * gval
            params.tensors[key] -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def _feasible(utt: Utterance, stride: int) -> bool:
    return subsampled_length(utt.n_frames, stride) >= min_frames_needed(utt.transcript)


def _mean_val_loss(params: Params, val: Sequence[Utterance], alphabet: str) -> float:
    losses = []
    for utt in val:
        logits, _ = forward_cached(params, utt.features, DropoutMode.off())
        if not np.isfinite(logits).all():
            raise TrainingDivergedError("non-finite logits during validation")
        loss, _ = ctc_loss_grad(logits, utt.transcript, alphabet)
        losses.append(loss / max(1, len(utt.transcript)))
    return float(np.mean(losses)) if losses else float("nan")


def train(
    config: ModelConfig,
    labeled: Sequence[Utterance],
    hyper: TrainHyper,
    alphabet: str,
) -> TrainResult:
    """Train a fresh model on ``labeled``; returns per-epoch snapshots.

    Utterances whose transcript cannot fit in the subsampled frame count are
    skipped up front with a logged count.  A non-finite training or
    validation loss aborts with TrainingDivergedError.
    """
    if not labeled:
        raise ValueError("training corpus is empty")
    usable = [u for u in labeled if u.transcript and _feasible(u, config.subsample_stride)]
    skipped = len(labeled) - len(usable)
    if skipped:
        log.info("skipping %d utterances with infeasible or missing labels", skipped)
    if not usable:
        raise ValueError("no trainable utterances after feasibility filtering")

    split_rng = np.random.default_rng([hyper.seed, 0x5EED])
    order = split_rng.permutation(len(usable))
    n_val = max(1, int(round(hyper.val_fraction * len(usable)))) if len(usable) > 1 else 0
    val = [usable[i] for i in order[:n_val]]
    tr = [usable[i] for i in order[n_val:]] or list(val)

    params = init_params(config, hyper.seed)
    adam = AdamState(params.tensors)
    seed_stream = np.random.default_rng([hyper.seed, 0xD0])
    records: List[EpochRecord] = []
    step = 0

    for epoch in range(1, hyper.epochs + 1):
        ep_rng = np.random.default_rng([hyper.seed, 0xE0, epoch])
        idx = ep_rng.permutation(len(tr))
        for start in range(0, len(idx), hyper.batch_size):
            batch = idx[start : start + hyper.batch_size]
            grads: Dict[str, np.ndarray] = {}
            batch_loss = 0.0
            for j in batch:
                utt = tr[j]
                feats = utt.features
                if hyper.augment is not None:
                    aug_seed = int(ep_rng.integers(2 ** 31))
                    ap = hyper.augment
                    # Skip time masking on clips shorter than the mask.
                    t_w = ap.time_width if feats.shape[0] >= ap.time_width else 0
                    feats = spec_augment(
                        feats,
                        n_freq_masks=ap.n_freq_masks,
                        freq_width=ap.freq_width,
                        n_time_masks=ap.n_time_masks,
                        time_width=t_w,
                        seed=aug_seed,
                    )
                    if not _feasible(Utterance("tmp", utt.domain, feats, utt.transcript), config.subsample_stride):
                        feats = utt.features  # masking never changes length; defensive only
                mode = DropoutMode.seeded(int(seed_stream.integers(2 ** 63)), config.dropout_p)
                logits, cache = forward_cached(params, feats, mode)
                if not np.isfinite(logits).all():
                    raise TrainingDivergedError(
                        f"non-finite logits at epoch {epoch}, step {step}; "
                        "lower the learning-rate factor or warmup faster"
                    )
                try:
                    loss, dlogits = ctc_loss_grad(logits, utt.transcript, alphabet)
                except CtcInfeasibleError:
                    continue
                batch_loss += loss
                gs = backward(params, cache, dlogits / len(batch))
                for k, v in gs.items():
                    if k in grads:
                        grads[k] += v
                    else:
                        grads[k] = v
            if not grads:
                continue
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch}, step {step}"
                )
            step += 1
            lr = lr_schedule(step, hyper.factor, config.d_model, hyper.warmup)
            adam.step(params, grads, lr)
        val_loss = _mean_val_loss(params, val or tr, alphabet)
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss after epoch {epoch}")
        records.append(EpochRecord(epoch=epoch, val_loss=val_loss, params=params.copy()))
        log.debug("epoch %d: val_loss=%.4f (lr=%.2e)", epoch, val_loss, lr)
    return TrainResult(records=records, skipped_infeasible=skipped)
