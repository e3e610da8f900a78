"""Synthetic domain-shifted corpora: generation, masking augmentation, disk format.

An utterance is a sequence of feature frames (frames x dim float32) produced by
a token-level emission model: each transcript token contributes a run of
frames equal to channel_mix @ template[token] plus white gaussian noise.
Domains differ in channel mixing, noise level, token durations and transcript
statistics, which is the whole point: the same recognizer sees a covariate
shift it was never trained on.

On disk a corpus is a JSON-lines manifest next to a companion blob of
little-endian float32 frames; see save_manifest / load_manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

# Ten "phone" symbols plus a word separator.  The CTC blank is NOT part of
# the alphabet; models append it as the last output column.
DEFAULT_ALPHABET = "abcdefghij_"
FEATURE_DIM = 8

# Fixed generator constants so every preset shares one template bank and the
# channel/bigram randomness is reproducible forever.
_TEMPLATE_SEED = 20240611
_CHANNEL_SEED = 20240612
_BIGRAM_SEED_A = 20240613
_BIGRAM_SEED_B = 20240614

_FORMAT_NAME = "dustlab-corpus"
_FORMAT_VERSION = 1


class CorpusFormatError(ValueError):
    """Raised for version mismatches, truncation, or malformed corpus files."""


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def default_templates(alphabet: str = DEFAULT_ALPHABET, dim: int = FEATURE_DIM) -> np.ndarray:
    """Per-token mean emission vectors, shared by all shipped presets."""
    rng = np.random.default_rng(_TEMPLATE_SEED)
    return rng.normal(0.0, 1.0, size=(len(alphabet), dim))


def _rotation_matrix(dim: int) -> np.ndarray:
    # Orthogonal factor of a fixed gaussian matrix; determinant sign is
    # irrelevant, we only need a far-from-identity unitary mix.
    rng = np.random.default_rng(_CHANNEL_SEED)
    q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
    return q


def _bigram_rows(seed: int, n_tokens: int, spread: float = 1.5) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, spread, size=(n_tokens + 1, n_tokens))


def _make_text_source(blend: float, alphabet: str) -> np.ndarray:
    """Row-stochastic bigram table, rows = [start] + alphabet, cols = alphabet.

    blend=0 is the source-domain distribution; larger values move toward an
    independent distribution, emulating a topic/style shift.

    Self-transitions are zeroed for every token: with constant per-token
    emission templates, adjacent repeats produce frame sequences identical to
    a single longer token, so transcripts with repeats would be unlearnable
    in principle (real speech has boundary cues; these templates do not).
    """
    n = len(alphabet)
    logits = (1.0 - blend) * _bigram_rows(_BIGRAM_SEED_A, n) + blend * _bigram_rows(
        _BIGRAM_SEED_B, n
    )
    probs = _softmax_rows(logits)
    probs[1:, :][np.eye(n, dtype=bool)] = 0.0
    sep = alphabet.index("_") if "_" in alphabet else -1
    if sep >= 0:
        # No leading separators either.
        probs[0, sep] = 0.0
    probs /= probs.sum(axis=1, keepdims=True)
    return probs


@dataclass(eq=False)
class DomainSpec:
    """Everything needed to synthesize one domain's utterances.

    mix_jitter and noise_jitter make difficulty heterogeneous across
    utterances, which real corpora are: one severity draw u ~ U(0, 1) per
    utterance scales the channel toward identity, (1-m)*I + m*channel_mix
    with m = 1 - mix_jitter*u, and scales the noise to
    noise_sigma * (1 + noise_jitter*(1 - 2u)).  A single draw drives both so
    the two distortions rise and fall together, the way recording conditions
    do; u near 0 is the full domain shift, u near 1 the mildest corner.
    Both default to 0, which reproduces a fixed channel and noise level.
    """

    name: str
    alphabet: str
    char_templates: np.ndarray  # (len(alphabet), dim)
    duration_range: Tuple[int, int]  # frames per token, inclusive
    channel_mix: np.ndarray  # (dim, dim)
    noise_sigma: float
    text_source: np.ndarray  # (len(alphabet)+1, len(alphabet)), rows sum to 1
    mix_jitter: float = 0.0
    noise_jitter: float = 0.0

    def __post_init__(self) -> None:
        if len(self.alphabet) == 0:
            raise ValueError("alphabet must not be empty")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ValueError("alphabet tokens must be unique")
        self.char_templates = np.asarray(self.char_templates, dtype=np.float64)
        self.channel_mix = np.asarray(self.channel_mix, dtype=np.float64)
        self.text_source = np.asarray(self.text_source, dtype=np.float64)
        n, d = self.char_templates.shape
        if n != len(self.alphabet):
            raise ValueError("one template row per alphabet token required")
        if self.channel_mix.shape != (d, d):
            raise ValueError("channel_mix must be dim x dim")
        lo, hi = self.duration_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad duration_range {self.duration_range}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.text_source.shape != (n + 1, n):
            raise ValueError("text_source must be (len(alphabet)+1, len(alphabet))")
        if not np.allclose(self.text_source.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("text_source rows must sum to 1")
        if not (0.0 <= self.mix_jitter <= 1.0):
            raise ValueError("mix_jitter must lie in [0, 1]")
        if not (0.0 <= self.noise_jitter < 1.0):
            raise ValueError("noise_jitter must lie in [0, 1)")
        cond = float(np.linalg.cond(self.channel_mix))
        if not np.isfinite(cond) or cond > 1e6:
            raise ValueError(f"channel_mix is numerically singular (cond={cond:.3g})")
        self.channel_condition = cond

    @property
    def dim(self) -> int:
        return self.char_templates.shape[1]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "alphabet": self.alphabet,
            "char_templates": self.char_templates.tolist(),
            "duration_range": list(self.duration_range),
            "channel_mix": self.channel_mix.tolist(),
            "noise_sigma": self.noise_sigma,
            "text_source": self.text_source.tolist(),
            "mix_jitter": self.mix_jitter,
            "noise_jitter": self.noise_jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(
            name=d["name"],
            alphabet=d["alphabet"],
            char_templates=np.array(d["char_templates"], dtype=np.float64),
            duration_range=(int(d["duration_range"][0]), int(d["duration_range"][1])),
            channel_mix=np.array(d["channel_mix"], dtype=np.float64),
            noise_sigma=float(d["noise_sigma"]),
            text_source=np.array(d["text_source"], dtype=np.float64),
            mix_jitter=float(d.get("mix_jitter", 0.0)),
            noise_jitter=float(d.get("noise_jitter", 0.0)),
        )


def _mixed_channel(strength: float, dim: int) -> np.ndarray:
    return (1.0 - strength) * np.eye(dim) + strength * _rotation_matrix(dim)


def source_domain() -> DomainSpec:
    """Clean training domain: identity channel, low noise, steady durations."""
    return DomainSpec(
        name="source",
        alphabet=DEFAULT_ALPHABET,
        char_templates=default_templates(),
        duration_range=(2, 4),
        channel_mix=np.eye(FEATURE_DIM),
        noise_sigma=0.15,
        text_source=_make_text_source(0.0, DEFAULT_ALPHABET),
    )


def target_mild() -> DomainSpec:
    """Moderate shift: partial channel rotation, more noise, looser timing."""
    return DomainSpec(
        name="target-mild",
        alphabet=DEFAULT_ALPHABET,
        char_templates=default_templates(),
        duration_range=(2, 6),
        channel_mix=_mixed_channel(0.40, FEATURE_DIM),
        noise_sigma=0.30,
        text_source=_make_text_source(0.5, DEFAULT_ALPHABET),
        mix_jitter=0.55,
        noise_jitter=0.45,
    )


def target_severe() -> DomainSpec:
    """Heavy shift: strong rotation, high noise, erratic durations, new text."""
    return DomainSpec(
        name="target-severe",
        alphabet=DEFAULT_ALPHABET,
        char_templates=default_templates(),
        duration_range=(1, 8),
        channel_mix=_mixed_channel(0.48, FEATURE_DIM),
        noise_sigma=0.5,
        text_source=_make_text_source(0.9, DEFAULT_ALPHABET),
        mix_jitter=0.85,
        noise_jitter=0.6,
    )


DOMAIN_PRESETS = {
    "source": source_domain,
    "target-mild": target_mild,
    "target-severe": target_severe,
}


@dataclass(eq=False)
class Utterance:
    id: str
    domain: str
    features: np.ndarray  # (frames, dim) float32
    transcript: Optional[str] = None

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass(eq=False)
class CorpusManifest:
    utterances: List[Utterance]
    seed: int
    spec: DomainSpec
    len_range: Optional[Tuple[int, int]] = None


def _sample_transcript(spec: DomainSpec, rng: np.random.Generator, length: int) -> str:
    tokens = []
    ctx = 0  # start-of-utterance row
    n = len(spec.alphabet)
    for _ in range(length):
        idx = int(rng.choice(n, p=spec.text_source[ctx]))
        tokens.append(spec.alphabet[idx])
        ctx = idx + 1
    return "".join(tokens)


def synth_utterance(spec: DomainSpec, seed: int, index: int, len_range: Tuple[int, int]) -> Utterance:
    """Generate utterance ``index`` of the (spec, seed) corpus.

    Each utterance owns an independent RNG stream keyed by (seed, index), so
    corpora may be generated in any order or in parallel without changing a
    single bit of the output.
    """
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad transcript length range {len_range}")
    rng = np.random.default_rng([seed, index])
    length = int(rng.integers(lo, hi + 1))
    transcript = _sample_transcript(spec, rng, length)
    token_ids = np.array([spec.alphabet.index(t) for t in transcript])
    dmin, dmax = spec.duration_range
    durations = rng.integers(dmin, dmax + 1, size=len(token_ids))
    mix = spec.channel_mix
    sigma = spec.noise_sigma
    if spec.mix_jitter > 0.0 or spec.noise_jitter > 0.0:
        u = rng.random()
        m = 1.0 - spec.mix_jitter * u
        mix = (1.0 - m) * np.eye(spec.dim) + m * mix
        sigma = sigma * (1.0 + spec.noise_jitter * (1.0 - 2.0 * u))
    emissions = spec.char_templates[token_ids] @ mix.T
    frames = np.repeat(emissions, durations, axis=0)
    frames = frames + rng.normal(0.0, sigma, size=frames.shape)
    return Utterance(
        id=f"{spec.name}-{index:06d}",
        domain=spec.name,
        features=frames.astype("<f4"),
        transcript=transcript,
    )


def synth_corpus(
    spec: DomainSpec,
    n_utts: int,
    len_range: Tuple[int, int],
    seed: int,
) -> CorpusManifest:
    """Deterministic synthetic corpus of ``n_utts`` labeled utterances."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    utts = [synth_utterance(spec, seed, i, len_range) for i in range(n_utts)]
    return CorpusManifest(utterances=utts, seed=seed, spec=spec, len_range=len_range)


def spec_augment(
    features: np.ndarray,
    n_freq_masks: int = 2,
    freq_width: int = 2,
    n_time_masks: int = 2,
    time_width: int = 4,
    seed: int = 0,
) -> np.ndarray:
    """SpecAugment-style masking: zero out fixed-width bands, never in place.

    Exactly ``n_freq_masks`` feature-dimension bands of width ``freq_width``
    and ``n_time_masks`` frame bands of width ``time_width`` are zeroed at
    positions drawn uniformly from the valid range.  Width 0 or count 0 means
    no masking on that axis.
    """
    n_frames, dim = features.shape
    if freq_width > dim:
        raise ValueError(f"freq_width {freq_width} exceeds feature dim {dim}")
    if time_width > n_frames:
        raise ValueError(f"time_width {time_width} exceeds n_frames {n_frames}")
    out = features.copy()
    rng = np.random.default_rng(seed)
    for _ in range(n_freq_masks):
        if freq_width == 0:
            break
        start = int(rng.integers(0, dim - freq_width + 1))
        out[:, start : start + freq_width] = 0.0
    for _ in range(n_time_masks):
        if time_width == 0:
            break
        start = int(rng.integers(0, n_frames - time_width + 1))
        out[start : start + time_width, :] = 0.0
    return out


# ---------------------------------------------------------------------------
# Disk format: JSON-lines manifest + little-endian float32 blob.
#
# Line 1 of the manifest is a header: {"format", "version", "seed", "spec",
# "len_range"}.  Each following line is one utterance record: {"id",
# "domain", "n_frames", "dim", "transcript"?, "blob_offset", "blob_len"}.
# The blob file sits next to the manifest with the suffix replaced by .blob.
# ---------------------------------------------------------------------------

def blob_path_for(manifest_path: Path) -> Path:
    return Path(manifest_path).with_suffix(".blob")


def save_manifest(path: str | Path, manifest: CorpusManifest) -> None:
    path = Path(path)
    blob_path = blob_path_for(path)
    header = {
        "format": _FORMAT_NAME,
        "version": _FORMAT_VERSION,
        "seed": manifest.seed,
        "spec": manifest.spec.to_dict(),
        "len_range": list(manifest.len_range) if manifest.len_range else None,
    }
    lines = [json.dumps(header)]
    offset = 0
    chunks = []
    for utt in manifest.utterances:
        raw = np.ascontiguousarray(utt.features, dtype="<f4").tobytes()
        rec = {
            "id": utt.id,
            "domain": utt.domain,
            "n_frames": int(utt.features.shape[0]),
            "dim": int(utt.features.shape[1]),
            "blob_offset": offset,
            "blob_len": len(raw),
        }
        if utt.transcript is not None:
            rec["transcript"] = utt.transcript
        lines.append(json.dumps(rec))
        chunks.append(raw)
        offset += len(raw)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    blob_path.write_bytes(b"".join(chunks))


def load_manifest(path: str | Path) -> CorpusManifest:
    path = Path(path)
    blob_path = blob_path_for(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusFormatError(f"cannot read manifest {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise CorpusFormatError(f"empty manifest {path}")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"malformed manifest header: {exc}") from exc
    if header.get("format") != _FORMAT_NAME:
        raise CorpusFormatError(f"not a corpus manifest: format={header.get('format')!r}")
    if header.get("version") != _FORMAT_VERSION:
        raise CorpusFormatError(
            f"unsupported corpus version {header.get('version')!r} "
            f"(expected {_FORMAT_VERSION})"
        )
    spec = DomainSpec.from_dict(header["spec"])
    blob = blob_path.read_bytes() if blob_path.exists() else b""
    utts: List[Utterance] = []
    for ln in lines[1:]:
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise CorpusFormatError(f"malformed manifest record: {exc}") from exc
        off, ln_bytes = rec["blob_offset"], rec["blob_len"]
        if off + ln_bytes > len(blob):
            raise CorpusFormatError(
                f"blob truncated: record {rec['id']} needs bytes "
                f"[{off}, {off + ln_bytes}) but blob has {len(blob)}"
            )
        n_frames, dim = rec["n_frames"], rec["dim"]
        if ln_bytes != n_frames * dim * 4:
            raise CorpusFormatError(f"record {rec['id']}: blob_len inconsistent with shape")
        feats = np.frombuffer(blob[off : off + ln_bytes], dtype="<f4").reshape(n_frames, dim)
        utts.append(
            Utterance(
                id=rec["id"],
                domain=rec["domain"],
                features=feats.copy(),
                transcript=rec.get("transcript"),
            )
        )
    len_range = tuple(header["len_range"]) if header.get("len_range") else None
    return CorpusManifest(utterances=utts, seed=header["seed"], spec=spec, len_range=len_range)
