"""Character n-gram language model with absolute-discount backoff smoothing.

Probability of token w after context c (a tuple of up to order-1 tokens):

    p(w | c) = max(count(c,w) - D, 0) / count(c)  +  lambda(c) * p(w | c')

where c' drops the oldest token, D is the discount, and lambda(c) is the
probability mass freed by discounting, so every context distribution sums to
one exactly.  The recursion bottoms out in a uniform distribution over the
vocabulary, which keeps every token scoreable even for unseen histories.

Vocabulary is the training alphabet plus three markers: "^" (begin, context
only), "$" (end of sentence), "#" (unknown).
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

BOS = "^"
EOS = "$"
UNK = "#"

_FORMAT_NAME = "dustlab-ngram"
_FORMAT_VERSION = 1

# Scores are clamped here so downstream beam math never sees -inf; with any
# positive discount the backoff chain keeps true probabilities far above it.
_LOG_FLOOR = math.log(1e-12)


class LmFormatError(ValueError):
    pass


@dataclass(eq=False)
class NGramModel:
    order: int
    discount: float
    vocab: List[str]  # scoreable tokens: alphabet + EOS + UNK
    # context (tuple of tokens, may include BOS) -> {token: prob mass after
    # discounting}; lambda weights per context for the backoff remainder
    probs: Dict[Tuple[str, ...], Dict[str, float]]
    backoff: Dict[Tuple[str, ...], float]

    def _norm_token(self, token: str) -> str:
        return token if token in self._vocab_set else UNK

    def __post_init__(self) -> None:
        self._vocab_set = set(self.vocab)

    def prob_next(self, prefix: Sequence[str], token: str) -> float:
        token = self._norm_token(token)
        hist = [BOS] + [self._norm_token(t) for t in prefix]
        ctx = tuple(hist[-(self.order - 1):]) if self.order > 1 else ()
        return self._prob(ctx, token)

    def _prob(self, ctx: Tuple[str, ...], token: str) -> float:
        if not ctx:
            # unigram level: discounted unigram + uniform floor
            if () in self.probs:
                base = self.probs[()].get(token, 0.0)
                return base + self.backoff[()] * (1.0 / len(self.vocab))
            return 1.0 / len(self.vocab)
        if ctx in self.probs:
            base = self.probs[ctx].get(token, 0.0)
            return base + self.backoff[ctx] * self._prob(ctx[1:], token)
        return self._prob(ctx[1:], token)

    def log_prob_next(self, prefix: Sequence[str], token: str) -> float:
        return max(math.log(max(self.prob_next(prefix, token), 0.0) or 1e-300), _LOG_FLOOR)

    def sequence_log_prob(self, text: Sequence[str], include_eos: bool = True) -> float:
        total = 0.0
        tokens = list(text) + ([EOS] if include_eos else [])
        for i, tok in enumerate(tokens):
            total += self.log_prob_next(tokens[:i], tok)
        return total

    def to_dict(self) -> dict:
        return {
            "format": _FORMAT_NAME,
            "version": _FORMAT_VERSION,
            "order": self.order,
            "discount": self.discount,
            "vocab": self.vocab,
            "probs": {" ".join(ctx): v for ctx, v in self.probs.items()},
            "backoff": {" ".join(ctx): v for ctx, v in self.backoff.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NGramModel":
        if d.get("format") != _FORMAT_NAME:
            raise LmFormatError(f"not a language-model file: format={d.get('format')!r}")
        if d.get("version") != _FORMAT_VERSION:
            raise LmFormatError(f"unsupported language-model version {d.get('version')!r}")
        parse = lambda s: tuple(s.split(" ")) if s else ()
        return cls(
            order=d["order"],
            discount=d["discount"],
            vocab=list(d["vocab"]),
            probs={parse(k): dict(v) for k, v in d["probs"].items()},
            backoff={parse(k): float(v) for k, v in d["backoff"].items()},
        )


def fit_ngram(texts: Sequence[Sequence[str]], order: int = 5, discount: float = 0.5) -> NGramModel:
    """Estimate an n-gram model from token sequences (characters here).

    Each text is padded with BOS contexts and a terminating EOS event.  With
    discount 0 and order 1 the probabilities are exact empirical frequencies.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if not (0.0 <= discount < 1.0):
        raise ValueError("discount must lie in [0, 1)")
    texts = [list(t) for t in texts]
    if not texts:
        raise ValueError("cannot fit a language model on an empty corpus")

    alphabet = sorted({tok for t in texts for tok in t})
    vocab = alphabet + [EOS, UNK]
    vocab_set = set(vocab)

    # Collect counts for every n-gram length 1..order so the backoff chain is
    # fully populated.
    ctx_counts: Dict[Tuple[str, ...], Counter] = defaultdict(Counter)
    for text in texts:
        tokens = [t if t in vocab_set else UNK for t in text] + [EOS]
        hist: List[str] = [BOS]
        for tok in tokens:
            # n may not exceed len(hist), else short histories would be
            # counted once per nominal context length.
            for n in range(0, min(order, len(hist) + 1)):
                ctx = tuple(hist[-n:]) if n else ()
                ctx_counts[ctx][tok] += 1
            hist.append(tok)

    probs: Dict[Tuple[str, ...], Dict[str, float]] = {}
    backoff: Dict[Tuple[str, ...], float] = {}
    for ctx, counter in ctx_counts.items():
        total = sum(counter.values())
        kinds = len(counter)
        probs[ctx] = {tok: (cnt - discount) / total for tok, cnt in counter.items() if cnt > discount}
        backoff[ctx] = (discount * kinds) / total if discount > 0 else 0.0
        # Anything discounted below zero would break normalization; cnt >= 1
        # and discount < 1 guarantee cnt - discount > 0 already.
    return NGramModel(order=order, discount=discount, vocab=vocab, probs=probs, backoff=backoff)


def log_prob_next(model: NGramModel, prefix: Sequence[str], token: str) -> float:
    return model.log_prob_next(prefix, token)


def save_lm(path: str | Path, model: NGramModel) -> None:
    Path(path).write_text(json.dumps(model.to_dict()), encoding="utf-8")


def load_lm(path: str | Path) -> NGramModel:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise LmFormatError(f"malformed language-model file {path}: {exc}") from exc
    return NGramModel.from_dict(d)


def fit_from_transcripts(paths: Sequence[str | Path], order: int = 5, discount: float = 0.5) -> NGramModel:
    """Fit on one-transcript-per-line UTF-8 text files, concatenated."""
    texts: List[str] = []
    for p in paths:
        for line in Path(p).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if line:
                texts.append(line)
    return fit_ngram(texts, order=order, discount=discount)
