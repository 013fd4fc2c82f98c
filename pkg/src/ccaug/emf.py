"""Entropy-minimisation filter over generated candidates."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

from .augment import ASPECT_DERIVED, KEYS, AugmentationRecord
from .data import tokenize
from .trainer import AbsaClassifier, predict_proba

log = logging.getLogger(__name__)

MAX_ENTROPY = math.log2(3)
KEY_RANK = {k: i for i, k in enumerate(KEYS)}


@dataclass(frozen=True)
class EntropyScore:
    key: str
    probabilities: tuple[float, ...]
    entropy: float


def prediction_entropy(p: Sequence[float]) -> float:
    """Shannon entropy in bits, with 0 * log 0 taken as 0."""
    p = [float(x) for x in p]
    if not p or any(x < 0 or math.isnan(x) for x in p) or abs(sum(p) - 1.0) > 1e-6:
        raise ValueError(f"not a probability vector: {p}")
    return max(0.0, -sum(x * math.log2(x) for x in p if x > 0))


def find_span(tokens: Sequence[str], span: Sequence[str]) -> int | None:
    n = len(span)
    for i in range(len(tokens) - n + 1):
        if list(tokens[i : i + n]) == list(span):
            return i
    return None


def candidate_indicator(tokens: Sequence[str], aspect: str) -> list[int]:
    """Marks the first occurrence of ``aspect``; the whole sentence if absent."""
    span = tokenize(aspect)
    start = find_span(tokens, span) if span else None
    if start is None:
        return [1] * len(tokens)
    return [int(start <= i < start + len(span)) for i in range(len(tokens))]


def score_candidates(model: AbsaClassifier, records: Sequence[AugmentationRecord]) -> list[AugmentationRecord]:
    """Attach softmax probabilities and entropy to every valid candidate in place.

    Aspect-derived candidates pool over the sampled aspect, the polarity-only
    candidate over the source aspect.
    """
    seqs, masks, where = [], [], []
    for r in records:
        valid = [k for k in KEYS if r.candidates[k].valid]
        if not valid:
            log.warning("record for %r has no valid candidates", r.source.raw_text)
        for key in valid:
            cand = r.candidates[key]
            toks = tokenize(cand.text)[: model.max_len]
            aspect = r.sampled_aspect if key in ASPECT_DERIVED else r.source.aspect_text
            seqs.append(model.vocab.encode(toks))
            masks.append(candidate_indicator(toks, aspect))
            where.append(cand)
    if seqs:
        probs = predict_proba(model, seqs, masks)
        for cand, p in zip(where, probs.tolist()):
            cand.probabilities = p
            cand.entropy = prediction_entropy(p)
    return list(records)


def scores_of(record: AugmentationRecord) -> list[EntropyScore]:
    return [
        EntropyScore(k, tuple(c.probabilities), c.entropy)
        for k, c in record.candidates.items()
        if c.valid and c.entropy is not None
    ]


def emf_select(scores: Sequence[EntropyScore], k: int) -> list[str]:
    """Keys of the ``k`` lowest-entropy candidates, ties broken AAC < PAC < PA < AP."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(scores, key=lambda s: (s.entropy, KEY_RANK[s.key]))
    return [s.key for s in ranked[:k]]


def filter_records(model: AbsaClassifier, records: Sequence[AugmentationRecord], k: int
                   ) -> list[AugmentationRecord]:
    score_candidates(model, records)
    for r in records:
        r.selected = emf_select(scores_of(r), k)
    return list(records)
