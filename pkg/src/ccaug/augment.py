"""Stage II: cross-channel sentence generation.

For every source triplet an in-domain aspect and the inverted polarity are
drawn, then four candidates are produced::

    AAC = G([s, aspect])        PAC = G([s, seed span])
    PA  = G([PAC, aspect])      AP  = G([AAC, seed span])
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .data import (
    AbsaTriplet,
    AspectVocabulary,
    PolaritySeedMap,
    SeedCycler,
    concat_condition,
    opposite_polarity,
    parse_polarity,
    tokenize,
)

KEYS = ("AAC", "PAC", "PA", "AP")
CHAINS = {"AAC": ("AAC",), "PAC": ("PAC",), "PA": ("PAC", "AAC"), "AP": ("AAC", "PAC")}
# candidates whose chain ends or passes through the aspect channel
ASPECT_DERIVED = frozenset({"AAC", "PA", "AP"})


class TextGenerator(Protocol):
    def generate(self, conditions: Sequence[str]) -> list[str]: ...


@dataclass
class Candidate:
    key: str
    text: str
    input_text: str
    condition: str
    valid: bool = False
    truncated: bool = False
    error: str | None = None
    entropy: float | None = None
    probabilities: list[float] | None = None

    @property
    def chain(self) -> tuple[str, ...]:
        return CHAINS[self.key]

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "chain": list(self.chain),
            "input": self.input_text,
            "condition": self.condition,
            "text": self.text,
            "valid": self.valid,
            "truncated": self.truncated,
            "error": self.error,
            "entropy": self.entropy,
            "probabilities": self.probabilities,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Candidate":
        return cls(
            key=d["key"], text=d["text"], input_text=d["input"], condition=d["condition"], valid=d["valid"],
            truncated=d.get("truncated", False), error=d.get("error"), entropy=d.get("entropy"),
            probabilities=d.get("probabilities"),
        )


@dataclass
class AugmentationRecord:
    source: AbsaTriplet
    sampled_aspect: str
    inverted_polarity: int
    seed_span: str
    candidates: dict[str, Candidate] = field(default_factory=dict)
    selected: list[str] = field(default_factory=list)

    def selected_texts(self) -> list[str]:
        return [self.candidates[k].text for k in self.selected]

    def to_dict(self) -> dict:
        return {
            "source": self.source.to_record(),
            "sampled_aspect": self.sampled_aspect,
            "inverted_polarity": self.inverted_polarity,
            "seed_span": self.seed_span,
            "candidates": [self.candidates[k].to_dict() for k in KEYS],
            "selected": list(self.selected),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationRecord":
        s = d["source"]
        src = AbsaTriplet.from_offsets(s["text"], s["aspect_char_start"], s["aspect_char_end"],
                                       parse_polarity(s["polarity"]))
        cands = {c["key"]: Candidate.from_dict(c) for c in d["candidates"]}
        return cls(src, d["sampled_aspect"], d["inverted_polarity"], d["seed_span"], cands, list(d["selected"]))


def sample_aspect(vocab: AspectVocabulary, own: str, rng: random.Random) -> str:
    """Uniform over the vocabulary, excluding the source's own aspect when possible."""
    pool = [a for a in vocab.aspects if a != own] if len(vocab) > 1 else list(vocab.aspects)
    if not pool:
        raise ValueError("aspect vocabulary is empty")
    return rng.choice(pool)


def aac_generate(gen: TextGenerator, sentence: str, aspect: str) -> str:
    return gen.generate([concat_condition(sentence, aspect)])[0]


def pac_generate(gen: TextGenerator, sentence: str, polarity: int, seeds: PolaritySeedMap | SeedCycler) -> str:
    cycle = seeds if isinstance(seeds, SeedCycler) else SeedCycler(seeds)
    return gen.generate([concat_condition(sentence, cycle(polarity))])[0]


def candidate_valid(key: str, text: str, source_text: str, aspect: str, check: bool = True) -> bool:
    if not text.strip():
        return False
    if not check:
        return True
    if text.strip() == source_text.strip():
        return False
    if key in ASPECT_DERIVED and aspect not in text:
        return False
    return True


def _run_channel(gen: TextGenerator, inputs: Sequence[str], conds: Sequence[str], max_source_tokens: int | None
                 ) -> list[tuple[str, str | None, bool]]:
    """Generate for each (input, condition); empty inputs become per-item errors."""
    todo = [i for i, s in enumerate(inputs) if s.strip()]
    out: list[tuple[str, str | None, bool]] = [("", "empty input text", False)] * len(inputs)
    if not todo:
        return out
    conditions = [concat_condition(inputs[i], conds[i]) for i in todo]
    try:
        texts = gen.generate(conditions)
    except Exception as exc:  # noqa: BLE001 - recorded per candidate
        texts = None
        err = f"{type(exc).__name__}: {exc}"
    for j, i in enumerate(todo):
        trunc = max_source_tokens is not None and len(tokenize(conditions[j])) > max_source_tokens
        out[i] = (texts[j], None, trunc) if texts is not None else ("", err, trunc)
    return out


def cross_channel_batch(gen: TextGenerator, triplets: Iterable[AbsaTriplet], vocab: AspectVocabulary,
                        seeds: PolaritySeedMap, rng: random.Random, check_validity: bool = True
                        ) -> list[AugmentationRecord]:
    """Cross-channel generation for many sources, batching each channel pass."""
    triplets = list(triplets)
    cycle = SeedCycler(seeds)
    records = []
    for t in triplets:
        aspect = sample_aspect(vocab, t.aspect_text, rng)
        pol = opposite_polarity(t.polarity, rng)
        records.append(AugmentationRecord(t, aspect, pol, cycle(pol)))
    max_src = getattr(getattr(gen, "backbone", None), "cfg", None)
    max_src = max_src.max_len if max_src is not None else None

    sources = [r.source.raw_text for r in records]
    aspects = [r.sampled_aspect for r in records]
    spans = [r.seed_span for r in records]
    aac = _run_channel(gen, sources, aspects, max_src)
    pac = _run_channel(gen, sources, spans, max_src)
    pa = _run_channel(gen, [x[0] for x in pac], aspects, max_src)
    ap = _run_channel(gen, [x[0] for x in aac], spans, max_src)

    for n, rec in enumerate(records):
        plan = {
            "AAC": (sources[n], aspects[n], aac[n]),
            "PAC": (sources[n], spans[n], pac[n]),
            "PA": (pac[n][0], aspects[n], pa[n]),
            "AP": (aac[n][0], spans[n], ap[n]),
        }
        for key in KEYS:
            inp, cond, (text, err, trunc) = plan[key]
            valid = err is None and candidate_valid(key, text, rec.source.raw_text, rec.sampled_aspect, check_validity)
            rec.candidates[key] = Candidate(key, text, inp, cond, valid, trunc, err)
    return records


def cross_channel(gen: TextGenerator, triplet: AbsaTriplet, vocab: AspectVocabulary, seeds: PolaritySeedMap,
                  rng: random.Random, check_validity: bool = True) -> AugmentationRecord:
    return cross_channel_batch(gen, [triplet], vocab, seeds, rng, check_validity)[0]


def write_augmentations(records: Sequence[AugmentationRecord], path: str | Path, header: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
    return path


def read_augmentations(path: str | Path) -> tuple[dict, list[AugmentationRecord]]:
    with Path(path).open(encoding="utf-8") as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path} is empty")
    header = json.loads(lines[0])["header"]
    return header, [AugmentationRecord.from_dict(json.loads(ln)) for ln in lines[1:]]
