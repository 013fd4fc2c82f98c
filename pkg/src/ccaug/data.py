"""ABSA dataset handling: canonical JSONL, SemEval-2014 XML conversion,
aspect statistics, polarity helpers and the toy corpus generator."""

from __future__ import annotations

import json
import logging
import random
import re
import xml.etree.ElementTree as ET
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import AlignmentError, LabelError, ParseError, SchemaError

log = logging.getLogger(__name__)

NEGATIVE, NEUTRAL, POSITIVE = 0, 1, 2
POLARITY_NAMES = {NEGATIVE: "negative", NEUTRAL: "neutral", POSITIVE: "positive"}
POLARITY_IDS = {v: k for k, v in POLARITY_NAMES.items()}

SEPARATOR = "<eos>"
_TOKEN_RE = re.compile(r"<eos>|\w+|[^\w\s]")


def tokenize_with_offsets(text: str) -> list[tuple[str, int, int]]:
    """Whitespace + punctuation split; ``<eos>`` is kept as one token."""
    return [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def tokenize(text: str) -> list[str]:
    return [t for t, _, _ in tokenize_with_offsets(text)]


def check_polarity(p) -> int:
    if isinstance(p, bool) or not isinstance(p, int) or p not in POLARITY_NAMES:
        raise LabelError(f"polarity must be one of 0, 1, 2; got {p!r}")
    return p


def parse_polarity(value) -> int:
    if isinstance(value, str):
        key = value.strip().lower()
        if key in POLARITY_IDS:
            return POLARITY_IDS[key]
        if key.isdigit():
            return check_polarity(int(key))
        raise LabelError(f"unknown polarity {value!r}")
    return check_polarity(value)


@dataclass(frozen=True)
class AbsaTriplet:
    sentence: tuple[str, ...]
    aspect_indicator: tuple[int, ...]
    polarity: int
    raw_text: str
    aspect_text: str
    aspect_char_start: int
    aspect_char_end: int

    def __post_init__(self):
        ind = self.aspect_indicator
        if len(ind) != len(self.sentence):
            raise AlignmentError("aspect indicator length differs from sentence length")
        marked = [i for i, v in enumerate(ind) if v]
        if not marked:
            raise AlignmentError("aspect indicator marks no token")
        if marked[-1] - marked[0] + 1 != len(marked) or any(v not in (0, 1) for v in ind):
            raise AlignmentError("aspect indicator must be a contiguous 0/1 span")
        check_polarity(self.polarity)
        if self.raw_text[self.aspect_char_start:self.aspect_char_end] != self.aspect_text:
            raise AlignmentError("aspect_text does not match the marked span of raw_text")

    @property
    def aspect_tokens(self) -> tuple[str, ...]:
        return tuple(t for t, m in zip(self.sentence, self.aspect_indicator) if m)

    @classmethod
    def from_offsets(cls, text: str, start: int, end: int, polarity: int) -> "AbsaTriplet":
        toks = tokenize_with_offsets(text)
        starts = [s for _, s, _ in toks]
        ends = [e for _, _, e in toks]
        if not (0 <= start < end <= len(text)) or start not in starts or end not in ends:
            raise AlignmentError(f"aspect offsets ({start}, {end}) do not align with token boundaries")
        indicator = tuple(int(s >= start and e <= end) for _, s, e in toks)
        return cls(
            sentence=tuple(t for t, _, _ in toks),
            aspect_indicator=indicator,
            polarity=check_polarity(polarity),
            raw_text=text,
            aspect_text=text[start:end],
            aspect_char_start=start,
            aspect_char_end=end,
        )

    def to_record(self) -> dict:
        return {
            "text": self.raw_text,
            "aspect": self.aspect_text,
            "aspect_char_start": self.aspect_char_start,
            "aspect_char_end": self.aspect_char_end,
            "polarity": POLARITY_NAMES[self.polarity],
        }


@dataclass(frozen=True)
class AspectVocabulary:
    """Aspect strings in first-occurrence order with annotation counts."""

    aspects: tuple[str, ...]
    frequencies: dict[str, int]

    @property
    def total_instances(self) -> int:
        # number of distinct aspect items
        return len(self.aspects)

    @classmethod
    def from_triplets(cls, triplets: Iterable[AbsaTriplet]) -> "AspectVocabulary":
        counts: Counter[str] = Counter()
        order: dict[str, None] = {}
        for t in triplets:
            order.setdefault(t.aspect_text, None)
            counts[t.aspect_text] += 1
        return cls(tuple(order), {a: counts[a] for a in order})

    def __len__(self) -> int:
        return len(self.aspects)


@dataclass(frozen=True)
class PolaritySeedMap:
    spans: dict[int, tuple[str, ...]] = field(
        default_factory=lambda: {
            POSITIVE: ("so good",),
            NEGATIVE: ("so bad",),
            NEUTRAL: ("so so",),
        }
    )

    def __post_init__(self):
        for p in (POSITIVE, NEGATIVE):
            if not self.spans.get(p):
                raise ValueError(f"seed map needs at least one span for {POLARITY_NAMES[p]}")
        for p, spans in self.spans.items():
            check_polarity(p)
            if any(not s.strip() for s in spans):
                raise ValueError("seed spans must be non-empty strings")

    def all_spans(self) -> set[str]:
        return {s for spans in self.spans.values() for s in spans}


class SeedCycler:
    """Round-robin selection over each polarity's seed spans."""

    def __init__(self, seeds: PolaritySeedMap):
        self.seeds = seeds
        self._next: Counter[int] = Counter()

    def __call__(self, polarity: int) -> str:
        spans = self.seeds.spans.get(polarity)
        if not spans:
            raise LabelError(f"no seed span for polarity {polarity}")
        i = self._next[polarity]
        self._next[polarity] += 1
        return spans[i % len(spans)]


@dataclass(frozen=True)
class Dataset:
    split: str
    triplets: tuple[AbsaTriplet, ...]
    vocabulary: AspectVocabulary = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "triplets", tuple(self.triplets))
        object.__setattr__(self, "vocabulary", AspectVocabulary.from_triplets(self.triplets))

    def __len__(self) -> int:
        return len(self.triplets)

    def __iter__(self):
        return iter(self.triplets)

    def __getitem__(self, i):
        return self.triplets[i]


def load_jsonl(path: str | Path, split: str | None = None) -> Dataset:
    path = Path(path)
    triplets = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                text = rec["text"]
                start, end = int(rec["aspect_char_start"]), int(rec["aspect_char_end"])
                pol = rec["polarity"]
                aspect = rec["aspect"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: malformed record ({exc})") from exc
            try:
                polarity = parse_polarity(pol)
                trip = AbsaTriplet.from_offsets(text, start, end, polarity)
            except LabelError as exc:
                raise LabelError(f"{path}:{lineno}: {exc}") from exc
            except AlignmentError as exc:
                raise AlignmentError(f"{path}:{lineno}: {exc}") from exc
            if trip.aspect_text != aspect:
                raise AlignmentError(
                    f"{path}:{lineno}: aspect {aspect!r} differs from text span {trip.aspect_text!r}"
                )
            triplets.append(trip)
    return Dataset(split or path.stem, triplets)


def write_jsonl(triplets: Iterable[AbsaTriplet], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for t in triplets:
            fh.write(json.dumps(t.to_record(), ensure_ascii=False) + "\n")
    return path


def read_semeval_xml(path: str | Path) -> tuple[list[dict], int]:
    """Return canonical records and the number of dropped ``conflict`` terms."""
    path = Path(path)
    try:
        root = ET.parse(path).getroot()
    except (ET.ParseError, OSError) as exc:
        raise ParseError(f"cannot read XML {path}: {exc}") from exc

    records = []
    dropped = 0
    for sent in root.iter("sentence"):
        text_el = sent.find("text")
        if text_el is None or text_el.text is None:
            raise SchemaError(f"sentence {sent.get('id')!r} has no <text>")
        text = text_el.text
        for term in sent.iter("aspectTerm"):
            try:
                attrs = {k: term.attrib[k] for k in ("term", "from", "to", "polarity")}
            except KeyError as exc:
                raise SchemaError(f"aspectTerm in sentence {sent.get('id')!r} lacks {exc}") from exc
            if attrs["polarity"].lower() == "conflict":
                dropped += 1
                continue
            records.append(
                {
                    "text": text,
                    "aspect": attrs["term"],
                    "aspect_char_start": int(attrs["from"]),
                    "aspect_char_end": int(attrs["to"]),
                    "polarity": attrs["polarity"].lower(),
                }
            )
    return records, dropped


def convert_semeval_xml(path: str | Path, out_path: str | Path | None = None) -> Path:
    """Flatten SemEval-2014 Task 4 XML into canonical JSONL, one record per
    (sentence, aspectTerm). ``conflict`` terms are dropped with a warning."""
    path = Path(path)
    out_path = Path(out_path) if out_path else path.with_suffix(".jsonl")
    records, dropped = read_semeval_xml(path)
    if dropped:
        log.warning("dropped %d aspect terms with 'conflict' polarity", dropped)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return out_path


def opposite_polarity(p: int, rng: random.Random) -> int:
    p = check_polarity(p)
    if p == POSITIVE:
        return NEGATIVE
    if p == NEGATIVE:
        return POSITIVE
    return rng.choice((NEGATIVE, POSITIVE))


def concat_condition(sentence: str, condition: str) -> str:
    if not sentence or not condition:
        raise ValueError("sentence and condition must be non-empty")
    return f"{sentence} {SEPARATOR} {condition}"


def split_condition(text: str) -> tuple[str, str]:
    head, sep, tail = text.partition(f" {SEPARATOR} ")
    if not sep:
        raise ValueError(f"no separator in {text!r}")
    return head, tail


TOY_ASPECTS = ("food", "service", "staff", "pizza", "drinks", "ambience", "price", "menu", "decor", "wine")
TOY_ADJECTIVES = {
    POSITIVE: ("good", "great", "excellent", "tasty", "friendly", "lovely"),
    NEGATIVE: ("bad", "awful", "terrible", "rude", "poor", "bland"),
}


def _toy_sentences(n: int, rng: random.Random) -> list[tuple[str, str, int, str, int]]:
    rows = []
    for _ in range(n):
        a1, a2 = rng.sample(TOY_ASPECTS, 2)
        p1 = rng.choice((POSITIVE, NEGATIVE))
        p2 = NEGATIVE if p1 == POSITIVE else POSITIVE
        rows.append((rng.choice(TOY_ADJECTIVES[p1]), a1, p1, rng.choice(TOY_ADJECTIVES[p2]), a2, p2))
    return rows


def synthesize_toy_dataset(n: int, rng: random.Random, split: str = "toy") -> Dataset:
    """``n`` templated sentences "<adj1> <aspect1> but <adj2> <aspect2>",
    each yielding two triplets of opposite polarity."""
    if n < 1:
        raise ValueError(f"need at least one sentence, got n={n}")
    triplets = []
    for adj1, a1, p1, adj2, a2, p2 in _toy_sentences(n, rng):
        text = f"{adj1} {a1} but {adj2} {a2}"
        s1 = len(adj1) + 1
        s2 = len(text) - len(a2)
        triplets.append(AbsaTriplet.from_offsets(text, s1, s1 + len(a1), p1))
        triplets.append(AbsaTriplet.from_offsets(text, s2, s2 + len(a2), p2))
    return Dataset(split, triplets)


def word_types(triplets: Sequence[AbsaTriplet]) -> set[str]:
    return {tok for t in triplets for tok in t.sentence}
