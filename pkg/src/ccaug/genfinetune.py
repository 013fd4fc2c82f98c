"""Stage I: fine-tune the adapted generator on condition -> sentence pairs."""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Sequence

import numpy as np

from .data import Dataset, PolaritySeedMap, SeedCycler, concat_condition
from .errors import ConfigurationError, NotTrainableError, ReweightUndefinedError
from .peft import AdaptedGenerator, adapter_step, make_optimizer


@dataclass
class ReweightParams:
    A: float = 0.55
    B: float = 1.5

    def __post_init__(self):
        if not self.A > 0:
            raise ConfigurationError("reweight A must be > 0")
        if not self.B > -1:
            raise ConfigurationError("reweight B must be > -1")

    def C(self, m_asp: int) -> float:
        log_m = math.log(m_asp)
        if log_m <= 1:
            raise ReweightUndefinedError(
                f"re-weighting needs ln(M_asp) > 1, i.e. more than e distinct aspects; got M_asp={m_asp}"
            )
        return (log_m - 1.0) * (self.B + 1.0) ** self.A


def reweight_multiplier(m_j: int, m_asp: int, params: ReweightParams | None = None) -> float:
    """Frequency-dependent loss multiplier in (0, 1), increasing in ``m_j``."""
    params = params or ReweightParams()
    if m_j < 1:
        raise ValueError("aspect frequency must be >= 1")
    c = params.C(m_asp)
    return 1.0 / (1.0 + c * math.exp(-params.A * math.log(m_j + params.B)))


@dataclass
class FinetuneConfig:
    epochs: int = 100
    steps: int | None = None  # overrides epochs when set
    batch_size: int = 16
    optimizer: str = "adafactor"
    lr: float = 3e-2
    reweight: bool = False
    reweight_A: float = 0.55
    reweight_B: float = 1.5
    reweight_invert: bool = False
    seed: int = 0
    seeds: PolaritySeedMap = field(default_factory=PolaritySeedMap)

    def __post_init__(self):
        if self.epochs < 1 or (self.steps is not None and self.steps < 1):
            raise ConfigurationError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.reweight:
            ReweightParams(self.reweight_A, self.reweight_B)

    def total_steps(self, n_instances: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(n_instances / self.batch_size)


class Pair(NamedTuple):
    condition: str
    target: str
    aspect: str
    channel: str  # "aspect" or "polarity"


def build_pairing(dataset: Dataset, rng: random.Random, seeds: PolaritySeedMap | None = None) -> Iterator[Pair]:
    """Endless stream; each draw of (s_i, s_j) yields an aspect pair then a polarity pair."""
    n = len(dataset)
    if n < 2:
        raise ValueError(f"pairing needs at least 2 instances, got {n}")
    cycle = SeedCycler(seeds or PolaritySeedMap())
    triplets = dataset.triplets
    while True:
        src = triplets[rng.randrange(n)]
        tgt = triplets[rng.randrange(n)]
        yield Pair(concat_condition(src.raw_text, tgt.aspect_text), tgt.raw_text, tgt.aspect_text, "aspect")
        yield Pair(concat_condition(src.raw_text, cycle(tgt.polarity)), tgt.raw_text, tgt.aspect_text, "polarity")


def aspect_weights(dataset: Dataset, cfg: FinetuneConfig) -> dict[str, float]:
    vocab = dataset.vocabulary
    params = ReweightParams(cfg.reweight_A, cfg.reweight_B)
    weights = {a: reweight_multiplier(vocab.frequencies[a], vocab.total_instances, params) for a in vocab.aspects}
    if cfg.reweight_invert:
        weights = {a: 1.0 / w for a, w in weights.items()}
    return weights


@dataclass
class FinetuneResult:
    log: list[tuple[int, float]]
    checkpoint: Path | None


def finetune(handle: AdaptedGenerator, dataset: Dataset, cfg: FinetuneConfig, out_dir: str | Path | None = None,
             weight_fn: Callable[[str], float] | None = None, progress: Callable[[int, float], None] | None = None
             ) -> FinetuneResult:
    """Train the adapter; every step sums the aspect- and polarity-conditioned
    NLL of each draw (each scaled by its target's multiplier when re-weighting)
    and takes one optimizer step.

    ``weight_fn`` overrides the per-aspect multiplier lookup.
    """
    if handle.cfg.method == "none":
        raise NotTrainableError("method 'none' has no trainable parameters")
    rng = random.Random(cfg.seed)
    stream = build_pairing(dataset, rng, cfg.seeds)
    if weight_fn is None and cfg.reweight:
        table = aspect_weights(dataset, cfg)
        weight_fn = table.__getitem__
    optimizer = make_optimizer(handle, cfg.optimizer, cfg.lr)
    log = []
    for step in range(1, cfg.total_steps(len(dataset)) + 1):
        pairs = [next(stream) for _ in range(2 * cfg.batch_size)]
        w = [weight_fn(p.aspect) for p in pairs] if weight_fn else [1.0] * len(pairs)
        # adapter_step averages over pairs; x2 turns that into a per-draw sum of both terms
        loss = adapter_step(handle, [(p.condition, p.target) for p in pairs], optimizer, [2.0 * x for x in w])
        log.append((step, loss))
        if progress:
            progress(step, loss)
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = handle.save(out_dir / "adapter.ntc")
        write_log(log, out_dir / "convergence.csv")
    return FinetuneResult(log, ckpt)


def write_log(log: Sequence[tuple[int, float]], path: str | Path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for step, loss in log:
            w.writerow([step, repr(float(loss))])
    return path


def read_log(path: str | Path) -> list[tuple[int, float]]:
    with Path(path).open(encoding="utf-8") as fh:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


def smooth_curve(series: Sequence[float], window: int = 20, percentile: float = 0.5) -> list[float]:
    """Centred sliding-window percentile; windows are truncated at the edges."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if not 0.0 <= percentile <= 1.0:
        raise ValueError("percentile must be in [0, 1]")
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise ValueError("cannot smooth an empty series")
    half = window // 2
    out = []
    for i in range(x.size):
        lo = max(0, i - half)
        hi = min(x.size, i - half + window)
        out.append(float(np.percentile(x[lo:hi], percentile * 100)))
    return out
