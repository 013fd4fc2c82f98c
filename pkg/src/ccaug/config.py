"""Flat JSON run configuration and its mapping onto the per-module configs."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone import DecodeConfig
from .data import NEGATIVE, NEUTRAL, POSITIVE, PolaritySeedMap
from .errors import ConfigurationError
from .genfinetune import FinetuneConfig
from .peft import AdapterConfig
from .trainer import TrainingConfig


@dataclass
class RunConfig:
    # data; leaving train_path empty synthesises the toy corpus
    train_path: str | None = None
    val_path: str | None = None
    test_path: str | None = None
    val_fraction: float = 0.1
    toy_train_sentences: int = 300
    toy_val_sentences: int = 50
    toy_test_sentences: int = 100
    # tiny backbone (generator and sentence encoder)
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn: int = 128
    max_len: int = 64
    # adapter
    adapter_method: str = "lora"
    prompt_length: int = 100
    prefix_length: int = 6
    lora_rank: int = 8
    lora_dropout: float = 0.0
    # generator fine-tuning
    gen_epochs: int = 100
    gen_steps: int | None = None
    gen_batch_size: int = 16
    gen_optimizer: str = "adafactor"
    gen_lr: float = 3e-2
    reweight: bool = False
    reweight_A: float = 0.55
    reweight_B: float = 1.5
    reweight_invert: bool = False
    seed_spans_positive: list[str] = field(default_factory=lambda: ["so good"])
    seed_spans_negative: list[str] = field(default_factory=lambda: ["so bad"])
    seed_spans_neutral: list[str] = field(default_factory=lambda: ["so so"])
    # decoding
    decode_mode: str = "greedy"
    top_k: int = 10
    max_new_tokens: int | None = None
    # augmentation and filtering
    augment: bool = True
    validity_check: bool = True
    # prediction model
    alpha: float = 0.5
    beta: float = 2.0
    margin: float = 0.3
    k: int = 1
    lr: float = 1e-3
    dropout: float = 0.3
    epochs: int = 15
    batch_size: int = 16
    warmup_epochs: int = 3
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    run_baseline: bool = True
    # adapter comparison
    compare_methods: list[str] = field(default_factory=lambda: ["full", "lora", "prompt", "prefix"])
    compare_steps: int = 400
    compare_sentences: int = 20
    seed: int = 0

    def __post_init__(self):
        # constructing the module configs validates every field they own
        self.adapter()
        self.finetune()
        self.decode()
        self.training()
        if not 0 <= self.val_fraction < 1:
            raise ConfigurationError("val_fraction must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected a flat JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def backbone_kwargs(self) -> dict:
        return {k: getattr(self, k) for k in ("d_model", "heads", "encoder_layers", "decoder_layers", "ffn", "max_len")}

    def adapter(self) -> AdapterConfig:
        return AdapterConfig(self.adapter_method, self.prompt_length, self.prefix_length, self.lora_rank,
                             self.lora_dropout)

    def seed_map(self) -> PolaritySeedMap:
        spans = {POSITIVE: tuple(self.seed_spans_positive), NEGATIVE: tuple(self.seed_spans_negative)}
        if self.seed_spans_neutral:
            spans[NEUTRAL] = tuple(self.seed_spans_neutral)
        return PolaritySeedMap(spans)

    def finetune(self) -> FinetuneConfig:
        return FinetuneConfig(
            epochs=self.gen_epochs, steps=self.gen_steps, batch_size=self.gen_batch_size,
            optimizer=self.gen_optimizer, lr=self.gen_lr, reweight=self.reweight, reweight_A=self.reweight_A,
            reweight_B=self.reweight_B, reweight_invert=self.reweight_invert, seed=self.seed, seeds=self.seed_map(),
        )

    def decode(self) -> DecodeConfig:
        return DecodeConfig(self.decode_mode, self.top_k, self.seed, self.max_new_tokens)

    def training(self) -> TrainingConfig:
        return TrainingConfig(self.alpha, self.beta, self.margin, self.k, self.lr, self.dropout, self.epochs,
                              self.batch_size, list(self.seeds), self.warmup_epochs)

    def ablation(self) -> str:
        if not self.augment:
            return "w/o DA & CL"
        if self.beta == 0:
            return "w/o CL"
        if self.k == 4 and not self.validity_check:
            return "w/o EMF"
        return "full"

    def digest(self, keys, upstream: str = "") -> str:
        payload = {"upstream": upstream, **{k: getattr(self, k) for k in sorted(keys)}}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


DATA_KEYS = ("train_path", "val_path", "test_path", "val_fraction", "toy_train_sentences", "toy_val_sentences",
             "toy_test_sentences", "seed")
BACKBONE_KEYS = ("d_model", "heads", "encoder_layers", "decoder_layers", "ffn", "max_len")
GENERATOR_KEYS = BACKBONE_KEYS + (
    "adapter_method", "prompt_length", "prefix_length", "lora_rank", "lora_dropout", "gen_epochs", "gen_steps",
    "gen_batch_size", "gen_optimizer", "gen_lr", "reweight", "reweight_A", "reweight_B", "reweight_invert",
    "seed_spans_positive", "seed_spans_negative", "seed_spans_neutral", "seed",
)
AUGMENT_KEYS = ("decode_mode", "top_k", "max_new_tokens", "validity_check", "seed")
FILTER_KEYS = BACKBONE_KEYS + ("warmup_epochs", "lr", "dropout", "batch_size", "k")
TRAIN_KEYS = BACKBONE_KEYS + ("alpha", "beta", "margin", "lr", "dropout", "epochs", "batch_size")
BASELINE_KEYS = BACKBONE_KEYS + ("lr", "dropout", "epochs", "batch_size")
