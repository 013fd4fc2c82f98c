"""Parameter-efficient adapters over a TinyTransformer-style backbone.

Methods: ``full`` (all backbone weights train), ``none`` (nothing trains),
``prompt`` (soft tokens prepended to the encoder input), ``prefix`` (learned
key/value vectors prepended in every self-attention layer) and ``lora``
(low-rank delta ``up @ down`` on self-attention query and value projections,
scale 1, ``up`` zero-initialised).
"""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .backbone import DecodeConfig, TinyTransformer, Vocab
from .errors import ConfigurationError, NotTrainableError

METHODS = ("full", "none", "prompt", "prefix", "lora")


@dataclass
class AdapterConfig:
    method: str = "lora"
    prompt_length: int = 100
    prefix_length: int = 6
    lora_rank: int = 8
    lora_dropout: float = 0.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown adapter method {self.method!r}; expected one of {METHODS}")
        if self.method == "prompt" and self.prompt_length < 1:
            raise ConfigurationError("prompt_length must be >= 1")
        if self.method == "prefix" and self.prefix_length < 1:
            raise ConfigurationError("prefix_length must be >= 1")
        if self.method == "lora":
            if self.lora_rank < 1:
                raise ConfigurationError("lora_rank must be >= 1")
            if not 0.0 <= self.lora_dropout < 1.0:
                raise ConfigurationError("lora_dropout must be in [0, 1)")


def _torch_generator(rng) -> torch.Generator:
    seed = rng.getrandbits(63) if isinstance(rng, random.Random) else int(rng)
    return torch.Generator().manual_seed(seed)


class AdaptedGenerator:
    """A backbone plus adapter state. Passed to the backbone as its ``adapter``."""

    def __init__(self, backbone: TinyTransformer, cfg: AdapterConfig, params: dict[str, nn.Parameter],
                 vocab: Vocab | None = None):
        self.backbone = backbone
        self.cfg = cfg
        self.params = params
        self.vocab = vocab
        self.training = False

    # -- hooks read by the backbone ----------------------------------------

    def prompt(self):
        return self.params.get("adapter.prompt")

    def prefix(self, layer: str):
        k = self.params.get(f"adapter.prefix.{layer}.key")
        if k is None:
            return None
        return k, self.params[f"adapter.prefix.{layer}.value"]

    def lora(self, layer: str, which: str):
        down = self.params.get(f"adapter.lora.{layer}.{which}.down")
        if down is None:
            return None
        up = self.params[f"adapter.lora.{layer}.{which}.up"]
        return down, up

    @property
    def lora_dropout(self) -> float:
        return self.cfg.lora_dropout if self.training else 0.0

    @property
    def _hooks(self):
        return None if self.cfg.method in ("full", "none") else self

    # -- training surface ---------------------------------------------------

    def trainable_parameters(self) -> dict[str, nn.Parameter]:
        if self.cfg.method == "full":
            return dict(self.backbone.named_parameters())
        return dict(self.params)

    def train(self, mode: bool = True):
        self.training = mode
        self.backbone.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def sequence_nll(self, sources, targets) -> torch.Tensor:
        v = self.vocab
        return self.backbone.sequence_nll(sources, targets, v.bos_id, v.eos_id, v.pad_id, adapter=self._hooks)

    def pair_nll(self, pairs: Sequence[tuple[str, str]]) -> torch.Tensor:
        """Per-pair mean token NLL for (condition text, target text) pairs."""
        v = self.vocab
        return self.sequence_nll([v.encode_text(s) for s, _ in pairs], [v.encode_text(t) for _, t in pairs])

    def generate_ids(self, sources, decode: DecodeConfig | None = None) -> list[list[int]]:
        v = self.vocab
        return self.backbone.generate(sources, v.bos_id, v.eos_id, v.pad_id, decode, adapter=self._hooks)

    def generate(self, conditions: Sequence[str], decode: DecodeConfig | None = None) -> list[str]:
        """Generate one text per condition string, truncating overlong inputs."""
        v = self.vocab
        limit = self.backbone.cfg.max_len
        ids = [v.encode_text(c)[:limit] for c in conditions]
        return [v.decode_text(seq) for seq in self.generate_ids(ids, decode)]

    # -- persistence --------------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return self.trainable_parameters()

    def save(self, path: str | Path) -> Path:
        meta = {"kind": "adapter", "adapter_config": asdict(self.cfg)}
        if self.vocab is not None:
            meta["vocab"] = self.vocab.itos
        return checkpoint.save(path, self.state_tensors(), meta)

    def load_state(self, path: str | Path) -> None:
        tensors, meta = checkpoint.load(path)
        if meta.get("adapter_config", {}).get("method") != self.cfg.method:
            raise ConfigurationError("adapter checkpoint method does not match handle")
        target = self.trainable_parameters()
        if set(tensors) != set(target):
            raise ConfigurationError("adapter checkpoint tensor names do not match handle")
        with torch.no_grad():
            for name, t in tensors.items():
                if tuple(t.shape) != tuple(target[name].shape):
                    raise ConfigurationError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(target[name].shape)}")
                target[name].copy_(t.to(target[name].dtype))


def attach(backbone: TinyTransformer, cfg: AdapterConfig, rng=0, vocab: Vocab | None = None) -> AdaptedGenerator:
    """Wrap ``backbone`` with the adapter described by ``cfg``.

    Freezes backbone weights unless ``cfg.method == "full"``.
    """
    bcfg = getattr(backbone, "cfg", None)
    if bcfg is None or backbone.d_model % bcfg.heads:
        raise ConfigurationError("backbone does not expose a compatible configuration")
    if vocab is not None and len(vocab) != backbone.vocab_size:
        raise ConfigurationError(f"vocab of size {len(vocab)} does not match backbone ({backbone.vocab_size})")
    d = backbone.d_model
    dtype = next(backbone.parameters()).dtype
    gen = _torch_generator(rng)
    params: dict[str, nn.Parameter] = {}

    if cfg.method == "prompt":
        # start from embeddings of random vocabulary entries
        rows = torch.randint(backbone.vocab_size, (cfg.prompt_length,), generator=gen)
        init = backbone.embed.weight.detach()[rows] * d**0.5
        params["adapter.prompt"] = nn.Parameter(init.clone().to(dtype))
    elif cfg.method == "prefix":
        for layer in bcfg.self_attention_layers():
            for part in ("key", "value"):
                t = torch.randn(cfg.prefix_length, d, generator=gen, dtype=torch.float64) * 0.5
                params[f"adapter.prefix.{layer}.{part}"] = nn.Parameter(t.to(dtype))
    elif cfg.method == "lora":
        for layer in bcfg.self_attention_layers():
            for which in ("q", "v"):
                d_in = d_out = d
                bound = 1.0 / d_in**0.5
                down = (torch.rand(cfg.lora_rank, d_in, generator=gen, dtype=torch.float64) * 2 - 1) * bound
                params[f"adapter.lora.{layer}.{which}.down"] = nn.Parameter(down.to(dtype))
                params[f"adapter.lora.{layer}.{which}.up"] = nn.Parameter(torch.zeros(d_out, cfg.lora_rank, dtype=dtype))

    clash = set(params) & set(backbone.parameter_inventory())
    if clash:
        raise ConfigurationError(f"adapter tensor names collide with backbone: {sorted(clash)}")
    for p in backbone.parameters():
        p.requires_grad_(cfg.method == "full")
    return AdaptedGenerator(backbone, cfg, params, vocab)


def trainable_parameter_count(handle: AdaptedGenerator) -> int:
    if handle.cfg.method == "none":
        return 0
    return sum(p.numel() for p in handle.trainable_parameters().values())


def expected_parameter_count(cfg: AdapterConfig, backbone: TinyTransformer) -> int:
    """Closed-form trainable parameter count for ``cfg`` on ``backbone``."""
    d = backbone.d_model
    n_self_attn = len(backbone.cfg.self_attention_layers())
    if cfg.method == "none":
        return 0
    if cfg.method == "full":
        return backbone.cfg.parameter_count()
    if cfg.method == "prompt":
        return cfg.prompt_length * d
    if cfg.method == "prefix":
        return cfg.prefix_length * 2 * d * n_self_attn
    # two targets (q, v) per self-attention layer, each d -> d
    return n_self_attn * 2 * cfg.lora_rank * (d + d)


def make_optimizer(handle: AdaptedGenerator, name: str = "adafactor", lr: float = 1e-3) -> torch.optim.Optimizer:
    """``adafactor`` (factored second moment, no relative step scaling) or ``adam``."""
    if handle.cfg.method == "none":
        raise NotTrainableError("method 'none' has no trainable parameters")
    params = list(handle.trainable_parameters().values())
    if name == "adafactor":
        # eps2 = 1 disables parameter-scale relative steps for parameters with RMS < 1
        return torch.optim.Adafactor(params, lr=lr, eps=(None, 1.0))
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    raise ConfigurationError(f"unknown optimizer {name!r}")


def adapter_step(handle: AdaptedGenerator, pairs: Sequence[tuple[str, str]], optimizer: torch.optim.Optimizer,
                 weights: Sequence[float] | None = None) -> float:
    """One optimizer step on the (optionally weighted) mean pair NLL."""
    if handle.cfg.method == "none":
        raise NotTrainableError("method 'none' has no trainable parameters")
    handle.train()
    optimizer.zero_grad(set_to_none=True)
    nll = handle.pair_nll(pairs)
    if weights is not None:
        nll = nll * torch.as_tensor(weights, dtype=nll.dtype)
    loss = nll.mean()
    loss.backward()
    optimizer.step()
    handle.eval()
    return float(loss.detach())
