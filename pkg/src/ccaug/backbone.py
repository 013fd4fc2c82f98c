"""Sequence-to-sequence backbone interface and a small built-in transformer.

The tiny transformer serves both as the conditional generator and, through
its encoder half, as the sentence encoder of the prediction model. Adapters
never own backbone weights; they are passed to ``forward`` calls as an
``adapter`` object exposing optional ``prompt()``, ``prefix(name)`` and
``lora(name, which)`` hooks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .data import SEPARATOR, tokenize
from .errors import ConfigurationError, LengthError

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<s>", "</s>"
SPECIALS = (PAD, UNK, BOS, EOS, SEPARATOR)


class Vocab:
    """Token <-> id mapping; specials occupy the first ids."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        v = cls()
        for text in texts:
            for tok in tokenize(text):
                v.add(tok)
        return v

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    @property
    def sep_id(self) -> int:
        return self.stoi[SEPARATOR]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        unk = self.stoi[UNK]
        return [self.stoi.get(t, unk) for t in tokens]

    def encode_text(self, text: str) -> list[int]:
        return self.encode(tokenize(text))

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def decode_text(self, ids: Sequence[int]) -> str:
        return " ".join(t for t in self.decode(ids) if t not in (PAD, BOS, EOS))


class Seq2SeqBackbone(Protocol):
    vocab_size: int
    d_model: int

    def parameter_inventory(self) -> dict[str, torch.Tensor]: ...

    def encode(self, src: torch.Tensor, src_pad: torch.Tensor, adapter=None) -> tuple[torch.Tensor, torch.Tensor]: ...

    def decode(self, tgt_in: torch.Tensor, memory: torch.Tensor, memory_pad: torch.Tensor, adapter=None) -> torch.Tensor: ...


class SentenceEncoder(Protocol):
    width: int
    dropout: float

    def __call__(self, ids: torch.Tensor, pad: torch.Tensor) -> torch.Tensor: ...


@dataclass
class TinyTransformerConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn: int = 128
    max_len: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.heads, self.encoder_layers,
               self.decoder_layers, self.ffn, self.max_len) < 1:
            raise ConfigurationError("all sizes and counts must be >= 1")
        if self.d_model % self.heads:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by heads {self.heads}")

    def parameter_count(self) -> int:
        d, f, V = self.d_model, self.ffn, self.vocab_size
        attn = 4 * (d * d + d)
        ffn = d * f + f + f * d + d
        ln = 2 * d
        enc = attn + ffn + 2 * ln
        dec = 2 * attn + ffn + 3 * ln
        return V * d + self.encoder_layers * enc + self.decoder_layers * dec + 2 * ln + V

    def self_attention_layers(self) -> list[str]:
        return [f"encoder_layers.{i}.self_attn" for i in range(self.encoder_layers)] + [
            f"decoder_layers.{i}.self_attn" for i in range(self.decoder_layers)
        ]


def sinusoidal_positions(length: int, d_model: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    pe = torch.zeros(length, d_model, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : d_model // 2]
    return pe


class Attention(nn.Module):
    def __init__(self, d_model: int, heads: int, dropout: float, name: str):
        super().__init__()
        self.heads = heads
        self.name = name
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def _project(self, layer: nn.Linear, x, adapter, which: str):
        out = layer(x)
        lora = adapter.lora(self.name, which) if adapter is not None else None
        if lora is not None:
            down, up = lora  # (r, d_in), (d_out, r)
            p = getattr(adapter, "lora_dropout", 0.0)
            xin = F.dropout(x, p) if p else x
            out = out + (xin @ down.t()) @ up.t()
        return out

    def forward(self, x_q, x_kv, kv_pad, causal: bool = False, adapter=None):
        B, Lq, d = x_q.shape
        q = self._project(self.q, x_q, adapter, "q")
        k = self.k(x_kv)
        v = self._project(self.v, x_kv, adapter, "v")
        Lk = k.shape[1]
        allowed = ~kv_pad[:, None, :].expand(B, Lq, Lk)
        if causal:
            tri = torch.ones(Lq, Lk, dtype=torch.bool, device=x_q.device).tril()
            allowed = allowed & tri
        prefix = adapter.prefix(self.name) if adapter is not None else None
        if prefix is not None:
            pk, pv = prefix
            P = pk.shape[0]
            k = torch.cat([pk.unsqueeze(0).expand(B, P, d), k], dim=1)
            v = torch.cat([pv.unsqueeze(0).expand(B, P, d), v], dim=1)
            allowed = torch.cat([torch.ones(B, Lq, P, dtype=torch.bool, device=x_q.device), allowed], dim=2)
        h, dh = self.heads, d // self.heads
        q = q.view(B, Lq, h, dh).transpose(1, 2)
        k = k.view(B, -1, h, dh).transpose(1, 2)
        v = v.view(B, -1, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        weights = self.drop(torch.softmax(scores, dim=-1))
        out = (weights @ v).transpose(1, 2).reshape(B, Lq, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn: int, dropout: float):
        super().__init__()
        self.up = nn.Linear(d_model, ffn)
        self.down = nn.Linear(ffn, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.down(self.drop(F.gelu(self.up(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: TinyTransformerConfig, i: int):
        super().__init__()
        self.self_attn = Attention(cfg.d_model, cfg.heads, cfg.dropout, f"encoder_layers.{i}.self_attn")
        self.ff = FeedForward(cfg.d_model, cfg.ffn, cfg.dropout)
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, pad, adapter=None):
        y = self.ln1(x)
        x = x + self.drop(self.self_attn(y, y, pad, adapter=adapter))
        return x + self.drop(self.ff(self.ln2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: TinyTransformerConfig, i: int):
        super().__init__()
        self.self_attn = Attention(cfg.d_model, cfg.heads, cfg.dropout, f"decoder_layers.{i}.self_attn")
        self.cross_attn = Attention(cfg.d_model, cfg.heads, cfg.dropout, f"decoder_layers.{i}.cross_attn")
        self.ff = FeedForward(cfg.d_model, cfg.ffn, cfg.dropout)
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ln3 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, pad, memory, memory_pad, adapter=None):
        y = self.ln1(x)
        x = x + self.drop(self.self_attn(y, y, pad, causal=True, adapter=adapter))
        x = x + self.drop(self.cross_attn(self.ln2(x), memory, memory_pad, adapter=adapter))
        return x + self.drop(self.ff(self.ln3(x)))


@dataclass
class DecodeConfig:
    mode: str = "greedy"  # or "top_k"
    top_k: int = 10
    seed: int = 0
    max_new_tokens: int | None = None

    def __post_init__(self):
        if self.mode not in ("greedy", "top_k"):
            raise ConfigurationError(f"unknown decoding mode {self.mode!r}")
        if self.top_k < 1:
            raise ConfigurationError("top_k must be >= 1")


class TinyTransformer(nn.Module):
    """Pre-LayerNorm encoder-decoder with fixed sinusoidal positions."""

    def __init__(self, cfg: TinyTransformerConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d_model)
        # unit scale after the sqrt(d_model) input multiplier, comparable to the positions
        nn.init.normal_(self.embed.weight, std=cfg.d_model**-0.5)
        self.encoder_layers = nn.ModuleList(EncoderLayer(cfg, i) for i in range(cfg.encoder_layers))
        self.decoder_layers = nn.ModuleList(DecoderLayer(cfg, i) for i in range(cfg.decoder_layers))
        self.encoder_norm = nn.LayerNorm(cfg.d_model)
        self.decoder_norm = nn.LayerNorm(cfg.d_model)
        # output projection is tied to the embedding
        self.lm_bias = nn.Parameter(torch.zeros(cfg.vocab_size))
        self.drop = nn.Dropout(cfg.dropout)
        self.register_buffer("positions", sinusoidal_positions(cfg.max_len + 1, cfg.d_model).float(), persistent=False)

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    @property
    def d_model(self) -> int:
        return self.cfg.d_model

    @property
    def width(self) -> int:
        return self.cfg.d_model

    @property
    def dropout(self) -> float:
        return self.cfg.dropout

    def parameter_inventory(self) -> dict[str, torch.Tensor]:
        return dict(self.named_parameters())

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        L = ids.shape[1]
        if L > self.positions.shape[0]:
            raise LengthError(f"sequence length {L} exceeds max_len {self.cfg.max_len}")
        x = self.embed(ids) * math.sqrt(self.cfg.d_model)
        return self.drop(x + self.positions[:L].to(x.dtype))

    def encode(self, src: torch.Tensor, src_pad: torch.Tensor, adapter=None):
        """Returns (memory, memory_pad); memory includes any prompt positions."""
        x = self._embed(src)
        prompt = adapter.prompt() if adapter is not None else None
        if prompt is not None:
            B = src.shape[0]
            x = torch.cat([prompt.unsqueeze(0).expand(B, -1, -1).to(x.dtype), x], dim=1)
            src_pad = torch.cat([torch.zeros(B, prompt.shape[0], dtype=torch.bool), src_pad], dim=1)
        for layer in self.encoder_layers:
            x = layer(x, src_pad, adapter=adapter)
        return self.encoder_norm(x), src_pad

    def decode(self, tgt_in, memory, memory_pad, adapter=None):
        # right padding only; the causal mask keeps pads from reaching real positions
        tgt_pad = torch.zeros(tgt_in.shape, dtype=torch.bool)
        x = self._embed(tgt_in)
        for layer in self.decoder_layers:
            x = layer(x, tgt_pad, memory, memory_pad, adapter=adapter)
        return self.decoder_norm(x) @ self.embed.weight.t() + self.lm_bias

    def forward(self, ids: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        """Per-token encoder states of shape (B, L, d_model)."""
        memory, _ = self.encode(ids, pad)
        return memory

    # -- batched helpers over id lists -------------------------------------

    def _check_len(self, seq: Sequence[int], extra: int = 0):
        if len(seq) + extra > self.cfg.max_len:
            raise LengthError(f"sequence of length {len(seq)} exceeds max_len {self.cfg.max_len}")

    def sequence_nll(self, sources: Sequence[Sequence[int]], targets: Sequence[Sequence[int]],
                     bos_id: int, eos_id: int, pad_id: int, adapter=None) -> torch.Tensor:
        """Mean per-token teacher-forced cross-entropy for each pair; shape (B,).

        The decoder reads ``<s> + target`` and predicts ``target + </s>``.
        """
        for s, t in zip(sources, targets):
            if not s or not t:
                raise LengthError("source and target must be non-empty")
            self._check_len(s)
            self._check_len(t, 1)
        src, src_pad = pad_batch(sources, pad_id)
        tgt_in, _ = pad_batch([[bos_id, *t] for t in targets], pad_id)
        labels, lab_pad = pad_batch([[*t, eos_id] for t in targets], pad_id)
        memory, mem_pad = self.encode(src, src_pad, adapter=adapter)
        logits = self.decode(tgt_in, memory, mem_pad, adapter=adapter)
        ce = F.cross_entropy(logits.transpose(1, 2), labels, reduction="none")
        ce = ce.masked_fill(lab_pad, 0.0)
        return ce.sum(dim=1) / (~lab_pad).sum(dim=1)

    @torch.no_grad()
    def generate(self, sources: Sequence[Sequence[int]], bos_id: int, eos_id: int, pad_id: int,
                 decode: DecodeConfig | None = None, adapter=None) -> list[list[int]]:
        decode = decode or DecodeConfig()
        for s in sources:
            self._check_len(s)
        if not sources:
            return []
        max_new = decode.max_new_tokens or self.cfg.max_len - 1
        max_new = min(max_new, self.cfg.max_len - 1)
        gen = torch.Generator().manual_seed(decode.seed) if decode.mode == "top_k" else None
        was_training = self.training
        self.eval()
        src, src_pad = pad_batch(sources, pad_id)
        memory, mem_pad = self.encode(src, src_pad, adapter=adapter)
        B = len(sources)
        out = torch.full((B, 1), bos_id, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        for _ in range(max_new):
            logits = self.decode(out, memory, mem_pad, adapter=adapter)[:, -1]
            if decode.mode == "greedy":
                nxt = logits.argmax(dim=-1)
            else:
                k = min(decode.top_k, logits.shape[-1])
                vals, idx = logits.topk(k, dim=-1)
                probs = torch.softmax(vals.double(), dim=-1)
                choice = torch.multinomial(probs, 1, generator=gen).squeeze(1)
                nxt = idx.gather(1, choice[:, None]).squeeze(1)
            nxt = torch.where(done, torch.full_like(nxt, pad_id), nxt)
            out = torch.cat([out, nxt[:, None]], dim=1)
            done |= nxt == eos_id
            if bool(done.all()):
                break
        self.train(was_training)
        results = []
        for row in out[:, 1:].tolist():
            seq = []
            for tok in row:
                if tok in (eos_id, pad_id):
                    break
                seq.append(tok)
            results.append(seq)
        return results

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path, vocab: Vocab | None = None) -> Path:
        meta = {"kind": "tiny_transformer", "config": asdict(self.cfg)}
        if vocab is not None:
            meta["vocab"] = vocab.itos
        return checkpoint.save(path, self.parameter_inventory(), meta)

    @classmethod
    def load(cls, path: str | Path) -> tuple["TinyTransformer", Vocab | None]:
        tensors, meta = checkpoint.load(path)
        model = cls(TinyTransformerConfig(**meta["config"]))
        model.load_state_dict(tensors, strict=True)
        vocab = None
        if "vocab" in meta:
            vocab = Vocab()
            for t in meta["vocab"]:
                vocab.add(t)
        return model, vocab


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad to a (B, L) long tensor; returns (ids, pad_mask)."""
    L = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), L), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    lengths = torch.tensor([len(s) for s in seqs])
    pad = torch.arange(L)[None, :] >= lengths[:, None]
    return ids, pad


def nll_loss(backbone: TinyTransformer, vocab: Vocab, source: Sequence[str], target: Sequence[str],
             adapter=None) -> torch.Tensor:
    """Teacher-forced mean per-token NLL of ``target`` given ``source`` (token lists)."""
    return backbone.sequence_nll(
        [vocab.encode(source)], [vocab.encode(target)], vocab.bos_id, vocab.eos_id, vocab.pad_id, adapter
    )[0]


def generate(backbone: TinyTransformer, vocab: Vocab, source: Sequence[str],
             decode: DecodeConfig | None = None, adapter=None) -> list[str]:
    ids = backbone.generate([vocab.encode(source)], vocab.bos_id, vocab.eos_id, vocab.pad_id, decode, adapter)[0]
    return vocab.decode(ids)
