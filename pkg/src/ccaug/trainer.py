"""Prediction model: aspect-pooled encoder states, a linear classification
head, and the supervised + triplet-contrastive training objective."""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import TinyTransformer, TinyTransformerConfig, Vocab, pad_batch
from .data import AbsaTriplet, Dataset, check_polarity, tokenize
from .errors import ConfigurationError, LengthError
from .metrics import NUM_CLASSES, accuracy, macro_f1


@dataclass
class TrainingConfig:
    alpha: float = 0.5
    beta: float = 2.0
    margin: float = 0.3
    k: int = 1
    # 2e-5 suits pretrained encoders; the randomly initialised tiny encoder needs more
    lr: float = 1e-3
    dropout: float = 0.3
    epochs: int = 15
    batch_size: int = 16
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    warmup_epochs: int = 3

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be >= 0")
        if self.margin < 0:
            raise ConfigurationError("margin must be >= 0")
        if not 1 <= self.k <= 4:
            raise ConfigurationError("k must be in 1..4")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ConfigurationError("lr, epochs and batch_size must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must be in [0, 1)")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")


class AbsaClassifier(nn.Module):
    """Sentence encoder (encoder half of a TinyTransformer) plus a linear head."""

    def __init__(self, encoder: TinyTransformer, vocab: Vocab, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.encoder = encoder
        self.vocab = vocab
        self.head = nn.Linear(encoder.width, num_classes)

    @classmethod
    def build(cls, vocab: Vocab, seed: int, dropout: float = 0.3, **backbone_kwargs) -> "AbsaClassifier":
        torch.manual_seed(seed)
        cfg = TinyTransformerConfig(vocab_size=len(vocab), dropout=dropout, **backbone_kwargs)
        return cls(TinyTransformer(cfg), vocab)

    @property
    def max_len(self) -> int:
        return self.encoder.cfg.max_len

    def states(self, ids: torch.Tensor, pad: torch.Tensor) -> torch.Tensor:
        return self.encoder(ids, pad)

    def pooled(self, seqs: Sequence[Sequence[int]], masks: Sequence[Sequence[int]]) -> torch.Tensor:
        """Mean encoder state over the marked positions of each sequence."""
        ids, pad = pad_batch(seqs, self.vocab.pad_id)
        m, _ = pad_batch(masks, 0)
        return masked_mean(self.states(ids, pad), m)


def masked_mean(states: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = mask.to(states.dtype)
    counts = mask.sum(dim=-1, keepdim=True)
    if bool((counts == 0).any()):
        raise ValueError("pooling mask marks no position")
    return (states * mask.unsqueeze(-1)).sum(dim=-2) / counts


def encode_with_aspect(model: AbsaClassifier, tokens: Sequence[str], indicator: Sequence[int]) -> torch.Tensor:
    """Mean of the encoder's token embeddings over the aspect positions; dropout off."""
    if len(tokens) != len(indicator):
        raise ValueError("indicator length differs from sentence length")
    if not any(indicator):
        raise ValueError("aspect indicator marks no token")
    was = model.training
    model.eval()
    try:
        return model.pooled([model.vocab.encode(tokens)], [list(indicator)])[0]
    finally:
        model.train(was)


def cosine_distance(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Negative cosine similarity along the last dimension."""
    nu = u.norm(dim=-1)
    nv = v.norm(dim=-1)
    if bool((nu == 0).any()) or bool((nv == 0).any()):
        raise ValueError("cosine distance is undefined for zero vectors")
    return -(u * v).sum(dim=-1) / (nu * nv)


def triplet_ct_loss(h: torch.Tensor, h_pos: torch.Tensor, h_neg: torch.Tensor, margin: float) -> torch.Tensor:
    return torch.clamp(cosine_distance(h, h_pos) - cosine_distance(h, h_neg) + margin, min=0.0)


def sct_loss(h: torch.Tensor, h_pos: torch.Tensor, label: int, head: nn.Module, alpha: float) -> torch.Tensor:
    """CE on the source representation plus ``alpha`` times the CE on the
    augmented one; ``h_pos`` of shape (k, D) averages the augmented term."""
    check_polarity(label)
    y = torch.tensor([label])
    src = F.cross_entropy(head(h.unsqueeze(0)), y)
    hp = h_pos if h_pos.dim() == 2 else h_pos.unsqueeze(0)
    aug = F.cross_entropy(head(hp), y.expand(hp.shape[0]))
    return src + alpha * aug


@dataclass
class EncodedItem:
    ids: list[int]
    indicator: list[int]
    label: int
    # (concatenated ids, source-aspect mask, after-separator mask) per augmentation
    augments: list[tuple[list[int], list[int], list[int]]] = field(default_factory=list)


def encode_item(vocab: Vocab, triplet: AbsaTriplet, augment_texts: Sequence[str] = (), max_len: int = 64
                ) -> EncodedItem:
    """Token ids for the source and for each ``[source <eos> augmentation]``.

    Augmented segments are truncated to fit ``max_len``; a segment left empty
    is dropped since it has no positions to pool.
    """
    ids = vocab.encode(triplet.sentence)
    if len(ids) > max_len:
        raise LengthError(f"sentence of {len(ids)} tokens exceeds max_len {max_len}")
    ind = list(triplet.aspect_indicator)
    item = EncodedItem(ids, ind, triplet.polarity)
    room = max_len - len(ids) - 1
    for text in augment_texts:
        seg = vocab.encode(tokenize(text))[: max(room, 0)]
        if not seg:
            continue
        cat = ids + [vocab.sep_id] + seg
        item.augments.append((cat, ind + [0] * (len(seg) + 1), [0] * (len(ids) + 1) + [1] * len(seg)))
    return item


@dataclass
class LossTerms:
    total: torch.Tensor
    sct: torch.Tensor
    ct: torch.Tensor
    ce_source: torch.Tensor
    ce_augmented: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "sct", "ct", "ce_source", "ce_augmented")}


def loss_terms(model: AbsaClassifier, items: Sequence[EncodedItem], alpha: float, beta: float, margin: float
               ) -> LossTerms:
    """Batch objective: mean SCT plus ``beta`` times mean triplet CT.

    Items without augmentations contribute their source CE and zero CT; CT is
    averaged over the whole batch.
    """
    if not items:
        raise ValueError("empty batch")
    B = len(items)
    labels = torch.tensor([it.label for it in items])
    h = model.pooled([it.ids for it in items], [it.indicator for it in items])
    # batch mean of SCT = mean source CE + alpha * mean augmented CE
    ce_src = F.cross_entropy(model.head(h), labels)

    owner = [i for i, it in enumerate(items) for _ in it.augments]
    aug_mean = torch.zeros(B, dtype=h.dtype)
    ct_mean = torch.zeros(B, dtype=h.dtype)
    if owner:
        cats = [a for it in items for a in it.augments]
        ids, pad = pad_batch([c[0] for c in cats], model.vocab.pad_id)
        states = model.states(ids, pad)
        asp, _ = pad_batch([c[1] for c in cats], 0)
        tail, _ = pad_batch([c[2] for c in cats], 0)
        h_pos = masked_mean(states, asp)
        h_neg = masked_mean(states, tail)
        own = torch.tensor(owner)
        ce_aug = F.cross_entropy(model.head(h_pos), labels[own], reduction="none")
        ct = triplet_ct_loss(h[own], h_pos, h_neg, margin)
        counts = torch.bincount(own, minlength=B).to(h.dtype).clamp(min=1)
        aug_mean = torch.zeros(B, dtype=h.dtype).index_add(0, own, ce_aug) / counts
        ct_mean = torch.zeros(B, dtype=h.dtype).index_add(0, own, ct) / counts

    sct = ce_src + alpha * aug_mean.mean()
    ct_term = ct_mean.mean()
    return LossTerms(sct + beta * ct_term, sct, ct_term, ce_src, aug_mean.mean())


@dataclass
class TrainResult:
    epochs: list[dict]
    step_terms: list[dict]
    best_epoch: int | None = None


def batches(n: int, batch_size: int, rng: random.Random) -> list[list[int]]:
    order = list(range(n))
    rng.shuffle(order)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@torch.no_grad()
def predict_proba(model: AbsaClassifier, seqs: Sequence[Sequence[int]], masks: Sequence[Sequence[int]],
                  batch_size: int = 256) -> torch.Tensor:
    was = model.training
    model.eval()
    out = []
    for i in range(0, len(seqs), batch_size):
        h = model.pooled(seqs[i : i + batch_size], masks[i : i + batch_size])
        out.append(torch.softmax(model.head(h).double(), dim=-1))
    model.train(was)
    return torch.cat(out) if out else torch.zeros(0, NUM_CLASSES, dtype=torch.float64)


def predict(model: AbsaClassifier, triplet: AbsaTriplet) -> tuple[int, list[float]]:
    probs = predict_proba(model, [model.vocab.encode(triplet.sentence)], [list(triplet.aspect_indicator)])[0]
    return int(probs.argmax()), probs.tolist()


def evaluate(model: AbsaClassifier, dataset: Dataset | Sequence[AbsaTriplet]) -> dict:
    trips = list(dataset)
    probs = predict_proba(model, [model.vocab.encode(t.sentence) for t in trips],
                          [list(t.aspect_indicator) for t in trips])
    pred = probs.argmax(dim=-1).tolist()
    gold = [t.polarity for t in trips]
    picked = probs[torch.arange(len(gold)), torch.tensor(gold)].clamp_min(1e-300)
    return {"accuracy": accuracy(pred, gold), "macro_f1": macro_f1(pred, gold), "nll": float(-picked.log().mean()),
            "predictions": pred}


def train(model: AbsaClassifier, items: Sequence[EncodedItem], cfg: TrainingConfig, seed: int,
          val: Dataset | Sequence[AbsaTriplet] | None = None, epochs: int | None = None,
          alpha: float | None = None, beta: float | None = None,
          on_step: Callable[[int, Sequence[EncodedItem], LossTerms], None] | None = None) -> TrainResult:
    """Adam training over ``items``; keeps the best validation-accuracy epoch,
    ties going to the lower validation cross-entropy.

    ``epochs``, ``alpha`` and ``beta`` override the config (used by the
    source-only warm-up).
    """
    if not items:
        raise ValueError("no training items")
    epochs = cfg.epochs if epochs is None else epochs
    alpha = cfg.alpha if alpha is None else alpha
    beta = cfg.beta if beta is None else beta
    torch.manual_seed(seed)
    rng = random.Random(seed)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=cfg.lr, weight_decay=0.0)
    result = TrainResult([], [])
    best_key, best_state = None, None
    step = 0
    for epoch in range(1, epochs + 1):
        model.train()
        total, count = 0.0, 0
        for idx in batches(len(items), cfg.batch_size, rng):
            batch = [items[i] for i in idx]
            terms = loss_terms(model, batch, alpha, beta, cfg.margin)
            step += 1
            if on_step:
                # before the update, so callers can re-evaluate on the same weights
                on_step(step, batch, terms)
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            opt.step()
            result.step_terms.append(terms.as_floats())
            total += float(terms.total.detach()) * len(batch)
            count += len(batch)
        row = {"epoch": epoch, "train_loss": total / count}
        if val is not None:
            m = evaluate(model, val)
            row.update(val_accuracy=m["accuracy"], val_macro_f1=m["macro_f1"], val_nll=m["nll"])
            key = (m["accuracy"], -m["nll"])
            if best_key is None or key > best_key:
                best_key, best_state, result.best_epoch = key, copy.deepcopy(model.state_dict()), epoch
        result.epochs.append(row)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result
