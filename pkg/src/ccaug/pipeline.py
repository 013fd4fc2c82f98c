"""Resumable end-to-end orchestration.

Each stage writes its artifacts plus a ``manifest.json`` holding the stage's
config hash (chained from upstream stages) and seed. A stage whose manifest
hash matches the current config is skipped and its artifacts are reused.
"""

from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import torch

from . import checkpoint
from .augment import AugmentationRecord, cross_channel_batch, read_augmentations, write_augmentations
from .backbone import TinyTransformer, TinyTransformerConfig, Vocab
from .config import (
    AUGMENT_KEYS,
    BASELINE_KEYS,
    DATA_KEYS,
    FILTER_KEYS,
    GENERATOR_KEYS,
    TRAIN_KEYS,
    RunConfig,
)
from .data import Dataset, convert_semeval_xml, load_jsonl, synthesize_toy_dataset, write_jsonl
from .emf import filter_records
from .errors import StageError
from .genfinetune import finetune, smooth_curve
from .metrics import SeedReport
from .peft import AdaptedGenerator, attach
from .trainer import AbsaClassifier, encode_item, evaluate, train

log = logging.getLogger(__name__)


def write_json(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


@dataclass
class Stage:
    name: str
    dir: Path
    digest: str
    seed: int

    @property
    def manifest(self) -> Path:
        return self.dir / "manifest.json"

    def done(self, *artifacts: str) -> bool:
        if not self.manifest.exists() or not all((self.dir / a).exists() for a in artifacts):
            return False
        return read_json(self.manifest).get("config_hash") == self.digest

    def finish(self, artifacts: list[str]) -> None:
        write_json({"stage": self.name, "config_hash": self.digest, "seed": self.seed, "artifacts": artifacts},
                   self.manifest)


class Pipeline:
    def __init__(self, cfg: RunConfig, out: str | Path = "artifacts", echo: Callable[[str], None] | None = None):
        self.cfg = cfg
        self.out = Path(out)
        self.echo = echo or log.info
        self.skipped: list[str] = []
        self._data: dict[str, Dataset] | None = None
        self._hashes: dict[str, str] = {}

    def _run(self, name: str, fn):
        try:
            return fn()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc

    def _stage(self, name: str, keys, upstream: str, seed: int | None = None, subdir: str | None = None) -> Stage:
        seed = self.cfg.seed if seed is None else seed
        digest = self.cfg.digest(keys, upstream + f"|{name}|{seed}")
        self._hashes[subdir or name] = digest
        return Stage(name, self.out / (subdir or name), digest, seed)

    # -- data ------------------------------------------------------------------

    def data(self) -> dict[str, Dataset]:
        if self._data is None:
            self._data = self._run("convert", self._data_stage)
        return self._data

    def _data_stage(self) -> dict[str, Dataset]:
        cfg = self.cfg
        st = self._stage("convert", DATA_KEYS, "")
        files = ["train.jsonl", "val.jsonl", "test.jsonl"]
        if st.done(*files):
            self.skipped.append("convert")
        else:
            if cfg.train_path:
                train = self._load(cfg.train_path, "train")
                test = self._load(cfg.test_path, "test") if cfg.test_path else None
                if cfg.val_path:
                    val = self._load(cfg.val_path, "val")
                else:
                    trips = list(train)
                    random.Random(cfg.seed).shuffle(trips)
                    n_val = max(1, int(len(trips) * cfg.val_fraction)) if cfg.val_fraction > 0 else 0
                    val = Dataset("val", trips[:n_val]) if n_val else None
                    train = Dataset("train", trips[n_val:])
                if test is None:
                    raise ValueError("test_path is required when train_path is given")
            else:
                rng = random.Random(cfg.seed)
                train = synthesize_toy_dataset(cfg.toy_train_sentences, rng, "train")
                val = synthesize_toy_dataset(cfg.toy_val_sentences, rng, "val") if cfg.toy_val_sentences else None
                test = synthesize_toy_dataset(cfg.toy_test_sentences, rng, "test")
            write_jsonl(train, st.dir / "train.jsonl")
            write_jsonl(val or [], st.dir / "val.jsonl")
            write_jsonl(test, st.dir / "test.jsonl")
            st.finish(files)
        out = {name: load_jsonl(st.dir / f"{name}.jsonl", name) for name in ("train", "test")}
        val_path = st.dir / "val.jsonl"
        if val_path.stat().st_size:
            out["val"] = load_jsonl(val_path, "val")
        return out

    def _load(self, path: str, split: str) -> Dataset:
        p = Path(path)
        if p.suffix.lower() == ".xml":
            p = convert_semeval_xml(p, self.out / "convert" / f"{split}_converted.jsonl")
        return load_jsonl(p, split)

    def vocab(self) -> Vocab:
        texts = [t.raw_text for t in self.data()["train"]]
        return Vocab.from_texts(texts + sorted(self.cfg.seed_map().all_spans()))

    # -- generator -------------------------------------------------------------

    def generator(self) -> AdaptedGenerator:
        return self._run("finetune-generator", self._generator_stage)

    def _generator_stage(self) -> AdaptedGenerator:
        cfg = self.cfg
        data = self.data()
        st = self._stage("generator", GENERATOR_KEYS, self._hashes["convert"])
        files = ["backbone.ntc", "adapter.ntc", "convergence.csv"]
        if st.done(*files):
            self.skipped.append("finetune-generator")
            backbone, vocab = TinyTransformer.load(st.dir / "backbone.ntc")
            handle = attach(backbone, cfg.adapter(), cfg.seed, vocab)
            handle.load_state(st.dir / "adapter.ntc")
            return handle
        vocab = self.vocab()
        torch.manual_seed(cfg.seed)
        backbone = TinyTransformer(TinyTransformerConfig(vocab_size=len(vocab), **cfg.backbone_kwargs()))
        backbone.save(st.dir / "backbone.ntc", vocab)
        handle = attach(backbone, cfg.adapter(), cfg.seed, vocab)
        if cfg.adapter_method == "none":
            handle.save(st.dir / "adapter.ntc")
            (st.dir / "convergence.csv").write_text("step,loss\n", encoding="utf-8")
        else:
            ft = cfg.finetune()
            self.echo(f"fine-tuning generator ({cfg.adapter_method}, {ft.total_steps(len(data['train']))} steps)")
            finetune(handle, data["train"], ft, st.dir)
            if cfg.adapter_method == "full":
                backbone.save(st.dir / "backbone.ntc", vocab)
        st.finish(files)
        return handle

    # -- augmentation ----------------------------------------------------------

    def augmentations(self) -> list[AugmentationRecord]:
        return self._run("augment", self._augment_stage)

    def _augment_stage(self) -> list[AugmentationRecord]:
        cfg = self.cfg
        handle = self.generator()
        st = self._stage("augment", AUGMENT_KEYS, self._hashes["generator"])
        if st.done("augmentations.jsonl"):
            self.skipped.append("augment")
            return read_augmentations(st.dir / "augmentations.jsonl")[1]
        train = self.data()["train"]
        dec = cfg.decode()
        gen = _DecodingGenerator(handle, dec)
        self.echo(f"generating 4 candidates for {len(train)} sources")
        records = cross_channel_batch(gen, train, train.vocabulary, cfg.seed_map(), random.Random(cfg.seed),
                                      cfg.validity_check)
        header = {
            "seed": cfg.seed,
            "decode_mode": dec.mode,
            "top_k": dec.top_k,
            "validity_check": cfg.validity_check,
            "generator_hash": self._hashes["generator"],
            "n_records": len(records),
        }
        write_augmentations(records, st.dir / "augmentations.jsonl", header)
        st.finish(["augmentations.jsonl"])
        return records

    # -- per-seed filter / train -----------------------------------------------

    def _classifier(self, seed: int) -> AbsaClassifier:
        return AbsaClassifier.build(self.vocab(), seed, self.cfg.dropout, **self.cfg.backbone_kwargs())

    def filtered(self, seed: int) -> list[AugmentationRecord]:
        return self._run("filter", lambda: self._filter_stage(seed))

    def _filter_stage(self, seed: int) -> list[AugmentationRecord]:
        cfg = self.cfg
        records = self.augmentations()
        st = self._stage("filter", FILTER_KEYS, self._hashes["augment"], seed, f"seed_{seed}/filter")
        if st.done("filtered.jsonl"):
            self.skipped.append(f"filter[{seed}]")
            return read_augmentations(st.dir / "filtered.jsonl")[1]
        train = self.data()["train"]
        model = self._classifier(seed)
        tcfg = cfg.training()
        items = [encode_item(model.vocab, t, (), cfg.max_len) for t in train]
        if cfg.warmup_epochs:
            train_warmup(model, items, tcfg, seed, cfg.warmup_epochs)
        filter_records(model, records, cfg.k)
        header = {"seed": seed, "k": cfg.k, "warmup_epochs": cfg.warmup_epochs, "augment_hash": self._hashes["augment"]}
        write_augmentations(records, st.dir / "filtered.jsonl", header)
        st.finish(["filtered.jsonl"])
        return records

    def trained(self, seed: int, baseline: bool = False) -> dict:
        name = "baseline" if baseline else "train"
        return self._run(name, lambda: self._train_stage(seed, baseline))

    def _train_stage(self, seed: int, baseline: bool) -> dict:
        cfg = self.cfg
        data = self.data()
        if baseline or not cfg.augment:
            upstream = self._hashes["convert"]
            st = self._stage("baseline", BASELINE_KEYS, upstream, seed, f"seed_{seed}/baseline")
            records = None
        else:
            records = self.filtered(seed)
            st = self._stage("train", TRAIN_KEYS, self._hashes[f"seed_{seed}/filter"], seed, f"seed_{seed}/train")
        if st.done("metrics.json", "model.ntc"):
            self.skipped.append(f"{st.name}[{seed}]")
            return read_json(st.dir / "metrics.json")
        model = self._classifier(seed)
        if records is None:
            items = [encode_item(model.vocab, t, (), cfg.max_len) for t in data["train"]]
        else:
            items = [encode_item(model.vocab, r.source, r.selected_texts(), cfg.max_len) for r in records]
        self.echo(f"training {st.name} model, seed {seed}")
        res = train(model, items, cfg.training(), seed, val=data.get("val"))
        test = evaluate(model, data["test"])
        metrics = {
            "seed": seed,
            "accuracy": test["accuracy"],
            "macro_f1": test["macro_f1"],
            "best_epoch": res.best_epoch,
            "epochs": res.epochs,
            "first_step": res.step_terms[0],
            "n_augmented": sum(len(it.augments) for it in items),
        }
        save_classifier(model, st.dir / "model.ntc", cfg)
        write_json(metrics, st.dir / "metrics.json")
        st.finish(["model.ntc", "metrics.json"])
        return metrics

    # -- report ----------------------------------------------------------------

    def run(self) -> dict:
        cfg = self.cfg
        self.data()
        method = SeedReport(list(cfg.seeds))
        baseline = SeedReport(list(cfg.seeds)) if cfg.run_baseline and cfg.augment else None
        for seed in cfg.seeds:
            method.rows.append(_row(self.trained(seed)))
            if baseline is not None:
                baseline.rows.append(_row(self.trained(seed, baseline=True)))
        report = {
            "ablation": cfg.ablation(),
            "config": cfg.to_dict(),
            "config_hash": cfg.digest(cfg.to_dict().keys()),
            "seed": cfg.seed,
            "method": method.to_dict(),
            "baseline": baseline.to_dict() if baseline else None,
        }
        if baseline is not None:
            report["accuracy_gain"] = method.mean_accuracy - baseline.mean_accuracy
            report["macro_f1_gain"] = method.mean_macro_f1 - baseline.mean_macro_f1
        write_json(report, self.out / "metrics.json")
        return report


def _row(m: dict) -> dict:
    return {"seed": m["seed"], "accuracy": m["accuracy"], "macro_f1": m["macro_f1"], "best_epoch": m["best_epoch"]}


def train_warmup(model, items, tcfg, seed: int, epochs: int):
    """Source-only SCT warm-up; the result only scores candidate entropy."""
    return train(model, items, tcfg, seed, epochs=epochs, alpha=0.0, beta=0.0)


class _DecodingGenerator:
    """Binds a decoding config to an adapted generator."""

    def __init__(self, handle: AdaptedGenerator, decode):
        self.handle = handle
        self.decode = decode
        self.backbone = handle.backbone

    def generate(self, conditions):
        return self.handle.generate(conditions, self.decode)


def save_classifier(model: AbsaClassifier, path: Path, cfg: RunConfig) -> Path:
    meta = {"kind": "classifier", "backbone": cfg.backbone_kwargs(), "dropout": cfg.dropout,
            "vocab": model.vocab.itos}
    return checkpoint.save(path, dict(model.state_dict()), meta)


def load_classifier(path: str | Path) -> AbsaClassifier:
    tensors, meta = checkpoint.load(path)
    vocab = Vocab()
    for t in meta["vocab"]:
        vocab.add(t)
    model = AbsaClassifier.build(vocab, 0, meta["dropout"], **meta["backbone"])
    model.load_state_dict(tensors)
    model.eval()
    return model


def compare_adapters(cfg: RunConfig, out: Path, echo: Callable[[str], None] = print) -> list[dict]:
    """Fine-tune each method on the same toy task and step budget."""
    rng = random.Random(cfg.seed)
    data = synthesize_toy_dataset(cfg.compare_sentences, rng, "compare")
    vocab = Vocab.from_texts([t.raw_text for t in data] + sorted(cfg.seed_map().all_spans()))
    rows = []
    for method in cfg.compare_methods:
        torch.manual_seed(cfg.seed)
        backbone = TinyTransformer(TinyTransformerConfig(vocab_size=len(vocab), **cfg.backbone_kwargs()))
        handle = attach(backbone, replace(cfg.adapter(), method=method), cfg.seed, vocab)
        ft = cfg.finetune()
        ft.steps = cfg.compare_steps
        res = finetune(handle, data, ft, out / method)
        losses = [l for _, l in res.log]
        rows.append({"method": method, "final_raw_loss": losses[-1], "final_smoothed_loss": smooth_curve(losses)[-1]})
        echo(f"{method}: raw {losses[-1]:.5f} smoothed {rows[-1]['final_smoothed_loss']:.5f}")
    out.mkdir(parents=True, exist_ok=True)
    with (out / "compare_adapters.csv").open("w", encoding="utf-8") as fh:
        fh.write("method,final_raw_loss,final_smoothed_loss\n")
        for r in rows:
            fh.write(f"{r['method']},{r['final_raw_loss']!r},{r['final_smoothed_loss']!r}\n")
    return rows
