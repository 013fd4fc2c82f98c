"""Command-line entry point: ``ccaug <verb> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import json
import logging
import random
import sys
from pathlib import Path

from .config import RunConfig
from .data import convert_semeval_xml, load_jsonl, read_semeval_xml, synthesize_toy_dataset, write_jsonl
from .errors import CCAugError, StageError
from .pipeline import Pipeline, compare_adapters, load_classifier, write_json
from .trainer import evaluate

VERBS = ("convert-data", "synth-toy", "finetune-generator", "augment", "filter", "train", "evaluate",
         "compare-adapters", "pipeline")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccaug", description="Cross-channel augmentation for aspect-based sentiment")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", type=Path, default=None, help="flat JSON config file")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--out", type=Path, default=Path("artifacts"), help="artifacts directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if verb == "convert-data":
            p.add_argument("--input", type=Path, required=True, help="SemEval-2014 XML file")
            p.add_argument("--output", type=Path, default=None, help="JSONL path (default: <out>/<input stem>.jsonl)")
        if verb == "synth-toy":
            p.add_argument("--sentences", type=int, default=None, help="training sentences (default from config)")
        if verb == "evaluate":
            p.add_argument("--model", type=Path, default=None, help="classifier checkpoint to evaluate")
            p.add_argument("--data", type=Path, default=None, help="JSONL split to evaluate on")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = RunConfig.from_file(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        return _dispatch(args, cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CCAugError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _dispatch(args, cfg: RunConfig) -> int:
    out: Path = args.out
    pipe = Pipeline(cfg, out, echo=lambda m: print(m, file=sys.stderr))

    if args.verb == "convert-data":
        target = args.output or out / f"{args.input.stem}.jsonl"
        _, dropped = read_semeval_xml(args.input)
        path = convert_semeval_xml(args.input, target)
        print(json.dumps({"output": str(path), "dropped_conflict": dropped}))
    elif args.verb == "synth-toy":
        rng = random.Random(cfg.seed)
        n = args.sentences or cfg.toy_train_sentences
        for split, count in (("train", n), ("val", cfg.toy_val_sentences), ("test", cfg.toy_test_sentences)):
            if count:
                write_jsonl(synthesize_toy_dataset(count, rng, split), out / f"toy_{split}.jsonl")
        print(json.dumps({"out": str(out)}))
    elif args.verb == "finetune-generator":
        pipe.generator()
        print(json.dumps({"generator": str(out / "generator"), "skipped": pipe.skipped}))
    elif args.verb == "augment":
        records = pipe.augmentations()
        print(json.dumps({"augmentations": str(out / "augment" / "augmentations.jsonl"), "records": len(records)}))
    elif args.verb == "filter":
        for seed in cfg.seeds:
            pipe.filtered(seed)
        print(json.dumps({"seeds": cfg.seeds, "skipped": pipe.skipped}))
    elif args.verb == "train":
        rows = [pipe.trained(seed) for seed in cfg.seeds]
        print(json.dumps([{k: r[k] for k in ("seed", "accuracy", "macro_f1")} for r in rows]))
    elif args.verb == "evaluate":
        if args.model is not None:
            if args.data is None:
                raise CCAugError("--model requires --data")
            m = evaluate(load_classifier(args.model), load_jsonl(args.data))
            m.pop("predictions")
            write_json(m, out / "evaluation.json")
            print(json.dumps(m))
        else:
            report = pipe.run()
            print(json.dumps(_summary(report)))
    elif args.verb == "compare-adapters":
        compare_adapters(cfg, out / "compare_adapters", echo=lambda m: print(m, file=sys.stderr))
        print((out / "compare_adapters" / "compare_adapters.csv").read_text(), end="")
    elif args.verb == "pipeline":
        report = pipe.run()
        print(json.dumps(_summary(report)))
    return 0


def _summary(report: dict) -> dict:
    s = {
        "ablation": report["ablation"],
        "mean_accuracy": report["method"]["mean_accuracy"],
        "mean_macro_f1": report["method"]["mean_macro_f1"],
    }
    if report.get("baseline"):
        s["baseline_mean_accuracy"] = report["baseline"]["mean_accuracy"]
        s["baseline_mean_macro_f1"] = report["baseline"]["mean_macro_f1"]
    return s


if __name__ == "__main__":
    sys.exit(main())
