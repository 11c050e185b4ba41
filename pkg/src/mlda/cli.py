"""Command-line entry point: ``mlda <subcommand> [flags]``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 when
the work itself fails.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .synthetic import DatasetConfig, SPLITS, make_dataset

log = logging.getLogger("mlda")

SEED_ENV = "MLDA_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(pairs: Sequence[str]) -> dict:
    """``key=value`` strings to a dict; dotted keys address nested objects."""
    out: dict = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(value)
    return out


def _merge(base: dict, extra: dict) -> dict:
    merged = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict):
            merged[k] = _merge(merged[k], v)
        else:
            merged[k] = v
    return merged


def _read_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path}: malformed JSON ({e})") from e
    if not isinstance(doc, dict):
        raise UsageError(f"config {path}: expected a JSON object")
    return doc


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def config_document(path: str | None, overrides: Sequence[str]) -> dict:
    """File, then MLDA_SEED, then --set overrides (last wins)."""
    doc = _read_json(path)
    seed = _env_seed()
    if seed is not None:
        doc["seed"] = seed
    return _merge(doc, parse_overrides(overrides))


def train_config(path: str | None, overrides: Sequence[str]):
    from .train import ConfigError, TrainConfig

    try:
        return TrainConfig.from_json(config_document(path, overrides))
    except ConfigError as e:
        raise UsageError("invalid training config:\n  " + "\n  ".join(e.problems)) from e


def dataset_config(path: str | None, overrides: Sequence[str], seed: int | None) -> DatasetConfig:
    doc = config_document(path, overrides)
    if seed is not None:
        doc["seed"] = seed
    known = {f.name: f for f in dataclasses.fields(DatasetConfig)}
    problems = [f"{k}: unknown dataset key" for k in doc if k not in known]
    for k, v in doc.items():
        if k in known:
            want = float if k == "fog_intensity" else int
            if isinstance(v, bool) or not isinstance(v, (int, float)) or (want is int and not isinstance(v, int)):
                problems.append(f"{k}: expected {want.__name__}, got {v!r}")
    if problems:
        raise UsageError("invalid dataset config:\n  " + "\n  ".join(problems))
    cfg = DatasetConfig(**doc)
    if any(c <= 0 for c in cfg.counts().values()):
        problems.append("split counts must be > 0")
    if not 1 <= cfg.min_objects <= cfg.max_objects <= 5:
        problems.append("need 1 <= min_objects <= max_objects <= 5")
    if not 0 <= cfg.fog_intensity <= 1:
        problems.append("fog_intensity must lie in [0, 1]")
    if problems:
        raise UsageError("invalid dataset config:\n  " + "\n  ".join(problems))
    return cfg


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__} values, got {text!r}")
    return parse


# --------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    cfg = dataset_config(args.config, args.set, args.seed)
    root = make_dataset(cfg, args.out)
    print(f"wrote {sum(cfg.counts().values())} scenes to {root}")
    return 0


def cmd_train(args) -> int:
    from .train import run_training

    cfg = train_config(args.config, args.set)
    res = run_training(cfg, args.data, args.out, resume=args.resume)
    print(json.dumps({"checkpoint": str(res.checkpoint), "seconds": round(res.seconds, 2),
                      "probe_patch_bce": res.probe_bce, "final_epoch": res.epoch_means[-1] if res.epoch_means else None},
                     indent=1))
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate

    splits = args.split or ["source_val", "target_val"]
    results = {}
    for split in splits:
        dets_out = None
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            dets_out = Path(args.out) / f"detections_{split}.jsonl"
        res = evaluate(args.checkpoint, args.data, split, detections_out=dets_out)
        results[split] = json.loads(res.to_json())
        if args.out:
            (Path(args.out) / f"ap_{split}.json").write_text(res.to_json())
    print(json.dumps(results, indent=1, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    from .ablation import ablate, default_grid

    base = train_config(args.config, args.set)
    configs = []
    for seed in args.seeds or [base.seed]:
        configs += default_grid(base.replace(seed=seed), args.classifiers, args.lambdas)
    rows = ablate(configs, args.data, args.out, reuse=not args.fresh)
    print(f"{'run':<20} {'target_val':>10} {'source_val':>10} {'seconds':>8}")
    for r in rows:
        print(f"{r.name:<20} {r.target_val_map:>10.4f} {r.source_val_map:>10.4f} {r.seconds:>8.1f}")
    return 0


def cmd_dump_features(args) -> int:
    from .metrics import dump_features

    n = dump_features(args.checkpoint, args.data, args.split, args.what, args.out)
    print(f"wrote {n} rows to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlda", description="Multi-level adversarial domain adaptation for a small detector.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="subcommand")

    p = sub.add_parser("gen-data", help="render the synthetic clean/foggy dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="master seed (overrides config and MLDA_SEED)")
    p.add_argument("--config", help="dataset config JSON")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector, with or without adaptation")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="training config JSON")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--resume", help="state directory of an interrupted run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mAP@0.5 of a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", action="append", choices=SPLITS, help="split to evaluate (repeatable)")
    p.add_argument("--out", help="directory for AP JSON and detections")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep classifier count and loss weight")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="directory for runs and ablation.csv")
    p.add_argument("--config", help="base training config JSON")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--classifiers", type=_csv_list(int), default=[1, 2, 3, 4], help="comma-separated n values")
    p.add_argument("--lambdas", type=_csv_list(float), default=[0.0, 0.1], help="comma-separated lambda values")
    p.add_argument("--seeds", type=_csv_list(int), help="comma-separated seeds (default: config seed)")
    p.add_argument("--fresh", action="store_true", help="retrain even if a finished run exists")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-features", help="export patch or instance features as CSV")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", required=True, choices=SPLITS, help="split to export")
    p.add_argument("--what", required=True, help="patch_level_K (K in 1..4) or instance")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_dump_features)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError(parser.format_help())
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any failure of the work itself maps to status 2
        print(f"mlda: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
