"""Sweep over classifier count and loss weight on one shared dataset."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .metrics import evaluate
from .synthetic import Dataset
from .train import TrainConfig, run_training

log = logging.getLogger(__name__)

TABLE_HEADER = ("name", "n_classifiers", "lambda", "seed", "source_only", "target_val_map", "source_val_map",
                "seconds", "eval_seconds", "checkpoint")


@dataclass
class AblationRow:
    name: str
    n_classifiers: int
    lambda_: float
    seed: int
    source_only: bool
    target_val_map: float
    source_val_map: float
    seconds: float
    eval_seconds: float
    checkpoint: str

    def as_csv(self) -> list:
        d = asdict(self)
        return [d["name"], d["n_classifiers"], repr(d["lambda_"]), d["seed"], d["source_only"],
                repr(d["target_val_map"]), repr(d["source_val_map"]), f"{d['seconds']:.2f}",
                f"{d['eval_seconds']:.2f}", d["checkpoint"]]


def default_grid(base: TrainConfig, classifiers: Iterable[int] = (1, 2, 3, 4),
                 lambdas: Iterable[float] = (0.0, 0.1)) -> list[TrainConfig]:
    """n x lambda grid; lambda = 0 appears once since placement is then irrelevant to detection."""
    grid = []
    for lam in lambdas:
        ns = [base.n_classifiers] if lam == 0 else list(classifiers)
        grid += [base.replace(lambda_=lam, n_classifiers=n) for n in ns]
    return grid


def config_name(cfg: TrainConfig) -> str:
    if cfg.source_only:
        return f"source_only_s{cfg.seed}"
    return f"n{cfg.n_classifiers}_lam{cfg.lambda_:g}_s{cfg.seed}"


def ablate(configs: Sequence[TrainConfig], dataset: Dataset | str | Path, out_dir: str | Path,
           reuse: bool = True) -> list[AblationRow]:
    """Train and evaluate every config; one row per config, written to ``ablation.csv``.

    With ``reuse`` a run directory that already holds a checkpoint and matching
    config is evaluated without retraining.
    """
    if not isinstance(dataset, Dataset):
        dataset = Dataset.open(dataset)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for cfg in configs:
        name = config_name(cfg)
        run_dir = out / name
        t0 = time.perf_counter()
        ckpt = run_dir / "checkpoint.mlda"
        if not (reuse and _finished(run_dir, cfg)):
            ckpt = run_training(cfg, dataset, run_dir).checkpoint
        train_s = _train_seconds(run_dir, time.perf_counter() - t0)
        t1 = time.perf_counter()
        tgt = evaluate(ckpt, dataset, "target_val").mean_ap
        src = evaluate(ckpt, dataset, "source_val").mean_ap
        rows.append(AblationRow(name, cfg.n_classifiers, cfg.lambda_, cfg.seed, cfg.source_only, tgt, src,
                                train_s, time.perf_counter() - t1, str(ckpt)))
        log.info("%s  target %.4f  source %.4f  %.0fs", name, tgt, src, train_s)
        write_table(out / "ablation.csv", rows)
    return rows


def _finished(run_dir: Path, cfg: TrainConfig) -> bool:
    try:
        saved = json.loads((run_dir / "config.json").read_text())
        summary = json.loads((run_dir / "summary.json").read_text())
    except (OSError, ValueError):
        return False
    return (run_dir / "checkpoint.mlda").is_file() and saved == cfg.to_json() and \
        summary.get("epochs") == cfg.total_epochs


def _train_seconds(run_dir: Path, fallback: float) -> float:
    try:
        return float(json.loads((run_dir / "summary.json").read_text())["seconds"])
    except (OSError, ValueError, KeyError):
        return fallback


def write_table(path: str | Path, rows: Sequence[AblationRow]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_HEADER)
        for r in rows:
            w.writerow(r.as_csv())


def read_table(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
