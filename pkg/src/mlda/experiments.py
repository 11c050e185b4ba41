"""The full comparison suite: source-only baselines, adapted runs and the classifier-count sweep.

Every run trains with the default schedule on the default dataset. Results go
to ``<out>/runs/ablation.csv`` and ``<out>/suite.json``.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .ablation import AblationRow, ablate
from .synthetic import Dataset, DatasetConfig, make_dataset
from .train import TrainConfig

log = logging.getLogger(__name__)


@dataclass
class SuiteResult:
    out_dir: Path
    data_dir: Path
    rows: list[AblationRow]
    seeds: tuple[int, ...]
    seconds: float
    extras: dict = field(default_factory=dict)

    def row(self, name: str) -> AblationRow:
        return next(r for r in self.rows if r.name == name)

    def source_only(self, seed: int) -> AblationRow:
        return self.row(f"source_only_s{seed}")

    def adapted(self, seed: int, n: int = 3, lam: float = 0.1) -> AblationRow:
        return self.row(f"n{n}_lam{lam:g}_s{seed}")


def suite_configs(base: TrainConfig, seeds: Sequence[int]) -> list[TrainConfig]:
    configs = []
    for s in seeds:
        configs.append(base.replace(seed=s, source_only=True, lambda_=0.0))
        configs.append(base.replace(seed=s, n_classifiers=3, lambda_=0.1))
        configs.append(base.replace(seed=s, n_classifiers=1, lambda_=0.1))
    first = seeds[0]
    configs.append(base.replace(seed=first, n_classifiers=3, lambda_=0.0))
    configs += [base.replace(seed=first, n_classifiers=n, lambda_=0.1) for n in (2, 4)]
    return configs


def ensure_dataset(root: str | Path, config: DatasetConfig = DatasetConfig()) -> Dataset:
    root = Path(root)
    if not (root / "manifest.json").exists():
        make_dataset(config, root)
    ds = Dataset.open(root)
    problems = ds.validate_quick()
    if problems:
        raise ValueError("dataset problems: " + "; ".join(problems[:5]))
    return ds


def run_suite(out_dir: str | Path, seeds: Sequence[int] = (0, 1, 2), base: TrainConfig | None = None,
              data_config: DatasetConfig = DatasetConfig()) -> SuiteResult:
    """Run (or resume) every experiment; finished runs in ``out_dir`` are reused."""
    out = Path(out_dir)
    t0 = time.perf_counter()
    ds = ensure_dataset(out / "data", data_config)
    base = base or TrainConfig()
    rows = ablate(suite_configs(base, seeds), ds, out / "runs")
    result = SuiteResult(out, out / "data", rows, tuple(seeds), time.perf_counter() - t0)
    (out / "suite.json").write_text(json.dumps(
        {"seeds": list(seeds), "seconds": result.seconds,
         "rows": [r.__dict__ for r in rows]}, indent=1, default=str))
    return result
