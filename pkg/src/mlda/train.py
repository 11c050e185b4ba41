"""Training loop for the adversarially adapted detector.

Each iteration pairs one source and one target scene and minimises

    L = L_det + lambda * (L_multi + L_ins + L_cst)

with a single backward pass, then takes one momentum-SGD step.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adaptation import (classifier_forward, consistency_loss, init_adaptation, instance_forward,
                         instance_loss, multi_level_loss, place_classifiers)
from .autodiff import Tensor
from .detector import (ANCHORS, FEATURE_STRIDE, NUM_LEVELS, POOL_SIZE, ParamStore, backbone_forward, bce,
                       detection_loss, head_forward, init_detector, propose, roi_targets, rpn_forward,
                       rpn_targets)
from .synthetic import SOURCE, TARGET, AnnotationLeakError, Dataset, Scene, horizontal_flip, load_scene

log = logging.getLogger(__name__)

STREAMS = ("det_init", "da_init", "order_source", "order_target", "aug_source", "aug_target", "sample")
LOSS_KEYS = ("L_det", "L_multi", "L_ins", "L_cst", "L")
METRICS_HEADER = ("epoch", "iter", "L_det", "L_multi", "L_ins", "L_cst", "L", "lr")
PROBE_SCENES = 16


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class TrainConfig:
    lambda_: float = 0.1
    n_classifiers: int = 3
    lr_phase1: float = 0.004
    lr_phase2: float = 0.0004
    epochs_phase1: int = 6
    epochs_phase2: int = 4
    momentum: float = 0.9
    weight_decay: float = 0.0005
    seed: int = 0
    flip_prob: float = 0.5
    fog_intensity: float = 0.6
    source_only: bool = False
    grl_strength: float = 1.0
    clip_norm: float = 10.0
    max_pairs: int | None = None

    @staticmethod
    def json_name(attr: str) -> str:
        return "lambda" if attr == "lambda_" else attr

    def to_json(self) -> dict:
        return {self.json_name(f.name): getattr(self, f.name) for f in dataclasses.fields(self)}

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        cfg, problems = validate_config(doc)
        if problems:
            raise ConfigError(problems)
        return cfg

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @property
    def total_epochs(self) -> int:
        return self.epochs_phase1 + self.epochs_phase2

    def lr_for_epoch(self, epoch: int) -> float:
        return self.lr_phase1 if epoch < self.epochs_phase1 else self.lr_phase2


def _check_type(name: str, value, kind) -> str | None:
    if kind is bool:
        return None if isinstance(value, bool) else f"{name}: expected boolean, got {value!r}"
    if kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
        return None if ok else f"{name}: expected integer, got {value!r}"
    ok = isinstance(value, (int, float)) and not isinstance(value, bool) and np.isfinite(value)
    return None if ok else f"{name}: expected finite number, got {value!r}"


def validate_config(doc: dict) -> tuple[TrainConfig, list[str]]:
    """Fill defaults and collect every problem rather than stopping at the first."""
    problems: list[str] = []
    if not isinstance(doc, dict):
        return TrainConfig(), [f"config must be a JSON object, got {type(doc).__name__}"]
    fields = {TrainConfig.json_name(f.name): f for f in dataclasses.fields(TrainConfig)}
    kinds = {"n_classifiers": int, "epochs_phase1": int, "epochs_phase2": int, "seed": int,
             "source_only": bool, "max_pairs": int}
    values = {}
    for key, value in doc.items():
        if key not in fields:
            problems.append(f"{key}: unknown config key")
            continue
        if key == "max_pairs" and value is None:
            values[fields[key].name] = None
            continue
        err = _check_type(key, value, kinds.get(key, float))
        if err:
            problems.append(err)
        else:
            values[fields[key].name] = value
    cfg = TrainConfig(**values)
    if cfg.lambda_ < 0:
        problems.append(f"lambda: must be >= 0, got {cfg.lambda_}")
    if not 1 <= cfg.n_classifiers <= NUM_LEVELS:
        problems.append(f"n_classifiers: must lie in [1, {NUM_LEVELS}], got {cfg.n_classifiers}")
    for name in ("lr_phase1", "lr_phase2"):
        if getattr(cfg, name) <= 0:
            problems.append(f"{name}: must be > 0, got {getattr(cfg, name)}")
    for name in ("epochs_phase1", "epochs_phase2"):
        if getattr(cfg, name) < 0:
            problems.append(f"{name}: must be >= 0, got {getattr(cfg, name)}")
    if not 0 <= cfg.momentum < 1:
        problems.append(f"momentum: must lie in [0, 1), got {cfg.momentum}")
    if cfg.weight_decay < 0:
        problems.append(f"weight_decay: must be >= 0, got {cfg.weight_decay}")
    if not 0 <= cfg.flip_prob <= 1:
        problems.append(f"flip_prob: must lie in [0, 1], got {cfg.flip_prob}")
    if not 0 <= cfg.fog_intensity <= 1:
        problems.append(f"fog_intensity: must lie in [0, 1], got {cfg.fog_intensity}")
    if cfg.grl_strength < 0:
        problems.append(f"grl_strength: must be >= 0, got {cfg.grl_strength}")
    if cfg.clip_norm <= 0:
        problems.append(f"clip_norm: must be > 0, got {cfg.clip_norm}")
    if cfg.max_pairs is not None and cfg.max_pairs <= 0:
        problems.append(f"max_pairs: must be > 0, got {cfg.max_pairs}")
    return cfg, problems


def load_config(path: str | Path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError([f"{path}: malformed JSON ({e})"]) from e
    return TrainConfig.from_json(doc)


# --------------------------------------------------------------------------
# state

@dataclass
class TrainState:
    params: ParamStore
    rngs: dict[str, np.random.Generator]
    epoch: int = 0
    iteration: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def initial(cls, config: TrainConfig, dtype=np.float32) -> "TrainState":
        seqs = np.random.SeedSequence(config.seed).spawn(len(STREAMS))
        rngs = {name: np.random.default_rng(s) for name, s in zip(STREAMS, seqs)}
        params = ParamStore(init_detector(rngs["det_init"], dtype))
        params.update(init_adaptation(rngs["da_init"], place_classifiers(config.n_classifiers), dtype))
        return cls(params=params, rngs=rngs)

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        ad.save_checkpoint(d / "params.mlda", self.params.arrays())
        ad.save_checkpoint(d / "velocity.mlda", {n: p.velocity for n, p in self.params.params.items()})
        doc = {"epoch": self.epoch, "iteration": self.iteration, "history": self.history,
               "rngs": {k: g.bit_generator.state for k, g in self.rngs.items()}}
        (d / "state.json").write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> "TrainState":
        d = Path(directory)
        params = ParamStore.from_arrays(ad.load_checkpoint(d / "params.mlda"))
        for name, v in ad.load_checkpoint(d / "velocity.mlda").items():
            params.params[name].velocity = v
        doc = json.loads((d / "state.json").read_text())
        rngs = {}
        for k, st in doc["rngs"].items():
            g = np.random.default_rng()
            g.bit_generator.state = st
            rngs[k] = g
        return cls(params=params, rngs=rngs, epoch=doc["epoch"], iteration=doc["iteration"],
                   history=doc["history"])


# --------------------------------------------------------------------------
# one step

def _adaptation_terms(params, config: TrainConfig, levels: list[Tensor], proposals: np.ndarray,
                      domain: int, selected: list[int]) -> tuple[Tensor, Tensor, Tensor]:
    maps = [classifier_forward(params, k, levels[k - 1], config.grl_strength) for k in selected]
    l_multi = multi_level_loss(maps, domain)
    if len(proposals):
        pooled = ad.roi_pool(levels[-1], proposals, FEATURE_STRIDE, POOL_SIZE)
        probs = instance_forward(params, pooled, config.grl_strength)
    else:
        probs = Tensor(np.zeros(0, dtype=levels[-1].dtype))
    return l_multi, instance_loss(probs, domain), consistency_loss(maps[-1], probs)


def compute_losses(params: ParamStore, source: Scene, target: Scene | None, config: TrainConfig,
                   sample_rng: np.random.Generator) -> dict[str, Tensor]:
    """Forward both images and assemble the objective. Detection terms use the
    source image only; adaptation terms are summed over both images."""
    if source.domain != SOURCE:
        raise AnnotationLeakError(f"scene {source.scene_id} is not a source-domain scene")
    if target is not None and (target.domain != TARGET or target.annotations is not None):
        raise AnnotationLeakError(f"target scene {target.scene_id} carries annotations into training")
    gt_boxes, gt_labels = source.boxes(), source.labels()

    levels = backbone_forward(params, Tensor(source.image))
    logits, deltas = rpn_forward(params, levels[-1])
    proposals, _ = propose(logits.data, deltas.data, ANCHORS)
    rpn_t = rpn_targets(gt_boxes, sample_rng)
    roi_t = roi_targets(proposals, gt_boxes, gt_labels, sample_rng)
    pooled = ad.roi_pool(levels[-1], roi_t.rois, FEATURE_STRIDE, POOL_SIZE)
    cls, reg = head_forward(params, pooled)
    l_det = ad.cast(detection_loss(logits, deltas, rpn_t, cls, reg, roi_t)["total"], np.float64)

    zero = Tensor(np.zeros((), dtype=np.float64))
    out = {"L_det": l_det, "L_multi": zero, "L_ins": zero, "L_cst": zero}
    if not config.source_only:
        if target is None:
            raise ValueError("adapted training needs a target scene")
        selected = place_classifiers(config.n_classifiers)
        t_levels = backbone_forward(params, Tensor(target.image))
        with ad.no_grad():
            t_logits, t_deltas = rpn_forward(params, t_levels[-1])
        t_props, _ = propose(t_logits.data, t_deltas.data, ANCHORS)
        acc = None
        for lv, props, dom in ((levels, proposals, SOURCE), (t_levels, t_props, TARGET)):
            terms = _adaptation_terms(params, config, lv, props, dom, selected)
            acc = terms if acc is None else tuple(ad.add(a, b) for a, b in zip(acc, terms))
        out["L_multi"], out["L_ins"], out["L_cst"] = (ad.cast(t, np.float64) for t in acc)
        adapt = ad.add(ad.add(out["L_multi"], out["L_ins"]), out["L_cst"])
        out["L"] = ad.add(l_det, ad.mul(adapt, np.float64(config.lambda_)))
    else:
        out["L"] = l_det
    return out


def train_step(state: TrainState, source: Scene, target: Scene | None, config: TrainConfig,
               lr: float) -> dict[str, float]:
    """Forward, one backward pass over L, gradient clipping and one SGD step."""
    with ad.Tape():
        losses = compute_losses(state.params, source, target, config, state.rngs["sample"])
        grads = ad.backward(losses["L"])
    params = state.params.parameters()
    ad.clip_grad_norm(params, grads, config.clip_norm)
    ad.sgd_step(params, grads, lr, config.momentum, config.weight_decay)
    state.iteration += 1
    return {k: float(v.data) for k, v in losses.items()}


def combined_total(l_det: float, l_multi: float, l_ins: float, l_cst: float, lam: float) -> float:
    return l_det + lam * ((l_multi + l_ins) + l_cst)


# --------------------------------------------------------------------------
# full run

@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    metrics_csv: Path
    epoch_means: list[dict]
    probe_bce: float | None
    seconds: float


def _maybe_flip(scene: Scene, rng: np.random.Generator, p: float) -> Scene:
    return horizontal_flip(scene) if rng.random() < p else scene


def probe_patch_bce(params: ParamStore, dataset: Dataset, config: TrainConfig, n: int = PROBE_SCENES) -> float:
    """Final-level patch classifier BCE on held-out scenes of both domains."""
    final = place_classifiers(config.n_classifiers)[-1]
    losses = []
    with ad.no_grad():
        for split, dom in (("source_val", SOURCE), ("target_val", TARGET)):
            for path in dataset.files(split)[:n]:
                scene = load_scene(path, with_annotations=False)
                levels = backbone_forward(params, Tensor(scene.image))
                pmap = classifier_forward(params, final, levels[final - 1])
                losses.append(float(ad.mean(bce(pmap, float(dom))).data))
    return float(np.mean(losses))


def run_training(config: TrainConfig, dataset: Dataset | str | Path, out_dir: str | Path,
                 resume: str | Path | None = None, stop_after_epoch: int | None = None) -> TrainResult:
    """Train for ``epochs_phase1`` + ``epochs_phase2`` epochs and write the last-epoch checkpoint.

    Writes ``checkpoint.mlda``, ``metrics.csv`` (one row per iteration),
    ``epochs.csv``, ``config.json``, ``summary.json`` and ``state/`` (resume point).
    """
    t0 = time.perf_counter()
    if not isinstance(dataset, Dataset):
        dataset = Dataset.open(dataset)
    problems = dataset.validate_quick()
    if problems:
        raise ValueError("dataset problems: " + "; ".join(problems[:5]))
    if abs(dataset.fog_intensity - config.fog_intensity) > 1e-12:
        log.warning("dataset fog intensity %.3f differs from config %.3f",
                    dataset.fog_intensity, config.fog_intensity)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_json(), indent=1, sort_keys=True))

    state = TrainState.load(resume) if resume else TrainState.initial(config)
    sources = dataset.load_for_training("source_train")
    targets = [] if config.source_only else dataset.load_for_training("target_train")
    n_target = len(dataset.files("target_train"))
    pairs = min(len(sources), n_target)
    if config.max_pairs is not None:
        pairs = min(pairs, config.max_pairs)

    metrics_path = out / "metrics.csv"
    mode = "a" if resume and metrics_path.exists() else "w"
    last = config.total_epochs if stop_after_epoch is None else min(stop_after_epoch, config.total_epochs)
    with metrics_path.open(mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(METRICS_HEADER)
        while state.epoch < last:
            epoch = state.epoch
            lr = config.lr_for_epoch(epoch)
            s_order = state.rngs["order_source"].permutation(len(sources))[:pairs]
            t_order = None if config.source_only else state.rngs["order_target"].permutation(len(targets))[:pairs]
            sums = dict.fromkeys(LOSS_KEYS, 0.0)
            for i in range(pairs):
                src = _maybe_flip(sources[s_order[i]], state.rngs["aug_source"], config.flip_prob)
                tgt = None
                if t_order is not None:
                    tgt = _maybe_flip(targets[t_order[i]], state.rngs["aug_target"], config.flip_prob)
                losses = train_step(state, src, tgt, config, lr)
                writer.writerow([epoch, state.iteration] + [repr(losses[k]) for k in LOSS_KEYS] + [repr(lr)])
                for k in LOSS_KEYS:
                    sums[k] += losses[k]
            means = {"epoch": epoch, "lr": lr, **{k: sums[k] / max(pairs, 1) for k in LOSS_KEYS}}
            state.history.append(means)
            state.epoch += 1
            log.info("epoch %d lr %g  L_det %.4f L_multi %.4f L_ins %.4f L_cst %.4f L %.4f", epoch, lr,
                     *(means[k] for k in LOSS_KEYS))
            state.save(out / "state")
    if not (out / "state").exists():
        state.save(out / "state")

    with (out / "epochs.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("epoch", "lr") + LOSS_KEYS)
        for row in state.history:
            writer.writerow([row["epoch"], row["lr"]] + [row[k] for k in LOSS_KEYS])

    ckpt = out / "checkpoint.mlda"
    ad.save_checkpoint(ckpt, state.params.arrays())
    probe = None if config.source_only else probe_patch_bce(state.params, dataset, config)
    seconds = time.perf_counter() - t0
    (out / "summary.json").write_text(json.dumps(
        {"epochs": state.epoch, "iterations": state.iteration, "probe_patch_bce": probe,
         "seconds": seconds}, indent=1))
    return TrainResult(out, ckpt, metrics_path, list(state.history), probe, seconds)
