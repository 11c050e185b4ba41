"""Average precision at IoU 0.5, checkpoint evaluation and feature export."""
from __future__ import annotations

import csv
import json
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import iou, iou_matrix
from .detector import (ANCHORS, FEATURE_STRIDE, NUM_LEVELS, POOL_SIZE, Detection, ParamStore,
                       backbone_forward, head_forward, infer, propose, rpn_forward, softmax)
from .synthetic import NUM_CLASSES, Dataset, Scene

__all__ = ["iou", "average_precision", "APResult", "evaluate", "evaluate_scenes", "dump_features",
           "load_params"]


@dataclass
class APResult:
    per_class_ap: dict[int, float]
    mean_ap: float
    gt_counts: dict[int, int]
    det_counts: dict[int, int]

    def to_json(self) -> str:
        doc = asdict(self)
        for k in ("per_class_ap", "gt_counts", "det_counts"):
            doc[k] = {str(c): v for c, v in doc[k].items()}
        return json.dumps(doc, indent=1, sort_keys=True)


def average_precision(detections: Sequence[tuple], gts: Mapping[int, np.ndarray],
                      iou_threshold: float = 0.5) -> float:
    """All-point interpolated AP for one class.

    ``detections`` holds ``(image_id, box, score)``; ``gts`` maps image id to an
    (n, 4) box array. Detections are ranked by descending score (ties keep
    input order); each takes the highest-IoU still-unmatched ground truth in
    its image if that IoU reaches the threshold.
    """
    n_gt = sum(len(np.asarray(b).reshape(-1, 4)) for b in gts.values())
    if n_gt == 0:
        return 0.0
    if not detections:
        return 0.0
    order = np.argsort([-float(d[2]) for d in detections], kind="stable")
    taken = {img: np.zeros(len(np.asarray(b).reshape(-1, 4)), dtype=bool) for img, b in gts.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, box, _ = detections[i]
        boxes = np.asarray(gts.get(img, np.zeros((0, 4)))).reshape(-1, 4)
        if len(boxes) == 0:
            continue
        ov = iou_matrix(np.asarray(box)[None], boxes)[0]
        ov[taken[img]] = -1
        j = int(ov.argmax())
        if ov[j] >= iou_threshold:
            taken[img][j] = True
            tp[rank] = 1
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def evaluate_scenes(scenes: Sequence[Scene], detections: Mapping[int, list[Detection]],
                    iou_threshold: float = 0.5) -> APResult:
    """Per-class AP over labelled scenes given detections keyed by scene id."""
    per_class: dict[int, float] = {}
    gt_counts: dict[int, int] = {}
    det_counts: dict[int, int] = {}
    for c in range(NUM_CLASSES):
        gts = {}
        for s in scenes:
            mask = s.labels() == c
            gts[s.scene_id] = s.boxes()[mask]
        dets = [(sid, d.box, d.score) for sid, ds in detections.items() for d in ds if d.class_id == c]
        gt_counts[c] = int(sum(len(b) for b in gts.values()))
        det_counts[c] = len(dets)
        if gt_counts[c]:
            per_class[c] = average_precision(dets, gts, iou_threshold)
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return APResult(per_class, mean_ap, gt_counts, det_counts)


def load_params(checkpoint: str | Path | ParamStore) -> ParamStore:
    if isinstance(checkpoint, ParamStore):
        return checkpoint
    path = Path(checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return ParamStore.from_arrays(ad.load_checkpoint(path))


def run_inference(params: ParamStore, scenes: Sequence[Scene]) -> dict[int, list[Detection]]:
    return {s.scene_id: infer(params, s.image) for s in scenes}


def evaluate(checkpoint: str | Path | ParamStore, dataset: Dataset | str | Path, split: str,
             detections_out: str | Path | None = None) -> APResult:
    """Run inference on every scene of ``split`` and compute mAP@0.5."""
    params = load_params(checkpoint)
    if not isinstance(dataset, Dataset):
        dataset = Dataset.open(dataset)
    scenes = dataset.load(split)
    if not scenes:
        raise ValueError(f"split {split!r} is empty")
    dets = run_inference(params, scenes)
    if detections_out is not None:
        write_detections(detections_out, dets)
    return evaluate_scenes(scenes, dets)


def write_detections(path: str | Path, dets: Mapping[int, list[Detection]]) -> None:
    with Path(path).open("w") as fh:
        for sid in sorted(dets):
            for d in dets[sid]:
                fh.write(json.dumps({"scene_id": sid, "box": list(d.box), "class_id": d.class_id,
                                     "score": d.score}) + "\n")


def dump_features(checkpoint: str | Path | ParamStore, dataset: Dataset | str | Path, split: str,
                  what: str, out_path: str | Path) -> int:
    """Export patch features of one backbone level (``patch_level_k``) or pooled
    proposal features (``instance``) as CSV. Returns the number of rows."""
    params = load_params(checkpoint)
    if not isinstance(dataset, Dataset):
        dataset = Dataset.open(dataset)
    if what == "instance":
        level = None
    elif what.startswith("patch_level_"):
        try:
            level = int(what.removeprefix("patch_level_"))
        except ValueError:
            raise ValueError(f"invalid feature selector {what!r}") from None
        if not 1 <= level <= NUM_LEVELS:
            raise ValueError(f"invalid level index {level}; expected 1..{NUM_LEVELS}")
    else:
        raise ValueError(f"invalid feature selector {what!r}; use patch_level_k or instance")
    scenes = dataset.load(split)
    rows = 0
    header = False
    with Path(out_path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        with ad.no_grad():
            for s in scenes:
                levels = backbone_forward(params, Tensor(s.image))
                if level is not None:
                    f = levels[level - 1].data
                    c, h, w = f.shape
                    if not header:
                        writer.writerow(["scene_id", "domain", "u", "v"] + [f"f{i}" for i in range(c)])
                        header = True
                    for v in range(h):
                        for u in range(w):
                            writer.writerow([s.scene_id, s.domain, u, v] + [repr(float(x)) for x in f[:, v, u]])
                            rows += 1
                    continue
                logits, deltas = rpn_forward(params, levels[-1])
                props, _ = propose(logits.data, deltas.data, ANCHORS)
                if not header:
                    n = levels[-1].shape[0] * POOL_SIZE * POOL_SIZE
                    writer.writerow(["scene_id", "domain", "proposal", "pred_class"] + [f"f{i}" for i in range(n)])
                    header = True
                if len(props) == 0:
                    continue
                pooled = ad.roi_pool(levels[-1], props, FEATURE_STRIDE, POOL_SIZE)
                cls, _ = head_forward(params, pooled)
                pred = softmax(cls.data).argmax(axis=1) - 1  # -1 is background
                flat = pooled.data.reshape(len(props), -1)
                for j in range(len(props)):
                    writer.writerow([s.scene_id, s.domain, j, int(pred[j])] + [repr(float(x)) for x in flat[j]])
                    rows += 1
    return rows
