"""A miniature two-stage detector: 4-block backbone, RPN, ROI pooling and a
two-layer box head.

Parameters live in a :class:`ParamStore` under the ``det/`` namespace; all
forward functions fetch weights by name so that reads can be audited.
"""
from __future__ import annotations

from collections.abc import Mapping
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .boxes import clip_boxes, decode, encode, iou_matrix, nms
from .synthetic import IMAGE_SIZE, NUM_CLASSES

BLOCK_CHANNELS = (16, 32, 64, 64)
NUM_LEVELS = len(BLOCK_CHANNELS)
FEATURE_STRIDE = 16
ANCHOR_SIDES = (12.0, 24.0, 40.0)
POOL_SIZE = 4
HEAD_HIDDEN = 128
RCNN_WEIGHTS = (1.0, 1.0, 1.0, 1.0)

RPN_POS_IOU, RPN_NEG_IOU = 0.5, 0.3
RPN_BATCH = 16
RCNN_BATCH = 8
RCNN_FG_IOU = 0.5
RCNN_FG_FRACTION = 0.5
PRE_NMS_TOP, POST_NMS_TOP, RPN_NMS_IOU = 24, 12, 0.7
MIN_PROPOSAL_SIZE = 1.0
TEST_NMS_IOU, SCORE_THRESHOLD, MAX_DETECTIONS = 0.5, 0.05, 20
PROB_EPS = 1e-7


class ParamStore(Mapping):
    """Name -> Parameter container that hands out tensors and can log reads."""

    def __init__(self, params: dict[str, Parameter] | None = None):
        self.params: dict[str, Parameter] = dict(params or {})
        self._reads: list[str] | None = None

    def __getitem__(self, name: str) -> Tensor:
        if self._reads is not None:
            self._reads.append(name)
        return self.params[name].tensor

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def update(self, params: dict[str, Parameter]) -> None:
        self.params.update(params)

    def parameters(self, prefix: str = "") -> list[Parameter]:
        return [p for n, p in self.params.items() if n.startswith(prefix)]

    def arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items() if n.startswith(prefix)}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], dtype=np.float32) -> "ParamStore":
        return cls({n: Parameter(n, np.asarray(a, dtype=dtype)) for n, a in arrays.items()})

    @contextmanager
    def record_reads(self) -> Iterator[list[str]]:
        reads: list[str] = []
        prev, self._reads = self._reads, reads
        try:
            yield reads
        finally:
            self._reads = prev


# --------------------------------------------------------------------------
# initialisation

def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float, dtype) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def conv_param(rng, name: str, cout: int, cin: int, k: int, dtype, gain: float = 1.0) -> dict[str, Parameter]:
    return {
        f"{name}/w": Parameter(f"{name}/w", _uniform(rng, (cout, cin, k, k), cin * k * k, gain, dtype)),
        f"{name}/b": Parameter(f"{name}/b", np.zeros(cout, dtype=dtype)),
    }


def fc_param(rng, name: str, out: int, inp: int, dtype, gain: float = 1.0) -> dict[str, Parameter]:
    return {
        f"{name}/w": Parameter(f"{name}/w", _uniform(rng, (out, inp), inp, gain, dtype)),
        f"{name}/b": Parameter(f"{name}/b", np.zeros(out, dtype=dtype)),
    }


def init_detector(rng: np.random.Generator, dtype=np.float32) -> dict[str, Parameter]:
    """Fan-in scaled uniform weights (output layers at gain 0.1), zero biases."""
    params: dict[str, Parameter] = {}
    cin = 3
    for k, c in enumerate(BLOCK_CHANNELS, start=1):
        params |= conv_param(rng, f"det/backbone/block{k}/conv1", c, cin, 3, dtype)
        params |= conv_param(rng, f"det/backbone/block{k}/conv2", c, c, 3, dtype)
        cin = c
    cf = BLOCK_CHANNELS[-1]
    na = len(ANCHOR_SIDES)
    params |= conv_param(rng, "det/rpn/conv", cf, cf, 3, dtype)
    params |= conv_param(rng, "det/rpn/cls", na, cf, 1, dtype, gain=0.1)
    params |= conv_param(rng, "det/rpn/reg", 4 * na, cf, 1, dtype, gain=0.1)
    params |= fc_param(rng, "det/head/fc1", HEAD_HIDDEN, cf * POOL_SIZE * POOL_SIZE, dtype)
    params |= fc_param(rng, "det/head/fc2", HEAD_HIDDEN, HEAD_HIDDEN, dtype)
    params |= fc_param(rng, "det/head/cls", NUM_CLASSES + 1, HEAD_HIDDEN, dtype, gain=0.1)
    params |= fc_param(rng, "det/head/reg", 4 * NUM_CLASSES, HEAD_HIDDEN, dtype, gain=0.1)
    return params


# --------------------------------------------------------------------------
# forward passes

def backbone_forward(params: Mapping[str, Tensor], image: Tensor) -> list[Tensor]:
    """Feature pyramid: one map per block, level k of size C_k × 64/2^k × 64/2^k."""
    if image.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ad.ShapeError(f"backbone: expected image 3×{IMAGE_SIZE}×{IMAGE_SIZE}, got {image.shape}")
    x = image
    levels = []
    for k in range(1, NUM_LEVELS + 1):
        pre = f"det/backbone/block{k}"
        x = ad.relu(ad.conv2d(x, params[f"{pre}/conv1/w"], params[f"{pre}/conv1/b"], padding=1))
        x = ad.relu(ad.conv2d(x, params[f"{pre}/conv2/w"], params[f"{pre}/conv2/b"], padding=1))
        x = ad.maxpool2x2(x)
        levels.append(x)
    return levels


def make_anchors(grid: int = IMAGE_SIZE // FEATURE_STRIDE) -> np.ndarray:
    """Anchor boxes ordered (row, column, size)."""
    out = []
    for y in range(grid):
        for x in range(grid):
            cx, cy = (x + 0.5) * FEATURE_STRIDE, (y + 0.5) * FEATURE_STRIDE
            for s in ANCHOR_SIDES:
                out.append((cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2))
    return np.array(out, dtype=np.float64)


ANCHORS = make_anchors()


def rpn_forward(params: Mapping[str, Tensor], final_level: Tensor) -> tuple[Tensor, Tensor]:
    """Per-anchor objectness logits (A,) and deltas (A, 4) in anchor order."""
    c, h, w = final_level.shape
    if c != BLOCK_CHANNELS[-1]:
        raise ad.ShapeError(f"rpn: expected {BLOCK_CHANNELS[-1]} channels, got {c}")
    na = len(ANCHOR_SIDES)
    t = ad.relu(ad.conv2d(final_level, params["det/rpn/conv/w"], params["det/rpn/conv/b"], padding=1))
    logits = ad.conv2d(t, params["det/rpn/cls/w"], params["det/rpn/cls/b"])
    deltas = ad.conv2d(t, params["det/rpn/reg/w"], params["det/rpn/reg/b"])
    logits = ad.reshape(ad.transpose(logits, (1, 2, 0)), (h * w * na,))
    deltas = ad.reshape(deltas, (na, 4, h, w))
    deltas = ad.reshape(ad.transpose(deltas, (2, 3, 0, 1)), (h * w * na, 4))
    return logits, deltas


def head_forward(params: Mapping[str, Tensor], pooled: Tensor) -> tuple[Tensor, Tensor]:
    """Class logits (J, 1+C) with background at index 0, and deltas (J, 4C)."""
    expect = (BLOCK_CHANNELS[-1], POOL_SIZE, POOL_SIZE)
    if pooled.shape[1:] != expect:
        raise ad.ShapeError(f"head: expected pooled J×{expect}, got {pooled.shape}")
    x = ad.flatten(pooled, 1)
    x = ad.relu(ad.linear(x, params["det/head/fc1/w"], params["det/head/fc1/b"]))
    x = ad.relu(ad.linear(x, params["det/head/fc2/w"], params["det/head/fc2/b"]))
    cls = ad.linear(x, params["det/head/cls/w"], params["det/head/cls/b"])
    reg = ad.linear(x, params["det/head/reg/w"], params["det/head/reg/b"])
    return cls, reg


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------
# targets and proposals

def assign_anchors(anchors: np.ndarray, gt_boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Label anchors 1 (positive), 0 (negative) or -1 (ignore) and return matched gt index.

    Positive: IoU >= 0.5 with some gt, or the best anchor for a gt (IoU > 0).
    Negative: max IoU < 0.3 and not positive. Matched index is -1 where no gt exists.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    if n == 0:
        raise ValueError("assign_anchors: empty anchor list")
    if len(gt_boxes) == 0:
        return np.zeros(n, dtype=np.int64), np.full(n, -1, dtype=np.int64)
    overlaps = iou_matrix(anchors, gt_boxes)
    matched = overlaps.argmax(axis=1)
    best = overlaps.max(axis=1)
    labels = np.full(n, -1, dtype=np.int64)
    labels[best < RPN_NEG_IOU] = 0
    labels[best >= RPN_POS_IOU] = 1
    for g in range(len(gt_boxes)):
        a = int(overlaps[:, g].argmax())
        if overlaps[a, g] > 0:
            labels[a] = 1
            matched[a] = g
    return labels, matched


def propose(logits: np.ndarray, deltas: np.ndarray, anchors: np.ndarray,
            pre_nms_top: int = PRE_NMS_TOP, nms_iou: float = RPN_NMS_IOU,
            post_nms_top: int = POST_NMS_TOP) -> tuple[np.ndarray, np.ndarray]:
    """Decode, clip, rank by objectness, NMS. Returns (boxes (P,4), objectness (P,))."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if len(logits) != len(anchors) or len(deltas) != len(anchors):
        raise ValueError(f"propose: {len(logits)} logits / {len(deltas)} deltas for {len(anchors)} anchors")
    boxes = clip_boxes(decode(deltas, anchors), IMAGE_SIZE)
    scores = 1.0 / (1.0 + np.exp(-logits))
    if len(anchors) > 1:
        valid = ((boxes[:, 2] - boxes[:, 0]) >= MIN_PROPOSAL_SIZE) & ((boxes[:, 3] - boxes[:, 1]) >= MIN_PROPOSAL_SIZE)
        idx = np.flatnonzero(valid)
    else:
        idx = np.arange(1)
    order = idx[np.argsort(-scores[idx], kind="stable")][:pre_nms_top]
    keep = order[nms(boxes[order], scores[order], nms_iou)][:post_nms_top]
    return boxes[keep], scores[keep]


@dataclass
class RPNTargets:
    sampled: np.ndarray  # anchor indices entering the classification loss
    labels: np.ndarray  # 0/1 per sampled anchor
    positives: np.ndarray  # anchor indices entering the regression loss
    deltas: np.ndarray  # regression targets for positives


@dataclass
class ROITargets:
    rois: np.ndarray  # sampled boxes (S, 4)
    labels: np.ndarray  # 0 = background, c+1 = foreground class c
    deltas: np.ndarray  # regression targets (S, 4); rows for background are unused


def rpn_targets(gt_boxes: np.ndarray, rng: np.random.Generator, anchors: np.ndarray = ANCHORS) -> RPNTargets:
    labels, matched = assign_anchors(anchors, gt_boxes)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), RPN_BATCH // 2)
    pos = np.sort(rng.permutation(pos)[:n_pos])
    neg = np.sort(rng.permutation(neg)[:RPN_BATCH - n_pos])
    sampled = np.concatenate([pos, neg])
    sampled_labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    deltas = encode(np.asarray(gt_boxes).reshape(-1, 4)[matched[pos]], anchors[pos]) if len(pos) else np.zeros((0, 4))
    return RPNTargets(sampled, sampled_labels, pos, deltas)


def roi_targets(proposals: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray,
                rng: np.random.Generator) -> ROITargets:
    """Sample up to 8 ROIs (at most half foreground) from proposals plus ground truth."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cand = np.concatenate([np.asarray(proposals, dtype=np.float64).reshape(-1, 4), gt_boxes])
    if len(gt_boxes):
        overlaps = iou_matrix(cand, gt_boxes)
        matched = overlaps.argmax(axis=1)
        best = overlaps.max(axis=1)
    else:
        matched = np.zeros(len(cand), dtype=np.int64)
        best = np.zeros(len(cand))
    fg = np.flatnonzero(best >= RCNN_FG_IOU)
    bg = np.flatnonzero(best < RCNN_FG_IOU)
    n_fg = min(len(fg), int(RCNN_BATCH * RCNN_FG_FRACTION))
    fg = rng.permutation(fg)[:n_fg]
    bg = rng.permutation(bg)[:RCNN_BATCH - n_fg]
    keep = np.concatenate([fg, bg]).astype(np.intp)
    rois = cand[keep]
    labels = np.zeros(len(keep), dtype=np.int64)
    deltas = np.zeros((len(keep), 4))
    if n_fg:
        labels[:n_fg] = np.asarray(gt_labels)[matched[fg]] + 1
        deltas[:n_fg] = encode(gt_boxes[matched[fg]], rois[:n_fg], RCNN_WEIGHTS)
    return ROITargets(rois, labels, deltas)


# --------------------------------------------------------------------------
# losses

def bce(probs: Tensor, target: float | np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy of clamped probabilities."""
    p = ad.clip(probs, PROB_EPS, 1 - PROB_EPS)
    t = np.asarray(target, dtype=probs.dtype)
    return ad.neg(ad.add(ad.mul(t, ad.log(p)), ad.mul(1 - t, ad.log(ad.sub(1.0, p)))))


def _select_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    return ad.take(x, idx)


def detection_loss(rpn_logits: Tensor, rpn_deltas: Tensor, rpn_t: RPNTargets,
                   cls_logits: Tensor, box_deltas: Tensor, roi_t: ROITargets) -> dict[str, Tensor]:
    """Four detection terms and their sum under key ``"total"``.

    rpn_cls: mean BCE over sampled anchors. rpn_reg: smooth-L1 summed over
    coordinates, averaged over positive anchors. rcnn_cls: mean cross-entropy
    over sampled ROIs. rcnn_reg: smooth-L1 on the labelled class's deltas,
    averaged over foreground ROIs. Empty sets contribute 0.
    """
    zero = Tensor(np.zeros((), dtype=rpn_logits.dtype))
    terms: dict[str, Tensor] = {}
    if len(rpn_t.sampled):
        probs = ad.sigmoid(_select_rows(rpn_logits, rpn_t.sampled))
        terms["rpn_cls"] = ad.mean(bce(probs, rpn_t.labels))
    else:
        terms["rpn_cls"] = zero
    if len(rpn_t.positives):
        d = ad.sub(_select_rows(rpn_deltas, rpn_t.positives), rpn_t.deltas.astype(rpn_logits.dtype))
        terms["rpn_reg"] = ad.mul(ad.sum(ad.smooth_l1(d)), 1.0 / len(rpn_t.positives))
    else:
        terms["rpn_reg"] = zero
    if len(roi_t.labels):
        logp = ad.log_softmax(cls_logits)
        onehot = np.eye(NUM_CLASSES + 1, dtype=cls_logits.dtype)[roi_t.labels]
        terms["rcnn_cls"] = ad.neg(ad.mul(ad.sum(ad.mul(logp, onehot)), 1.0 / len(roi_t.labels)))
    else:
        terms["rcnn_cls"] = zero
    fg = np.flatnonzero(roi_t.labels > 0)
    if len(fg):
        mask = np.zeros(box_deltas.shape, dtype=box_deltas.dtype)
        target = np.zeros(box_deltas.shape, dtype=box_deltas.dtype)
        for r in fg:
            c = roi_t.labels[r] - 1
            mask[r, 4 * c:4 * c + 4] = 1
            target[r, 4 * c:4 * c + 4] = roi_t.deltas[r]
        d = ad.mul(ad.sub(box_deltas, target), mask)
        terms["rcnn_reg"] = ad.mul(ad.sum(ad.smooth_l1(d)), 1.0 / len(fg))
    else:
        terms["rcnn_reg"] = zero
    total = terms["rpn_cls"]
    for k in ("rpn_reg", "rcnn_cls", "rcnn_reg"):
        total = ad.add(total, terms[k])
    terms["total"] = total
    return terms


# --------------------------------------------------------------------------
# inference

@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_id: int
    score: float


def detect_from_head(proposals: np.ndarray, cls_logits: np.ndarray, box_deltas: np.ndarray) -> list[Detection]:
    probs = softmax(np.asarray(cls_logits, dtype=np.float64))
    dets: list[Detection] = []
    for c in range(NUM_CLASSES):
        scores = probs[:, c + 1]
        boxes = clip_boxes(decode(box_deltas[:, 4 * c:4 * c + 4], proposals, RCNN_WEIGHTS), IMAGE_SIZE)
        ok = (scores > SCORE_THRESHOLD) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        idx = np.flatnonzero(ok)
        for i in idx[nms(boxes[idx], scores[idx], TEST_NMS_IOU)]:
            dets.append(Detection(tuple(float(v) for v in boxes[i]), c, float(scores[i])))
    dets.sort(key=lambda d: -d.score)
    return dets[:MAX_DETECTIONS]


def infer(params: Mapping[str, Tensor], image: np.ndarray) -> list[Detection]:
    """Detection-only forward pass; never reads adaptation parameters."""
    with ad.no_grad():
        levels = backbone_forward(params, Tensor(image))
        logits, deltas = rpn_forward(params, levels[-1])
        proposals, _ = propose(logits.data, deltas.data, ANCHORS)
        if len(proposals) == 0:
            return []
        pooled = ad.roi_pool(levels[-1], proposals, FEATURE_STRIDE, POOL_SIZE)
        cls, reg = head_forward(params, pooled)
    return detect_from_head(proposals, cls.data, reg.data)
