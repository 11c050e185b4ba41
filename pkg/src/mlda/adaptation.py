"""Domain classifiers and adversarial alignment losses.

Patch classifiers read backbone taps through a gradient-reversal node and
predict, per spatial location, the probability of the target domain. The
instance classifier does the same for ROI-pooled proposal features. All losses
use mean reduction.
"""
from __future__ import annotations

import logging
from collections.abc import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .detector import BLOCK_CHANNELS, NUM_LEVELS, POOL_SIZE, bce, conv_param, fc_param

log = logging.getLogger(__name__)

CLASSIFIER_HIDDEN = 64


def place_classifiers(n: int, num_levels: int = NUM_LEVELS) -> list[int]:
    """Levels (1-based) at equal intervals from the first block to the last.

    Positions are rounded half-up; the final level is always present.
    """
    if not 1 <= n <= num_levels:
        raise ValueError(f"n_classifiers must lie in [1, {num_levels}], got {n}")
    if n == 1:
        return [num_levels]
    points = np.linspace(1, num_levels, n)
    levels = sorted({int(np.floor(p + 0.5)) for p in points} | {num_levels})
    return levels


def init_adaptation(rng: np.random.Generator, levels: list[int], dtype=np.float32) -> dict[str, Parameter]:
    params: dict[str, Parameter] = {}
    for k in levels:
        c = BLOCK_CHANNELS[k - 1]
        params |= conv_param(rng, f"da/level_{k}/conv1", CLASSIFIER_HIDDEN, c, 1, dtype)
        params |= conv_param(rng, f"da/level_{k}/conv2", 1, CLASSIFIER_HIDDEN, 1, dtype)
    pooled = BLOCK_CHANNELS[-1] * POOL_SIZE * POOL_SIZE
    params |= fc_param(rng, "da/instance/fc1", CLASSIFIER_HIDDEN, pooled, dtype)
    params |= fc_param(rng, "da/instance/fc2", 1, CLASSIFIER_HIDDEN, dtype)
    return params


def classifier_forward(params: Mapping[str, Tensor], level: int, feature: Tensor,
                       grl_strength: float = 1.0) -> Tensor:
    """Per-location target-domain probabilities, H_k × W_k."""
    w1 = params[f"da/level_{level}/conv1/w"]
    if feature.shape[0] != w1.shape[1]:
        raise ad.ShapeError(
            f"classifier level {level}: feature has {feature.shape[0]} channels, classifier expects {w1.shape[1]}")
    x = ad.grl(feature, grl_strength)
    x = ad.relu(ad.conv2d(x, w1, params[f"da/level_{level}/conv1/b"]))
    x = ad.conv2d(x, params[f"da/level_{level}/conv2/w"], params[f"da/level_{level}/conv2/b"])
    return ad.sigmoid(ad.reshape(x, x.shape[1:]))


def instance_forward(params: Mapping[str, Tensor], pooled: Tensor, grl_strength: float = 1.0) -> Tensor:
    """One target-domain probability per pooled proposal, shape (J,)."""
    x = ad.grl(ad.flatten(pooled, 1), grl_strength)
    x = ad.relu(ad.linear(x, params["da/instance/fc1/w"], params["da/instance/fc1/b"]))
    x = ad.linear(x, params["da/instance/fc2/w"], params["da/instance/fc2/b"])
    return ad.sigmoid(ad.reshape(x, (x.shape[0],)))


def multi_level_loss(maps: list[Tensor], domain: int) -> Tensor:
    """BCE summed over every location of every level, divided by the total location count."""
    if not maps:
        raise ValueError("multi_level_loss: no levels selected")
    total = sum(int(m.data.size) for m in maps)
    acc = None
    for m in maps:
        s = ad.sum(bce(m, float(domain)))
        acc = s if acc is None else ad.add(acc, s)
    return ad.mul(acc, 1.0 / total)


def image_patch_loss(final_map: Tensor, domain: int) -> Tensor:
    return multi_level_loss([final_map], domain)


def instance_loss(probs: Tensor, domain: int) -> Tensor:
    if probs.data.size == 0:
        log.warning("instance_loss: image has no proposals; contributing 0")
        return Tensor(np.zeros((), dtype=probs.dtype))
    return ad.mean(bce(probs, float(domain)))


def consistency_loss(final_map: Tensor, probs: Tensor) -> Tensor:
    """Mean squared gap between the image-level patch probability and each instance probability."""
    if probs.data.size == 0:
        return Tensor(np.zeros((), dtype=final_map.dtype))
    return ad.mean(ad.square(ad.sub(ad.mean(final_map), probs)))
