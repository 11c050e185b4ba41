import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from mlda import adaptation as A
from mlda import autodiff as ad
from mlda import detector as D
from mlda.autodiff import Tensor
from mlda.gradcheck import check_gradients
from mlda.synthetic import SOURCE, TARGET, generate_scene

LN2 = math.log(2.0)


def store(seed=0, levels=(1, 2, 3, 4)):
    rng = np.random.default_rng(seed)
    params = D.ParamStore(D.init_detector(rng, np.float64))
    params.update(A.init_adaptation(rng, list(levels), np.float64))
    return params


def probs(rng, shape):
    return Tensor(rng.uniform(0.01, 0.99, size=shape))


# ---------------------------------------------------------------- placement

@pytest.mark.parametrize("n,expected", [(1, [4]), (2, [1, 4]), (3, [1, 3, 4]), (4, [1, 2, 3, 4])])
def test_placement(n, expected):
    assert A.place_classifiers(n) == expected


@pytest.mark.parametrize("n", [0, 5])
def test_placement_range(n):
    with pytest.raises(ValueError):
        A.place_classifiers(n)


# ---------------------------------------------------------------- classifiers

def test_zero_weight_classifier_is_half():
    params = store()
    for name, p in params.params.items():
        if name.startswith("da/level_2"):
            p.data[:] = 0
    out = A.classifier_forward(params, 2, Tensor(np.random.default_rng(0).normal(size=(32, 16, 16))))
    assert (out.data == 0.5).all()


def test_classifier_preserves_grid():
    params = store()
    levels = D.backbone_forward(params, Tensor(generate_scene(0, SOURCE, 2).image.astype(np.float64)))
    for k, lv in enumerate(levels, start=1):
        m = A.classifier_forward(params, k, lv)
        assert m.shape == lv.shape[1:]
        assert ((m.data > 0) & (m.data < 1)).all()


def test_classifier_channel_mismatch():
    with pytest.raises(ad.ShapeError, match="level 1"):
        A.classifier_forward(store(), 1, Tensor(np.zeros((64, 4, 4))))


def test_instance_head_arity():
    p = A.instance_forward(store(), Tensor(np.random.default_rng(1).normal(size=(7, 64, 4, 4))))
    assert p.shape == (7,)


def test_classifier_parameter_gradients():
    params = store(4, levels=(3,))
    rng = np.random.default_rng(4)
    feature = Tensor(rng.normal(size=(64, 8, 8)))
    pooled = Tensor(rng.normal(size=(3, 64, 4, 4)))

    def fn():
        m = A.classifier_forward(params, 3, feature)
        p = A.instance_forward(params, pooled)
        return ad.add(ad.add(A.multi_level_loss([m], TARGET), A.instance_loss(p, TARGET)),
                      A.consistency_loss(m, p))

    names = ["da/level_3/conv2/w", "da/level_3/conv1/b", "da/instance/fc2/w", "da/instance/fc1/b"]
    assert check_gradients(fn, [params[n] for n in names]) < 1e-4


# ---------------------------------------------------------------- losses

def test_multi_level_ln2():
    assert float(A.multi_level_loss([Tensor(np.full((1, 1), 0.5))] * 2, TARGET).data) == pytest.approx(LN2, abs=1e-15)


def test_image_patch_ln2():
    assert float(A.image_patch_loss(Tensor(np.full((2, 2), 0.5)), SOURCE).data) == pytest.approx(LN2, abs=1e-15)


def test_instance_ln2_and_floor():
    assert float(A.instance_loss(Tensor(np.array([0.5])), TARGET).data) == pytest.approx(LN2, abs=1e-15)
    assert float(A.instance_loss(Tensor(np.array([1.0])), TARGET).data) < 1e-6


def test_patch_loss_floor():
    assert float(A.multi_level_loss([Tensor(np.ones((4, 4)))], TARGET).data) < 1e-6
    assert float(A.multi_level_loss([Tensor(np.zeros((4, 4)))], SOURCE).data) < 1e-6


def test_empty_level_selection():
    with pytest.raises(ValueError, match="no levels"):
        A.multi_level_loss([], SOURCE)


def test_zero_proposals_contribute_zero(caplog):
    empty = Tensor(np.zeros(0))
    with caplog.at_level(logging.WARNING):
        assert float(A.instance_loss(empty, TARGET).data) == 0.0
    assert "no proposals" in caplog.text
    assert float(A.consistency_loss(Tensor(np.full((4, 4), 0.3)), empty).data) == 0.0


def test_consistency_examples():
    assert float(A.consistency_loss(Tensor(np.full((4, 4), 0.6)), Tensor(np.array([0.4]))).data) == pytest.approx(
        0.04, abs=1e-15)
    assert float(A.consistency_loss(Tensor(np.full((4, 4), 0.3)), Tensor(np.full(5, 0.3))).data) == 0.0


@given(st.integers(0, 10_000), st.sampled_from([SOURCE, TARGET]))
@settings(max_examples=50, deadline=None)
def test_losses_match_scalar_loops(seed, d):
    rng = np.random.default_rng(seed)
    maps = [probs(rng, s) for s in ((16, 16), (8, 8), (4, 4))]
    inst = probs(rng, (8,))
    assert abs(float(A.multi_level_loss(maps, d).data) - oracles.patch_loss_loops([m.data for m in maps], d)) < 1e-10
    assert abs(float(A.image_patch_loss(maps[-1], d).data) - oracles.patch_loss_loops([maps[-1].data], d)) < 1e-10
    assert abs(float(A.instance_loss(inst, d).data) - oracles.instance_loss_loops(inst.data, d)) < 1e-10
    assert abs(float(A.consistency_loss(maps[-1], inst).data) - oracles.consistency_loops(maps[-1].data, inst.data)) < 1e-12


@given(st.integers(0, 10_000), st.sampled_from([SOURCE, TARGET]))
@settings(max_examples=30, deadline=None)
def test_single_level_reduces_to_image_loss(seed, d):
    m = probs(np.random.default_rng(seed), (4, 4))
    assert float(A.multi_level_loss([m], d).data) == float(A.image_patch_loss(m, d).data)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    m, p = probs(rng, (4, 4)), probs(rng, (5,))
    for d in (SOURCE, TARGET):
        assert float(A.multi_level_loss([m], d).data) > 0
        assert float(A.instance_loss(p, d).data) > 0
    assert float(A.consistency_loss(m, p).data) >= 0


# ---------------------------------------------------------------- gradient reversal

def _backbone_grads(params, image, level, reversed_=True, monkeypatch=None):
    if not reversed_:
        monkeypatch.setattr(A.ad, "grl", lambda x, strength=1.0: x)
    levels = D.backbone_forward(params, Tensor(image))
    m = A.classifier_forward(params, level, levels[level - 1])
    g = ad.backward(A.multi_level_loss([m], TARGET))
    return {n: g.get(params.params[n].tensor.node_id) for n in params if n.startswith("det/backbone")}


@pytest.mark.parametrize("level", [1, 4])
def test_sign_law(level, monkeypatch):
    params = store(2)
    image = generate_scene(5, TARGET, 3).image.astype(np.float64)
    with_grl = _backbone_grads(params, image, level)
    without = _backbone_grads(params, image, level, reversed_=False, monkeypatch=monkeypatch)
    hit = 0
    for name, g in with_grl.items():
        if g is None:
            assert without[name] is None
            continue
        hit += 1
        np.testing.assert_array_equal(g, -without[name])
    assert hit > 0


def test_grl_reach():
    params = store(6)
    image = generate_scene(8, SOURCE, 3).image.astype(np.float64)
    for k in range(1, 5):
        grads = _backbone_grads(params, image, k)
        for b in range(1, 5):
            g = grads[f"det/backbone/block{b}/conv1/w"]
            reached = g is not None and bool(np.any(g != 0))
            assert reached == (k >= b), (k, b)


def test_classifier_learns_on_frozen_backbone():
    params = store(3)
    feats = []
    with ad.no_grad():
        for seed, d in ((0, SOURCE), (1, TARGET), (2, SOURCE), (3, TARGET)):
            lv = D.backbone_forward(params, Tensor(generate_scene(seed, d, 2).image.astype(np.float64)))
            feats.append((Tensor(lv[3].data.copy()), d))
    cls_params = params.parameters("da/level_4")

    def loss():
        total = None
        for f, d in feats:
            term = A.multi_level_loss([A.classifier_forward(params, 4, f)], d)
            total = term if total is None else ad.add(total, term)
        return total

    history = []
    for _ in range(50):
        value = loss()
        history.append(float(value.data))
        ad.sgd_step(cls_params, ad.backward(value), lr=0.01)
    assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
    assert history[-1] < history[0]
