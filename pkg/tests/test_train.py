import csv
import json

import numpy as np
import pytest

from mlda import autodiff as ad
from mlda import train as T
from mlda.autodiff import Tensor
from mlda.synthetic import TARGET, AnnotationLeakError, Dataset, DatasetConfig, generate_scene, make_dataset
from mlda.train import ConfigError, TrainConfig, TrainState, run_training, validate_config

TINY = DatasetConfig(seed=3, source_train=4, target_train=3, source_val=2, target_val=2)
FAST = TrainConfig(epochs_phase1=1, epochs_phase2=1, max_pairs=2)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    make_dataset(TINY, root)
    return Dataset.open(root)


def det_arrays(path):
    return {k: v for k, v in ad.load_checkpoint(path).items() if k.startswith("det/")}


def same_arrays(a, b):
    return list(a) == list(b) and all(a[k].tobytes() == b[k].tobytes() for k in a)


def pair(data):
    return data.load_for_training("source_train")[0], data.load_for_training("target_train")[0]


# ---------------------------------------------------------------- config

def test_config_json_round_trip():
    cfg = TrainConfig(lambda_=0.3, n_classifiers=2, seed=9)
    doc = cfg.to_json()
    assert doc["lambda"] == 0.3 and "lambda_" not in doc
    assert TrainConfig.from_json(json.loads(json.dumps(doc))) == cfg


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.lambda_, cfg.n_classifiers, cfg.epochs_phase1, cfg.epochs_phase2) == (0.1, 3, 6, 4)
    assert (cfg.momentum, cfg.weight_decay, cfg.flip_prob, cfg.fog_intensity) == (0.9, 0.0005, 0.5, 0.6)
    assert cfg.lr_phase1 == pytest.approx(10 * cfg.lr_phase2)


def test_config_collects_every_problem():
    _, problems = validate_config({"lambda": -1, "n_classifiers": 7, "epochs_phase1": "six", "colour": 1})
    joined = " | ".join(problems)
    for key in ("lambda", "n_classifiers", "epochs_phase1", "colour"):
        assert key in joined
    with pytest.raises(ConfigError) as err:
        TrainConfig.from_json({"lambda": -1, "momentum": 1.0})
    assert len(err.value.problems) == 2


def test_load_config_malformed(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="malformed"):
        T.load_config(p)


def test_lr_schedule():
    cfg = TrainConfig()
    assert [cfg.lr_for_epoch(e) for e in range(10)] == [cfg.lr_phase1] * 6 + [cfg.lr_phase2] * 4


# ---------------------------------------------------------------- objective

def test_lambda_zero_total_is_detection_loss(data):
    src, tgt = pair(data)
    state = TrainState.initial(TrainConfig(lambda_=0.0))
    out = T.compute_losses(state.params, src, tgt, TrainConfig(lambda_=0.0), np.random.default_rng(0))
    assert float(out["L"].data) == float(out["L_det"].data)
    assert float(out["L_multi"].data) > 0


def test_forced_components_total(data, monkeypatch):
    src, tgt = pair(data)
    monkeypatch.setattr(T, "detection_loss", lambda *a: {"total": Tensor(np.array(1.0, np.float32))})
    half = Tensor(np.array(0.5, np.float32))
    monkeypatch.setattr(T, "_adaptation_terms", lambda *a: (half, half, half))
    state = TrainState.initial(TrainConfig())
    out = T.compute_losses(state.params, src, tgt, TrainConfig(lambda_=0.1), np.random.default_rng(0))
    assert [float(out[k].data) for k in ("L_det", "L_multi", "L_ins", "L_cst")] == [1.0, 1.0, 1.0, 1.0]
    assert float(out["L"].data) == pytest.approx(1.3, abs=1e-15)


def test_leak_guard(data):
    src, _ = pair(data)
    state = TrainState.initial(TrainConfig())
    labelled_target = data.load("target_train")[0]
    with pytest.raises(AnnotationLeakError):
        T.compute_losses(state.params, src, labelled_target, TrainConfig(), np.random.default_rng(0))
    with pytest.raises(AnnotationLeakError):
        T.compute_losses(state.params, generate_scene(0, TARGET, 1), None, TrainConfig(source_only=True),
                         np.random.default_rng(0))


def test_train_step_changes_both_branches(data):
    src, tgt = pair(data)
    cfg = TrainConfig()
    state = TrainState.initial(cfg)
    before = state.params.arrays()
    before = {k: v.copy() for k, v in before.items()}
    T.train_step(state, src, tgt, cfg, 0.01)
    after = state.params.arrays()
    assert any(not np.array_equal(before[k], after[k]) for k in before if k.startswith("det/"))
    assert any(not np.array_equal(before[k], after[k]) for k in before if k.startswith("da/"))
    assert state.iteration == 1


# ---------------------------------------------------------------- runs

def test_zero_epochs_checkpoint_is_init(data, tmp_path):
    cfg = TrainConfig(epochs_phase1=0, epochs_phase2=0)
    res = run_training(cfg, data, tmp_path / "r")
    assert same_arrays(ad.load_checkpoint(res.checkpoint), TrainState.initial(cfg).params.arrays())


def test_metrics_log_and_accounting(data, tmp_path):
    cfg = FAST.replace(lambda_=0.25)
    res = run_training(cfg, data, tmp_path / "r")
    with res.metrics_csv.open() as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == T.METRICS_HEADER
    assert len(rows) == 1 + cfg.total_epochs * 2
    for row in rows[1:]:
        l_det, l_multi, l_ins, l_cst, total = (float(v) for v in row[2:7])
        assert all(np.isfinite([l_det, l_multi, l_ins, l_cst, total]))
        assert abs(total - T.combined_total(l_det, l_multi, l_ins, l_cst, cfg.lambda_)) <= 1e-12
    assert [r[-1] for r in rows[1:]] == [repr(cfg.lr_phase1)] * 2 + [repr(cfg.lr_phase2)] * 2
    assert len(res.epoch_means) == 2 and res.probe_bce is not None


def test_same_seed_bit_identical(data, tmp_path):
    a = run_training(FAST, data, tmp_path / "a")
    b = run_training(FAST, data, tmp_path / "b")
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()
    c = run_training(FAST.replace(seed=1), data, tmp_path / "c")
    assert a.checkpoint.read_bytes() != c.checkpoint.read_bytes()


def test_lambda_zero_matches_source_only(data, tmp_path):
    base = FAST.replace(lambda_=0.0)
    adapted = run_training(base, data, tmp_path / "l0")
    baseline = run_training(base.replace(source_only=True), data, tmp_path / "so")
    assert same_arrays(det_arrays(adapted.checkpoint), det_arrays(baseline.checkpoint))


def test_adaptation_fields_do_not_touch_detection_at_lambda_zero(data, tmp_path):
    base = FAST.replace(lambda_=0.0)
    ref = det_arrays(run_training(base, data, tmp_path / "ref").checkpoint)
    for i, change in enumerate([{"n_classifiers": 1}, {"n_classifiers": 4}, {"grl_strength": 0.3}]):
        other = det_arrays(run_training(base.replace(**change), data, tmp_path / f"v{i}").checkpoint)
        assert same_arrays(ref, other), change


def test_adaptation_changes_detection_when_lambda_positive(data, tmp_path):
    a = det_arrays(run_training(FAST.replace(lambda_=0.0), data, tmp_path / "a").checkpoint)
    b = det_arrays(run_training(FAST, data, tmp_path / "b").checkpoint)
    assert not same_arrays(a, b)


def test_resume_is_bit_exact(data, tmp_path):
    full = run_training(FAST, data, tmp_path / "full")
    run_training(FAST, data, tmp_path / "part", stop_after_epoch=1)
    resumed = run_training(FAST, data, tmp_path / "part", resume=tmp_path / "part" / "state")
    assert full.checkpoint.read_bytes() == resumed.checkpoint.read_bytes()
    assert (tmp_path / "full" / "metrics.csv").read_text() == (tmp_path / "part" / "metrics.csv").read_text()


def test_state_round_trip(tmp_path):
    state = TrainState.initial(TrainConfig())
    state.rngs["sample"].random(5)
    state.save(tmp_path / "s")
    back = TrainState.load(tmp_path / "s")
    assert same_arrays(back.params.arrays(), state.params.arrays())
    assert back.rngs["sample"].random() == state.rngs["sample"].random()


def test_streams_are_independent():
    # adaptation init comes from its own stream: changing placement leaves detection init untouched
    a = TrainState.initial(TrainConfig(n_classifiers=1)).params.arrays("det/")
    b = TrainState.initial(TrainConfig(n_classifiers=4)).params.arrays("det/")
    assert same_arrays(a, b)


def test_bad_dataset_fails_before_training(tmp_path):
    with pytest.raises((FileNotFoundError, ValueError)):
        run_training(FAST, tmp_path / "nothing", tmp_path / "out")
    assert not (tmp_path / "out" / "metrics.csv").exists()
