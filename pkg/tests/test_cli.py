import json
import re

import pytest

from mlda import autodiff as ad
from mlda.cli import build_parser, main, parse_overrides, train_config, UsageError
from mlda.train import TrainConfig

SMALL = ["--set", "source_train=3", "--set", "target_train=3", "--set", "source_val=2", "--set", "target_val=2"]


def tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_no_arguments_is_usage_error(capsys):
    assert main([]) == 1
    assert "gen-data" in capsys.readouterr().err


def test_unknown_flag_names_it(capsys):
    assert main(["train", "--data", "d", "--out", "o", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "--bogus" in err and "usage:" in err


def test_gen_data_is_deterministic(tmp_path):
    assert main(["gen-data", "--seed", "7", "--out", str(tmp_path / "a")] + SMALL) == 0
    assert main(["gen-data", "--seed", "7", "--out", str(tmp_path / "b")] + SMALL) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert json.loads((tmp_path / "a" / "manifest.json").read_text())["master_seed"] == 7


def test_seed_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("MLDA_SEED", "12")
    assert main(["gen-data", "--out", str(tmp_path / "d")] + SMALL) == 0
    assert json.loads((tmp_path / "d" / "manifest.json").read_text())["master_seed"] == 12
    assert train_config(None, []).seed == 12
    assert train_config(None, ["seed=3"]).seed == 3


def test_bad_seed_env(monkeypatch, capsys):
    monkeypatch.setenv("MLDA_SEED", "abc")
    assert main(["gen-data", "--out", "x"]) == 1
    assert "MLDA_SEED" in capsys.readouterr().err


def test_empty_config_gives_defaults(tmp_path, monkeypatch):
    monkeypatch.delenv("MLDA_SEED", raising=False)
    p = tmp_path / "c.json"
    p.write_text("{}")
    assert train_config(str(p), []) == TrainConfig()


@pytest.mark.parametrize("override,needle", [("lambda=-1", "lambda"), ("n_classifiers=5", "n_classifiers"),
                                             ("colour=3", "unknown")])
def test_config_errors_exit_1(tmp_path, capsys, override, needle):
    code = main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--set", override])
    assert code == 1
    assert needle in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_all_problems_reported_together(tmp_path, capsys):
    main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "o"), "--set", "lambda=-1",
          "--set", "momentum=2"])
    err = capsys.readouterr().err
    assert "lambda" in err and "momentum" in err


def test_override_parsing():
    assert parse_overrides(["lambda=0", "source_only=true", "a.b=x"]) == {"lambda": 0, "source_only": True,
                                                                          "a": {"b": "x"}}
    with pytest.raises(UsageError):
        parse_overrides(["novalue"])


def test_runtime_failure_exit_2(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.mlda"), "--data", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    subparsers = next(a for a in parser._actions if a.dest == "command").choices
    assert set(subparsers) == {"gen-data", "train", "eval", "ablate", "dump-features"}
    for name, sub in subparsers.items():
        with pytest.raises(SystemExit) as ex:
            main([name, "--help"])
        assert ex.value.code == 0
        text = capsys.readouterr().out
        for action in sub._actions:
            for flag in action.option_strings:
                assert re.search(re.escape(flag) + r"\b", text), (name, flag)


def test_train_eval_pipeline_lambda_zero(tmp_path, capsys):
    data = tmp_path / "d"
    assert main(["gen-data", "--seed", "1", "--out", str(data)] + SMALL) == 0
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs_phase1": 1, "epochs_phase2": 0, "max_pairs": 2}))
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "l0"),
                 "--set", "lambda=0"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "so"),
                 "--set", "source_only=true"]) == 0
    det = lambda p: {k: v.tobytes() for k, v in ad.load_checkpoint(p).items() if k.startswith("det/")}  # noqa: E731
    assert det(tmp_path / "l0" / "checkpoint.mlda") == det(tmp_path / "so" / "checkpoint.mlda")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "l0" / "checkpoint.mlda"), "--data", str(data),
                 "--out", str(tmp_path / "ev")]) == 0
    a = json.loads(capsys.readouterr().out)
    assert main(["eval", "--checkpoint", str(tmp_path / "so" / "checkpoint.mlda"), "--data", str(data)]) == 0
    b = json.loads(capsys.readouterr().out)
    assert a == b and set(a) == {"source_val", "target_val"}
    assert (tmp_path / "ev" / "ap_target_val.json").exists()


def test_ablate_and_dump(tmp_path, capsys):
    data = tmp_path / "d"
    main(["gen-data", "--seed", "2", "--out", str(data)] + SMALL)
    base = ["--set", "epochs_phase1=1", "--set", "epochs_phase2=0", "--set", "max_pairs=1"]
    assert main(["ablate", "--data", str(data), "--out", str(tmp_path / "ab"), "--classifiers", "1,4"] + base) == 0
    lines = (tmp_path / "ab" / "ablation.csv").read_text().splitlines()
    assert len(lines) == 1 + 3  # lambda 0 once, lambda 0.1 for n = 1 and 4
    ckpt = tmp_path / "ab" / "n4_lam0.1_s0" / "checkpoint.mlda"
    out = tmp_path / "f.csv"
    assert main(["dump-features", "--checkpoint", str(ckpt), "--data", str(data), "--split", "target_val",
                 "--what", "patch_level_4", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 1 + 2 * 16
    assert main(["dump-features", "--checkpoint", str(ckpt), "--data", str(data), "--split", "target_val",
                 "--what", "patch_level_9", "--out", str(out)]) == 2
