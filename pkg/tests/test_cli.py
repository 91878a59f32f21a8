import csv
import io
import json

import numpy as np
import pytest

from phnn import cli, ops
from phnn.experiments import RunConfig


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_gradcheck_ops_pass(capsys):
    code, out, _ = run(capsys, "gradcheck", "--scope", "ops")
    table = rows(out)
    assert code == 0
    assert table[0] == ["scope", "check", "max_rel_error", "tolerance", "status"]
    assert {r[4] for r in table[1:]} == {"pass"}


def test_gradcheck_names_a_broken_backward(capsys, monkeypatch):
    original = ops.record

    def corrupted(name, inputs, out, backward_fn):
        if name == "tanh":
            return original(name, inputs, out, lambda g: tuple(1.5 * v for v in backward_fn(g)))
        return original(name, inputs, out, backward_fn)

    monkeypatch.setattr(ops, "record", corrupted)
    code, out, err = run(capsys, "gradcheck", "--scope", "ops")
    failed = {r[1] for r in rows(out)[1:] if r[4] == "FAIL"}
    assert code != 0
    assert "tanh" in failed and "tanh" in err
    assert "sigmoid" not in failed


def test_param_audit(capsys, tmp_path):
    code, out, _ = run(capsys, "param-audit", "--family", "phvgg", "--n", "1,4", "--out", str(tmp_path))
    table = rows(out)
    assert code == 0 and len(table) == 3
    ratio = float(table[2][table[0].index("ratio")])
    assert 0.23 < ratio < 0.27
    assert (tmp_path / "param_audit.csv").exists() and (tmp_path / "param_ratio_phvgg.svg").exists()


def test_param_audit_divisibility_error(capsys):
    code, _, err = run(capsys, "param-audit", "--n", "4", "--widths", "6,12")
    assert code == 2 and "DivisibilityError" in err


def test_channel_policy_error_before_compute(capsys, tmp_path):
    code, out, err = run(capsys, "train", "--n", "4", "--channel-policy", "natural", "--out", str(tmp_path))
    assert code == 2 and "ChannelPolicyError" in err and out == ""
    assert not any(tmp_path.iterdir())


def test_flags_override_config_file(tmp_path):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps({"task": "classify", "n": 2, "seed": 5, "channel_policy": "zero_pad_to_n",
                                    "train": {"epochs": 3, "lr0": 0.05}}))
    args = cli.build_parser().parse_args(["train", "--config", str(cfg_path), "--n", "1,4", "--epochs", "1"])
    cfg, n_values = cli.resolve_run_config(args)
    assert n_values == [1, 4]
    assert cfg.seed == 5 and cfg.train == {"epochs": 1, "lr0": 0.05}
    assert cfg.channel_policy == "zero_pad_to_n"
    args = cli.build_parser().parse_args(["train", "--config", str(cfg_path)])
    cfg, n_values = cli.resolve_run_config(args)
    assert n_values == [2] and cfg.train["epochs"] == 3


def test_train_end_to_end(capsys, tmp_path):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps({"task": "classify", "channel_policy": "zero_pad_to_n",
                                    "dataset": {"num": 80},
                                    "model": {"stage_widths": [4, 8], "depths": [1, 1], "stem_width": 4},
                                    "train": {"epochs": 1, "batch_size": 16}}))
    out_dir = tmp_path / "out"
    code, out, _ = run(capsys, "train", "--config", str(cfg_path), "--n", "1,2", "--out", str(out_dir))
    assert code == 0 and len(rows(out)) == 3
    for name in ("comparison.csv", "loss_curves.svg", "metrics_n1.json", "metrics_n2.json",
                 "comparison_accuracy.svg", "n2/checkpoint.phck"):
        assert (out_dir / name).exists(), name


def test_generate_sed(capsys, tmp_path):
    out = tmp_path / "sed.npz"
    code, stdout, _ = run(capsys, "generate-sed", "--channels", "16", "--phase", "--num-clips", "5",
                          "--seed", "2", "--out", str(out))
    assert code == 0
    with np.load(out) as z:
        assert z["features"].shape == (5, 16, 32, 16)
        assert z["labels"].shape == (5, 32, 6)
    assert rows(stdout)[1][1:] == ["5", "16", "32", "16", "6"]


def test_generate_sed_invalid(capsys, tmp_path):
    code, _, err = run(capsys, "generate-sed", "--channels", "16", "--out", str(tmp_path / "x.npz"))
    assert code == 2 and "SpecInvalid" in err


def test_toy_quaternion_short(capsys, tmp_path):
    code, out, err = run(capsys, "toy-quaternion", "--seed", "0", "--steps", "300", "--out", str(tmp_path))
    table = rows(out)
    assert code == 0 and table[0][:3] == ["seed", "final_loss", "h_rel_error"]
    assert float(table[1][1]) < 1e-2
    assert (tmp_path / "toy.json").exists() and (tmp_path / "toy_loss.svg").exists()
    assert (tmp_path / "toy_seed0.csv").exists()
