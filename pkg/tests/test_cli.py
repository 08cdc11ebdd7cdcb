import json
import re
import subprocess
import sys

import numpy as np
import pytest

from mlla_unet.cli import EXIT_INVALID, EXIT_NUMERIC, EXIT_OK, main, validate_json
from mlla_unet.errors import ValidationError
from mlla_unet.stf import read_stf, write_stf


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--out", str(path), "--count", "4", "--seed", "2"]) == EXIT_OK
    return path


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory, dataset):
    path = tmp_path_factory.mktemp("cli") / "ck"
    assert main(["train-toy", "--data", str(dataset), "--out", str(path), "--steps", "2", "--seed", "1"]) == EXIT_OK
    return path


def test_every_command_accepts_seed():
    from mlla_unet.cli import build_parser
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"forward", "train-toy", "eval", "bench", "params", "gen-data", "selftest"}
    for name, p in sub.choices.items():
        assert any("--seed" in a.option_strings for a in p._actions), name


def test_params_text_and_json_agree(capsys, tmp_path):
    code, text, _ = run(capsys, "params", "--config", "tiny")
    assert code == EXIT_OK
    code, js, _ = run(capsys, "params", "--config", "tiny", "--json", "--out", str(tmp_path / "p.json"))
    obj = json.loads(js)
    validate_json(obj, "params_report")
    assert json.loads((tmp_path / "p.json").read_text()) == obj
    assert obj["reference"] == {"params": 34.14, "gflops": 14.66}
    assert obj["total_params"] == sum(m["params"] for m in obj["modules"])
    assert obj["total_macs"] == sum(m["macs"] for m in obj["modules"])
    assert obj["total_flops"] == 2 * obj["total_macs"]
    for m in obj["modules"]:
        assert re.search(rf"^{m['name']}\s+{m['params']}\s+{m['macs']}$", text, re.M)
    assert re.search(rf"^total\s+{obj['total_params']}\s+{obj['total_macs']}$", text, re.M)
    assert "34.14M" in text and "14.66" in text


def test_params_toy_has_no_reference(capsys):
    code, js, _ = run(capsys, "params", "--config", "toy", "--json")
    obj = json.loads(js)
    assert code == EXIT_OK and obj["reference"] is None and obj["total_params"] < 2_000_000


def test_params_from_yaml(capsys, tmp_path):
    cfg = tmp_path / "m.yaml"
    cfg.write_text("name: mini\ndims: [8, 16]\nheads: [1, 2]\ndepths: [1, 1]\ninput_size: 32\nclasses: 2\n")
    code, js, _ = run(capsys, "params", "--config", str(cfg), "--json")
    assert code == EXIT_OK and json.loads(js)["config"] == "mini"


def test_forward_writes_logits(capsys, tmp_path):
    image = np.random.default_rng(0).standard_normal((1, 64, 64)).astype(np.float32)
    write_stf(tmp_path / "x.stf", image)
    code, js, _ = run(capsys, "forward", "--config", "toy", "--input", str(tmp_path / "x.stf"),
                      "--out", str(tmp_path / "y.stf"), "--json")
    obj = json.loads(js)
    assert code == EXIT_OK
    assert obj["logits"] == [1, 3, 64, 64]
    assert [s["stage"] for s in obj["stages"]] == [f"res{i}" for i in range(1, 8)]
    assert [s["extent"] for s in obj["stages"]] == [[16, 16], [8, 8], [4, 4], [2, 2], [4, 4], [8, 8], [16, 16]]
    assert read_stf(tmp_path / "y.stf").shape == (1, 3, 64, 64)


def test_train_eval_round_trip(capsys, dataset, checkpoint, tmp_path):
    lines = (checkpoint / "losses.jsonl").read_text().splitlines()
    assert len(lines) == 2
    code, text, _ = run(capsys, "eval", "--checkpoint", str(checkpoint), "--data", str(dataset))
    assert code == EXIT_OK
    code, js, _ = run(capsys, "eval", "--checkpoint", str(checkpoint), "--data", str(dataset), "--json",
                      "--out", str(tmp_path / "e.json"))
    obj = json.loads(js)
    validate_json(obj, "eval_report")
    assert obj["count"] == 4 and set(obj["per_class"]) == {"1", "2"}
    # every number in the JSON report appears verbatim in the text
    for cls, v in obj["per_class"].items():
        for key in ("dsc", "hd95"):
            assert ("undefined" if v[key] is None else repr(v[key])) in text
    assert repr(obj["mean_foreground_dsc"]) in text


def test_train_json_log_lines_validate(capsys, dataset, tmp_path):
    code, out, _ = run(capsys, "train-toy", "--data", str(dataset), "--out", str(tmp_path / "c"),
                       "--steps", "2", "--json", "--seed", "1")
    recs = [json.loads(line) for line in out.splitlines()]
    assert code == EXIT_OK and [r["step"] for r in recs] == [0, 1]
    for r in recs:
        validate_json(r, "train_log")


def test_train_is_reproducible_from_cli(capsys, dataset, checkpoint, tmp_path):
    code, _, _ = run(capsys, "train-toy", "--data", str(dataset), "--out", str(tmp_path / "again"),
                     "--steps", "2", "--seed", "1")
    assert code == EXIT_OK
    assert (tmp_path / "again" / "losses.jsonl").read_bytes() == (checkpoint / "losses.jsonl").read_bytes()
    for f in (checkpoint / "params").iterdir():
        assert (tmp_path / "again" / "params" / f.name).read_bytes() == f.read_bytes()


def test_seed_env_fallback(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("MLLA_SEED", "5")
    assert run(capsys, "gen-data", "--out", str(tmp_path / "env"), "--count", "2", "--size", "32")[0] == EXIT_OK
    monkeypatch.delenv("MLLA_SEED")
    assert run(capsys, "gen-data", "--out", str(tmp_path / "flag"), "--count", "2", "--size", "32",
               "--seed", "5")[0] == EXIT_OK
    for name in ("image_0000.stf", "mask_0001.stf", "dataset.json"):
        assert (tmp_path / "env" / name).read_bytes() == (tmp_path / "flag" / name).read_bytes()


def test_bench_single_kernel(capsys, tmp_path):
    code, js, _ = run(capsys, "bench", "--kernel", "softmax", "--ns", "16", "32", "64", "128", "256",
                      "--d", "8", "--out", str(tmp_path), "--json")
    assert code == EXIT_OK
    assert [p.name for p in tmp_path.iterdir()] == ["bench_softmax.json"]
    obj = json.loads(js)
    validate_json(obj, "bench_report")
    assert obj == json.loads((tmp_path / "bench_softmax.json").read_text())
    assert abs(obj["flop_slope"] - 2.0) < 0.1


@pytest.mark.parametrize("argv", [
    ["params", "--config", "nonexistent"],
    ["params", "--bogus"],
    ["frobnicate"],
    [],
    ["forward", "--config", "toy", "--size", "48"],
    ["gen-data", "--out", "x", "--size", "40"],
    ["bench", "--kernel", "linear", "--ns", "1", "2", "3", "4"],
    ["params", "--seed", "-3"],
    ["eval", "--checkpoint", "missing", "--data", "missing"],
])
def test_invalid_input_exits_1(capsys, tmp_path, monkeypatch, argv):
    monkeypatch.chdir(tmp_path)
    code, _, err = run(capsys, *argv)
    assert code == EXIT_INVALID
    assert err.startswith("error:")


def test_corrupt_stf_input_exits_1(capsys, tmp_path):
    (tmp_path / "bad.stf").write_bytes(b"XTNSR1\n" + b"\0" * 20)
    code, _, err = run(capsys, "forward", "--config", "toy", "--input", str(tmp_path / "bad.stf"))
    assert code == EXIT_INVALID and "magic" in err


def test_eval_data_mismatch_exits_1(capsys, checkpoint, tmp_path):
    main(["gen-data", "--out", str(tmp_path / "five"), "--count", "2", "--classes", "5"])
    code, _, err = run(capsys, "eval", "--checkpoint", str(checkpoint), "--data", str(tmp_path / "five"))
    assert code == EXIT_INVALID and "classes" in err


def test_eval_accepts_other_compatible_extents(capsys, checkpoint, tmp_path):
    main(["gen-data", "--out", str(tmp_path / "small"), "--count", "2", "--size", "32"])
    code, _, _ = run(capsys, "eval", "--checkpoint", str(checkpoint), "--data", str(tmp_path / "small"))
    assert code == EXIT_OK


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_training_exits_2(capsys, dataset, tmp_path):
    code, _, err = run(capsys, "train-toy", "--data", str(dataset), "--out", str(tmp_path / "nan"),
                       "--steps", "20", "--lr", "1e30", "--no-augment")
    assert code == EXIT_NUMERIC
    assert re.search(r"step \d+", err)


def test_schema_violation_is_reported():
    with pytest.raises(ValidationError, match="params_report"):
        validate_json({"config": "x"}, "params_report")


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mlla_unet.cli", "params", "--config", "toy", "--json"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["config"] == "toy"
    proc = subprocess.run([sys.executable, "-m", "mlla_unet.cli", "params", "--nope"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 1


@pytest.mark.slow
def test_selftest_command(capsys):
    code, out, _ = run(capsys, "selftest")
    assert code == EXIT_OK
    assert "FAIL" not in out and out.strip().endswith("checks passed")
