import json

import numpy as np
import pytest

from conftest import perfect_model, two_level_samples
from supunet import checkpoint, data, pgm
from supunet.cli import main
from supunet.model import UNetConfig, build


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _tree(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@pytest.fixture
def small_data(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-data", "--out", tmp_path / "d", "--count", 3, "--size", 16, 16, "--seed", 4)
    assert code == 0
    return tmp_path / "d" / "manifest.txt"


# --- gen-data ---------------------------------------------------------------


def test_gen_data_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "gen-data", "--out", tmp_path / name, "--count", 8, "--seed", 7)
        assert code == 0
        assert out.strip() == str(tmp_path / name / "manifest.txt")
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    assert len(_tree(tmp_path / "a")) == 17


def test_gen_data_zero_count(tmp_path, capsys):
    code, _, err = run(capsys, "gen-data", "--out", tmp_path, "--count", 0)
    assert code == 2
    assert "count must be ≥ 1" in err


def test_gen_data_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, _, err = run(capsys, "gen-data", "--out", blocker / "sub", "--count", 1)
    assert code == 2 and "error" in err


def test_gen_data_then_depth_two_training_rejects_size_30(tmp_path, capsys):
    code, _, _ = run(capsys, "gen-data", "--out", tmp_path / "d", "--count", 1, "--size", 30, 30)
    assert code == 0
    code, _, err = run(capsys, "train", "--data", tmp_path / "d" / "manifest.txt", "--out", tmp_path / "m.ckpt",
                       "--depth", 2, "--steps", 1)
    assert code == 2
    assert "divisible" in err


def test_usage_errors_exit_two(capsys):
    assert run(capsys)[0] == 2
    assert run(capsys, "bogus")[0] == 2
    assert run(capsys, "gradcheck", "--unknown-flag")[0] == 2
    assert run(capsys, "gen-data", "--count", 1)[0] == 2
    assert run(capsys, "--help")[0] == 0


# --- train ------------------------------------------------------------------


def test_train_zero_lr_checkpoint_equals_initialisation(small_data, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    code, _, _ = run(capsys, "train", "--data", small_data, "--out", ckpt, "--depth", 1, "--base", 2,
                     "--fc-hidden", 4, "--lr", 0, "--steps", 10, "--seed", 3)
    assert code == 0
    init, _ = build(UNetConfig(input_size=(16, 16), depth=1, base_channels=2, fc_hidden=4), 3)
    assert ckpt.read_bytes() == checkpoint.encode(init)
    log = (tmp_path / "m.ckpt.log").read_text().splitlines()
    assert log[0].split("\t") == ["step", "L_total", "L1", "CE", "wallclock_ms"]
    assert len(log) == 11


def test_train_negative_lambda(small_data, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", small_data, "--out", tmp_path / "m.ckpt", "--lambda", -1)
    assert code == 2 and "lambda" in err


def test_train_missing_manifest(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", tmp_path / "nope.txt", "--out", tmp_path / "m.ckpt")
    assert code == 2 and "nope.txt" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_three(small_data, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", small_data, "--out", tmp_path / "m.ckpt", "--depth", 1,
                       "--base", 2, "--fc-hidden", 4, "--lr", 1e300, "--steps", 50, "--batch-size", 1)
    assert code == 3
    assert "step" in err


# --- eval / predict ---------------------------------------------------------


@pytest.fixture
def perfect_fixture(tmp_path):
    """A two-level dataset plus a checkpoint that segments it perfectly."""
    d = tmp_path / "perfect"
    d.mkdir()
    manifest = data.Manifest(16, 16, 2, 0)
    for i, s in enumerate(two_level_samples(3)):
        data.save_sample(s, d / f"{i}.pgm", d / f"{i}_mask.pgm")
        manifest.entries.append((f"{i}.pgm", f"{i}_mask.pgm"))
    data.write_manifest(d / "manifest.txt", manifest)
    checkpoint.save(tmp_path / "perfect.ckpt", perfect_model())
    return d / "manifest.txt", tmp_path / "perfect.ckpt"


def test_eval_perfect_oracle_prints_ones(perfect_fixture, capsys):
    manifest, ckpt = perfect_fixture
    code, out, _ = run(capsys, "eval", "--data", manifest, "--ckpt", ckpt)
    assert code == 0
    lines = out.splitlines()
    assert [c.strip() for c in lines[0].split("|")] == ["Data", "Specificity", "Sensitivity", "Accuracy"]
    assert [c.strip() for c in lines[2].split("|")][1:] == ["1.000", "1.000", "1.000"]
    assert lines[3].startswith("bottleneck CE: 0.693")


def test_eval_json_is_deterministic(perfect_fixture, capsys):
    manifest, ckpt = perfect_fixture
    first = run(capsys, "eval", "--data", manifest, "--ckpt", ckpt, "--json")
    second = run(capsys, "eval", "--data", manifest, "--ckpt", ckpt, "--json")
    assert first == second and first[0] == 0
    report = json.loads(first[1])
    assert report["metrics"] == {"accuracy": 1.0, "sensitivity": 1.0, "specificity": 1.0}
    assert list(report) == sorted(report)


def test_eval_checkpoint_manifest_mismatch(small_data, tmp_path, capsys):
    checkpoint.save(tmp_path / "big.ckpt", build(UNetConfig(input_size=(32, 32), depth=1, base_channels=1), 0)[0])
    code, _, err = run(capsys, "eval", "--data", small_data, "--ckpt", tmp_path / "big.ckpt")
    assert code == 2 and "expects" in err


def test_eval_corrupt_checkpoint(small_data, tmp_path, capsys):
    (tmp_path / "bad.ckpt").write_bytes(b"UNBK\x01\x00")
    code, _, err = run(capsys, "eval", "--data", small_data, "--ckpt", tmp_path / "bad.ckpt")
    assert code == 2 and "truncated" in err


def test_predict_then_eval_agree(small_data, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    run(capsys, "train", "--data", small_data, "--out", ckpt, "--depth", 1, "--base", 2, "--fc-hidden", 4,
        "--steps", 3)
    root = small_data.parent
    outs = []
    for name in ("p1.pgm", "p2.pgm"):
        code, _, _ = run(capsys, "predict", "--image", root / "sample_00000.pgm", "--ckpt", ckpt,
                         "--out", tmp_path / name)
        assert code == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]

    single = tmp_path / "single"
    single.mkdir()
    for f in ("sample_00000.pgm", "sample_00000_mask.pgm"):
        (single / f).write_bytes((root / f).read_bytes())
    data.write_manifest(single / "manifest.txt",
                        data.Manifest(16, 16, 2, 4, [("sample_00000.pgm", "sample_00000_mask.pgm")]))
    code, out, _ = run(capsys, "eval", "--data", single / "manifest.txt", "--ckpt", ckpt, "--json")
    assert code == 0
    counts = json.loads(out)["per_sample"][0]["counts"][0]

    pred = pgm.read(tmp_path / "p1.pgm").pixels
    gt = data.load_mask(root / "sample_00000_mask.pgm")
    assert counts == {
        "n_tp": int(((pred == 1) & (gt == 1)).sum()), "n_tn": int(((pred == 0) & (gt == 0)).sum()),
        "n_fp": int(((pred == 1) & (gt == 0)).sum()), "n_fn": int(((pred == 0) & (gt == 1)).sum()),
    }


def test_predict_missing_checkpoint(small_data, tmp_path, capsys):
    missing = tmp_path / "absent.ckpt"
    code, _, err = run(capsys, "predict", "--image", small_data.parent / "sample_00000.pgm", "--ckpt", missing,
                       "--out", tmp_path / "o.pgm")
    assert code == 2 and str(missing) in err


def test_predict_size_mismatch(tmp_path, capsys):
    checkpoint.save(tmp_path / "m.ckpt", perfect_model((16, 16)))
    pgm.write(tmp_path / "i.pgm", np.zeros((32, 32), dtype=np.int64), 65535)
    code, _, err = run(capsys, "predict", "--image", tmp_path / "i.pgm", "--ckpt", tmp_path / "m.ckpt",
                       "--out", tmp_path / "o.pgm")
    assert code == 2 and "32x32" in err


# --- gradcheck --------------------------------------------------------------


def test_gradcheck_defaults_pass(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    assert out.strip().endswith("PASS")
    assert "lambda=0" in out and "lambda=1" in out
    assert "head.fc1.weight" in out


def test_gradcheck_tolerance_below_noise_floor(capsys):
    code, out, _ = run(capsys, "gradcheck", "--tol", 1e-12)
    assert code == 1 and out.strip().endswith("FAIL")


def test_gradcheck_zero_eps(capsys):
    code, _, err = run(capsys, "gradcheck", "--eps", 0)
    assert code == 2 and "eps" in err
