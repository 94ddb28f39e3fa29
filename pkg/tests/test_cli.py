"""Command-line surface: exit codes, file outputs, determinism, and the
gradcheck negative control."""

import hashlib
import json
import os

import numpy.testing as npt
import pytest

from mlt import data as D
from mlt import evaluate as E
from mlt import tensor_io
from mlt.cli import main


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


SPEC = {"n_x": 16, "grid_side": 4, "patch_dim": 6, "L": 3,
        "num_sequences": 6, "sequence_length": 40,
        "min_segment": 3, "max_segment": 8,
        "positive_rates": [0.15, 0.2, 0.25], "patches_per_label": 2,
        "seed": 5, "task_seed": 9}


def write_spec(tmp_path, name="spec.json", **overrides):
    doc = {**SPEC, **overrides}
    path = str(tmp_path / name)
    json.dump(doc, open(path, "w"))
    return path


def write_run_config(tmp_path, train_dir, val_dir, name="run.json", **over):
    doc = {
        "model": {"d": 16, "N_h": 2, "N_x": 1, "N_l": 1, "n_x": 16,
                  "patch_dim": 6, "L": 3, "d_mlp": 32, "dropout": 0.1,
                  "seed": 0},
        "optim": {"encoder": {"warmup_steps": 50},
                  "decoder": {"warmup_steps": 50}},
        "data": {"train_path": train_dir, "val_path": val_dir,
                 "batch_size": 32},
        "eval": {"threshold": 0.5, "smoothing_window": 5},
        "run": {"epochs": 1, "max_steps": 8, "seed": 1,
                "checkpoint_dir": str(tmp_path / "ckpt"),
                "log_path": str(tmp_path / "train.log")},
    }
    for section, fields in over.items():
        doc.setdefault(section, {}).update(fields)
    path = str(tmp_path / name)
    json.dump(doc, open(path, "w"))
    return path


@pytest.fixture()
def pipeline(tmp_path):
    spec = write_spec(tmp_path)
    train_dir = str(tmp_path / "train")
    val_dir = str(tmp_path / "val")
    assert main(["gen-data", "--config", spec, "--out", train_dir]) == 0
    assert main(["gen-data", "--config", spec, "--out", val_dir,
                 "--seed", "6"]) == 0
    run_cfg = write_run_config(tmp_path, train_dir, val_dir)
    assert main(["train", "--config", run_cfg]) == 0
    return tmp_path, spec, train_dir, val_dir, run_cfg


def test_gen_data_writes_valid_dataset(tmp_path):
    spec = write_spec(tmp_path)
    out = str(tmp_path / "data")
    assert main(["gen-data", "--config", spec, "--out", out]) == 0
    ds = D.load_dataset(out)
    assert ds.num_samples == 240
    D.validate_manifest(ds.manifest)


def test_gen_data_default_spec_within_time_budget(tmp_path):
    import time
    spec_path = str(tmp_path / "default.json")
    json.dump({"num_sequences": 50}, open(spec_path, "w"))  # 10^4 frames
    t0 = time.monotonic()
    assert main(["gen-data", "--config", spec_path,
                 "--out", str(tmp_path / "big")]) == 0
    assert time.monotonic() - t0 < 10.0
    ds = D.load_dataset(str(tmp_path / "big"))
    assert ds.num_samples == 10_000


def test_gen_data_deterministic_checksums(tmp_path):
    spec = write_spec(tmp_path)
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["gen-data", "--config", spec, "--out", out_a]) == 0
    assert main(["gen-data", "--config", spec, "--out", out_b]) == 0
    for name in ("X.mlt", "y.mlt", "mask.mlt", "manifest.json"):
        assert sha(os.path.join(out_a, name)) == sha(os.path.join(out_b, name))


def test_gen_data_bad_spec_exits_1(tmp_path):
    spec = write_spec(tmp_path, min_segment=0)
    assert main(["gen-data", "--config", spec, "--out", str(tmp_path / "x")]) == 1
    bogus = write_spec(tmp_path, name="bogus.json", unknown_field=3)
    assert main(["gen-data", "--config", bogus, "--out", str(tmp_path / "y")]) == 1


def test_usage_errors_exit_1(tmp_path):
    assert main(["no-such-command"]) == 1
    assert main(["gen-data"]) == 1
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 1


def test_train_eval_predict_pipeline(pipeline):
    tmp_path, spec, train_dir, val_dir, run_cfg = pipeline
    ckpt = str(tmp_path / "ckpt" / "final.ckpt")
    assert os.path.exists(ckpt)
    assert os.path.exists(str(tmp_path / "train.log"))

    report_path = str(tmp_path / "report.json")
    assert main(["eval", "--checkpoint", ckpt, "--data", val_dir,
                 "--config", run_cfg, "--out", report_path]) == 0
    report = json.load(open(report_path))
    assert "smoothed" in report and "unsmoothed" in report
    assert report["smoothing_window"] == 5

    out_prefix = str(tmp_path / "preds")
    assert main(["predict", "--checkpoint", ckpt, "--data", val_dir,
                 "--config", run_cfg, "--out", out_prefix]) == 0
    ds = D.load_dataset(val_dir)
    raw = tensor_io.load_tensor(out_prefix + ".raw.mlt")
    smoothed = tensor_io.load_tensor(out_prefix + ".smoothed.mlt")
    assert raw.shape == (ds.num_samples, 3)
    assert ((raw > 0) & (raw < 1)).all()
    recomputed = E.smooth_sequences(raw, ds.sequences, 5)
    npt.assert_array_equal(smoothed, recomputed)
    boundaries = json.load(open(out_prefix + ".sequences.json"))
    assert boundaries["sequences"] == ds.sequences


def test_eval_rejects_mismatched_dataset(pipeline, tmp_path):
    _, spec, train_dir, val_dir, run_cfg = pipeline
    other = str(tmp_path / "other")
    bad_spec = write_spec(tmp_path, name="other.json", L=4,
                          positive_rates=[0.2, 0.2, 0.2, 0.2])
    assert main(["gen-data", "--config", bad_spec, "--out", other]) == 0
    ckpt = str(tmp_path / "ckpt" / "final.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--data", other]) == 1


def test_corrupt_checkpoint_exits_2(pipeline, tmp_path):
    _, _, _, val_dir, _ = pipeline
    bad = str(tmp_path / "bad.ckpt")
    open(bad, "wb").write(b"garbage\x00\x01")
    assert main(["eval", "--checkpoint", bad, "--data", val_dir]) == 2


def test_gradcheck_command_passes_and_reports(tmp_path, capsys):
    run_cfg = write_run_config(tmp_path, None, None, name="gc.json",
                               model={"n_x": 4, "patch_dim": 5, "N_l": 2,
                                      "d": 8, "d_mlp": 16})
    out = str(tmp_path / "gradcheck.json")
    assert main(["gradcheck", "--config", run_cfg, "--seeds", "2",
                 "--out", out]) == 0
    text = capsys.readouterr().out
    report = json.load(open(out))
    groups = [r["name"] for r in report if r["kind"] == "model_group"]
    assert sorted(groups) == ["backbone", "decoder", "encoder"]
    assert all(r["passed"] for r in report)
    assert "gradcheck passed" in text


def test_gradcheck_fault_injection_fails_with_component(tmp_path, capsys):
    run_cfg = write_run_config(tmp_path, None, None, name="gc2.json",
                               model={"n_x": 4, "patch_dim": 5, "N_l": 1,
                                      "d": 8, "d_mlp": 16})
    assert main(["gradcheck", "--config", run_cfg, "--seeds", "1",
                 "--inject-fault", "gelu"]) == 2
    text = capsys.readouterr()
    assert "FAIL primitive gelu" in text.out
    # the fault is injected module-wide, so the model path fails too
    assert "gradcheck FAILED" in text.err
    # and the patch is removed afterwards
    assert main(["gradcheck", "--config", run_cfg, "--seeds", "1"]) == 0


def test_gradcheck_unknown_fault_target(tmp_path):
    run_cfg = write_run_config(tmp_path, None, None, name="gc3.json")
    assert main(["gradcheck", "--config", run_cfg, "--seeds", "1",
                 "--inject-fault", "definitely_not_an_op"]) == 1
