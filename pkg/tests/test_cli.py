import json
import os

import numpy as np
import pytest

from histodiff.cli import main
from histodiff.persistence import file_digest, read_json


def write_config(path, dataset_dir, out_dir, **overrides):
    cfg = {
        "dataset_dir": dataset_dir,
        "out_dir": out_dir,
        "seed": 5,
        "gen": {
            "count": 16,
            "split_fractions": [0.75, 0.25],
            "toy": {
                "patch_size": 16,
                "num_classes": 3,
                "nuclei_per_patch": [1, 3],
                "radius_range": [2.0, 3.0],
            },
        },
        "model": {
            "base_width": 8,
            "channel_mults": [1, 2],
            "groups": 4,
            "temb_dim": 16,
            "time_freq_dim": 8,
            "text_dim": 32,
            "point_width": 4,
            "point_growth": 4,
            "point_blocks": 1,
            "point_dense_layers": 2,
        },
        "schedule": {"num_steps": 6},
        "optimizer": {"lr": 1e-3},
        "batch_size": 4,
        "train_steps": 6,
        "checkpoint_every": 3,
        "text_dropout": 0.1,
        "omega": 2.0,
        "sample_count": 3,
    }
    cfg.update(overrides)
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return cfg


@pytest.fixture
def workspace(tmp_path):
    cfg_path = str(tmp_path / "cfg.json")
    data_dir = str(tmp_path / "data")
    run_dir = str(tmp_path / "run")
    write_config(cfg_path, data_dir, run_dir)
    return tmp_path, cfg_path, data_dir, run_dir


def test_gen_data_and_digest_stability(workspace, capsys):
    tmp, cfg_path, data_dir, _ = workspace
    assert main(["gen-data", "--config", cfg_path]) == 0
    manifest = read_json(os.path.join(data_dir, "manifest.json"))
    assert manifest["split_counts"] == {"train": 12, "test": 4}
    digests = {
        p: file_digest(os.path.join(data_dir, "tensors", p))
        for p in os.listdir(os.path.join(data_dir, "tensors"))
    }
    # regenerate into a second directory: identical bytes
    assert main(["gen-data", "--config", cfg_path, "--out", str(tmp / "data2")]) == 0
    for name, dig in digests.items():
        assert file_digest(os.path.join(tmp, "data2", "tensors", name)) == dig


def test_gen_data_invalid_split_fails_before_writes(tmp_path):
    cfg_path = str(tmp_path / "cfg.json")
    data_dir = str(tmp_path / "data")
    write_config(cfg_path, data_dir, str(tmp_path / "run"),
                 gen={"count": 10, "split_fractions": [0.9, 0.3], "toy": {}})
    assert main(["gen-data", "--config", cfg_path]) == 1
    assert not os.path.exists(data_dir)


def test_unknown_config_key_is_usage_error(tmp_path):
    cfg_path = str(tmp_path / "cfg.json")
    write_config(cfg_path, "d", "r", bogus_key=1)
    assert main(["gen-data", "--config", cfg_path]) == 1


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["train"])  # missing --config
    assert exc.value.code == 1


def test_full_pipeline(workspace, capsys):
    tmp, cfg_path, data_dir, run_dir = workspace
    assert main(["gen-data", "--config", cfg_path]) == 0
    assert main(["train", "--config", cfg_path]) == 0
    assert os.path.exists(os.path.join(run_dir, "loss_log.csv"))
    assert os.path.exists(os.path.join(run_dir, "run.json"))
    ckpt = os.path.join(run_dir, "checkpoints", "step_000006")
    assert os.path.exists(os.path.join(ckpt, "checkpoint.json"))

    out1 = str(tmp / "samples1")
    assert main(["sample", "--config", cfg_path, "--checkpoint", ckpt,
                 "--conditions", data_dir, "--out", out1]) == 0
    man = read_json(os.path.join(out1, "manifest.json"))
    assert len(man["samples"]) == 3
    assert os.path.exists(os.path.join(out1, "grid.png"))

    # sampling is deterministic under a fixed seed
    out2 = str(tmp / "samples2")
    assert main(["sample", "--config", cfg_path, "--checkpoint", ckpt,
                 "--conditions", data_dir, "--out", out2]) == 0
    for rec in man["samples"]:
        for key, rel in rec["paths"].items():
            assert file_digest(os.path.join(out1, rel)) == \
                file_digest(os.path.join(out2, rel)), (rec["id"], key)

    sep_dir = str(tmp / "instances")
    assert main(["separate", "--in", out1, "--out", sep_dir]) == 0
    sep_man = read_json(os.path.join(sep_dir, "manifest.json"))
    assert len(sep_man["samples"]) == 3

    eval_dir = str(tmp / "eval")
    assert main(["eval", "--pred", data_dir, "--gt", data_dir,
                 "--out", eval_dir]) == 0
    report = read_json(os.path.join(eval_dir, "report.json"))
    vals = report["values"]
    assert vals["dice"] == 1.0
    assert vals["mdice"] == 1.0
    assert vals["aji"] == 1.0
    assert vals["f_d"] == 1.0 and vals["acc"] == 1.0
    assert abs(vals["fsd"]) < 1e-9
    assert os.path.exists(os.path.join(eval_dir, "report.txt"))

    # report digest reproducible
    eval_dir2 = str(tmp / "eval2")
    assert main(["eval", "--pred", data_dir, "--gt", data_dir,
                 "--out", eval_dir2]) == 0
    assert file_digest(os.path.join(eval_dir, "report.json")) == \
        file_digest(os.path.join(eval_dir2, "report.json"))


def test_eval_missing_path_is_runtime_error(tmp_path, capsys):
    missing = str(tmp_path / "nope")
    code = main(["eval", "--pred", missing, "--gt", missing,
                 "--out", str(tmp_path / "out")])
    assert code == 2
    err = capsys.readouterr().err
    assert "nope" in err


def test_eval_rejects_unknown_metric(workspace):
    _, cfg_path, data_dir, _ = workspace
    assert main(["gen-data", "--config", cfg_path]) == 0
    assert main(["eval", "--pred", data_dir, "--gt", data_dir,
                 "--metrics", "dice,bogus", "--out", data_dir]) == 1


def test_eval_fid_is_with_toy_extractor(workspace, tmp_path):
    tmp, cfg_path, data_dir, _ = workspace
    assert main(["gen-data", "--config", cfg_path]) == 0
    out = str(tmp / "eval_fid")
    assert main(["eval", "--pred", data_dir, "--gt", data_dir,
                 "--metrics", "fid,is", "--out", out]) == 0
    report = read_json(os.path.join(out, "report.json"))
    # same set against itself: zero up to eigensolver noise on a
    # rank-deficient 64-dim covariance
    assert abs(report["values"]["fid"]) < 1e-4
    assert report["values"]["is"] >= 1.0
    assert "extractor" in report["flags"]


def test_train_resume_matches_straight_run(workspace, tmp_path):
    tmp, cfg_path, data_dir, run_dir = workspace
    assert main(["gen-data", "--config", cfg_path]) == 0
    assert main(["train", "--config", cfg_path]) == 0
    straight = read_json(os.path.join(run_dir, "checkpoints", "step_000006",
                                      "checkpoint.json"))

    # second run: stop at 3 steps, then resume to 6
    cfg2 = str(tmp / "cfg2.json")
    run2 = str(tmp / "run2")
    write_config(cfg2, data_dir, run2, train_steps=3)
    assert main(["train", "--config", cfg2]) == 0
    cfg3 = str(tmp / "cfg3.json")
    write_config(cfg3, data_dir, run2, train_steps=6)
    assert main(["train", "--config", cfg3, "--resume",
                 os.path.join(run2, "checkpoints", "step_000003")]) == 0

    import csv
    with open(os.path.join(run_dir, "loss_log.csv")) as fh:
        losses_a = [row["total"] for row in csv.DictReader(fh)]
    with open(os.path.join(run2, "loss_log.csv")) as fh:
        losses_b = [row["total"] for row in csv.DictReader(fh)]
    assert losses_a == losses_b  # steps 1..3 plus resumed 4..6 match exactly
    p_a = os.path.join(run_dir, "checkpoints", "step_000006", "params")
    p_b = os.path.join(run2, "checkpoints", "step_000006", "params")
    for name in os.listdir(p_a):
        assert file_digest(os.path.join(p_a, name)) == \
            file_digest(os.path.join(p_b, name)), name


def test_prompt_command(capsys):
    assert main(["prompt", "--tissue", "colon",
                 "--cell-types", "epithelial,lymphocyte"]) == 0
    out = capsys.readouterr().out.strip()
    assert out == ("high-quality histopathology colon tissue image "
                   "including nuclei types of epithelial, lymphocyte.")
    assert main(["prompt", "--tissue", "endometrium",
                 "--cell-types", "stroma,epithelium", "--stain", "IHC"]) == 0
    out = capsys.readouterr().out.strip()
    assert out == ("high-quality histopathology IHC-stained endometrium tissue "
                   "image including nuclei types of stroma, epithelium.")
    assert main(["prompt", "--tissue", "x", "--cell-types", ""]) == 1


def test_data_root_env_resolution(tmp_path, monkeypatch):
    cfg_path = str(tmp_path / "cfg.json")
    write_config(cfg_path, "rel_data", "rel_run")
    monkeypatch.setenv("HISTODIFF_DATA_ROOT", str(tmp_path))
    assert main(["gen-data", "--config", cfg_path]) == 0
    assert os.path.exists(tmp_path / "rel_data" / "manifest.json")
