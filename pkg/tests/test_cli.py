"""End-to-end CLI workflows on a micro configuration."""
import csv
import json

import numpy as np
import pytest

from qface.cli import main

MICRO = {
    "encoder": {"image_size": 16, "patch_size": 8, "hidden_dim": 16, "depth": 3,
                "heads": 2, "mlp_ratio": 2.0, "drop_path_rate": 0.2,
                "fusion_layers": [1, 2, 3]},
    "decoder": {"heads": 2},
    "data": {"n_train": 24, "n_test": 8, "batch_size": 4, "mask_ratio": 0.75,
             "eval_max_images": 8},
    "schedule": {"peak_lr": 1e-3, "warmup_steps": 2, "total_steps": 6,
                 "floor_lr": 1e-6, "layer_decay": 0.85, "eval_every": 0},
    "seeds": {"master": 1},
}


@pytest.fixture(scope="module")
def micro_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "micro.json"
    path.write_text(json.dumps(MICRO))
    return str(path)


@pytest.fixture(scope="module")
def pretrain_run(micro_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--config", micro_config, "--out", str(out)]) == 0
    return out


def test_gen_data_writes_manifests(micro_config, tmp_path):
    rc = main(["gen-data", "--config", micro_config, "--out", str(tmp_path),
               "--train", "5", "--test", "3", "--render"])
    assert rc == 0
    assert (tmp_path / "config.json").exists()
    manifest = json.loads((tmp_path / "train_manifest.json").read_text())
    assert manifest["count"] == 5
    assert len(list((tmp_path / "train_images").glob("*.pgm"))) == 5


def test_pretrain_outputs(pretrain_run):
    assert (pretrain_run / "encoder.ckpt").exists()
    with open(pretrain_run / "pretrain_log.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["step", "loss", "lr"]
    assert len(rows) == 1 + MICRO["schedule"]["total_steps"]


def test_finetune_and_eval_and_attn(micro_config, pretrain_run, tmp_path):
    ft = tmp_path / "ft"
    rc = main(["finetune", "--config", micro_config, "--out", str(ft),
               "--init", str(pretrain_run / "encoder.ckpt")])
    assert rc == 0
    assert (ft / "model.ckpt").exists()
    with open(ft / "train_log.csv") as fh:
        header = next(csv.reader(fh))
    assert header[:2] == ["step", "lr"]
    assert header[-1] == "loss_total"
    assert (ft / "eval_final.csv").exists()

    ev = tmp_path / "ev"
    rc = main(["eval", "--config", micro_config, "--out", str(ev),
               "--ckpt", str(ft / "model.ckpt")])
    assert rc == 0
    with open(ev / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["task", "metric", "value"]
    tasks = {r[0] for r in rows[1:]}
    assert tasks == {"expression", "attributes", "action_units", "age_gender", "pose"}

    at = tmp_path / "attn"
    rc = main(["attn", "--config", micro_config, "--out", str(at),
               "--ckpt", str(ft / "model.ckpt"), "--index", "1"])
    assert rc == 0
    pgms = list(at.glob("attn_b*_q*_s*.pgm"))
    assert len(pgms) == 2 * 26 * 3  # blocks x queries x stages
    assert (at / "attn_marginals.csv").exists()


def test_eval_untrained_model_succeeds(micro_config, tmp_path):
    assert main(["eval", "--config", micro_config, "--out", str(tmp_path)]) == 0


def test_finetune_multihead_model(micro_config, tmp_path):
    rc = main(["finetune", "--config", micro_config, "--out", str(tmp_path),
               "--model", "multihead"])
    assert rc == 0
    assert (tmp_path / "model.ckpt").exists()


def test_finetune_taskspecific_writes_per_task_runs(micro_config, tmp_path):
    rc = main(["finetune", "--config", micro_config, "--out", str(tmp_path),
               "--model", "taskspecific"])
    assert rc == 0
    for task in ("expression", "attributes", "action_units", "age_gender", "pose"):
        assert (tmp_path / task / "model.ckpt").exists()


def test_rerun_reproduces_logs_byte_identically(micro_config, tmp_path):
    logs = []
    for sub in ("a", "b"):
        out = tmp_path / sub
        assert main(["finetune", "--config", micro_config, "--out", str(out)]) == 0
        logs.append((out / "train_log.csv").read_bytes())
    assert logs[0] == logs[1]


def test_attn_rejects_multihead(micro_config, tmp_path, capsys):
    rc = main(["attn", "--config", micro_config, "--out", str(tmp_path),
               "--model", "multihead"])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ") and "\n" not in err.strip()


def test_error_contract_single_line(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nonsense": 1}))
    rc = main(["finetune", "--config", str(bad), "--out", str(tmp_path / "x")])
    assert rc == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: ValueError:")
    assert "\n" not in err


def test_ablate_micro(micro_config, tmp_path):
    rc = main(["ablate", "--config", micro_config, "--out", str(tmp_path),
               "--seeds-count", "1", "--pretrain-steps", "4", "--finetune-steps", "4"])
    assert rc == 0
    with open(tmp_path / "table7.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "variant" and rows[0][-1] == "avg"
    assert [r[0] for r in rows[1:]] == ["task_specific", "multihead", "qface_womff", "qface"]
    assert len(rows) == 5
    assert (tmp_path / "table7_seed0.csv").exists()
    for variant in ("multihead", "qface_womff", "qface"):
        assert (tmp_path / "seed0" / variant / "train_log.csv").exists()
