import json

import numpy as np
import pytest

from scamnet.config import RunConfig
from scamnet.data import DatasetSpec, generate_dataset
from scamnet.model import load_model
from scamnet.train import train


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(DatasetSpec(num_train=12, num_val=6, seed=5), str(root))
    return str(root)


@pytest.fixture(scope="module")
def tiny_run():
    return RunConfig().with_overrides(
        epochs_phase0=1, epochs_phase1=1, epochs_phase2=1)


@pytest.fixture(scope="module")
def tiny_result(tiny_data, tiny_run, tmp_path_factory):
    out = tmp_path_factory.mktemp("out")
    ckpt = str(out / "model.ckpt")
    log = str(out / "train.jsonl")

    snapshots = []

    def callback(phase, epoch, params):
        snapshots.append((phase, epoch,
                          {n: params[n].data.copy() for n in params.names()}))

    summary = train(tiny_run, tiny_data, ckpt, log, epoch_callback=callback)
    return {"summary": summary, "ckpt": ckpt, "log": log, "snapshots": snapshots}


class TestTrainingRun:
    def test_summary_fields(self, tiny_result):
        s = tiny_result["summary"]
        assert s["epochs"] == 3
        assert 0.0 <= s["best_val_mAP"] <= 1.0
        assert s["checkpoint"] == tiny_result["ckpt"]

    def test_log_schema_and_bookkeeping(self, tiny_result, tiny_run):
        lines = [json.loads(x) for x in open(tiny_result["log"]) if x.strip()]
        assert len(lines) == 3
        keys = {"epoch", "phase", "l_r", "l_p", "l_l_object", "l_l_context",
                "total", "val_mAP"}
        for rec in lines:
            assert keys <= set(rec)
            want = (rec["l_r"] + tiny_run.alpha * rec["l_p"]
                    + tiny_run.beta * rec["l_l_object"]
                    + tiny_run.gamma * rec["l_l_context"])
            assert rec["total"] == pytest.approx(want, abs=1e-9)
        assert [r["phase"] for r in lines] == [0, 1, 2]

    def test_backbone_frozen_in_phase1_changes_in_phase2(self, tiny_result):
        by_phase = {phase: snap for phase, _, snap in tiny_result["snapshots"]}
        backbone = [n for n in by_phase[0] if n.startswith("stage")]
        assert backbone
        for n in backbone:
            assert np.array_equal(by_phase[0][n], by_phase[1][n]), n
        assert any(not np.array_equal(by_phase[1][n], by_phase[2][n]) for n in backbone)

    def test_checkpoint_loads_with_config(self, tiny_result):
        params, cfg = load_model(tiny_result["ckpt"])
        assert cfg.image_size == 64
        assert "stage0.w" in params.names()

    def test_rerun_is_deterministic(self, tiny_data, tiny_run, tmp_path):
        a = train(tiny_run, tiny_data, str(tmp_path / "a.ckpt"), str(tmp_path / "a.log"))
        b = train(tiny_run, tiny_data, str(tmp_path / "b.ckpt"), str(tmp_path / "b.log"))
        assert a["best_val_mAP"] == b["best_val_mAP"]
        ca = (tmp_path / "a.ckpt").read_bytes()
        cb = (tmp_path / "b.ckpt").read_bytes()
        assert ca == cb


class TestConfig:
    def test_spec_default_hyperparameters(self):
        run = RunConfig()
        assert (run.lr, run.momentum, run.weight_decay, run.batch_size) == \
            (0.002, 0.5, 0.01, 2)
        assert (run.alpha, run.beta, run.gamma) == (1.0, 1.0, 1.0)
        assert (run.pos_iou, run.neg_iou, run.nms_iou, run.label_threshold) == \
            (0.5, 0.3, 0.5, 0.5)
        assert run.epochs_phase0 + run.epochs_phase1 + run.epochs_phase2 <= 30
        assert run.image_size == 64 and run.seed == 42

    def test_unknown_config_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"learning_rate_typo": 1}')
        with pytest.raises(ValueError):
            RunConfig.from_file(str(path))

    def test_config_file_overrides(self, tmp_path):
        path = tmp_path / "ok.json"
        path.write_text('{"lr": 0.01, "top_k": 4}')
        run = RunConfig.from_file(str(path))
        assert run.lr == 0.01 and run.top_k == 4
        assert run.momentum == 0.5  # untouched default

    def test_image_size_416_accepted(self):
        run = RunConfig().with_overrides(image_size=416)
        assert run.backbone_config().image_size == 416
