import json
import os

import pytest

from zsfuse.cli import MANIFEST, main

TINY = """\
scene:
  class_names: [road, car, person, truck, bicyclist]
  unseen: [3, 4]
  points_per_class: [6, 8]
  attr_channels: 2
  image_height: 12
  image_width: 16
  focal: 10.0
  embed_dim: 12
  image_only_pairs: [[3, 1], [4, 2]]
train:
  epochs: 2
  batch_size: 2
  dim: 16
  heads: 4
  td_hidden: 32
  precision: float64
"""


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    assert main(["generate", "--config", str(cfg), "--out", str(root / "data"), "--scenes", "3", "--seed", "4"]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


class TestGenerate:
    def test_empty_dataset(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path / "d"), "--scenes", "0"]) == 0
        manifest = json.loads((tmp_path / "d" / MANIFEST).read_text())
        assert manifest["scenes"] == []

    def test_manifest_and_rerun(self, tiny, tmp_path):
        manifest = json.loads((tiny / "data" / MANIFEST).read_text())
        assert len(manifest["scenes"]) == 3
        assert [e["seed"] for e in manifest["scenes"]] == [4, 5, 6]
        again = tmp_path / "again"
        assert main(["generate", "--config", str(tiny / "tiny.yaml"), "--out", str(again), "--scenes", "3",
                     "--seed", "4"]) == 0
        for e in manifest["scenes"]:
            assert (again / e["file"]).read_bytes() == (tiny / "data" / e["file"]).read_bytes()

    @pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
    def test_unwritable(self, tmp_path):
        locked = tmp_path / "locked"
        locked.mkdir(mode=0o500)
        assert main(["generate", "--out", str(locked / "d"), "--scenes", "1"]) != 0

    def test_out_is_a_file(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["generate", "--out", str(blocker / "d"), "--scenes", "1"]) == 2

    def test_unknown_config_key(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("train:\n  learning_rate: 1\n")
        assert main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d"), "--scenes", "0"]) == 2
        assert "learning_rate" in capsys.readouterr().err


class TestTrain:
    def test_outputs(self, tiny):
        lines = (tiny / "run" / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 2
        entry = json.loads(lines[-1])
        assert {"L", "L_s", "L_u", "config_hash"} <= set(entry)
        assert (tiny / "run" / "final.ckpt").is_file()
        assert (tiny / "run" / "config.yaml").read_text().startswith("# config_hash:")

    def test_invalid_ablation(self, tiny):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--data", str(tiny / "data"), "--out", str(tiny / "x"), "--ablation", "no_lidar"])
        assert exc.value.code == 2

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 2

    def test_tampered_scene(self, tiny, tmp_path):
        import shutil

        data = tmp_path / "data"
        shutil.copytree(tiny / "data", data)
        target = data / "scene_0001.zs3"
        blob = bytearray(target.read_bytes())
        blob[-1] ^= 1
        target.write_bytes(bytes(blob))
        assert main(["train", "--config", str(tiny / "tiny.yaml"), "--data", str(data), "--out",
                     str(tmp_path / "o")]) == 2

    def test_no_sgvf_dispatches_concat(self, tiny, tmp_path):
        from zsfuse.trainer import load_checkpoint

        out = tmp_path / "ns"
        assert main(["train", "--config", str(tiny / "tiny.yaml"), "--data", str(tiny / "data"), "--out", str(out),
                     "--ablation", "no_sgvf", "--train.epochs", "1"]) == 0
        model, _, cfg, _ = load_checkpoint(out / "final.ckpt")
        assert cfg.ablation == "no_sgvf" and model.sgvf.variant == "concat_baseline"
        assert model.sgvf.gate_mha_3d is None and model.sgvf.gate_mha_2d is None


class TestEval:
    def test_report(self, tiny, tmp_path):
        report = tmp_path / "r.txt"
        assert main(["eval", "--checkpoint", str(tiny / "run" / "final.ckpt"), "--data", str(tiny / "data"),
                     "--report", str(report)]) == 0
        text = report.read_text()
        for key in ("miou_seen", "miou_unseen", "miou_overall", "hiou"):
            assert key in text

    def test_oracle(self, tiny, tmp_path, capsys):
        assert main(["eval", "--oracle", "--data", str(tiny / "data"), "--report", str(tmp_path / "o.txt")]) == 0
        assert "hIoU 100.00" in capsys.readouterr().out

    def test_missing_checkpoint(self, tiny, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tiny / "data"),
                     "--report", str(tmp_path / "r.txt")]) == 2


class TestPredict:
    def test_one_line_per_point(self, tiny, tmp_path):
        from zsfuse.synthscene import load_scene

        scene = tiny / "data" / "scene_0000.zs3"
        out = tmp_path / "p.csv"
        assert main(["predict", "--checkpoint", str(tiny / "run" / "final.ckpt"), "--scene", str(scene),
                     "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# config_hash=") and lines[1] == "point,class_id,class_name"
        assert len(lines) - 2 == load_scene(scene).num_points


class TestPlot:
    def test_csv_and_svg(self, tiny, tmp_path):
        out, svg = tmp_path / "p.csv", tmp_path / "p.svg"
        assert main(["plot", "--checkpoint", str(tiny / "run" / "final.ckpt"), "--scene", str(tiny / "data"),
                     "--stage", "post_svfe", "--out", str(out), "--svg", str(svg)]) == 0
        assert out.read_text().splitlines()[1] == "class,kind,split,x,y"
        assert svg.is_file()

    def test_unknown_stage(self, tiny, tmp_path):
        assert main(["plot", "--checkpoint", str(tiny / "run" / "final.ckpt"), "--scene", str(tiny / "data"),
                     "--stage", "midway", "--out", str(tmp_path / "p.csv")]) == 2


class TestGradcheck:
    def test_fault_is_reported(self, capsys):
        assert main(["gradcheck", "--inject-fault", "softmax"]) == 1
        err = capsys.readouterr().err
        assert "tensor.softmax" in err and "tensor.add" not in err
