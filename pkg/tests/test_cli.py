import json

import numpy as np
import pytest

from apamnet.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, torch_threads):
    """One shared gen-synth/gen-priors/gen-roi/train chain for fast CLI tests."""
    ws = tmp_path_factory.mktemp("cli")
    data = ws / "data"
    assert (
        main(["gen-synth", "--out", str(data), "--n-images", "30", "--seed", "13"]) == 0
    )
    assert (
        main(
            [
                "gen-priors",
                "--bbox",
                str(data / "bboxes.csv"),
                "--classes",
                str(data / "classes.txt"),
                "--out",
                str(ws / "priors"),
                "--resolution",
                "256",
            ]
        )
        == 0
    )
    assert (
        main(["gen-roi", "--images", str(data / "images"), "--out", str(ws / "rois")])
        == 0
    )
    cfg = {
        "backbone": "toy_cnn",
        "fpn": "none",
        "attention": "prior_and_roi",
        "n_classes": 4,
        "batch_size": 8,
        "epochs": 1,
        "seed": 0,
    }
    (ws / "cfg.json").write_text(json.dumps(cfg))
    assert (
        main(
            [
                "train",
                "--config",
                str(ws / "cfg.json"),
                "--data",
                str(data),
                "--priors",
                str(ws / "priors"),
                "--roi",
                str(ws / "rois"),
                "--out",
                str(ws / "run"),
            ]
        )
        == 0
    )
    return ws


class TestGenSynth:
    def test_writes_expected_layout(self, workspace):
        data = workspace / "data"
        for name in ("classes.txt", "labels.csv", "bboxes.csv", "meta.json", "run_manifest.json"):
            assert (data / name).is_file()
        assert len(list((data / "images").glob("*.png"))) == 30


class TestGenPriors:
    def test_manifest_and_pngs(self, workspace):
        priors = workspace / "priors"
        manifest = json.loads((priors / "manifest.json").read_text())
        assert manifest["resolution"] == [256, 256]
        assert len(manifest["classes"]) == 4
        for entry in manifest["classes"]:
            assert (priors / entry["file"]).is_file()

    def test_missing_bbox_file_exits_2(self, tmp_path):
        (tmp_path / "classes.txt").write_text("A\n")
        rc = main(
            [
                "gen-priors",
                "--bbox",
                str(tmp_path / "nope.csv"),
                "--classes",
                str(tmp_path / "classes.txt"),
                "--out",
                str(tmp_path / "out"),
            ]
        )
        assert rc == 2

    def test_empty_bbox_csv_warns_and_writes_uniform(self, tmp_path, capsys):
        (tmp_path / "classes.txt").write_text("A\nB\n")
        (tmp_path / "bb.csv").write_text("Image Index,Finding Label,Bbox [x,y,w,h]\n")
        rc = main(
            [
                "gen-priors",
                "--bbox",
                str(tmp_path / "bb.csv"),
                "--classes",
                str(tmp_path / "classes.txt"),
                "--out",
                str(tmp_path / "out"),
                "--resolution",
                "32",
            ]
        )
        assert rc == 0
        assert "uniform" in capsys.readouterr().err.lower()
        from apamnet.priors import load_prior_maps

        loaded = load_prior_maps(tmp_path / "out")
        for pm in loaded.maps:
            assert np.allclose(pm.map, 1.0)


class TestGenRoi:
    def test_masks_cover_every_image(self, workspace):
        rois = list((workspace / "rois").glob("*.png"))
        assert len(rois) == 30

    def test_masks_are_binary_at_source_resolution(self, workspace):
        from PIL import Image

        arr = np.asarray(Image.open(next((workspace / "rois").glob("*.png"))))
        assert arr.shape == (256, 256)
        assert set(np.unique(arr)) <= {0, 255}

    def test_bad_image_dir_exits_2(self, tmp_path):
        rc = main(["gen-roi", "--images", str(tmp_path / "nope"), "--out", str(tmp_path / "o")])
        assert rc == 2


class TestTrain:
    def test_run_artifacts(self, workspace):
        run = workspace / "run"
        for name in ("best.ckpt", "last.ckpt", "train_log.csv", "run_manifest.json"):
            assert (run / name).is_file()
        manifest = json.loads((run / "run_manifest.json").read_text())
        assert manifest["subcommand"] == "train"
        assert manifest["config"]["model"]["attention"] == "prior_and_roi"

    def test_unknown_config_key_exits_2(self, workspace, tmp_path):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"learning_rate": 1}))
        rc = main(
            [
                "train",
                "--config",
                str(cfg),
                "--data",
                str(workspace / "data"),
                "--out",
                str(tmp_path / "run"),
            ]
        )
        assert rc == 2

    def test_missing_priors_for_prior_mode_fails(self, workspace, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(
            json.dumps(
                {"backbone": "toy_cnn", "attention": "prior_only", "n_classes": 4, "epochs": 1}
            )
        )
        rc = main(
            [
                "train",
                "--config",
                str(cfg),
                "--data",
                str(workspace / "data"),
                "--out",
                str(tmp_path / "run"),
            ]
        )
        assert rc == 1


class TestEval:
    def test_cls_and_loc_reports(self, workspace, tmp_path):
        rc = main(
            [
                "eval",
                "--checkpoint",
                str(workspace / "run" / "best.ckpt"),
                "--data",
                str(workspace / "data"),
                "--priors",
                str(workspace / "priors"),
                "--roi",
                str(workspace / "rois"),
                "--mode",
                "both",
                "--split",
                "test",
                "--out",
                str(tmp_path / "report"),
            ]
        )
        assert rc == 0
        report = json.loads((tmp_path / "report" / "report.json").read_text())
        assert "mean_auc" in report
        assert set(report["localization"]) == {"0.1", "0.3"}
        assert (tmp_path / "report" / "report.txt").is_file()

    def test_custom_thresholds(self, workspace, tmp_path):
        rc = main(
            [
                "eval",
                "--checkpoint",
                str(workspace / "run" / "best.ckpt"),
                "--data",
                str(workspace / "data"),
                "--priors",
                str(workspace / "priors"),
                "--roi",
                str(workspace / "rois"),
                "--mode",
                "loc",
                "--iou-thresholds",
                "0.25,0.5",
                "--out",
                str(tmp_path / "report"),
            ]
        )
        assert rc == 0
        report = json.loads((tmp_path / "report" / "report.json").read_text())
        assert set(report["localization"]) == {"0.25", "0.5"}

    def test_bad_checkpoint_exits_1(self, workspace, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"junk")
        rc = main(
            [
                "eval",
                "--checkpoint",
                str(bad),
                "--data",
                str(workspace / "data"),
                "--out",
                str(tmp_path / "r"),
            ]
        )
        assert rc == 1


class TestRender:
    def test_overlays_written(self, workspace, tmp_path):
        data = workspace / "data"
        ids = "synth_00000.png,synth_00001.png"
        rc = main(
            [
                "render",
                "--checkpoint",
                str(workspace / "run" / "best.ckpt"),
                "--data",
                str(data),
                "--priors",
                str(workspace / "priors"),
                "--roi",
                str(workspace / "rois"),
                "--images",
                ids,
                "--out",
                str(tmp_path / "vis"),
            ]
        )
        assert rc == 0
        assert len(list((tmp_path / "vis").glob("*.png"))) >= 2

    def test_all_unknown_images_exit_1(self, workspace, tmp_path):
        rc = main(
            [
                "render",
                "--checkpoint",
                str(workspace / "run" / "best.ckpt"),
                "--data",
                str(workspace / "data"),
                "--priors",
                str(workspace / "priors"),
                "--roi",
                str(workspace / "rois"),
                "--images",
                "missing.png",
                "--out",
                str(tmp_path / "vis"),
            ]
        )
        assert rc == 1

    def test_id_file_input(self, workspace, tmp_path):
        listing = tmp_path / "ids.txt"
        listing.write_text("synth_00002.png\n")
        rc = main(
            [
                "render",
                "--checkpoint",
                str(workspace / "run" / "best.ckpt"),
                "--data",
                str(workspace / "data"),
                "--priors",
                str(workspace / "priors"),
                "--roi",
                str(workspace / "rois"),
                "--images",
                f"@{listing}",
                "--out",
                str(tmp_path / "vis"),
            ]
        )
        assert rc == 0
