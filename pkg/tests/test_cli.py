import json

import pytest

from sf2former.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_USAGE, main
from sf2former.config import ConfigError, apply_overrides, load_run_config, parse_config_text, preset

TINY = """\
# 8x8 slices, one block per branch
image_size=8
patch_size=4
vit.embed_dim=8
vit.depth=1
vit.heads=2
gfnet.embed_dim=8
gfnet.depth=1
epochs=2
batch_size=8
span=110:114
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    assert main(["phantom", "--out", str(root / "ph"), "--subjects", "10", "--centers", "2",
                 "--shape", "16,140,16"]) == 0
    return root


def args(ws, *extra):
    return ["--config", str(ws / "tiny.cfg"), "--manifest", str(ws / "ph" / "manifest.csv"), *extra]


class TestConfig:
    def test_parse_comments_and_blanks(self):
        assert parse_config_text("a=1  # note\n\n b = x \n") == {"a": "1", "b": "x"}

    def test_malformed_line(self):
        with pytest.raises(ConfigError, match=":2:"):
            parse_config_text("a=1\nbroken\n")

    def test_precedence(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs=7\nlr_max=0.5\n")
        cfg = load_run_config(path, "toy", {"epochs": "3"})
        assert cfg.train.epochs == 3 and cfg.train.lr_max == 0.5

    def test_presets(self):
        full = preset("full")
        assert full.model.fusion_width == 1280
        assert (full.train.epochs, full.train.lr_max, full.train.batch_size) == (150, 1e-3, 16)
        toy = preset("toy")
        assert toy.model.image_size == 32 and toy.model.vit.patch_size == 8 and toy.train.epochs == 30

    def test_shared_geometry_and_types(self):
        cfg = apply_overrides(preset("toy"), {"image_size": "16", "patch_size": "4", "augment": "no",
                                              "span": "100:102"})
        assert cfg.model.vit.image_size == cfg.model.gfnet.image_size == 16
        assert cfg.train.augment is False and cfg.slice_span == (100, 102)

    @pytest.mark.parametrize("values", [{"nope": "1"}, {"epochs": "many"}, {"augment": "maybe"},
                                        {"vit.heads": "3"}, {"span": "9:2"}])
    def test_bad_values(self, values):
        with pytest.raises(ConfigError):
            apply_overrides(preset("toy"), values)


class TestCommands:
    def test_split_train_eval_predict(self, workspace, tmp_path, capsys):
        plan = tmp_path / "plan.json"
        assert main(["split", *args(workspace), "--out", str(plan)]) == 0
        ck = tmp_path / "ck.sf2f"
        assert main(["train", *args(workspace), "--plan", str(plan), "--fold", "0", "--out", str(ck)]) == 0
        assert ck.read_bytes()[:4] == b"SF2F"
        ev = tmp_path / "ev.json"
        assert main(["eval", *args(workspace), "--plan", str(plan), "--fold", "0",
                     "--checkpoint", str(ck), "--out", str(ev)]) == 0
        report = json.loads(ev.read_text())
        test_ids = json.loads(plan.read_text())["folds"][0]["test"]
        assert sorted(s["subject_id"] for s in report["subjects"]) == sorted(test_ids)
        capsys.readouterr()
        assert main(["predict", "--config", str(workspace / "tiny.cfg"), "--checkpoint", str(ck),
                     "--volume", str(workspace / "ph" / "sub-000.rvol")]) == 0
        pred = json.loads(capsys.readouterr().out)
        assert pred["label"] in ("patient", "control")
        assert [s["index"] for s in pred["slices"]] == list(range(110, 115))
        assert pred["n_patient"] + pred["n_control"] == 5

    def test_eval_matches_training_fold(self, workspace, tmp_path):
        # the model trained by `train` scores like the same fold inside `cv`
        ck = tmp_path / "ck.sf2f"
        assert main(["train", *args(workspace), "--fold", "2", "--out", str(ck)]) == 0
        assert main(["eval", *args(workspace), "--fold", "2", "--checkpoint", str(ck),
                     "--out", str(tmp_path / "ev.json")]) == 0
        assert main(["cv", *args(workspace), "--out", str(tmp_path / "cv")]) == 0
        ev = json.loads((tmp_path / "ev.json").read_text())
        cv = json.loads((tmp_path / "cv" / "cv_report.json").read_text())
        assert ev["subjects"] == cv["folds"][2]["subjects"]

    def test_cv_deterministic_and_flags_echoed(self, workspace, tmp_path):
        for name in ("a", "b"):
            assert main(["cv", *args(workspace), "--seed", "4", "--no-augment", "--branch", "vit",
                         "--out", str(tmp_path / name)]) == 0
        a = (tmp_path / "a" / "cv_report.json").read_bytes()
        assert a == (tmp_path / "b" / "cv_report.json").read_bytes()
        cfg = json.loads(a)["config"]
        assert cfg["train"]["augment"] is False and cfg["model"]["branch"] == "vit"
        assert cfg["fold_seed"] == 4 and cfg["train"]["seed"] == 4

    def test_sweep_table(self, workspace, tmp_path):
        assert main(["sweep", *args(workspace), "--spans", "112:114,110:110", "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "sweep_metrics.csv").read_text().splitlines()
        assert [ln.split(",")[0] for ln in lines[1:]] == ["112:114", "110:110"]

    def test_prepare_roundtrip(self, workspace, tmp_path):
        assert main(["prepare", "--manifest", str(workspace / "ph" / "manifest.csv"), "--out", str(tmp_path)]) == 0
        text = (tmp_path / "manifest.csv").read_text().splitlines()
        assert text[0] == "subject_id,label,center,modality,path" and len(text) == 11


class TestExitCodes:
    def test_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["cv", "--no-such-flag"])
        assert exc.value.code == EXIT_USAGE
        assert main(["cv", "--set", "nokey=1", "--phantom", "10"]) == EXIT_USAGE
        assert main(["cv"]) == EXIT_USAGE
        assert main(["split", "--phantom", "ten"]) == EXIT_USAGE

    def test_data_errors(self, workspace, tmp_path):
        assert main(["cv", "--manifest", str(tmp_path / "missing.csv")]) == EXIT_DATA
        bad = tmp_path / "bad.csv"
        bad.write_text("subject,label\nx,y\n")
        assert main(["split", "--manifest", str(bad)]) == EXIT_DATA
        junk = tmp_path / "junk.sf2f"
        junk.write_bytes(b"NOPE")
        assert main(["predict", "--checkpoint", str(junk), "--volume",
                     str(workspace / "ph" / "sub-000.rvol")]) == EXIT_DATA

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_failure(self, workspace, capsys):
        code = main(["cv", *args(workspace), "--set", "lr_max=1e30", "--set", "lr_min=1e29"])
        assert code == EXIT_NUMERIC
        assert "step" in capsys.readouterr().err
