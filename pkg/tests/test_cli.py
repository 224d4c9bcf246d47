import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from siamdamage.analysis import xbd_folds
from siamdamage.cli import RunConfig, load_run_config, main
from siamdamage.scene_data import (
    DatasetManifest,
    load_manifest,
    rasterize_annotations,
    save_manifest,
    synthetic_dataset,
    write_scene_files,
)

TINY = {
    "network": {"side": 32, "widths": [4, 8]},
    "train": {"stage1_epochs": 1, "stage2_epochs": 1, "fine_tune_epochs": 1, "batch_size": 4},
}


def synth(out, *extra):
    return main(["synth", "--seed", "42", "--scenes", "8", "--side", "32", "--buildings", "2",
                 "--building-size", "6,10", "--events", "2", "--out", str(out), *extra])


def write_config(path, **fields):
    path.write_text(json.dumps({**TINY, **fields}))
    return path


def tree_bytes(root):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(Path(root).rglob("*"))
        if p.is_file() and p.name != "run.log"
    }


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert synth(root / "data") == 0
    cfg = write_config(root / "run.json", manifest="data/manifest.json", output_dir="out", ensemble_seeds=[0, 1])
    assert main(["train", "--config", str(cfg)]) == 0
    return root, cfg


class TestSynth:
    def test_byte_identical_reruns(self, tmp_path):
        assert synth(tmp_path / "a") == 0
        assert synth(tmp_path / "b") == 0
        a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
        assert a == b and "manifest.json" in a and "provenance_synth.json" in a

    def test_zero_scenes(self, tmp_path):
        code = main(["synth", "--scenes", "0", "--out", str(tmp_path)])
        assert code == 0
        assert len(load_manifest(tmp_path / "manifest.json")) == 0

    def test_masks_agree_with_rasterization(self, tmp_path):
        assert synth(tmp_path) == 0
        manifest = load_manifest(tmp_path / "manifest.json")
        assert {r.split for r in manifest.records} == {"train", "test"}
        for scene in manifest.load_scenes():
            grades = rasterize_annotations(scene)[0].grade_map()
            assert np.array_equal(grades, scene.label_mask)

    def test_bad_building_size(self, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["synth", "--building-size", "9", "--out", str(tmp_path)])
        assert info.value.code == 2


class TestConfig:
    def test_field_level_errors_exit_2(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"manifest": "missing.json", "output_dir": "o", "train": {"lr": -1}, "bogus": 1}))
        assert main(["eval", "--config", str(cfg)]) == 2
        err = capsys.readouterr().err
        assert "bogus: unknown field" in err

    def test_section_errors_are_named(self, tmp_path):
        synth(tmp_path / "d")
        cfg = write_config(tmp_path / "c.json", manifest="d/manifest.json", output_dir="o")
        doc = json.loads(cfg.read_text())
        doc["train"]["lr"] = -1
        doc["scheme"] = "coarse"
        cfg.write_text(json.dumps(doc))
        with pytest.raises(ValueError) as info:
            load_run_config(cfg)
        assert "train:" in str(info.value) and "scheme:" in str(info.value)

    def test_missing_config_file(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.json")]) == 2

    def test_digest_is_stable_and_sensitive(self, tmp_path):
        synth(tmp_path / "d")
        cfg = write_config(tmp_path / "c.json", manifest="d/manifest.json", output_dir="o")
        a, b = load_run_config(cfg), load_run_config(cfg)
        assert a.digest() == b.digest()
        b.seed = 5
        assert a.digest() != b.digest()

    def test_runtime_failure_exit_1(self, tmp_path):
        synth(tmp_path / "d")
        cfg = write_config(tmp_path / "c.json", manifest="d/manifest.json", output_dir="o",
                           network={"side": 64, "widths": [4, 8]}, checkpoints=[])
        # a 64-px network cannot consume 32-px scenes
        assert main(["train", "--config", str(cfg)]) == 1


class TestPipeline:
    def test_oracle_eval_is_perfect(self, trained):
        root, cfg = trained
        assert main(["eval", "--config", str(cfg), "--oracle"]) == 0
        report = json.loads((root / "out" / "report.json").read_text())
        assert report["F1_loc"]["f1"] == 1.0
        assert report["F1_cls"] == 1.0 and report["score"] == 1.0

    def test_eval_writes_report_and_confusion(self, trained):
        root, cfg = trained
        assert main(["eval", "--config", str(cfg)]) == 0
        assert (root / "out" / "confusion.csv").read_text().startswith("truth\\pred,missed")
        prov = json.loads((root / "out" / "provenance_eval.json").read_text())
        assert prov["config_digest"] == load_run_config(cfg).digest()

    def test_asymmetric_sweep_rows(self, trained):
        root, cfg = trained
        assert main(["sweep", "--config", str(cfg), "--mode", "asymmetric", "--jobs", "2"]) == 0
        rows = list(csv.DictReader(open(root / "out" / "sweep_asymmetric.csv")))
        assert list(rows[0]) == ["r_pre", "r_post", "metric", "value"]
        per_metric = {}
        for r in rows:
            per_metric[r["metric"]] = per_metric.get(r["metric"], 0) + 1
        assert set(per_metric.values()) == {49}

    def test_symmetric_sweep_custom_schedule(self, trained):
        root, cfg = trained
        assert main(["sweep", "--config", str(cfg), "--resolutions", "0.5,2,10"]) == 0
        rows = list(csv.DictReader(open(root / "out" / "sweep_symmetric.csv")))
        assert sorted({r["r_pre"] for r in rows}) == ["0.5", "10.0", "2.0"]

    def test_bad_schedule_exit_2(self, trained):
        _, cfg = trained
        assert main(["sweep", "--config", str(cfg), "--resolutions", "2,1"]) == 2

    def test_adapt_curve(self, trained):
        root, cfg = trained
        assert main(["adapt", "--config", str(cfg), "--share", "0,0.5", "--scheme", "ahr"]) == 0
        rows = list(csv.DictReader(open(root / "out" / "adaptation.csv")))
        assert {r["s"] for r in rows} == {"0.0", "0.5"}
        assert all(float(r["A"]) == 0.0 for r in rows if r["s"] == "0.0")
        assert "F1_C2/3" in {r["metric"] for r in rows}

    def test_train_is_reproducible(self, trained, tmp_path):
        root, _ = trained
        cfg = write_config(tmp_path / "again.json", manifest=str(root / "data" / "manifest.json"),
                           output_dir=str(tmp_path / "out"), ensemble_seeds=[0, 1])
        assert main(["train", "--config", str(cfg)]) == 0
        for name in ("model_seed0.ckpt", "model_seed1.ckpt", "trace_seed0.csv"):
            assert (tmp_path / "out" / name).read_bytes() == (root / "out" / name).read_bytes()


def test_folds_with_bundled_spec(tmp_path):
    events = [e for fold in xbd_folds().folds.values() for e in fold] + ["hurricane-extra"]
    scenes = []
    for i, event in enumerate(events):
        s = synthetic_dataset(1, seed=i, side=32, n_buildings=2, size_range=(6, 10), event_prefix=event)[0]
        scenes.append(s.__class__(**{**s.__dict__, "event_id": event}))
    recs = [write_scene_files(s, tmp_path / "data", f"s{i}") for i, s in enumerate(scenes)]
    save_manifest(DatasetManifest(recs), tmp_path / "data" / "manifest.json")
    cfg = write_config(tmp_path / "run.json", manifest="data/manifest.json", output_dir="out")
    assert main(["folds", "--config", str(cfg)]) == 0
    doc = json.loads((tmp_path / "out" / "folds.json").read_text())
    assert [f["fold"] for f in doc["folds"]] == ["fold1", "fold2", "fold3", "average"]
    for entry in doc["log"]:
        assert not set(entry["train_events"]) & set(entry["test_events"])


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "siamdamage", "synth", "--scenes", "1", "--side", "32",
                           "--buildings", "1", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "manifest.json").is_file()
