import json
import subprocess
import sys

import numpy as np
import pytest

from hypergale.cli import main
from hypergale.data import load_dataset
from hypergale.model import load_checkpoint

SMALL = {
    "synth": {"n_subjects": 24, "n_rois": 8, "n_timepoints": 40, "n_sites": 2, "block_size": 3, "seed": 3},
    "training": {"epochs": 2, "learning_rate": 0.01,
                 "hyper": {"k": 3, "hidden_dims": [6], "att_hidden": 4, "readout_dim": 5}},
}


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "run.json", SMALL)
    assert main(["synth", "--config", str(cfg), "--out", str(root / "synth")]) == 0
    data = root / "synth" / "dataset"
    assert main(["train", "--config", str(cfg), "--dataset", str(data), "--out", str(root / "train")]) == 0
    return root, cfg, data


def test_gradcheck_passes(tmp_path):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "gradcheck.json").read_text())
    assert doc["passed"] and doc["max_rel_error"] < 1e-4
    assert set(doc["header"]) == {"command", "config_hash", "seed", "version", "overrides"}


@pytest.mark.parametrize("argv", [[], ["fit"], ["train", "--bogus"], ["train", "--readout", "sum"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


@pytest.mark.parametrize("command, cfg", [
    ("cv", {"training": {"epochz": 3}}),
    ("cv", {"trainer": {}}),
    ("cv", {"training": {"hyper": {"depth": 2}}}),
    ("cv", {"training": {"learning_rate": -1.0}}),
    ("cv", {"cv": {"folds": "many"}}),
    ("synth", {"synth": {"n_rois": 8, "block_size": 20}}),
    ("gradcheck", {"gradcheck": {"readout": "sum"}}),
])
def test_strict_config(tmp_path, command, cfg, pipeline):
    _, _, data = pipeline
    path = write_config(tmp_path / "bad.json", cfg)
    assert main([command, "--config", str(path), "--dataset", str(data), "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o" / "cv_report.json").exists()


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 1


def test_missing_dataset_is_config_error(tmp_path):
    assert main(["cv", "--dataset", str(tmp_path / "nope"), "--out", str(tmp_path)]) == 1


def test_synth_outputs(pipeline):
    root, _, data = pipeline
    recs = load_dataset(data)
    assert len(recs) == 24 and recs[0].n_rois == 8
    doc = json.loads((root / "synth" / "synth.json").read_text())
    assert len(doc["planted_block"]) == 3 and doc["header"]["seed"] == 3


def test_train_outputs(pipeline):
    root, _, _ = pipeline
    params, hyper = load_checkpoint(root / "train" / "model.hgal")
    assert hyper.k == 3 and params.raw_edge_weights.shape == (8, 1)
    history = (root / "train" / "history.csv").read_text().splitlines()
    assert history[0].startswith("# config_hash=") and len(history) == 2 + 2


def test_eval_and_interpret(pipeline, tmp_path):
    root, cfg, data = pipeline
    ckpt = root / "train" / "model.hgal"
    assert main(["eval", "--checkpoint", str(ckpt), "--dataset", str(data), "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "eval.json").read_text())
    assert len(doc["per_subject"]) == 24 and 0 <= doc["metrics"]["accuracy"] <= 1
    cfg2 = write_config(tmp_path / "i.json", {"interpret": {"top_n": 4, "group_by": "label"}})
    out = tmp_path / "interp"
    assert main(["interpret", "--config", str(cfg2), "--checkpoint", str(ckpt), "--dataset", str(data),
                 "--out", str(out)]) == 0
    lines = (out / "roi_ranking.csv").read_text().splitlines()
    assert len(lines) == 2 + 2 * 4
    assert sorted(p.name for p in out.glob("hyperedge_*.csv")) == ["hyperedge_ASD-label.csv", "hyperedge_TD-label.csv"]


def test_override_changes_hash(pipeline, tmp_path):
    root, cfg, data = pipeline
    for sub, extra in (("a", []), ("b", ["--k", "4"])):
        assert main(["cv", "--config", str(cfg), "--dataset", str(data), "--out", str(tmp_path / sub)] + extra) == 0
    a = json.loads((tmp_path / "a" / "cv_report.json").read_text())
    b = json.loads((tmp_path / "b" / "cv_report.json").read_text())
    assert a["header"]["config_hash"] != b["header"]["config_hash"]
    assert b["header"]["overrides"] == {"k": 4, "dataset": str(data)}
    assert b["config"]["hyper"]["k"] == 4 and len(a["folds"]) == 5


def test_corrupted_checkpoint_exit_2(pipeline, tmp_path):
    root, _, data = pipeline
    bad = tmp_path / "bad.hgal"
    raw = (root / "train" / "model.hgal").read_bytes()
    bad.write_bytes(b"XXXX" + raw[4:])
    assert main(["eval", "--checkpoint", str(bad), "--dataset", str(data), "--out", str(tmp_path)]) == 2


def test_import_ts(tmp_path):
    rng = np.random.default_rng(0)
    subjects = []
    for i in range(4):
        path = tmp_path / f"s{i}.csv"
        ts = rng.normal(size=(30, 5))
        path.write_text("a,b,c,d,e\n" + "\n".join(",".join(repr(float(v)) for v in row) for row in ts))
        subjects.append({"subject_id": f"s{i}", "site_id": "x", "label": i % 2, "csv_path": str(path)})
    cfg = write_config(tmp_path / "imp.json", {"import_ts": {"subjects": subjects, "estimator": "ledoit_wolf"}})
    assert main(["import-ts", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    recs = load_dataset(tmp_path / "o" / "dataset")
    assert [r.subject_id for r in recs] == ["s0", "s1", "s2", "s3"]
    assert (tmp_path / "o" / "dataset" / "names.txt").read_text().split() == list("abcde")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hypergale", "nonsense"], capture_output=True, text=True)
    assert proc.returncode == 1
    proc = subprocess.run(["hypergale", "gradcheck", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
