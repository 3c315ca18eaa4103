import csv
import hashlib
import json

import numpy as np
import pytest

from egoexo.cli import main
from egoexo.experiment import ExperimentConfig
from egoexo.features import FeatureMatrix, FeatureStore
from egoexo.flow import FlowClip, write_flow_clip
from egoexo.synth import SynthConfig
from egoexo.training import TrainConfig


def tree(root):
    """{relative path: bytes}, with the wall-clock column stripped from epoch logs."""
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        rel = str(p.relative_to(root))
        data = p.read_bytes()
        if rel.startswith("logs/"):
            rows = list(csv.reader(data.decode().splitlines()))
            data = json.dumps([r[:3] for r in rows]).encode()
        out[rel] = data
    return out


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def config_file(tmp_path):
    cfg = ExperimentConfig(
        synth=SynthConfig(action_count=3, videos_per_action=6, clips_per_video=3, views=("side",), seed=2),
        directions=("ego2side", "side2ego"), models=("uniform", "ols", "reconstruction"),
        split_counts={"train": 10, "val": 4, "test": 4}, seed=2, train=TrainConfig(max_epochs=3, seed=2))
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


class TestPipeline:
    def test_run_report(self, tmp_path, config_file, capsys):
        code, out, _ = run(["run", "--config", config_file, "--out", tmp_path / "r"], capsys)
        assert code == 0
        code, table, _ = run(["report", tmp_path / "r"], capsys)
        lines = table.strip().splitlines()
        assert code == 0 and len(lines) == 5
        assert all(len(l.split(" | ")) == 7 for l in lines)
        assert lines[1].startswith("Ego-Side") and "-" in lines[3]
        manifest = json.loads((tmp_path / "r" / "run_manifest.json").read_text())
        assert manifest["command"] == "run" and manifest["seed"] == 2
        assert set(manifest["format_versions"]) == {"manifest", "feature_table", "flow_clip", "model"}
        assert "timestamp" not in json.dumps(manifest)

    def test_deterministic_runs(self, tmp_path, config_file, capsys):
        for name in ("a", "b"):
            assert run(["run", "--config", config_file, "--out", tmp_path / name], capsys)[0] == 0
        a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
        assert a.keys() == b.keys() and any(k.startswith("models/") for k in a)
        assert a == b

    def test_train_then_eval_matches_run(self, tmp_path, config_file, capsys):
        base = ["--config", config_file]
        assert run(["run", *base, "--out", tmp_path / "all"], capsys)[0] == 0
        assert run(["train", *base, "--out", tmp_path / "t"], capsys)[0] == 0
        assert run(["eval", *base, "--models", tmp_path / "t" / "models", "--out", tmp_path / "e"], capsys)[0] == 0
        for f in sorted((tmp_path / "all" / "cmc").iterdir()):
            assert f.read_bytes() == (tmp_path / "e" / "cmc" / f.name).read_bytes()
        assert (tmp_path / "t" / "logs" / "ego2side_reconstruction_phase1.csv").exists()

    def test_overrides(self, tmp_path, config_file, capsys):
        argv = ["run", "--config", config_file, "--model", "ols", "--direction", "ego2side",
                "--metric", "cosine", "--seed", "5", "--out", tmp_path / "o"]
        assert run(argv, capsys)[0] == 0
        assert [p.name for p in (tmp_path / "o" / "results").iterdir()] == ["ego2side_ols.json"]
        cfg = json.loads((tmp_path / "o" / "run_manifest.json").read_text())["config"]
        assert (cfg["metric"], cfg["seed"], cfg["train"]["seed"], cfg["synth"]["seed"]) == ("cosine", 5, 5, 5)

    def test_inputs_not_mutated(self, tmp_path, config_file, capsys):
        assert run(["synth", "--preset", "default", "--seed", "1", "--out", tmp_path / "d"], capsys)[0] == 0
        manifest = tmp_path / "d" / "manifest.json"
        before = digest(manifest), digest(config_file)
        assert run(["split", "--manifest", manifest, "--counts", "train=150,val=30,test=30",
                    "--out", tmp_path / "s"], capsys)[0] == 0
        assert run(["run", "--config", config_file, "--out", tmp_path / "r"], capsys)[0] == 0
        assert (digest(manifest), digest(config_file)) == before
        split = json.loads((tmp_path / "s" / "manifest.json").read_text())
        assert split != json.loads(manifest.read_text())


class TestFeatureCommands:
    def test_hoof_zero_flow(self, tmp_path, capsys):
        flows = tmp_path / "flows"
        flows.mkdir()
        zero = np.zeros((15, 6, 6))
        write_flow_clip(flows / "z_side.xvmf", FlowClip.from_arrays("z_side", zero, zero))
        assert run(["hoof", "--flows", flows, "--out", tmp_path / "f"], capsys)[0] == 0
        fm = FeatureStore(tmp_path / "f").load("all", "hoof32")
        assert fm.ids == ("z_side",)
        np.testing.assert_array_equal(fm.data, np.full((1, 32), 1 / 32))

    def test_synth_flows_then_hoof(self, tmp_path, capsys):
        cfg = tmp_path / "s.json"
        cfg.write_text(json.dumps(SynthConfig(action_count=2, videos_per_action=1, clips_per_video=1,
                                              flow_size=8, views=("side",)).to_dict()))
        assert run(["synth", "--level", "flows", "--config", cfg, "--out", tmp_path / "d"], capsys)[0] == 0
        assert run(["hoof", "--flows", tmp_path / "d" / "flows", "--out", tmp_path / "f"], capsys)[0] == 0
        fm = FeatureStore(tmp_path / "f").load("all", "hoof32")
        assert len(fm) == 4
        np.testing.assert_allclose(fm.data.sum(axis=1), 1.0, atol=1e-9)

    def test_pca_fit_apply(self, tmp_path, capsys, rng):
        ids = [f"c{i:03d}" for i in range(140)]
        FeatureStore(tmp_path / "raw").save("all", FeatureMatrix("c3d4096", ids, rng.normal(size=(140, 4096))))
        assert run(["pca", "fit", "--features", tmp_path / "raw", "--out", tmp_path / "p"], capsys)[0] == 0
        assert run(["pca", "apply", "--features", tmp_path / "raw", "--model", tmp_path / "p" / "pca.npz",
                    "--out", tmp_path / "red"], capsys)[0] == 0
        red = FeatureStore(tmp_path / "red").load("all", "c3d128")
        assert red.data.shape == (140, 128)
        # the reduced table is stored as float32
        np.testing.assert_allclose(red.data.mean(axis=0), 0.0, atol=1e-6)


class TestErrors:
    def _error(self, err):
        lines = err.strip().splitlines()
        assert len(lines) == 1
        return json.loads(lines[0])

    def test_usage(self, capsys):
        code, _, err = run(["frobnicate"], capsys)
        assert code == 2 and self._error(err)["error"] == "usage"

    def test_missing_flag(self, capsys):
        code, _, err = run(["split", "--manifest", "m.json"], capsys)
        assert code == 2 and self._error(err)["error"] == "usage"

    def test_bad_counts(self, tmp_path, capsys):
        code, _, err = run(["split", "--manifest", "m.json", "--counts", "train=x", "--out", tmp_path], capsys)
        doc = self._error(err)
        assert code == 2 and doc["command"] == "split" and "--counts" in doc["message"]

    def test_missing_config(self, tmp_path, capsys):
        code, _, err = run(["run", "--config", tmp_path / "nope.json", "--out", tmp_path / "o"], capsys)
        doc = self._error(err)
        assert code == 1 and doc["error"] == "runtime" and "nope.json" in doc["message"]

    def test_bad_json(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text("{\n  'seed': 1\n}")
        code, _, err = run(["train", "--config", bad, "--out", tmp_path / "o"], capsys)
        assert code == 1 and "line 2" in self._error(err)["message"]

    def test_missing_models(self, tmp_path, config_file, capsys):
        code, _, err = run(["eval", "--config", config_file, "--models", tmp_path / "none",
                            "--out", tmp_path / "o"], capsys)
        assert code == 1 and self._error(err)["command"] == "eval"

    def test_report_without_results(self, tmp_path, capsys):
        code, _, err = run(["report", tmp_path], capsys)
        assert code == 1 and self._error(err)["type"] == "FileNotFoundError"
