import csv
import json
import subprocess
import sys

import pytest

from nilmfed.cli import ConfigError, main, resolve_config
from nilmfed.data import read_household

TINY = {
    "version": 1,
    "seed": 3,
    "synth": {"length": 1500},
    "stride": 4,
    "train": {"epochs": 1},
    "retrain": {"epochs": 1},
    "adapt": {"epochs": 1},
    "grid": {"epochs": 1},
    "coral": {"source_cache": 128},
    "fed": {"clients": 2, "rounds": 1, "client_length": 900},
}


def write_config(tmp_path, name="run.json", **overrides):
    doc = json.loads(json.dumps(TINY))
    doc.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def run(*args):
    return main([str(a) for a in args])


class TestConfig:
    def test_defaults_fill_in(self):
        cfg = resolve_config({"seed": 1})
        assert cfg["window"] == 99 and cfg["prune_fraction"] == 0.6 and cfg["fed"]["rounds"] == 3

    def test_unknown_field_named(self):
        with pytest.raises(ConfigError, match="'train.epoch'"):
            resolve_config({"seed": 1, "train": {"epoch": 2}})

    def test_unknown_top_level(self):
        with pytest.raises(ConfigError, match="'colour'"):
            resolve_config({"seed": 1, "colour": "red"})

    @pytest.mark.parametrize("w", [98, 100, 250])
    def test_window_restricted(self, w):
        with pytest.raises(ConfigError, match="window"):
            resolve_config({"seed": 1, "window": w})

    def test_seed_required(self):
        with pytest.raises(ConfigError, match="seed"):
            resolve_config({})

    def test_seed_range(self):
        with pytest.raises(ConfigError, match="seed"):
            resolve_config({"seed": 2**64})
        assert resolve_config({"seed": 2**64 - 1})["seed"] == 2**64 - 1

    def test_type_checked(self):
        with pytest.raises(ConfigError, match="'train.epochs'"):
            resolve_config({"seed": 1, "train": {"epochs": 1.5}})

    def test_invalid_value_names_section(self):
        with pytest.raises(ConfigError, match="'coral'"):
            resolve_config({"seed": 1, "coral": {"lam": -1.0}})

    def test_version_checked(self):
        with pytest.raises(ConfigError, match="version"):
            resolve_config({"seed": 1, "version": 2})

    def test_manifest_accepted(self):
        cfg = resolve_config({"seed": 5})
        assert resolve_config({"manifest_version": 1, "config": cfg}) == cfg


class TestExitCodes:
    def test_bad_field_exit_code(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"version": 1, "seed": 1, "fed": {"round": 2}}))
        assert run("fed", "--config", bad, "--out", tmp_path / "o") == 2
        assert "fed.round" in capsys.readouterr().err

    def test_model_required(self, tmp_path, capsys):
        assert run("eval", "--config", write_config(tmp_path), "--out", tmp_path / "o") == 2
        assert "'model'" in capsys.readouterr().err

    def test_console_script_entry(self, tmp_path):
        res = subprocess.run([sys.executable, "-m", "nilmfed.cli", "--help"], capture_output=True, text=True)
        assert res.returncode == 0
        for name in ("synth", "train-cloud", "compress", "adapt", "grid", "fed", "eval"):
            assert name in res.stdout


class TestCommands:
    def test_synth_households(self, tmp_path):
        assert run("synth", "--config", write_config(tmp_path), "--out", tmp_path / "s") == 0
        mains, apps, names = read_household(tmp_path / "s" / "target" / "manifest.json")
        assert len(mains) == 1500 and names == ["fridge", "washer"]
        manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
        assert manifest["seed"] == 3 and manifest["command"] == "synth"
        assert "cloud/mains.csv" in manifest["outputs"]

    def test_seed_flag_overrides(self, tmp_path):
        run("synth", "--config", write_config(tmp_path), "--seed", 11, "--out", tmp_path / "s")
        assert json.loads((tmp_path / "s" / "manifest.json").read_text())["config"]["seed"] == 11

    def test_seed_flag_before_subcommand(self, tmp_path):
        run("--seed", 12, "synth", "--config", write_config(tmp_path), "--out", tmp_path / "s")
        assert json.loads((tmp_path / "s" / "manifest.json").read_text())["seed"] == 12

    def test_train_from_files_equals_in_memory(self, tmp_path):
        cfg = write_config(tmp_path)
        run("synth", "--config", cfg, "--out", tmp_path / "s")
        data = {role: f"s/{role}/manifest.json" for role in ("cloud", "heldout", "target")}
        from_files = write_config(tmp_path, "files.json", data=data)
        run("train-cloud", "--config", cfg, "--out", tmp_path / "a")
        run("train-cloud", "--config", from_files, "--out", tmp_path / "b")
        assert (tmp_path / "a" / "model.bin").read_bytes() == (tmp_path / "b" / "model.bin").read_bytes()
        report = json.loads((tmp_path / "a" / "train_report.json").read_text())
        assert report["param_count"] == 3_624_474

    def test_compress_adapt_grid_eval(self, tmp_path):
        cfg = write_config(tmp_path)
        assert run("compress", "--config", cfg, "--out", tmp_path / "c") == 0
        prune = json.loads((tmp_path / "c" / "prune_report.json").read_text())
        assert prune["filters_after"] == [12, 12, 16, 20, 20]

        with_model = write_config(tmp_path, "m.json", model="c/model.bin")
        assert run("adapt", "--config", with_model, "--out", tmp_path / "a") == 0
        adapt = json.loads((tmp_path / "a" / "adapt_report.json").read_text())
        assert set(adapt) >= {"before", "after", "mae_reduction", "history"}

        assert run("grid", "--config", with_model, "--out", tmp_path / "g") == 0
        with open(tmp_path / "g" / "grid.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 14
        assert {r["mode"] for r in rows} == {"fixed", "fine-tuned"}

        assert run("eval", "--config", with_model, "--out", tmp_path / "e") == 0
        metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
        assert [a["name"] for a in metrics["appliances"]] == ["fridge", "washer"]

    def test_fed_zero_rounds(self, tmp_path):
        cfg = write_config(tmp_path, fed={"clients": 2, "rounds": 0, "client_length": 900})
        assert run("fed", "--config", cfg, "--out", tmp_path / "f") == 0
        out = tmp_path / "f"
        assert (out / "global_round0.bin").exists() and (out / "bootstrap_report.json").exists()
        assert not (out / "global_round1.bin").exists()
        assert (out / "rounds.jsonl").read_text() == ""

    def test_fed_rerun_from_manifest(self, tmp_path):
        assert run("fed", "--config", write_config(tmp_path), "--out", tmp_path / "r1") == 0
        assert run("fed", "--config", tmp_path / "r1" / "manifest.json", "--out", tmp_path / "r2") == 0
        bins = sorted(p.name for p in (tmp_path / "r1").glob("*.bin"))
        assert bins == ["global_round0.bin", "global_round1.bin", "model.bin"]
        for name in bins:
            assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
        lines = (tmp_path / "r1" / "rounds.jsonl").read_text().splitlines()
        assert len(lines) == 1 and json.loads(lines[0])["round"] == 1

    def test_fed_from_client_manifests(self, tmp_path):
        cfg = write_config(tmp_path)
        run("synth", "--config", cfg, "--out", tmp_path / "s")
        clients = {"home": "s/target/manifest.json", "flat": "s/heldout/manifest.json"}
        fed_cfg = write_config(tmp_path, "fed.json", data={"clients": clients})
        assert run("fed", "--config", fed_cfg, "--out", tmp_path / "f") == 0
        report = json.loads((tmp_path / "f" / "rounds.jsonl").read_text().splitlines()[0])
        assert sorted(c["client_id"] for c in report["clients"]) == ["flat", "home"]
