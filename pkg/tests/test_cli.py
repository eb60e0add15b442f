"""End-to-end command-line workflows and the exit-code taxonomy."""

import json
import subprocess
import sys

import pytest
import yaml

from tyee.cli import main

from conftest import experiment_config, generate_experiment_records


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    data.mkdir()
    generate_experiment_records(data)
    return root


@pytest.fixture(scope="module")
def finished_run(workspace):
    out = workspace / "main_run"
    cfg = workspace / "run.yaml"
    cfg.write_text(experiment_config(workspace / "data", out, epochs=8))
    assert main(["run", "--config", str(cfg)]) == 0
    return cfg, out


def read_history(out_dir):
    lines = (out_dir / "history.jsonl").read_text().splitlines()
    return [json.loads(line) for line in lines]


class TestRun:
    def test_report_written(self, finished_run):
        _, out = finished_run
        report = dict(
            line.split("\t") for line in (out / "report").read_text().splitlines()
        )
        assert float(report["accuracy"]) >= 0.95
        assert set(report) == {"accuracy", "balanced_accuracy", "kappa", "aggregate"}

    def test_effective_config_serialized(self, workspace):
        out = workspace / "override_run"
        cfg = workspace / "override.yaml"
        cfg.write_text(experiment_config(workspace / "data", out, epochs=1))
        assert main(["run", "--config", str(cfg), "--override", "optimizer.lr=0.01"]) == 0
        effective = yaml.safe_load((out / "config.yaml").read_text())
        assert effective["optimizer"]["lr"] == 0.01

    def test_seed_flag(self, workspace):
        out = workspace / "seed_run"
        cfg = workspace / "seed.yaml"
        cfg.write_text(experiment_config(workspace / "data", out, epochs=1))
        assert main(["run", "--config", str(cfg), "--seed", "999"]) == 0
        effective = yaml.safe_load((out / "config.yaml").read_text())
        assert effective["common"]["seed"] == 999

    def test_determinism_bit_identical_history(self, workspace):
        cfgs = []
        for name in ("det_a", "det_b"):
            out = workspace / name
            cfg = workspace / f"{name}.yaml"
            cfg.write_text(experiment_config(workspace / "data", out, epochs=4))
            assert main(["run", "--config", str(cfg)]) == 0
            cfgs.append(out)
        a = (cfgs[0] / "history.jsonl").read_bytes()
        b = (cfgs[1] / "history.jsonl").read_bytes()
        assert a == b

    def test_invalid_config_no_output_dir(self, workspace):
        out = workspace / "never_created"
        cfg = workspace / "bad.yaml"
        text = experiment_config(workspace / "data", out).replace("hidden: [32]", "hidden: []")
        cfg.write_text(text)
        assert main(["run", "--config", str(cfg)]) == 1
        assert not out.exists()

    def test_missing_data_path(self, workspace):
        out = workspace / "missing_data"
        cfg = workspace / "missing.yaml"
        cfg.write_text(experiment_config(workspace / "nowhere", out, epochs=1))
        assert main(["run", "--config", str(cfg)]) == 2
        assert not (out / "report").exists()

    def test_resume_matches_uninterrupted(self, workspace):
        data = workspace / "data"
        full_out = workspace / "resume_full"
        cfg_full = workspace / "resume_full.yaml"
        cfg_full.write_text(experiment_config(data, full_out, epochs=6))
        assert main(["run", "--config", str(cfg_full)]) == 0

        part_out = workspace / "resume_part"
        cfg_part = workspace / "resume_part.yaml"
        cfg_part.write_text(experiment_config(data, part_out, epochs=6))
        assert main(["run", "--config", str(cfg_part), "--override", "trainer.epochs=3"]) == 0
        assert main(["run", "--config", str(cfg_part),
                     "--resume", str(part_out / "ckpt_last.tyck")]) == 0

        assert (full_out / "history.jsonl").read_bytes() == \
               (part_out / "history.jsonl").read_bytes()

    def test_distributed_warns_once_no_behavior_change(self, workspace, capsys):
        data = workspace / "data"
        out_plain = workspace / "dist_plain"
        cfg_plain = workspace / "dist_plain.yaml"
        cfg_plain.write_text(experiment_config(data, out_plain, epochs=2))
        assert main(["run", "--config", str(cfg_plain)]) == 0

        out_dist = workspace / "dist_on"
        cfg_dist = workspace / "dist_on.yaml"
        cfg_dist.write_text(experiment_config(data, out_dist, epochs=2)
                            + "distributed:\n  backend: nccl\n  world_size: 4\n")
        capsys.readouterr()
        assert main(["run", "--config", str(cfg_dist)]) == 0
        err = capsys.readouterr().err
        assert err.count("distributed section is accepted but ignored") == 1
        assert (out_plain / "history.jsonl").read_bytes() == \
               (out_dist / "history.jsonl").read_bytes()


class TestPreprocess:
    def test_second_run_all_hits(self, workspace, capsys):
        cache = workspace / "pp_cache"
        cfg = workspace / "pp.yaml"
        cfg.write_text(experiment_config(workspace / "data", workspace / "pp_out",
                                         cache_dir=cache, epochs=1))
        assert main(["preprocess", "--config", str(cfg)]) == 0
        first = capsys.readouterr().out
        assert first.count("\tbuilt\t") == 6
        assert main(["preprocess", "--config", str(cfg)]) == 0
        second = capsys.readouterr().out
        assert second.count("\thit\t") == 6
        assert "built" not in second

    def test_run_after_preprocess_reuses_cache(self, workspace):
        cache = workspace / "pp_cache"
        cfg = workspace / "pp.yaml"
        manifests = sorted(cache.glob("*/manifest.json"))
        stamps = [m.stat().st_mtime_ns for m in manifests]
        assert main(["run", "--config", str(cfg)]) == 0
        assert [m.stat().st_mtime_ns for m in manifests] == stamps

    def test_corrupt_block_surfaces_key(self, workspace, capsys):
        cache = workspace / "corrupt_cache"
        cfg = workspace / "corrupt.yaml"
        cfg.write_text(experiment_config(workspace / "data", workspace / "corrupt_out",
                                         cache_dir=cache, epochs=1))
        assert main(["preprocess", "--config", str(cfg)]) == 0
        capsys.readouterr()
        block = sorted(cache.glob("*/block_000003.bin"))[0]
        blob = bytearray(block.read_bytes())
        blob[-2] ^= 0x55
        block.write_bytes(bytes(blob))
        assert main(["preprocess", "--config", str(cfg)]) == 2
        err = capsys.readouterr().err
        assert block.parent.name in err

    def test_requires_cache_dir(self, workspace):
        cfg = workspace / "nocache.yaml"
        cfg.write_text(experiment_config(workspace / "data", workspace / "nc_out", epochs=1))
        assert main(["preprocess", "--config", str(cfg)]) == 1


class TestEvaluate:
    def test_best_checkpoint_reproduces_history(self, finished_run):
        cfg, out = finished_run
        assert main(["evaluate", "--config", str(cfg),
                     "--checkpoint", str(out / "ckpt_best.tyck")]) == 0
        payload = json.loads((out / "eval_report").read_text())
        history = read_history(out)
        best = max(history, key=lambda e: (e["aggregate"], -e["epoch"]))
        for name, value in best["metrics"].items():
            assert payload["valid"][name] == value
        assert payload["valid"]["aggregate"] == best["aggregate"]
        assert payload["valid"]["loss"] == best["valid_loss"]

    def test_missing_checkpoint(self, finished_run):
        cfg, out = finished_run
        assert main(["evaluate", "--config", str(cfg),
                     "--checkpoint", str(out / "nope.tyck")]) == 2

    def test_shape_mismatch(self, finished_run, workspace):
        cfg, out = finished_run
        assert main(["evaluate", "--config", str(cfg),
                     "--override", "model.hidden=[16]",
                     "--checkpoint", str(out / "ckpt_best.tyck")]) == 1


class TestInspect:
    def test_record_file(self, workspace, capsys):
        path = next((workspace / "data").glob("*.edf"))
        assert main(["inspect", str(path)]) == 0
        out = capsys.readouterr().out
        assert "C0" in out and "256" in out

    def test_cache_dir(self, workspace, capsys):
        cache = workspace / "pp_cache"
        assert main(["inspect", str(cache)]) == 0
        out = capsys.readouterr().out
        assert "entries" in out

    def test_unknown_file(self, workspace):
        junk = workspace / "junk.bin"
        junk.write_bytes(b"not a signal file")
        assert main(["inspect", str(junk)]) == 2


def test_module_entry_point(workspace):
    cfg = workspace / "subproc.yaml"
    cfg.write_text(experiment_config(workspace / "data", workspace / "subproc_out", epochs=1))
    proc = subprocess.run(
        [sys.executable, "-m", "tyee", "run", "--config", str(cfg)],
        capture_output=True, text=True, cwd="/root/pkg",
    )
    assert proc.returncode == 0, proc.stderr
    assert "accuracy" in proc.stdout
