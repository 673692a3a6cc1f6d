import json

import numpy as np
import pandas as pd
import pytest

from artifacts import (
    LOGLIK_FILE,
    MANIFEST_FILE,
    RunManifest,
    load_run,
    read_draws,
    read_loglik,
    staged_output,
    write_draws,
    write_json,
    write_loglik,
    write_residuals,
)
from config import ChainConfig
from mcmc_engine import run_chains


class TestLoglikFile:
    def test_values_survive_a_write(self, tmp_path, rng):
        matrix = rng.normal(size=(7, 11))
        path = write_loglik(matrix, tmp_path / LOGLIK_FILE)
        assert path.stat().st_size == 16 + 8 * 77
        np.testing.assert_array_equal(read_loglik(path), matrix)

    def test_foreign_file_is_rejected(self, tmp_path):
        path = tmp_path / "other.bin"
        path.write_bytes(b"NOPE" + bytes(12))
        with pytest.raises(ValueError, match="not a log-likelihood file"):
            read_loglik(path)

    def test_truncated_body_is_rejected(self, tmp_path):
        path = write_loglik(np.zeros((2, 3)), tmp_path / LOGLIK_FILE)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="2x3"):
            read_loglik(path)


class TestStaging:
    def test_manifest_is_written_last_and_lists_outputs(self, tmp_path):
        out = tmp_path / "run"
        with staged_output(out, RunManifest(command="fit", config={}, seed=1)) as stage:
            write_json({"a": 1}, stage / "meta.json")
            (stage / "table.csv").write_text("x\n1\n")
            assert not (out / MANIFEST_FILE).exists()
        manifest = json.loads((out / MANIFEST_FILE).read_text())
        assert manifest["outputs"] == ["meta.json", "table.csv"]
        assert manifest["artifact_version"] == 1
        assert [p.name for p in tmp_path.iterdir()] == ["run"]

    def test_failure_leaves_no_run(self, tmp_path):
        out = tmp_path / "run"
        with pytest.raises(RuntimeError):
            with staged_output(out, RunManifest(command="fit", config={}, seed=1)) as stage:
                (stage / "draws.csv").write_text("partial")
                raise RuntimeError("sampler died")
        assert not out.exists()
        assert list(tmp_path.iterdir()) == []

    def test_failed_refit_keeps_previous_run(self, tmp_path):
        out = tmp_path / "run"
        with staged_output(out, RunManifest(command="fit", config={}, seed=1)) as stage:
            (stage / "draws.csv").write_text("old")
        before = (out / MANIFEST_FILE).read_text()
        with pytest.raises(RuntimeError):
            with staged_output(out, RunManifest(command="fit", config={}, seed=2)) as stage:
                (stage / "draws.csv").write_text("new")
                raise RuntimeError("sampler died")
        assert (out / MANIFEST_FILE).read_text() == before
        assert (out / "draws.csv").read_text() == "old"
        assert [p.name for p in tmp_path.iterdir()] == ["run"]

    def test_refit_replaces_files_and_drops_stale_ones(self, tmp_path):
        out = tmp_path / "run"
        with staged_output(out, RunManifest(command="fit", config={}, seed=1)) as stage:
            (stage / "draws.csv").write_text("old")
            (stage / "waic_comparison.csv").write_text("old")
        (out / "notes.txt").write_text("mine")
        with staged_output(out, RunManifest(command="fit", config={}, seed=2)) as stage:
            (stage / "draws.csv").write_text("new")
        manifest = json.loads((out / MANIFEST_FILE).read_text())
        assert manifest["outputs"] == ["draws.csv"] and manifest["seed"] == 2
        assert (out / "draws.csv").read_text() == "new"
        assert not (out / "waic_comparison.csv").exists()
        assert (out / "notes.txt").exists()

    def test_input_digests(self, tmp_path):
        data = tmp_path / "data.csv"
        data.write_text("abc")
        manifest = RunManifest.for_inputs("fit", {}, 0, [data])
        assert manifest.inputs[str(data)] == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


class TestLoadRun:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="no fitted run"):
            load_run(tmp_path)

    def test_chains_come_back_in_order(self, tmp_path, small_dataset, small_model):
        chain = ChainConfig(iterations=8, burn_in=5, seed=4, chain_count=2, b_lik=5)
        outputs = run_chains(small_dataset, small_model, chain, progress=False)
        with staged_output(tmp_path, RunManifest(command="fit", config={}, seed=4)) as stage:
            write_draws(outputs, stage / "draws.csv")
            write_loglik(np.concatenate([o.pointwise_loglik for o in outputs]), stage / LOGLIK_FILE)
            write_residuals(outputs, small_dataset.subject_ids, stage / "residuals.csv")
            write_json({"chains": [{"seed": o.seed} for o in outputs]}, stage / "meta.json")

        assert len(read_draws(tmp_path / "draws.csv")) == 2
        run = load_run(tmp_path)
        assert [o.seed for o in run.outputs] == [4, 5]
        np.testing.assert_allclose(run.outputs[1].beta, outputs[1].beta)
        np.testing.assert_array_equal(run.pointwise_loglik, np.concatenate([o.pointwise_loglik for o in outputs]))
        residual_table = pd.read_csv(tmp_path / "residuals.csv")
        assert len(residual_table) == small_dataset.n * small_dataset.m
