"""CLI surface: exit-code contract, JSON error lines, config-file
merging, run records, and dataset generation determinism."""

import hashlib
import json

import pytest
import yaml
from click.testing import CliRunner

from progdiff.cli import EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION, main
from progdiff.phantom import DatasetManifest


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def gen_dir(runner, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-gen") / "d"
    res = runner.invoke(
        main, ["gen-data", "--subjects", "20", "--seed", "5", "--out", str(out)]
    )
    assert res.exit_code == 0, res.output
    return out


class TestGenData:
    def test_outputs_and_checksum_echo(self, gen_dir):
        manifest = gen_dir / "manifest.json"
        assert manifest.exists()

    def test_matches_library_call(self, gen_dir, tiny_dataset, tmp_path_factory):
        """CLI output must be byte-identical to the library path with the
        same seed, independent of the output directory."""
        from pathlib import Path

        _, manifest = tiny_dataset  # built by make_dataset(..., seed=5)
        lib_path = Path(manifest.rows[0].path).parent / "manifest.json"
        assert sha(gen_dir / "manifest.json") == sha(lib_path)

    def test_run_record_contents(self, gen_dir):
        record = json.loads((gen_dir / "gen-data.run.json").read_text())
        assert record["command"] == "gen-data"
        assert record["root_seed"] == 5
        assert record["options"]["subjects"] == 20
        assert len(record["config_hash"]) == 64
        assert record["wall_time_s"] >= 0
        assert str(gen_dir / "manifest.json") in record["artifacts"]
        assert record["version"]


class TestExitCodes:
    def test_usage_error_is_2(self, runner):
        res = runner.invoke(main, ["gen-data", "--subjects", "20"])  # no --out
        assert res.exit_code == EXIT_USAGE

    def test_validation_error_is_3_with_json_line(self, runner, tmp_path):
        res = runner.invoke(
            main, ["gen-data", "--subjects", "5", "--out", str(tmp_path / "d")]
        )
        assert res.exit_code == EXIT_VALIDATION
        err = json.loads(res.stderr.strip().splitlines()[-1])
        assert err["category"] == "validation"
        assert "20" in err["error"]

    def test_runtime_error_is_1(self, runner, tmp_path):
        blocker = tmp_path / "not-a-dir"
        blocker.write_text("")
        res = runner.invoke(
            main,
            ["gen-data", "--subjects", "20", "--out", str(blocker / "x")],
        )
        assert res.exit_code == EXIT_RUNTIME
        err = json.loads(res.stderr.strip().splitlines()[-1])
        assert err["category"] == "runtime"

    def test_missing_checkpoint_path_is_usage(self, runner, gen_dir, tmp_path):
        res = runner.invoke(
            main,
            [
                "predict", "--manifest", str(gen_dir / "manifest.json"),
                "--ae", str(tmp_path / "missing.pt"),
                "--ldm", str(tmp_path / "missing.pt"),
                "--controlnet", str(tmp_path / "missing.pt"),
                "--subject", "s", "--target-age", "80", "--out", str(tmp_path),
            ],
        )
        assert res.exit_code == EXIT_USAGE


class TestConfigFile:
    def test_file_fills_defaults(self, runner, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(yaml.safe_dump({"seed": 9, "subjects": 20}))
        out = tmp_path / "d"
        res = runner.invoke(
            main, ["gen-data", "--config", str(cfg), "--out", str(out)]
        )
        assert res.exit_code == 0, res.output
        assert DatasetManifest.load(out / "manifest.json").seed == 9

    def test_explicit_flag_wins(self, runner, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(yaml.safe_dump({"seed": 9, "subjects": 20}))
        out = tmp_path / "d"
        res = runner.invoke(
            main,
            ["gen-data", "--config", str(cfg), "--seed", "4", "--out", str(out)],
        )
        assert res.exit_code == 0, res.output
        assert DatasetManifest.load(out / "manifest.json").seed == 4

    def test_unknown_key_rejected(self, runner, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(yaml.safe_dump({"n_subjects": 20}))
        res = runner.invoke(
            main, ["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]
        )
        assert res.exit_code == EXIT_VALIDATION
        err = json.loads(res.stderr.strip().splitlines()[-1])
        assert "n_subjects" in err["error"]

    def test_malformed_yaml_rejected(self, runner, tmp_path):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("seed: [unclosed")
        res = runner.invoke(
            main, ["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]
        )
        assert res.exit_code == EXIT_VALIDATION
