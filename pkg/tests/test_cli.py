import json

import pytest

from h2tdfr import cli
from h2tdfr.config import ConfigError, parse_config, preset_values, resolve_config

SMALL = ["--data.n_train=400", "--data.n_val=200", "--data.n_test=200", "--model.hidden=[8,8]",
         "--phase1.epochs=2", "--selection.epochs=2", "--retrain.epochs=2"]


@pytest.fixture(autouse=True)
def artifacts(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.ARTIFACT_ENV, str(tmp_path / "art"))
    return tmp_path / "art"


def error_of(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


class TestConfig:
    def test_celeba_preset_phase1(self):
        cfg = parse_config(None, ["--preset=celeba-like"])
        assert (cfg.phase1.learning_rate, cfg.phase1.batch_size, cfg.phase1.epochs) == (0.0005, 128, 6)

    def test_presets_follow_tables(self):
        assert preset_values("waterbirds-like", "dfr")["phase1"]["epochs"] == 20
        assert preset_values("ham10000-like", "dfr")["retrain"]["epochs"] == 500
        assert preset_values("ham10000-like", "h2t-dfr")["selection"]["lam"] == 0.0001
        assert preset_values("celeba-like", "h2t-dfr")["selection"]["lam"] == 0.00001
        assert preset_values("waterbirds-like", "h2t-dfr")["selection"]["lam"] == 0.00001
        assert preset_values("celeba-like", "affine-dfr")["retrain"]["momentum"] == 0.4

    def test_defaults_from_empty_file(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text("")
        resolved = resolve_config(f)
        assert resolved.config == parse_config()
        assert set(resolved.provenance.values()) == {"default"}

    def test_precedence(self, tmp_path):
        f = tmp_path / "c.json"
        f.write_text(json.dumps({"phase1": {"learning_rate": 0.2, "epochs": 3}}))
        resolved = resolve_config(f, ["--phase1.epochs=4"], preset="celeba-like")
        cfg = resolved.config
        assert (cfg.phase1.learning_rate, cfg.phase1.epochs, cfg.phase1.batch_size) == (0.2, 4, 128)
        p = resolved.provenance
        assert (p["phase1.learning_rate"], p["phase1.epochs"], p["phase1.batch_size"]) == ("file", "flag", "preset")
        assert p["model.hidden"] == "default"

    @pytest.mark.parametrize("flag,key", [("--selection.tau=1.5", "selection.tau"),
                                          ("--selection.tau=0", "selection.tau"),
                                          ("--phase1.nope=1", "phase1.nope"),
                                          ("--phase1.epochs=abc", "phase1.epochs"),
                                          ("--selection.lam=-1", "selection.lam")])
    def test_rejections_name_key(self, flag, key):
        with pytest.raises(ConfigError) as info:
            parse_config(None, [flag])
        assert info.value.key == key


class TestCommands:
    def test_method_run_eval_replay(self, artifacts, capsys):
        assert cli.main(["h2t-dfr", *SMALL]) == 0
        run_dir = artifacts / "h2t-dfr" / "seed-0"
        assert {p.name for p in run_dir.iterdir()} >= {"manifest.json", "metrics.json", "scores.csv",
                                                        "histogram.csv", "model.ckpt.json", "phase1.ckpt.json"}
        capsys.readouterr()
        assert cli.main(["eval", "--run", str(run_dir), "--check"]) == 0
        assert json.loads(capsys.readouterr().out)["matches_stored"] is True

    def test_manifest_is_enough_to_rerun(self, artifacts, tmp_path):
        assert cli.main(["dfr", *SMALL, "--seed=2"]) == 0
        run_dir = artifacts / "dfr" / "seed-2"
        assert cli.main(["dfr", "--config", str(run_dir / "manifest.json"), "--out", str(tmp_path / "re")]) == 0
        assert (tmp_path / "re" / "metrics.json").read_bytes() == (run_dir / "metrics.json").read_bytes()

    def test_from_phase1_checkpoint(self, artifacts, tmp_path):
        assert cli.main(["erm", *SMALL]) == 0
        erm_dir = artifacts / "erm" / "seed-0"
        assert cli.main(["affine-dfr", *SMALL, "--from", str(erm_dir), "--out", str(tmp_path / "a")]) == 0
        assert cli.main(["affine-dfr", *SMALL, "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()

    def test_missing_checkpoint(self, tmp_path, capsys):
        missing = tmp_path / "nothing" / "phase1.ckpt.json"
        assert cli.main(["dfr", *SMALL, "--from", str(missing)]) == cli.EXIT_MISSING
        err = error_of(capsys)
        assert err["error"] == "missing_artifact" and err["artifact"] == str(missing)

    def test_eval_missing_run(self, tmp_path, capsys):
        assert cli.main(["eval", "--run", str(tmp_path / "x")]) == cli.EXIT_MISSING
        assert "manifest.json" in error_of(capsys)["artifact"]

    def test_config_error_exit(self, capsys):
        assert cli.main(["h2t-dfr", "--selection.tau=1.5"]) == cli.EXIT_CONFIG
        err = error_of(capsys)
        assert err["error"] == "config" and err["key"] == "selection.tau"

    def test_unrecognized_argument(self, capsys):
        assert cli.main(["dfr", "positional"]) == cli.EXIT_CONFIG
        assert error_of(capsys)["error"] == "usage"

    def test_generate(self, artifacts, capsys):
        assert cli.main(["generate", "--data.n_train=100", "--data.n_val=40", "--data.n_test=40", "--seed=3"]) == 0
        manifest = json.loads(capsys.readouterr().out)["manifest"]
        doc = json.loads(open(manifest).read())
        assert doc["seed"] == 3

    def test_sweep_and_report(self, artifacts, capsys):
        assert cli.main(["sweep", "--seeds=3", "--method=h2t-dfr", *SMALL]) == 0
        root = artifacts / "sweep-h2t-dfr"
        assert sorted(p.name for p in root.glob("seed-*")) == ["seed-0", "seed-1", "seed-2"]
        agg = json.loads((root / "aggregate.json").read_text())
        assert agg["aggregate"]["n_seeds"] == 3 and agg["aggregate"]["worst"]["stderr"] is not None
        capsys.readouterr()
        assert cli.main(["report", str(root)]) == 0
        table = capsys.readouterr().out.splitlines()
        assert len(table) == 3 and "± " in table[2] and "| 3 |" in table[2]

    def test_report_single_run_has_no_stderr(self, artifacts, capsys):
        assert cli.main(["dfr", *SMALL]) == 0
        capsys.readouterr()
        assert cli.main(["report", str(artifacts / "dfr")]) == 0
        row = capsys.readouterr().out.splitlines()[2]
        assert "±" not in row.split("|")[4]

    def test_report_reference_annotation(self, artifacts, capsys):
        assert cli.main(["h2t-dfr", "--preset=celeba-like", *SMALL]) == 0
        capsys.readouterr()
        assert cli.main(["report"]) == 0
        assert "88.59 ± 0.48" in capsys.readouterr().out

    def test_report_without_runs(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert cli.main(["report", str(tmp_path / "empty")]) == cli.EXIT_MISSING
