"""End-to-end CLI pipeline on a miniature configuration."""
import csv
import json
import os

import pytest

from spacebond import cli, config as cfgmod

MINI = {
    "seed": 3,
    "synth": {
        "n_items": 240, "latent_dim": 16, "eval_count": 60, "frame_jitter": 1.5,
        "spaces": {
            "unified": {"dim": 24, "noise": {"audio": 2.0, "image": 1.0, "text": 1.0}},
            "vt_expert": {"dim": 20, "noise": {"image": 0.6, "text": 0.6}},
            "at_experts": [
                {"name": "at_expert", "dim": 18,
                 "noise": {"audio": 0.5, "text": 1.2}, "shared_shift": 0.5}
            ],
        },
    },
    "bond": {"batch_size": 60},
    "train": {"epochs_displacement": 1, "epochs_combination": 2,
              "batch_size": 60, "hidden": 32},
    "products": ["displacement", "combination", "full"],
    "sweep": {"grid": [0.0, 0.5], "product": "combination"},
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("mini_run")
    cfg = cfgmod.load_config(None, overrides=MINI)
    cli.cmd_synth(cfg, out)
    cli.cmd_bond(cfg, out)
    return out


@pytest.fixture(scope="module")
def mini_cfg():
    return cfgmod.load_config(None, overrides=MINI)


class TestConfig:
    def test_defaults_load(self):
        cfg = cfgmod.load_config(None)
        assert cfg["seed"] == 7
        assert cfg["train"]["epochs_displacement"] == 5
        assert cfg["train"]["epochs_combination"] == 20
        assert cfg["bond"]["temperature"] == 0.01
        assert cfg["train"]["tau_infonce"] == 0.02

    def test_unknown_key_rejected(self):
        with pytest.raises(cfgmod.ConfigError, match="unknown config key"):
            cfgmod.load_config(None, overrides={"bond": {"heat": 2}})

    def test_env_seed_override(self, monkeypatch):
        monkeypatch.setenv("SPACEBOND_SEED", "99")
        assert cfgmod.load_config(None)["seed"] == 99

    def test_eval_count_validated(self):
        with pytest.raises(cfgmod.ConfigError):
            cfgmod.load_config(None, overrides={"synth": {"n_items": 10, "eval_count": 10}})

    def test_config_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 21}))
        assert cfgmod.load_config(path)["seed"] == 21

    def test_missing_file(self):
        with pytest.raises(cfgmod.ConfigError, match="not found"):
            cfgmod.load_config("/nonexistent/cfg.json")


class TestSynth:
    def test_space_directories_written(self, run_dir):
        for name in ("unified", "vt_expert", "at_expert"):
            assert (run_dir / "spaces" / name / "manifest.json").exists()
        assert (run_dir / "provenance.json").exists()
        assert (run_dir / "effective_config.json").exists()

    def test_rerun_bitwise_identical(self, tmp_path, mini_cfg):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        cli.cmd_synth(mini_cfg, out_a)
        cli.cmd_synth(mini_cfg, out_b)
        for root, _dirs, files in os.walk(out_a):
            for fn in files:
                a = os.path.join(root, fn)
                b = a.replace(str(out_a), str(out_b))
                assert open(a, "rb").read() == open(b, "rb").read(), a


class TestBond:
    def test_artifact_directories(self, run_dir):
        assert (run_dir / "bonds" / "displacement_vt_expert" / "manifest.json").exists()
        assert (run_dir / "bonds" / "combination_at_expert" / "manifest.json").exists()
        assert (run_dir / "bonds" / "full_combination_at_expert" / "manifest.json").exists()

    def test_seven_checkpoints_per_bond(self, run_dir):
        files = list((run_dir / "bonds" / "displacement_vt_expert").glob("psi_*.prj"))
        assert len(files) == 7

    def test_loss_csv_shape(self, run_dir, mini_cfg):
        with open(run_dir / "bonds" / "combination_at_expert" / "loss.csv") as f:
            rows = list(csv.DictReader(f))
        epochs = mini_cfg["train"]["epochs_combination"]
        assert len(rows) == 7 * epochs
        assert {r["subset"] for r in rows} == {"T", "V", "A", "TV", "TA", "VA", "TVA"}

    def test_missing_spaces_error(self, tmp_path, mini_cfg):
        with pytest.raises(cli.CliError, match="run synth first"):
            cli.cmd_bond(mini_cfg, tmp_path / "empty")


class TestEval:
    def test_baseline_report(self, run_dir, mini_cfg):
        path = cli.cmd_eval(
            mini_cfg, run_dir, "combination",
            cli.resolve_factors(mini_cfg), baseline=True, report_name="baseline",
        )
        report = json.loads(path.read_text())
        directions = [k for k in report if k != "pairs"]
        assert len(directions) == 6
        assert (run_dir / "reports" / "baseline.csv").exists()

    def test_zero_sigma_equals_baseline_bitwise(self, run_dir, mini_cfg):
        from spacebond.fuse import CombiningFactors

        zero = cli.cmd_eval(
            mini_cfg, run_dir, "combination", CombiningFactors(),
            report_name="zero",
        )
        base = cli.cmd_eval(
            mini_cfg, run_dir, "combination", cli.resolve_factors(mini_cfg),
            baseline=True, report_name="base2",
        )
        assert zero.read_bytes() == base.read_bytes()

    def test_presets_produce_reports(self, run_dir, mini_cfg):
        for product in ("combination", "displacement", "full"):
            for preset in ("versatile", "at-expertise"):
                factors = cli.resolve_factors(
                    mini_cfg, type("A", (), {"preset": preset})()
                )
                path = cli.cmd_eval(
                    mini_cfg, run_dir, product, factors,
                    report_name=f"{product}_{preset}",
                )
                report = json.loads(path.read_text())
                assert 0.0 <= report["pairs"]["audio_text"] <= 1.0

    def test_select_expert(self, run_dir, mini_cfg):
        factors = cli.resolve_factors(mini_cfg)
        path = cli.cmd_eval(
            mini_cfg, run_dir, "combination", factors,
            select="at_expert", report_name="selected",
        )
        assert path.exists()
        with pytest.raises(cli.CliError, match="unknown experts"):
            cli.cmd_eval(mini_cfg, run_dir, "combination", factors, select="nope")

    def test_missing_artifact_error(self, tmp_path, mini_cfg):
        out = tmp_path / "synth_only"
        cli.cmd_synth(mini_cfg, out)
        with pytest.raises(cli.CliError, match="run bond first"):
            cli.cmd_eval(mini_cfg, out, "combination", cli.resolve_factors(mini_cfg))


class TestFuse:
    def test_fused_bundle_loadable(self, run_dir, mini_cfg):
        from spacebond.store import load_space

        path = cli.cmd_fuse(
            mini_cfg, run_dir, "combination", cli.resolve_factors(mini_cfg), split="eval"
        )
        bundle = load_space(path)
        assert bundle.matrix("audio").n == mini_cfg["synth"]["eval_count"]
        assert bundle.dim == mini_cfg["synth"]["spaces"]["unified"]["dim"]


class TestSweep:
    def test_csv_layout(self, run_dir, mini_cfg):
        path = cli.cmd_sweep(mini_cfg, run_dir)
        with open(path) as f:
            reader = csv.reader(f)
            header = next(reader)
            rows = list(reader)
        assert header == ["sigma_a", "sigma_t", "delta_at", "delta_av", "delta_tv"]
        assert len(rows) == 4  # 2x2 mini grid
        origin = [r for r in rows if r[0] == "0.0" and r[1] == "0.0"][0]
        assert float(origin[2]) == 0.0

    def test_grid_override(self, run_dir, mini_cfg):
        path = cli.cmd_sweep(mini_cfg, run_dir, grid_values=[0.0, 0.3, 0.6])
        with open(path) as f:
            rows = list(csv.reader(f))[1:]
        assert len(rows) == 9


class TestMainEntry:
    def test_full_pipeline_subprocess_style(self, tmp_path):
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(MINI))
        out = str(tmp_path / "run")
        assert cli.main(["synth", "--config", str(cfg_path), "--out", out]) == 0
        assert cli.main(["bond", "--config", str(cfg_path), "--out", out]) == 0
        assert cli.main([
            "eval", "--config", str(cfg_path), "--out", out,
            "--product", "combination", "--preset", "at-expertise",
        ]) == 0
        assert cli.main([
            "sweep", "--config", str(cfg_path), "--out", out, "--grid", "0,0.5",
        ]) == 0

    def test_error_exit_code(self, tmp_path):
        assert cli.main(["eval", "--out", str(tmp_path / "nothing")]) == 1

    def test_factor_flags(self, tmp_path):
        cfg = cfgmod.load_config(None)
        args = type("A", (), {
            "preset": "at-expertise", "sigma_a": 0.25, "sigma_t": None,
            "lambda_v": 0.5, "lambda_t": None,
        })()
        factors = cli.resolve_factors(cfg, args)
        assert factors.sigma_a == 0.25     # explicit flag wins
        assert factors.sigma_t == 0.5      # from the preset
        assert factors.lambda_v == 0.5
        assert factors.lambda_t == 0.9
