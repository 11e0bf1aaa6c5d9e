from pathlib import Path

import pytest
from click.testing import CliRunner

from raydose.cli import main
from raydose.config import OUTPUT_ROOT_ENV, resolve_output_path
from raydose.phantom import generate_phantom
from raydose.volume import read_volume, write_volume

from conftest import tiny_phantom_params
from test_training import tiny_config


@pytest.fixture
def runner():
    return CliRunner()


def write_tiny_config(path: Path, data_root: Path, out_dir: Path) -> Path:
    cfg = tiny_config(**{"optim.steps": 2})
    cfg.data.root = str(data_root)
    cfg.out_dir = str(out_dir)
    cfg.save(path)
    return path


class TestGeneratePhantoms:
    def test_writes_bundles_and_run_info(self, runner, tmp_path):
        out = tmp_path / "phantoms"
        result = runner.invoke(
            main,
            ["generate-phantoms", "--count", "2", "--seed", "5", "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        bundles = sorted(p.name for p in out.iterdir() if p.is_dir())
        assert bundles == ["phantom-0005", "phantom-0006"]
        assert (out / "run.json").exists()
        vol = read_volume(out / "phantom-0005")
        assert vol.shape == (32, 96, 96)


class TestTrainSampleEvaluate:
    def test_full_cli_round_trip(self, runner, tmp_path):
        cfg_path = write_tiny_config(
            tmp_path / "config.json", tmp_path / "data", tmp_path / "run"
        )
        result = runner.invoke(main, ["train", "--config", str(cfg_path)])
        assert result.exit_code == 0, result.output
        ckpt = tmp_path / "run" / "checkpoint.pt"
        assert ckpt.exists()
        assert (tmp_path / "run" / "config.json").exists()
        assert (tmp_path / "run" / "loss.csv").exists()
        assert (tmp_path / "run" / "loss.png").exists()

        # test patient for sampling, matching the training dims
        vol = generate_phantom(7, tiny_phantom_params())
        write_volume(vol, tmp_path / "gt" / vol.patient_id)

        result = runner.invoke(
            main,
            [
                "sample", "--checkpoint", str(ckpt),
                "--volume", str(tmp_path / "gt"),
                "--steps", "2", "--seed", "1",
                "--out", str(tmp_path / "pred"),
            ],
        )
        assert result.exit_code == 0, result.output
        pred = read_volume(tmp_path / "pred" / vol.patient_id)
        assert pred.dose.shape == vol.dose.shape
        assert (tmp_path / "pred" / f"{vol.patient_id}_mid_slice.png").exists()

        result = runner.invoke(
            main,
            [
                "evaluate", "--pred", str(tmp_path / "pred"),
                "--gt", str(tmp_path / "gt"),
                "--out", str(tmp_path / "eval"),
            ],
        )
        assert result.exit_code == 0, result.output
        assert (tmp_path / "eval" / "metrics_per_patient.csv").exists()
        assert (tmp_path / "eval" / "metrics_summary.csv").exists()
        assert (tmp_path / "eval" / "dvh_body.png").exists()
        assert "dose score body" in result.output

        result = runner.invoke(
            main,
            [
                "attention-dump", "--checkpoint", str(ckpt),
                "--volume", str(tmp_path / "gt"),
                "--out", str(tmp_path / "attn"),
            ],
        )
        assert result.exit_code == 0, result.output
        assert list((tmp_path / "attn").glob("*_stage1_block1_head1.csv"))

    def test_resume_flag(self, runner, tmp_path):
        cfg_path = write_tiny_config(
            tmp_path / "config.json", tmp_path / "data", tmp_path / "run"
        )
        result = runner.invoke(main, ["train", "--config", str(cfg_path)])
        assert result.exit_code == 0, result.output
        cfg2 = tiny_config(**{"optim.steps": 4})
        cfg2.data.root = str(tmp_path / "data")
        cfg2.out_dir = str(tmp_path / "run2")
        cfg2.save(tmp_path / "config2.json")
        result = runner.invoke(
            main,
            [
                "train", "--config", str(tmp_path / "config2.json"),
                "--resume", str(tmp_path / "run" / "checkpoint.pt"),
            ],
        )
        assert result.exit_code == 0, result.output
        assert "finished 4 steps" in result.output


class TestDVHCommand:
    def test_writes_curves_per_roi(self, runner, tmp_path):
        vol = generate_phantom(3, tiny_phantom_params())
        write_volume(vol, tmp_path / "vol")
        result = runner.invoke(
            main,
            ["dvh", "--dose", str(tmp_path / "vol"), "--out", str(tmp_path / "dvh")],
        )
        assert result.exit_code == 0, result.output
        for roi in ("body", "ptv", "bld", "fhr", "fhl", "st"):
            assert (tmp_path / "dvh" / f"dvh_{roi}.csv").exists()
            assert (tmp_path / "dvh" / f"dvh_{roi}.png").exists()


class TestOutputRoot:
    def test_env_var_redirects_relative_paths(self, monkeypatch, tmp_path):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
        assert resolve_output_path("runs/x") == tmp_path / "runs" / "x"
        assert resolve_output_path(tmp_path / "abs") == tmp_path / "abs"

    def test_no_env_var_keeps_path(self, monkeypatch):
        monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
        assert resolve_output_path("runs/x") == Path("runs/x")


class TestConfigRoundTrip:
    def test_json_round_trip(self, tmp_path):
        from raydose.config import ExperimentConfig

        cfg = tiny_config()
        cfg.save(tmp_path / "c.json")
        back = ExperimentConfig.from_file(tmp_path / "c.json")
        assert back == cfg

    def test_tuples_survive(self, tmp_path):
        from raydose.config import ExperimentConfig

        cfg = tiny_config()
        back = ExperimentConfig.from_json(cfg.to_json())
        assert back.model.encoder_widths == cfg.model.encoder_widths
        assert isinstance(back.model.encoder_widths, tuple)
