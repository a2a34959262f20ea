import json

from click.testing import CliRunner

from mtdaflow import cli
from mtdaflow.cli import main

SYNTH = ["--synthetic", "n_c=3", "N=3", "shifts=0.1,0.3,0.6", "per_class=10"]
SMALL = ["--K", "30", "--Kstar", "3", "--Kprime", "2", "--set", "data.image_size=16", "--set", "progress=false"]


def _train(tmp_path, *extra):
    out = tmp_path / "run"
    result = CliRunner().invoke(main, ["train", *SYNTH, *SMALL, "--out", str(out), *extra])
    return out, result


def test_dry_run_train(tmp_path):
    out, result = _train(tmp_path, "--dry-run")
    assert result.exit_code == 0, result.output
    assert "Run completed" in result.output
    assert (out / "manifest.json").is_file()
    assert (out / "checkpoints" / "final.pt").is_file()


def test_indivisible_schedule_is_config_error(tmp_path):
    result = CliRunner().invoke(main, ["train", "--K", "1000", "--Kstar", "3", "--dry-run", "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert "K not divisible by K*" in result.output


def test_unknown_key_is_config_error(tmp_path):
    result = CliRunner().invoke(main, ["train", "--set", "hp.nope=1", "--dry-run", "--out", str(tmp_path)])
    assert result.exit_code == 2
    assert "hp.nope" in result.output


def test_eval_missing_checkpoint(tmp_path):
    result = CliRunner().invoke(main, ["eval", str(tmp_path / "missing.pt")])
    assert result.exit_code == 4


def test_eval_and_report_on_run(tmp_path):
    out, result = _train(tmp_path, "--dry-run")
    assert result.exit_code == 0, result.output
    result = CliRunner().invoke(main, ["eval", str(out / "checkpoints" / "final.pt")])
    assert result.exit_code == 0, result.output
    assert "average:" in result.output
    assert (out / "eval" / "eval_report.json").is_file()
    result = CliRunner().invoke(main, ["report", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "report.md").is_file()


def test_report_without_manifest(tmp_path):
    result = CliRunner().invoke(main, ["report", str(tmp_path)])
    assert result.exit_code == 4


def test_bench_dry_run(tmp_path):
    args = ["bench", "--suite", "reiteration", "--seeds", "0", "--dry-run", "--out", str(tmp_path)]
    args += ["--set", "data.image_size=16", "--set", "hp.K=30", "--set", "data.synthetic.per_class=10"]
    result = CliRunner().invoke(main, args)
    assert result.exit_code == 0, result.output
    assert (tmp_path / "reiteration.csv").is_file()


def test_eval_reproduces_final_numbers_of_a_torch_run(tmp_path):
    out = tmp_path / "run"
    args = ["train", "--synthetic", "n_c=3", "N=2", "shifts=0.2,0.5", "per_class=10"]
    args += ["--K", "6", "--Kstar", "2", "--Kprime", "2", "--Bs", "8", "--Bt", "4", "--out", str(out)]
    args += ["--set", "data.image_size=16", "--set", "progress=false"]
    args += ["--set", "backbone.d_f=32", "--set", "backbone.conv_channels=[8,8,8]"]
    args += ["--set", "hp.source_convergence.max_iters=10", "--set", "hp.source_convergence.check_every=5"]
    result = CliRunner().invoke(main, args)
    assert result.exit_code == 0, result.output

    result = CliRunner().invoke(main, ["eval", str(out / "checkpoints" / "final.pt"), "--out", str(tmp_path / "ev")])
    assert result.exit_code == 0, result.output
    final = json.loads((out / "manifest.json").read_text(encoding="utf-8"))["final"]
    replay = json.loads((tmp_path / "ev" / "eval_report.json").read_text(encoding="utf-8"))
    for key in ("per_domain_accuracy", "average_target_accuracy", "source_accuracy", "confusion"):
        assert replay[key] == final[key], key


def test_unexpected_error_is_internal_exit_code(tmp_path, monkeypatch):
    def explode(run_dir):
        raise RuntimeError("template exploded")

    monkeypatch.setattr(cli, "write_report", explode)
    result = CliRunner().invoke(main, ["report", str(tmp_path)])
    assert result.exit_code == 1
    assert "internal error: template exploded" in result.output
    assert "1 internal error" in CliRunner().invoke(main, ["--help"]).output
