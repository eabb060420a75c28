import json

import pytest
from click.testing import CliRunner

from homoscale.cli import main
from homoscale.config import Config
from homoscale.errors import ValidationError
from homoscale.experiments import run_experiment
from homoscale.torus_field import AnalyticCoefficient, save_coefficient


@pytest.fixture
def runner():
    return CliRunner()


def test_unknown_experiment_raises(tmp_path):
    with pytest.raises(ValidationError):
        run_experiment("rate_3d", Config(), tmp_path)


def test_unknown_parameter_raises(tmp_path):
    cfg = Config.from_dict({"experiment": {"toy_averaging": {"gamma": 1.0}}})
    with pytest.raises(ValidationError):
        run_experiment("toy_averaging", cfg, tmp_path)


def test_exponential_report(tmp_path):
    rep = run_experiment("counterexample_exponential", Config(), tmp_path)
    assert rep.passed and not rep.partial
    data = json.loads((tmp_path / "counterexample_exponential.json").read_text())
    assert data["config"]["separation"]["c_gap"] == 0.1
    assert all(c["passed"] for c in data["criteria"])
    for f in rep.files.values():
        assert (tmp_path / f).exists()


def test_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment("toy_averaging", Config(), a)
    run_experiment("toy_averaging", Config(), b)
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    for n in names:
        assert (a / n).read_bytes() == (b / n).read_bytes()


def test_csv_schema_line(tmp_path):
    run_experiment("toy_averaging", Config(), tmp_path)
    csvs = list(tmp_path.glob("*.csv"))
    assert csvs
    for p in csvs:
        assert p.read_text().splitlines()[0].startswith("# schema: homoscale-experiment/")


def test_partial_on_resource_error(tmp_path):
    cfg = Config.from_dict({"experiment": {"rate_2d": {"points_per_period": 4}}})
    rep = run_experiment("rate_2d", cfg, tmp_path)
    assert rep.partial and not rep.passed


class TestCli:
    def test_run_pass(self, runner, tmp_path):
        res = runner.invoke(main, ["run", "counterexample_exponential", "--out", str(tmp_path)])
        assert res.exit_code == 0, res.output
        assert res.output.startswith("PASS")

    def test_run_threshold_fail(self, runner, tmp_path):
        res = runner.invoke(main, ["run", "toy_averaging", "--out", str(tmp_path)])
        assert res.exit_code == 2
        assert "FAIL" in res.output

    def test_run_unknown(self, runner, tmp_path):
        res = runner.invoke(main, ["run", "nope", "--out", str(tmp_path)])
        assert res.exit_code == 3

    def test_run_bad_config(self, runner, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"solvers": {}}')
        res = runner.invoke(main, ["run", "toy_averaging", "--config", str(cfg), "--out", str(tmp_path)])
        assert res.exit_code == 3

    def test_run_partial(self, runner, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"experiment": {"rate_2d": {"points_per_period": 4}}}))
        res = runner.invoke(main, ["run", "rate_2d", "--config", str(cfg), "--out", str(tmp_path / "o")])
        assert res.exit_code == 3

    def test_homogenize(self, runner, tmp_path):
        coef = AnalyticCoefficient.isotropic(1, 2, 3.0, [(((1,), (0,)), 1.0, "sin"), (((0,), (1,)), 1.0, "sin")])
        path = tmp_path / "a.json"
        save_coefficient(coef, path)
        res = runner.invoke(main, ["homogenize", "--coef", str(path), "--eps", "0.1,1e-4", "--out", str(tmp_path / "o")])
        assert res.exit_code == 0, res.output
        out = json.loads(res.output.splitlines()[0])
        assert out["stages"] == ["simultaneous"]
        # the separated limit of 3 + sin + sin is its harmonic mean over both cells
        assert out["Abar"][0][0] == pytest.approx(2.604008, abs=1e-3)
        assert (tmp_path / "o" / "pipeline_report.json").exists()

    def test_homogenize_bad_eps(self, runner, tmp_path):
        coef = AnalyticCoefficient.isotropic(1, 2, 3.0)
        path = tmp_path / "a.json"
        save_coefficient(coef, path)
        res = runner.invoke(main, ["homogenize", "--coef", str(path), "--eps", "0.1,abc"])
        assert res.exit_code == 3

    def test_calibrate(self, runner, tmp_path):
        res = runner.invoke(main, ["calibrate", "--oracle", "supercell", "--out", str(tmp_path)])
        assert res.exit_code == 0, res.output
        assert (tmp_path / "calibration.csv").exists()
        summary = json.loads((tmp_path / "calibration.json").read_text())
        assert summary["recommended"] is not None
