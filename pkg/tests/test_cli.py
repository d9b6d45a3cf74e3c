import csv
import shutil

import pytest

from socfusion.cli import (
    EVAL_HEADER,
    METHODS,
    PipelineConfig,
    load_config,
    main,
    read_evaluation,
)
from socfusion.datamodel import read_timeseries_csv, write_timeseries_csv, TimeSeriesDataset
from socfusion.ekf import TRACE_HEADER

SMALL = """
[cell]
q_total = 3600.0
[data]
lc_c_rate = 0.5
[virtual_sensor]
mlpv_epochs = 20
mlpv_lr = 1e-3
h_epochs = 5
cluster_points = 300
[calibration]
budget = 12
"""

EXPECTED = ["lc_ocv.csv", "geis.csv", "train.csv", "test.csv", "simulate_report.csv", "params.ini",
            "geis_fits.csv", "vs.json", "noise_baseline.ini", "noise_fusion.ini",
            "calibration_log_baseline.csv", "calibration_log_fusion.csv", "evaluation_train.csv",
            "evaluation_test.csv", "traces_bekf.csv", "traces_vs.csv", "traces_vsf.csv", "report.csv"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _untimed(path):
    """File rows with wall-clock columns and rows removed."""
    rows = _rows(path)
    if path.name.startswith("evaluation_"):
        return [r[:3] for r in rows]
    if path.name == "report.csv":
        return [r for r in rows if not r[0].endswith("median_step_s")]
    return rows


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.ini"
    path.write_text(SMALL)
    return path


@pytest.fixture(scope="module")
def run_dir(config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["pipeline", "--config", str(config), "--out-dir", str(out), "--seed", "3"]) == 0
    return out


def test_pipeline_writes_every_artifact(run_dir):
    for name in EXPECTED:
        path = run_dir / name
        assert path.is_file(), name
        assert path.stat().st_size > 0, name
        if path.suffix == ".csv":
            assert len(path.read_text().splitlines()) >= 2, name


def test_simulate_datasets(run_dir, config):
    cfg = load_config(str(config))
    assert set(cfg.train_kinds) != set(cfg.test_kinds)
    assert not set(cfg.train_seeds()) & set(cfg.test_seeds())
    rep = {r[0]: r[1] for r in _rows(run_dir / "simulate_report.csv")[1:]}
    test = read_timeseries_csv(run_dir / "test.csv")
    k = int(rep["test_seam_0"])
    assert test.i[k] != test.i[k - 1]
    assert float(rep["test_seam_0_current_jump"]) == test.i[k] - test.i[k - 1]
    assert int(rep["test_rows"]) == len(test)


def test_evaluation_shape(run_dir):
    for split in ("train", "test"):
        rows = _rows(run_dir / f"evaluation_{split}.csv")
        assert tuple(rows[0]) == EVAL_HEADER
        assert [r[0] for r in rows[1:]] == list(METHODS)
        assert all(len(r) == 4 for r in rows)
        res = read_evaluation(run_dir / f"evaluation_{split}.csv")
        assert all(x >= 0 for v in res.values() for x in v)


def test_traces_align_with_test_set(run_dir):
    test = read_timeseries_csv(run_dir / "test.csv")
    for m in METHODS:
        rows = _rows(run_dir / f"traces_{m}.csv")
        assert tuple(rows[0]) == TRACE_HEADER
        assert len(rows) - 1 == len(test)
        assert [int(r[0]) for r in rows[1:]] == list(range(test.k0, test.k0 + len(test)))
        assert [float(r[1]) for r in rows[1:]] == list(test.soc)


def test_pipeline_is_deterministic(run_dir, config, tmp_path):
    assert main(["pipeline", "--config", str(config), "--out-dir", str(tmp_path), "--seed", "3"]) == 0
    for name in EXPECTED:
        if name.startswith("evaluation_") or name == "report.csv":
            assert _untimed(run_dir / name) == _untimed(tmp_path / name), name
        else:
            assert (run_dir / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_seed_changes_data(run_dir, config, tmp_path):
    assert main(["simulate", "--config", str(config), "--out-dir", str(tmp_path), "--seed", "4"]) == 0
    assert (run_dir / "train.csv").read_bytes() != (tmp_path / "train.csv").read_bytes()


def test_estimates_ignore_reference_column(run_dir, tmp_path):
    for name in EXPECTED:
        shutil.copy(run_dir / name, tmp_path / name)
    test = read_timeseries_csv(tmp_path / "test.csv")
    write_timeseries_csv(TimeSeriesDataset(test.i, test.v, 1.0 - test.soc), tmp_path / "test.csv")
    assert main(["evaluate", "--out-dir", str(tmp_path)]) == 0
    for m in METHODS:
        a = [r[2] for r in _rows(run_dir / f"traces_{m}.csv")]
        b = [r[2] for r in _rows(tmp_path / f"traces_{m}.csv")]
        assert a == b
    # the scores do use the reference column
    assert _untimed(run_dir / "evaluation_test.csv") != _untimed(tmp_path / "evaluation_test.csv")


def test_missing_artifact_names_stage(tmp_path, capsys):
    assert main(["evaluate", "--out-dir", str(tmp_path)]) == 3
    assert "'simulate'" in capsys.readouterr().err


def test_missing_virtual_sensor(run_dir, tmp_path, capsys):
    for name in ("train.csv", "params.ini"):
        shutil.copy(run_dir / name, tmp_path / name)
    assert main(["calibrate", "--mode", "fusion", "--out-dir", str(tmp_path)]) == 3
    assert "'train-vs'" in capsys.readouterr().err


def test_missing_calibration(run_dir, tmp_path, capsys):
    for name in ("train.csv", "test.csv", "params.ini", "vs.json", "noise_baseline.ini"):
        shutil.copy(run_dir / name, tmp_path / name)
    assert main(["evaluate", "--out-dir", str(tmp_path)]) == 3
    assert "calibrate --mode fusion" in capsys.readouterr().err


@pytest.mark.parametrize("text", [
    "[virtual_sensor]\nM = 0\n",
    "[virtual_sensor]\nunknown_key = 1\n",
    "[nonsense]\nx = 1\n",
    "[data]\nsigma_v = abc\n",
    "[data]\ntrain_kinds = sprint\n",
    "[cell]\ntheta_tau1 = -1.0\n",
    "[calibration]\nlower = 1e-6, 1e-6\n",
])
def test_invalid_config_exits_2(tmp_path, text, capsys):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    assert main(["simulate", "--config", str(path), "--out-dir", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_invalid_overrides_exit_2(tmp_path):
    assert main(["calibrate", "--budget", "3", "--out-dir", str(tmp_path)]) == 2
    assert main(["calibrate", "--mode", "other"]) == 2
    assert main(["unknown-stage"]) == 2
    assert main(["simulate", "--config", str(tmp_path / "absent.ini")]) == 2


def test_numerical_failure_exits_4(run_dir, tmp_path, capsys):
    shutil.copy(run_dir / "train.csv", tmp_path / "train.csv")
    text = (run_dir / "params.ini").read_text().splitlines()
    text = [("theta_tau1 = -1.0" if line.startswith("theta_tau1") else line) for line in text]
    (tmp_path / "params.ini").write_text("\n".join(text) + "\n")
    assert main(["calibrate", "--out-dir", str(tmp_path), "--budget", "6"]) == 4
    assert "numerical failure" in capsys.readouterr().err


def test_report_rows(run_dir, capsys):
    assert main(["report", "--out-dir", str(run_dir)]) == 0
    out = capsys.readouterr().out
    assert "test_vsf_rmse," in out and "test_tv_order_vsf_bekf_vs," in out


def test_default_config_is_valid():
    cfg = load_config(None)
    assert cfg == PipelineConfig()
    assert cfg.bbo.budget == 100 and cfg.vs.M == 4 and cfg.vs.pole_radius == 0.65
