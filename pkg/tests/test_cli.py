import json
import subprocess
import sys

import pytest

from nanodeloc.cli import build_parser, main

SMALL = ["--repetitions", "40", "--n-draws", "50"]


def test_predict_to_stdout(capsys):
    assert main(["predict", "--r-min", "1", "--r-max", "2", "--steps", "3"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("r,vz_th,")
    assert len(lines) == 4


def test_predict_gnuplot_file(tmp_path):
    assert main(["predict", "--steps", "5", "--gnuplot", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "predict.dat").read_text().splitlines()
    assert text[0].startswith("# r ")
    assert len(text) == 6
    assert (tmp_path / "manifest.json").exists()


def test_run(tmp_path, capsys):
    assert main(["run", "--seed", "1", "--out", str(tmp_path), "--no-raw", *SMALL]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["seed"] == 1 and summary["repetitions"] == 40
    assert (tmp_path / "covariance.json").exists()
    assert not (tmp_path / "ensemble.bin").exists()


def test_seed_is_mandatory_for_runs():
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["run", "--out", "x"])
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        build_parser().parse_args(["reproduce", "fig2", "--out", "x"])


def test_infer_from_run_output(tmp_path, capsys):
    main(["run", "--seed", "2", "--out", str(tmp_path / "run"), "--no-raw", *SMALL])
    capsys.readouterr()
    est = tmp_path / "run" / "covariance.json"
    assert main(["infer", "--estimate", str(est), "--n-draws", "100", "--seed", "4",
                 "--out", str(tmp_path / "inf")]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["xi_m"] > 0 and payload["physical"]["n_draws"] == 100
    assert (tmp_path / "inf" / "inference.json").exists()


def test_reproduce_fig2(tmp_path, capsys):
    assert main(["reproduce", "fig2", "--seed", "0", "--out", str(tmp_path), *SMALL]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["figure"] == "fig2"
    assert (tmp_path / "fig2_variance.csv").exists()


def test_compensate(tmp_path, capsys):
    assert main(["compensate", "--n-traces", "20", "--seed", "1", "--out", str(tmp_path)]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert len(payload["stages"]) == 2
    assert payload["residual_displacement_ratio"] < 0.2
    assert (tmp_path / "sweep.csv").exists()


def test_errors_exit_with_code_two(tmp_path, capsys):
    code = main(["run", "--seed", "0", "--out", str(tmp_path), "--fit-window", "5e-6",
                 "--repetitions", "4"])
    assert code == 2
    assert "[fit]" in capsys.readouterr().err
    assert main(["infer", "--estimate", str(tmp_path / "missing.json")]) == 2
    assert main(["run", "--seed", "0", "--out", str(tmp_path), "--r", "0.5"]) == 2


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "nanodeloc", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "predict" in out.stdout
