import math

import pandas as pd
import pytest

from capesynth.data_io import read_binary_synthetic
from main import main

SIZES = ["--l", "4", "--N", "1000", "--K", "10", "--T", "1000", "--alpha-max", "40"]


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def fields(out: str) -> dict:
    return dict(line.split("=", 1) for line in out.splitlines() if "=" in line)


@pytest.fixture
def blobs_csv(tmp_path, capsys):
    path = tmp_path / "blobs.csv"
    code, out, _ = run(capsys, "make-blobs", "--num-classes", "3", "--per-class", "40", "--num-features", "4",
                       "--out", str(path), "--log-level", "ERROR")
    assert code == 0
    assert fields(out) == {"rows": "120", "features": "4", "classes": "3"}
    return path


# ---------------------------------------------------------------- calibrate / account

def test_calibrate_infinite_epsilon_is_noiseless(capsys):
    code, out, _ = run(capsys, "calibrate", "--epsilon", "inf", "--S", "4", *SIZES)
    assert code == 0
    report = fields(out)
    assert report["tau_g"] == "0.0"
    assert report["tau_e"] == "0.0"
    assert report["epsilon"] == "inf"


def test_calibrate_single_client_has_no_correlated_noise(capsys):
    code, out, _ = run(capsys, "calibrate", "--epsilon", "10", "--S", "1", *SIZES)
    assert code == 0
    report = fields(out)
    assert report["tau_e"] == "0.0"
    assert float(report["tau_g"]) == float(report["tau_central"]) > 0


def test_centralized_calibration_ignores_client_count(capsys):
    code, out, _ = run(capsys, "calibrate", "--epsilon", "10", "--mode", "centralized", "--S", "7", *SIZES)
    assert code == 0
    report = fields(out)
    assert report["S"] == "1"
    assert report["tau_e"] == "0.0"
    assert float(report["tau_g"]) == float(report["tau_central"])


def test_calibrate_then_account_round_trip(capsys):
    _, out, _ = run(capsys, "calibrate", "--epsilon", "10", "--S", "10", *SIZES)
    calibrated = fields(out)
    assert float(calibrated["tau_g"]) == pytest.approx(math.sqrt(10) * float(calibrated["tau_central"]))

    code, out, _ = run(capsys, "account", "--tau-g", calibrated["tau_central"], *SIZES)
    assert code == 0
    epsilon = float(fields(out)["epsilon"])
    assert epsilon <= 10.0
    assert epsilon == pytest.approx(10.0, rel=0.01)


def test_account_huge_noise_leaves_conversion_term(capsys):
    code, out, _ = run(capsys, "account", "--tau-g", "1e12", *SIZES)
    assert code == 0
    report = fields(out)
    assert float(report["epsilon"]) == pytest.approx(math.log(1e5) / 39, rel=1e-9)
    assert report["alpha_star"] == "40"


def test_account_less_noise_costs_more(capsys):
    _, out, _ = run(capsys, "account", "--tau-g", "8", *SIZES)
    wide = float(fields(out)["epsilon"])
    _, out, _ = run(capsys, "account", "--tau-g", "4", *SIZES)
    assert float(fields(out)["epsilon"]) > wide


def test_account_local_sampling_diagnostic(capsys):
    code, out, _ = run(capsys, "account", "--tau-g", "8", "--S", "10", "--local-sampling", *SIZES)
    assert code == 0
    report = fields(out)
    assert float(report["local_sampling_rate"]) == pytest.approx(10 * float(report["sampling_rate"]))
    assert float(report["local_sampling_epsilon"]) > float(report["epsilon"])


def test_account_zero_noise_is_a_user_error(capsys):
    code, _, err = run(capsys, "account", "--tau-g", "0", *SIZES)
    assert code == 2
    assert "non-private" in err
    assert err.startswith("error: config:")


def test_unreachable_target_exits_with_calibration_error(capsys):
    code, _, err = run(capsys, "calibrate", "--epsilon", "1", "--l", "4", "--N", "1000", "--K", "10",
                       "--T", "100", "--alpha-max", "3")
    assert code == 2
    assert err.startswith("error: calibration:")


def test_curve_csv_is_written(capsys, tmp_path):
    code, _, _ = run(capsys, "account", "--tau-g", "20", "--curve-out", str(tmp_path / "curve.csv"), *SIZES)
    assert code == 0
    assert pd.read_csv(tmp_path / "curve.csv")["alpha"].tolist() == list(range(3, 41))


# ---------------------------------------------------------------- argument errors

def test_unknown_flag_is_a_config_error(capsys):
    code, _, err = run(capsys, "calibrate", "--epsilonn", "1")
    assert code == 2
    assert err.startswith("error: config:")


def test_missing_subcommand(capsys):
    code, _, err = run(capsys)
    assert code == 2
    assert "missing subcommand" in err


def test_missing_required_flag_is_named(capsys):
    code, _, err = run(capsys, "calibrate", "--epsilon", "1", "--l", "4")
    assert code == 2
    assert "--N" in err


def test_missing_input_file(capsys, tmp_path):
    code, _, err = run(capsys, "generate", "--input", str(tmp_path / "absent.csv"), "--l", "2",
                       "--mode", "non_private", "--out", str(tmp_path / "out.fdpc"))
    assert code == 2
    assert err.startswith("error: ")


# ---------------------------------------------------------------- generate / evaluate

def test_generate_writes_release_and_report(capsys, tmp_path, blobs_csv):
    out = tmp_path / "release.fdpc"
    code, stdout, _ = run(capsys, "generate", "--input", str(blobs_csv), "--mode", "non_private", "--l", "2",
                          "--S", "2", "--out", str(out))
    assert code == 0
    released = read_binary_synthetic(out)
    assert len(released) == 120
    assert fields(stdout)["epsilon"] == "inf"
    assert fields((tmp_path / "release.fdpc.report.txt").read_text())["tau_g"] == "0.0"


def test_generate_is_reproducible_and_thread_independent(capsys, tmp_path, blobs_csv):
    outputs = []
    for name, threads in (("a", "1"), ("b", "1"), ("c", "4")):
        path = tmp_path / f"{name}.fdpc"
        code, _, _ = run(capsys, "generate", "--input", str(blobs_csv), "--mode", "fed_cape", "--tau-g", "0.5",
                         "--l", "2", "--S", "4", "--seed", "7", "--threads", threads, "--out", str(path))
        assert code == 0
        outputs.append(path.read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]


def test_generate_with_indivisible_clients_exits_2(capsys, tmp_path, blobs_csv):
    code, _, err = run(capsys, "generate", "--input", str(blobs_csv), "--mode", "fed_cape", "--tau-g", "0.5",
                       "--l", "2", "--S", "7", "--out", str(tmp_path / "x.fdpc"))
    assert code == 2
    assert "divide N" in err
    assert not (tmp_path / "x.fdpc").exists()


def test_centralized_generate_ignores_client_count(capsys, tmp_path, blobs_csv):
    code, stdout, _ = run(capsys, "generate", "--input", str(blobs_csv), "--mode", "centralized", "--tau-g", "0.5",
                          "--l", "2", "--S", "7", "--out", str(tmp_path / "x.fdpc"))
    assert code == 0
    assert fields(stdout)["S"] == "1"
    assert len(read_binary_synthetic(tmp_path / "x.fdpc")) == 120


def test_evaluate_reads_an_explicit_release_report(capsys, tmp_path, blobs_csv):
    synthetic = tmp_path / "synthetic.csv"
    report_path = tmp_path / "elsewhere.txt"
    code, _, _ = run(capsys, "generate", "--input", str(blobs_csv), "--mode", "fed_cape", "--tau-g", "0.5",
                     "--l", "2", "--S", "4", "--seed", "3", "--out", str(synthetic), "--report", str(report_path))
    assert code == 0
    code, out, _ = run(capsys, "evaluate", "--synthetic", str(synthetic), "--train", str(blobs_csv),
                       "--test", str(blobs_csv), "--release-report", str(report_path), "--epochs", "2")
    assert code == 0
    report = fields(out)
    assert (report["mode"], report["l"], report["S"], report["seed"]) == ("fed_cape", "2", "4", "3")


def test_generate_needs_a_privacy_target(capsys, tmp_path, blobs_csv):
    code, _, err = run(capsys, "generate", "--input", str(blobs_csv), "--l", "2", "--out", str(tmp_path / "x.fdpc"))
    assert code == 2
    assert "--epsilon" in err


def test_evaluate_with_baseline(capsys, tmp_path, blobs_csv):
    synthetic = tmp_path / "synthetic.csv"
    code, _, _ = run(capsys, "generate", "--input", str(blobs_csv), "--mode", "non_private", "--l", "1",
                     "--seed", "9", "--out", str(synthetic))
    assert code == 0
    code, out, _ = run(capsys, "evaluate", "--synthetic", str(synthetic), "--train", str(blobs_csv),
                       "--test", str(blobs_csv), "--baseline", "--theta", "0.5", "--epochs", "10")
    assert code == 0
    report = fields(out)
    assert 0.0 <= float(report["accuracy"]) <= 1.0
    assert float(report["utility_ratio"]) == pytest.approx(float(report["accuracy"]) /
                                                           float(report["baseline_accuracy"]))
    assert report["meets_threshold"] == "True"
    assert (report["mode"], report["l"], report["S"], report["seed"]) == ("non_private", "1", "1", "9")
    assert report["epsilon"] == "inf"


# ---------------------------------------------------------------- sweep

def test_sweep_resume_adds_nothing(capsys, tmp_path, blobs_csv):
    out = tmp_path / "sweep.csv"
    argv = ["sweep", "--train", str(blobs_csv), "--modes", "non_private", "--l", "1,2", "--S", "2",
            "--epochs", "3", "--out", str(out)]
    code, stdout, _ = run(capsys, *argv)
    assert code == 0
    assert fields(stdout) == {"rows": "2", "failed": "0"}
    before = out.read_bytes()

    code, stdout, _ = run(capsys, *argv)
    assert code == 0
    assert fields(stdout)["rows"] == "2"
    assert out.read_bytes() == before


def test_sweep_empty_axis_exits_2(capsys, tmp_path, blobs_csv):
    code, _, err = run(capsys, "sweep", "--train", str(blobs_csv), "--l", "", "--out", str(tmp_path / "s.csv"))
    assert code == 2
    assert "empty" in err


# ---------------------------------------------------------------- config file

def test_config_file_supplies_defaults_and_flags_win(capsys, tmp_path):
    config = tmp_path / "run.conf"
    config.write_text("epsilon=10\nl=4\nN=1000\nK=10\nT=1000\nalpha-max=40\nmode=centralized\n")
    code, out, _ = run(capsys, "calibrate", "--config", str(config))
    assert code == 0
    from_file = fields(out)
    assert from_file["mode"] == "centralized"
    assert float(from_file["epsilon"]) <= 10.0

    code, out, _ = run(capsys, "calibrate", "--config", str(config), "--epsilon", "2")
    assert code == 0
    overridden = fields(out)
    assert float(overridden["epsilon"]) <= 2.0
    assert float(overridden["tau_central"]) > float(from_file["tau_central"])


def test_config_file_unknown_key_exits_2(capsys, tmp_path):
    config = tmp_path / "run.conf"
    config.write_text("epsilon=10\nbogus=1\n")
    code, _, err = run(capsys, "calibrate", "--config", str(config))
    assert code == 2
    assert "bogus" in err
