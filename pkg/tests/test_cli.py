import json
import subprocess
import sys

import pytest

from fes.cli import main

SMALL = ["--users", "20", "--services", "30", "--nmin", "5", "--s2-samples", "30", "--s1-epochs", "5", "--s2-epochs", "50", "--train-frac", "0.3"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_load(capsys):
    code, out, _ = run(capsys, "load", *SMALL)
    assert code == 0 and json.loads(out)["n_users"] == 20


def test_cluster_fill_train_predict(capsys, tmp_path):
    out_dir = str(tmp_path / "eng")
    code, out, _ = run(capsys, "cluster", *SMALL, "--out", out_dir)
    assert code == 0 and "UICL" in json.loads(out)
    code, out, _ = run(capsys, "fill", *SMALL, "--out", out_dir)
    assert code == 0 and json.loads(out)["matrices"] > 0
    code, out, _ = run(capsys, "train", *SMALL, "--out", out_dir)
    assert code == 0
    code, out, _ = run(capsys, "predict", "--out", out_dir, "--user", "3", "--service", "4")
    res = json.loads(out)
    assert code == 0 and res["value"] > -1 and len(res["stage1_outputs"]) == 4


def test_bench_writes_csv(capsys, tmp_path):
    code, out, _ = run(capsys, "bench", "drift", *SMALL, "--runs", "1", "--eval-queries", "5", "--schedule", "0.2,0.3", "--out", str(tmp_path))
    assert code == 0
    res = json.loads(out)
    text = open(res["results"]).read()
    assert "drift mechanism" in text and res["rows"] == 2


def test_config_error_exit_2(capsys):
    code, _, err = run(capsys, "load", "--tau", "1.5")
    assert code == 2 and "configuration error" in err
    code, _, _ = run(capsys, "bench", "drift", *SMALL, "--schedule", "0.3,0.2")
    assert code == 2


def test_data_error_exit_3(capsys, tmp_path):
    code, _, err = run(capsys, "load", "--dataset", str(tmp_path / "missing"))
    assert code == 3
    code, _, _ = run(capsys, "predict", "--out", str(tmp_path), "--user", "0", "--service", "0")
    assert code == 3


def test_synth_round_trip(capsys, tmp_path):
    code, _, _ = run(capsys, "synth", "--out", str(tmp_path / "d"), "--users", "8", "--services", "9")
    assert code == 0
    code, out, _ = run(capsys, "load", "--dataset", str(tmp_path / "d"))
    assert code == 0 and json.loads(out)["n_services"] == 9


def test_console_entry():
    res = subprocess.run([sys.executable, "-m", "fes.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "bench" in res.stdout


def test_argparse_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["bench", "nonsense"])
    assert info.value.code == 2
