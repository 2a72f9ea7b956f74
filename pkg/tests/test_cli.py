import json
import subprocess
import sys

import pytest

from ordinal_lvm.cli import main, read_data, InputError


def write_scenario(path, **kw):
    data = {"name": "tiny", "population": "symmetric", "n": 60, "replicates": 2, "seed": 9, "methods": ["fla"]}
    data.update(kw)
    path.write_text(json.dumps(data))
    return path


def test_read_data_errors_name_the_line(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n2,0\n")
    with pytest.raises(InputError, match="line 3"):
        read_data(bad)
    bad.write_text("a,b\n1,2\n2\n")
    with pytest.raises(InputError, match="line 3"):
        read_data(bad)
    bad.write_text("a,b\n1,x\n")
    with pytest.raises(InputError, match="line 2"):
        read_data(bad)


def test_fit_input_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,2\n0,1\n")
    assert main(["fit", "--data", str(bad), "--q", "1"]) == 1
    assert "line 3" in capsys.readouterr().err
    assert main(["fit", "--data", str(tmp_path / "missing.csv"), "--q", "1"]) == 1


def test_fit_binary_item_equal_frequencies(tmp_path):
    data = tmp_path / "d.csv"
    data.write_text("x\n" + "1\n2\n" * 50)
    out = tmp_path / "fit.txt"
    code = main(["fit", "--data", str(data), "--q", "1", "--out", str(out)])
    text = out.read_text()
    threshold = [line for line in text.splitlines() if line.startswith("x,tau_1,")][0]
    assert abs(float(threshold.split(",")[2])) < 1e-3
    assert code in (0, 2)


def test_fit_invalid_exit_code(tmp_path):
    data = tmp_path / "d.csv"
    data.write_text("a,b,c\n" + "1,1,1\n2,2,2\n" * 40)
    assert main(["fit", "--data", str(data), "--q", "1", "--max-iter", "100", "--out", str(tmp_path / "o.txt")]) == 2
    assert "valid: false" in (tmp_path / "o.txt").read_text()


def test_simulate_fit_round_trip(tmp_path):
    scen = write_scenario(tmp_path / "s.json", n=200, replicates=1)
    assert main(["simulate", "--scenario", str(scen), "--out", str(tmp_path / "sim")]) == 0
    data = tmp_path / "sim" / "replicate_0000.csv"
    out = tmp_path / "fit.txt"
    assert main(["fit", "--data", str(data), "--q", "2", "--method", "fla", "--out", str(out)]) == 0
    text = out.read_text()
    assert "valid: true" in text
    loadings = [abs(float(line.split(",")[2])) for line in text.splitlines() if ",alpha_" in line]
    free = [v for v in loadings if v != 0.0]
    assert len(free) == 9 and max(free) < 1.5


def test_study_outputs(tmp_path):
    scen = write_scenario(tmp_path / "s.json")
    out = tmp_path / "study.txt"
    assert main(["study", "--scenario", str(scen), "--methods", "fla,laplace", "--out", str(out), "--max-iter", "100"]) == 0
    text = out.read_text()
    assert "method: fla" in text and "method: laplace" in text
    machine = json.loads(out.with_suffix(".json").read_text())
    assert [m["method"] for m in machine["methods"]] == ["fla", "laplace"]
    assert main(["study", "--scenario", str(scen), "--methods", "bogus", "--out", str(out)]) == 1


def test_diagnose_outputs(tmp_path):
    scen = write_scenario(tmp_path / "s.json", population="table1")
    out = tmp_path / "d.txt"
    assert main(["diagnose", "--scenario", str(scen), "--out", str(out), "--grid", "4", "--grid-rows", "2"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "observation,beta1,beta2,skew_flag,kurtosis_flag"
    assert len([x for x in lines if x[:1].isdigit()]) == 60
    grid = out.with_suffix(".grid.csv").read_text().splitlines()
    assert len(grid) == 1 + 2 * 16


def test_unknown_scenario_key_is_input_error(tmp_path):
    scen = write_scenario(tmp_path / "s.json", colour="red")
    assert main(["simulate", "--scenario", str(scen), "--out", str(tmp_path / "x")]) == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ordinal_lvm", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "simulate" in proc.stdout
