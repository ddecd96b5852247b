import csv
import json
import subprocess
import sys

from mmsde.cli import main
from mmsde.harness import BUILTIN_SCENARIOS, builtin_document


def data_rows(path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def test_audit_writes_table(tmp_path, capsys):
    assert main(["audit", "reflected-ou", "--out", str(tmp_path)]) == 0
    rows = data_rows(tmp_path / "reflected-ou_audit.csv")
    assert rows and all(r["passed"] == "True" for r in rows)
    assert capsys.readouterr().out == ""


def test_unknown_subcommand_is_usage_error(capsys):
    assert main(["frobnicate"]) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_flag_value_is_usage_error(tmp_path):
    assert main(["average", "reflected-ou", "--eps", "a,b", "--out", str(tmp_path)]) == 2
    assert main(["average", "reflected-ou", "--jobs", "0", "--out", str(tmp_path)]) == 2


def test_average_trend_run(tmp_path, capsys):
    code = main(["average", "reflected-ou", "--eps", "0.2,0.1,0.05", "--gamma-pow", "1.5",
                 "--out", str(tmp_path)])
    assert code == 0
    rows = data_rows(tmp_path / "reflected-ou_average.csv")
    assert len(rows) == 3
    head = (tmp_path / "reflected-ou_average.csv").read_text().splitlines()[:2]
    assert head[0].startswith("# scenario_sha256=") and head[1] == "# seed=20240101"
    assert capsys.readouterr().out == ""


def test_stdout_flag(tmp_path, capsys):
    assert main(["audit", "box-2d", "--out", str(tmp_path), "--stdout"]) == 0
    assert capsys.readouterr().out.startswith("scenario,seed,assumption")


def test_regime_override_rejected(tmp_path, capsys):
    assert main(["average", "reflected-ou", "--gamma-pow", "1", "--out", str(tmp_path)]) == 1
    assert "regime" in capsys.readouterr().err


def test_invalid_scenario_file(tmp_path):
    bad = tmp_path / "bad.json"
    doc = builtin_document("reflected-ou")
    doc["unexpected"] = 1
    bad.write_text(json.dumps(doc))
    assert main(["audit", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["audit", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 1


def test_capability_error_exit(tmp_path):
    doc = builtin_document("reflected-ou")
    doc["coefficients"]["sigma1_depends_on_y"] = True
    path = tmp_path / "ydep.json"
    path.write_text(json.dumps(doc))
    assert main(["ldp-rate", str(path), "--out", str(tmp_path)]) == 1


def test_seed_determines_output_and_jobs_do_not(tmp_path):
    args = ["weak-probe", "reflected-ou", "--eps", "0.2,0.1", "--reps", "60"]
    for name, extra in (("a", ["--jobs", "1"]), ("b", ["--jobs", "4"]), ("c", ["--seed", "5"])):
        assert main(args + extra + ["--out", str(tmp_path / name)]) == 0
    a, b, c = (data_rows(tmp_path / n / "reflected-ou_weak-probe.csv") for n in "abc")
    assert a == b and a != c
    ja = json.loads((tmp_path / "a" / "reflected-ou_weak-probe.json").read_text())
    jb = json.loads((tmp_path / "b" / "reflected-ou_weak-probe.json").read_text())
    assert ja["report"] == jb["report"]


def test_simulate_writes_path_csv(tmp_path):
    assert main(["simulate", "box-2d", "--reps", "3", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "box-2d_simulate_path0.csv").read_text()
    assert "t,x_0,x_1,K_variation" in text and "# scenario_sha256=" in text


def test_list_scenarios_module_entry():
    out = subprocess.run([sys.executable, "-m", "mmsde", "list-scenarios"], capture_output=True,
                         text=True, check=True)
    assert out.stdout.split() == list(BUILTIN_SCENARIOS)
