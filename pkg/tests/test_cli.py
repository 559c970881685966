import json
import subprocess
import sys

import pytest

from darboux import problem as pr
from darboux import solver as so
from darboux.cli import main
from darboux.reports import DiagnosticsReport

from conftest import bundled


def run(*argv):
    return main(["-q", *map(str, argv)])


def report(path):
    return DiagnosticsReport.from_json(path.read_text())


def test_check_exit_codes(tmp_path):
    assert run("check", "examples/scc_a", "--report", tmp_path / "a.json") == 0
    assert run("check", "examples/scc_b", "--report", tmp_path / "b.json") == 1
    rep = report(tmp_path / "b.json")
    assert not rep.sections["scc"]["passed"]
    assert [k for k, s in rep.sections.items() if not s["passed"]] == ["scc"]
    assert run("check", "nonintegrable", "--report", tmp_path / "n.json") == 1
    integ = report(tmp_path / "n.json").sections["integrability"]
    assert not integ["passed"] and abs(integ["worst"] - 1.0) <= 1e-9


def test_check_writes_to_stdout_without_report(capsys):
    assert run("check", "frobenius_point") == 0
    rep = DiagnosticsReport.from_json(capsys.readouterr().out)
    assert rep.passed and rep.command == "check"
    assert set(rep.sections) == {"frame", "transversality", "scc", "dependency", "involution", "integrability",
                                 "bounded_coeffs"}


def test_solve_manufactured(tmp_path):
    out = tmp_path / "nested" / "out"
    assert run("solve", "darboux_3rd", "-o", out) == 0
    rep = report(out / "report.json")
    assert rep.passed and not rep.forced
    assert rep.summary["sup_error"] <= 1e-3
    lines = (out / "solution.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,u1,u2" and len(lines) == 41 * 41 + 1
    assert run("verify", "darboux_3rd", out / "solution.csv", "--report", tmp_path / "v.json") == 0


def test_solve_refuses_failed_hypotheses(tmp_path):
    assert run("solve", "nonintegrable", "-o", tmp_path) == 1
    assert not (tmp_path / "solution.csv").exists()
    assert report(tmp_path / "report.json").summary["solved"] is False


def test_forced_solve_of_nonintegrable(tmp_path):
    assert run("solve", "nonintegrable", "-o", tmp_path, "--force") == 1
    rep = report(tmp_path / "report.json")
    assert rep.forced and rep.trace["termination"] == "converged"
    assert rep.residuals["restricted_sup"] <= 1e-10
    assert rep.residuals["full_sup"] > 0.1
    assert (tmp_path / "solution.csv").exists()


def test_forced_solve_without_scc_reports_the_node(tmp_path):
    assert run("solve", "scc_b", "-o", tmp_path, "--force") == 1
    rep = report(tmp_path / "report.json")
    assert "leaves the box" in rep.summary["error"] and "node" in rep.summary["error"]


def test_verify_zero_table_fails_on_data(tmp_path):
    spec = pr.load("scc_a")
    so.write_table(so.SolutionGrid.zeros(spec.box, spec.grid, 2), tmp_path / "zero.csv")
    assert run("verify", "scc_a", tmp_path / "zero.csv", "--report", tmp_path / "v.json") == 1
    rep = report(tmp_path / "v.json")
    assert not rep.summary["data_ok"] and rep.residuals["data_sup"] >= 0.5


def test_verify_xy_table(tmp_path):
    spec = pr.load("nonintegrable")
    grid = so.SolutionGrid.from_function(spec.box, spec.grid, lambda x: x[:, 0] * x[:, 1])
    so.write_table(grid, tmp_path / "xy.csv")
    assert run("verify", "nonintegrable", tmp_path / "xy.csv", "--report", tmp_path / "v.json") == 1
    rr = report(tmp_path / "v.json").residuals
    assert rr["restricted_sup"] <= 1e-10 and rr["full_sup"] > 0.1


def test_input_errors(tmp_path):
    assert run("check", tmp_path / "missing.json") == 2
    bad = bundled("scc_a")
    bad["grid"] = [41]
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert run("check", tmp_path / "bad.json", "--report", tmp_path / "r.json") == 2
    assert report(tmp_path / "r.json").exit_code == 2
    spec = pr.load("scc_a")
    so.write_table(so.SolutionGrid.zeros(spec.box, (3, 3), 2), tmp_path / "small.csv")
    assert run("verify", "scc_a", tmp_path / "small.csv") == 2
    assert run("verify", "scc_a", tmp_path / "absent.csv") == 2
    with pytest.raises(SystemExit) as info:
        run("solve", "scc_a")
    assert info.value.code == 2
    with pytest.raises(SystemExit):
        run("--threads", "0", "check", "scc_a")


def test_outputs_are_deterministic(tmp_path):
    for k in ("a", "b"):
        assert run("--threads", "1" if k == "a" else "3", "solve", "curved_data", "-o", tmp_path / k) == 0
    for name in ("report.json", "solution.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_and_timings(tmp_path):
    run("--seed", "12345678901234567890", "check", "scc_a", "--report", tmp_path / "s.json")
    rep = report(tmp_path / "s.json")
    assert rep.seed == 12345678901234567890 and rep.sections["dependency"]["seed"] == rep.seed
    assert rep.timings is None
    run("--timings", "check", "scc_a", "--report", tmp_path / "t.json")
    assert report(tmp_path / "t.json").timings["scc"] >= 0.0


def test_report_round_trip(tmp_path):
    run("solve", "scc_a", "-o", tmp_path)
    text = (tmp_path / "report.json").read_text()
    assert DiagnosticsReport.from_json(text).to_json() == text


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "darboux", "-q", "check", "frobenius_point"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert json.loads(out.stdout)["passed"] is True
