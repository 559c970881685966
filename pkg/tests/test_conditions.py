import numpy as np
import pytest

from darboux import conditions as co
from darboux import expr as ex
from darboux import problem as pr

from conftest import bundled, make_spec, point_problem


def with_equation(name, alpha, i, rhs):
    data = bundled(name)
    for eq in data["equations"]:
        if eq["alpha"] == alpha and eq["i"] == i:
            eq["rhs"] = rhs
    return pr.from_dict(data, name=name)


def test_dependency():
    assert co.check_dependency(pr.load("darboux_3rd")).passed
    rep = co.check_dependency(with_equation("darboux_3rd", 2, 1, "v + 0.1*u"))
    assert not rep.passed
    assert rep.worst == pytest.approx(0.1, abs=1e-15)
    assert rep.details["violations"][0] == {"alpha": 2, "i": 2, "j": 1, "beta": 1, "max": pytest.approx(0.1)}
    rep = co.check_dependency(pr.load("scc_a"))
    assert rep.passed and rep.worst == 0.0


def three_dim_bracket_problem():
    return pr.from_dict({
        "n": 3, "m": 1,
        "frame": [["1", "0", "0"], ["0", "1", "x1"], ["0", "0", "1"]],
        "equations": [{"alpha": 1, "i": 1, "rhs": "0"}, {"alpha": 1, "i": 2, "rhs": "0"}],
        "manifolds": [{"alpha": 1, "index_set": [1, 2], "parametrization": ["0", "0", "s1"], "data": "s1"}],
        "base_point": [0, 0, 0], "domain_half_widths": [0.1, 0.1, 0.1], "grid": [5, 5, 5],
    })


def test_involution():
    assert co.check_involution(pr.load("darboux_3rd")).passed
    assert co.check_involution(pr.load("noncommuting")).passed
    rep = co.check_involution(three_dim_bracket_problem())
    assert not rep.passed
    assert rep.witness["l"] == 3 and rep.witness["c"] == pytest.approx(1.0, abs=1e-12)


def test_integrability_examples():
    rep = co.check_integrability(pr.load("darboux_3rd"))
    assert rep.passed and rep.worst <= 1e-9
    rep = co.check_integrability(pr.load("nonintegrable"))
    assert not rep.passed and abs(rep.worst - 1.0) <= 1e-9
    rep = co.check_integrability(pr.load("noncommuting"))
    assert rep.passed and rep.worst <= 1e-9


def test_integrability_uses_structure_coefficients():
    spec = pr.load("noncommuting")
    s = co.draw_samples(spec, 50)
    lhs, rhs = co.integrability_terms(spec, 0, 0, 1, s)
    # the structure term c_12^1 f_1 = u is what balances the left side
    assert np.allclose(rhs, s.u[:, 0], atol=1e-14)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_integrability_reduces_to_coordinate_formula():
    spec = with_equation("darboux_3rd", 2, 2, "v + x*y*u^2")
    s = co.draw_samples(spec, 200, seed=4)
    lhs, rhs = co.integrability_terms(spec, 1, 0, 1, s)
    assert np.all(rhs == 0.0)
    f1, f2 = spec.f(1, 0), spec.f(1, 1)
    fu = spec.f(0, 0)
    # d_x f_2 + d_u f_2 * (u_x) + d_v f_2 * (v_x) - d_y f_1 - d_v f_1 * (v_y)
    direct = (s.eval(ex.diff(f2, "x1")) + s.eval(ex.diff(f2, "u1")) * s.eval(fu)
              + s.eval(ex.diff(f2, "u2")) * s.eval(f1)
              - s.eval(ex.diff(f1, "x2")) - s.eval(ex.diff(f1, "u2")) * s.eval(f2))
    assert np.max(np.abs(lhs - direct)) <= 1e-12


def test_integrability_antisymmetric_in_pair():
    spec = with_equation("darboux_3rd", 2, 2, "v + sin(x)*u")
    s = co.draw_samples(spec, 100)
    l12, r12 = co.integrability_terms(spec, 1, 0, 1, s)
    l21, r21 = co.integrability_terms(spec, 1, 1, 0, s)
    assert np.max(np.abs((l12 - r12) + (l21 - r21))) <= 1e-12


def test_bounded_coefficients():
    rep = co.check_bounded_coeffs(pr.load("darboux_3rd"))
    assert rep.passed and rep.worst == 0.0
    rep = co.check_bounded_coeffs(pr.load("noncommuting"))
    assert rep.passed and rep.worst == pytest.approx(1.0, abs=1e-12)
    d = point_problem([["1/x", "0"], ["0", "1/x"]], ["0", "0"])
    d["base_point"] = [1.0, 0.0]
    d["manifolds"][0]["parametrization"] = ["1", "0"]
    rep = co.check_bounded_coeffs(pr.from_dict(d))
    assert rep.passed and np.isfinite(rep.worst) and rep.worst > 0


def test_domain_errors_fail_the_report():
    d = point_problem([["1", "0"], ["0", "1"]], ["log(u)", "log(u)"], data="0")
    rep = co.check_integrability(pr.from_dict(d))
    assert not rep.passed and "log" in rep.message


def test_u_sample_box_default_and_override():
    spec = pr.load("frobenius_point")
    assert np.allclose(co.u_sample_box(spec), [[0.0, 2.0]])
    spec = make_spec("frobenius_point", u_sample_box=[[0.5, 0.7]])
    s = co.draw_samples(spec, 100)
    assert s.u.min() >= 0.5 and s.u.max() <= 0.7


def test_reports_are_deterministic():
    spec = pr.load("nonintegrable")
    a = co.check_integrability(spec).to_dict()
    b = co.check_integrability(spec).to_dict()
    assert a == b and a["seed"] == spec.settings.seed
    c = co.check_integrability(spec, co.draw_samples(spec, seed=99)).to_dict()
    assert c["witness"] != a["witness"]


def test_lipschitz_and_bound():
    spec = pr.load("frobenius_point")
    L, M = co.lipschitz_and_bound(spec)
    assert L == 1.0
    assert 1.9 < M <= 2.0
