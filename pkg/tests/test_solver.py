import numpy as np
import pytest

from darboux import problem as pr
from darboux import solver as so
from darboux.geometry import Box

from conftest import bundled, point_problem


def plan_for(spec, shape=None):
    shape = tuple(shape or spec.grid)
    charts = so.chart_for(spec)
    plan = so.build_plan(spec, charts, so.SolutionGrid.zeros(spec.box, shape, spec.m))
    plan.ghat = np.array([mf.data_values(np.zeros((1, mf.n_params)))[0] for mf in spec.manifolds])
    return charts, plan


# ---- SolutionGrid ---------------------------------------------------------

BOX = Box((0.0, 0.0), (1.0, 2.0))


def test_interpolation_hits_nodes_exactly():
    rng = np.random.default_rng(0)
    g = so.SolutionGrid(BOX, (5, 7), rng.normal(size=(35, 2)))
    assert np.array_equal(g.interpolate(g.nodes()), g.values)


def test_interpolation_exact_on_affine_data():
    g = so.SolutionGrid.from_function(BOX, (4, 6), lambda x: 2 * x[:, 0] + 3 * x[:, 1] - 1)
    pts = np.random.default_rng(1).uniform(BOX.lower, BOX.upper, size=(200, 2))
    assert np.allclose(g.interpolate(pts)[:, 0], 2 * pts[:, 0] + 3 * pts[:, 1] - 1, atol=1e-13)


def test_interpolation_cell_center():
    g = so.SolutionGrid(Box((0.5, 0.5), (0.5, 0.5)), (2, 2), [0.0, 0.0, 0.0, 1.0])
    assert g.interpolate(np.array([0.5, 0.5]))[0] == 0.25


def test_interpolation_rejects_outside_points():
    g = so.SolutionGrid.zeros(BOX, (3, 3), 1)
    g.interpolate(np.array([[1.0 + 1e-13, 0.0]]))
    with pytest.raises(so.OutOfBoxError):
        g.interpolate(np.array([[1.0 + 1e-9, 0.0]]))


def test_grid_invariants():
    with pytest.raises(ValueError):
        so.SolutionGrid(BOX, (3, 3), np.full(9, np.nan))
    with pytest.raises(ValueError):
        so.SolutionGrid(BOX, (1, 3), np.zeros(3))
    nodes = so.SolutionGrid.zeros(BOX, (2, 3), 1).nodes()
    assert nodes[:3].tolist() == [[-1.0, -2.0], [-1.0, 0.0], [-1.0, 2.0]]


# ---- initial iterate and one Picard step ---------------------------------

def test_initial_iterate_case_a(scc_a):
    _, plan = plan_for(scc_a)
    u0 = so.initial_iterate(scc_a, plan)
    x = u0.nodes()
    assert np.allclose(u0.values[:, 0], np.exp(1.5 * x[:, 1]), rtol=1e-12)
    assert np.allclose(u0.values[:, 1], np.exp(2.0 * x[:, 0]), rtol=1e-12)


def zero_rhs_spec():
    data = bundled("darboux_3rd")
    for eq in data["equations"]:
        eq["rhs"] = "0"
    data["manifolds"][1]["data"] = "2.5"
    return pr.from_dict(data)


def test_zero_system_fixed_by_initial_iterate():
    spec = zero_rhs_spec()
    _, plan = plan_for(spec)
    u0 = so.initial_iterate(spec, plan)
    assert np.all(u0.values[:, 1] == 2.5)
    assert np.allclose(u0.values[:, 0], np.exp(u0.nodes()[:, 1]), rtol=1e-14)
    noise = u0.with_values(np.random.default_rng(0).normal(size=u0.values.shape))
    step, clamps = so.picard_step(plan, noise)
    assert np.array_equal(step.values, u0.values)
    res = so.solve(spec)
    assert res.trace.iterations == 1 and res.trace.distances == [0.0]


def test_one_step_reaches_xy_for_nonintegrable():
    spec = pr.load("nonintegrable")
    _, plan = plan_for(spec)
    rough = so.SolutionGrid(spec.box, spec.grid, np.random.default_rng(2).normal(size=(np.prod(spec.grid), 1)))
    step, _ = so.picard_step(plan, rough)
    x = step.nodes()
    assert np.max(np.abs(step.values[:, 0] - x[:, 0] * x[:, 1])) <= 1e-12


def test_exact_solution_is_nearly_fixed(scc_a):
    _, plan = plan_for(scc_a)
    exact = so.SolutionGrid.from_function(scc_a.box, scc_a.grid,
                                          lambda x: np.repeat(np.exp(x.sum(axis=1))[:, None], 2, axis=1))
    step, _ = so.picard_step(plan, exact)
    assert step.sup_distance(exact) <= 1e-5


# ---- solve ------------------------------------------------------------------

@pytest.mark.parametrize("name", ["scc_a", "darboux_3rd", "frobenius_point", "noncommuting_reordered", "curved_data"])
def test_manufactured_solutions(name):
    spec = pr.load(name)
    res = so.solve(spec)
    assert res.converged
    assert so.exact_error(spec, res.grid) <= 1e-3
    assert res.trace.clamp_events == 0 and res.trace.sizing_ok
    assert all(r <= 0.6 for r in res.trace.ratios[1:])
    step, _ = so.picard_step(res.plan, res.grid, res.trace.value_radius)
    assert step.sup_distance(res.grid) <= 10 * spec.settings.tol


def test_initial_iterates_agree(scc_a):
    a = so.solve(scc_a, initial="data")
    b = so.solve(scc_a, initial="constant", plan=a.plan)
    assert a.grid.sup_distance(b.grid) <= 10 * scc_a.settings.tol


def test_iteration_limit_raises_with_trace(scc_a):
    with pytest.raises(so.ConvergenceError) as info:
        so.solve(scc_a, max_iter=3)
    trace = info.value.trace
    assert trace.termination == "max-iterations" and trace.iterations == 3


def test_growing_distances_abort():
    d = point_problem([["1", "0"], ["0", "1"]], ["40*u", "40*u"], hw=(0.1, 0.1), grid=(11, 11))
    d["value_radius"] = 1e6
    spec = pr.from_dict(d)
    with pytest.raises(so.ConvergenceError) as info:
        so.solve(spec)
    trace = info.value.trace
    assert trace.termination == "non-contraction"
    assert not trace.sizing_ok
    assert all(r > 1 for r in trace.ratios[-3:])


def test_value_box_clamping_is_counted():
    d = point_problem([["1", "0"], ["0", "1"]], ["u", "u"], hw=(0.1, 0.1), grid=(11, 11))
    d["value_radius"] = 0.05
    res = so.solve(pr.from_dict(d))
    assert res.trace.clamp_events > 0


# ---- residuals ------------------------------------------------------------

def test_zero_problem_has_zero_residuals():
    data = point_problem([["1", "0"], ["0", "1"]], ["0", "0"], data="0", grid=(11, 11))
    spec = pr.from_dict(data)
    charts = so.chart_for(spec)
    rr = so.residuals(spec, charts, so.SolutionGrid.zeros(spec.box, spec.grid, 1))
    assert rr.full_sup == 0.0 and rr.restricted_sup == 0.0 and rr.data_sup == 0.0


def test_nonintegrable_residual_gap():
    spec = pr.load("nonintegrable")
    res = so.solve(spec)
    rr = so.residuals(spec, so.chart_for(spec), res.grid)
    full = {e["i"]: e["sup"] for e in rr.full}
    interior_y = spec.box.half_widths[1] - res.grid.spacing[1]
    assert full[2] <= 1e-10
    assert full[1] == pytest.approx(interior_y, rel=1e-9)
    assert rr.restricted_sup <= 1e-10
    for e in rr.restricted:
        assert e["sup"] <= full[e["i"]] + 1e-9


def test_residuals_shrink_at_second_order(scc_a):
    sups = []
    for g, f in (((21, 31), 32), ((41, 61), 64)):
        spec = scc_a.with_grid(g).with_settings(flow_steps_per_diameter=f)
        res = so.solve(spec)
        sups.append(so.residuals(spec, so.chart_for(spec), res.grid).full_sup)
    assert sups[0] / sups[1] >= 3.5


def test_data_attainment(scc_a):
    res = so.solve(scc_a)
    rr = so.residuals(scc_a, so.chart_for(scc_a), res.grid, node_t=res.plan.t)
    assert rr.data_sup <= 1e-5
    assert [e["alpha"] for e in rr.data] == [1, 2]


# ---- table export -----------------------------------------------------------

def test_table_round_trip(tmp_path, scc_a):
    rng = np.random.default_rng(0)
    g = so.SolutionGrid(scc_a.box, (5, 4), rng.normal(size=(20, 2)))
    path = tmp_path / "sol.csv"
    so.write_table(g, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "x1,x2,u1,u2" and len(lines) == 21
    back = so.read_table(path, scc_a.box, (5, 4), 2)
    assert np.array_equal(back.values, g.values)


def test_table_errors(tmp_path, scc_a):
    g = so.SolutionGrid.zeros(scc_a.box, (3, 3), 2)
    path = tmp_path / "sol.csv"
    so.write_table(g, path)
    with pytest.raises(so.TableError, match="shape"):
        so.read_table(path, scc_a.box, (3, 4), 2)
    with pytest.raises(so.TableError, match="header"):
        so.read_table(path, scc_a.box, (3, 3), 1)
    with pytest.raises(so.TableError, match="coordinates"):
        so.read_table(path, Box((0.0, 0.0), (1.0, 1.0)), (3, 3), 2)
    path.write_text("x1,x2,u1,u2\n1,2,three,4\n")
    with pytest.raises(so.TableError):
        so.read_table(path, scc_a.box, (3, 3), 2)
    with pytest.raises(so.TableError):
        so.read_table(tmp_path / "missing.csv", scc_a.box, (3, 3), 2)
