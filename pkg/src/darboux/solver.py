"""Picard iteration on a regular grid.

For each grid node ``x`` and unknown ``alpha`` the node is pulled back to
``t = psi_alpha^{-1}(x)``; the staircase path from the data manifold to ``x``
is traced once with RK4, and its flow steps double as trapezoid nodes.  A
Picard step then only interpolates the current iterate at those stored
points, evaluates the right-hand sides and accumulates the segment integrals:

    Phi[u]_alpha(x) = g_alpha(xi_alpha(t_{p+}))
                      + sum_j int_0^{t_j} f_{i_j}^alpha(psi_alpha(..s..), u(psi_alpha(..s..))) ds
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import expr as ex
from .conditions import draw_samples, lipschitz_and_bound
from .geometry import BOUNDARY_TOL, Box, Chart, box_grid, build_chart, xi_alpha_j_sample
from .numerics import rk4_integrate, rk4_path, trapezoid_weights
from .problem import ProblemSpec
from .reports import IterationTrace, ResidualReport

log = logging.getLogger(__name__)

SNAP_TOL = 1e-9
STAGNATION_LIMIT = 3


class SolverError(Exception):
    pass


class OutOfBoxError(SolverError):
    def __init__(self, message: str, points: np.ndarray):
        self.points = points
        super().__init__(message)


class ConvergenceError(SolverError):
    def __init__(self, message: str, trace: IterationTrace, grid: SolutionGrid | None = None):
        self.trace = trace
        self.grid = grid
        super().__init__(message)


@dataclass
class SolutionGrid:
    """Node values on a regular tensor grid over ``box``.

    ``values`` has shape ``(N, m)`` with nodes in lexicographic (C) order:
    the first axis varies slowest.
    """

    box: Box
    shape: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        self.shape = tuple(int(k) for k in self.shape)
        if len(self.shape) != self.box.dim or any(k < 2 for k in self.shape):
            raise ValueError("grid needs at least two nodes along every axis")
        self.values = np.asarray(self.values, dtype=float).reshape(int(np.prod(self.shape)), -1)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    @classmethod
    def zeros(cls, box: Box, shape: Sequence[int], m: int) -> SolutionGrid:
        return cls(box, tuple(shape), np.zeros((int(np.prod(shape)), m)))

    @classmethod
    def from_function(cls, box: Box, shape: Sequence[int], func: Callable[[np.ndarray], np.ndarray]) -> SolutionGrid:
        nodes = box_grid(box, shape)
        return cls(box, tuple(shape), np.asarray(func(nodes), dtype=float).reshape(len(nodes), -1))

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def spacing(self) -> np.ndarray:
        return 2.0 * np.asarray(self.box.half_widths) / (np.asarray(self.shape) - 1)

    def nodes(self) -> np.ndarray:
        return box_grid(self.box, self.shape)

    def interior_mask(self, margin: int = 1) -> np.ndarray:
        idx = np.indices(self.shape).reshape(self.box.dim, -1).T
        return np.all((idx >= margin) & (idx <= np.asarray(self.shape) - 1 - margin), axis=1)

    def with_values(self, values: np.ndarray) -> SolutionGrid:
        return SolutionGrid(self.box, self.shape, values)

    def interpolate(self, x, tol: float = 1e-12) -> np.ndarray:
        """Multilinear interpolation; points farther than ``tol`` outside the box raise."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = x.reshape(-1, self.box.dim)
        out_by = self.box.excursion(x)
        if np.any(out_by > tol):
            bad = x[out_by > tol]
            raise OutOfBoxError(f"{len(bad)} point(s) outside the grid box, e.g. {bad[0].tolist()}", bad)
        lo = self.box.lower
        h = self.spacing
        shape = np.asarray(self.shape)
        pos = (x - lo) / h
        near = np.round(pos)
        pos = np.where(np.abs(pos - near) < SNAP_TOL, near, pos)
        pos = np.clip(pos, 0.0, shape - 1)
        cell = np.minimum(np.floor(pos).astype(np.int64), shape - 2)
        frac = pos - cell
        strides = np.array([int(np.prod(self.shape[k + 1 :])) for k in range(self.box.dim)])
        result = np.zeros((len(x), self.m))
        for corner in range(2 ** self.box.dim):
            bits = np.array([(corner >> (self.box.dim - 1 - k)) & 1 for k in range(self.box.dim)])
            w = np.prod(np.where(bits == 1, frac, 1.0 - frac), axis=1)
            flat = (cell + bits) @ strides
            result += w[:, None] * self.values[flat]
        return result[0] if single else result

    def sup_distance(self, other: SolutionGrid) -> float:
        return float(np.max(np.abs(self.values - other.values)))


def _xu_binding(x: np.ndarray, u: np.ndarray) -> dict:
    b = {f"x{k + 1}": x[:, k] for k in range(x.shape[1])}
    b.update({f"u{a + 1}": u[:, a] for a in range(u.shape[1])})
    return b


@dataclass
class _Segment:
    points: np.ndarray  # (P, n) flow points
    weights: np.ndarray  # (P,) signed trapezoid weights
    owner: np.ndarray  # (P,) node index
    rhs: ex.Expression


@dataclass
class PicardPlan:
    """Node pullbacks and quadrature points, fixed across iterations."""

    spec: ProblemSpec
    charts: tuple[Chart, ...]
    grid: SolutionGrid
    t: list  # per alpha (N, n)
    data: np.ndarray  # (N, m): g_alpha at each node's parameters
    segments: list  # per alpha: list of _Segment
    h_flow: float
    ghat: np.ndarray = field(default=None)


def chart_for(spec: ProblemSpec, nodes: np.ndarray | None = None) -> tuple[Chart, ...]:
    h_flow = spec.box.diameter / spec.settings.flow_steps_per_diameter
    nodes = box_grid(spec.box, 5) if nodes is None else nodes
    return tuple(
        build_chart(spec.frame, mf, spec.box, h_flow, seed=spec.settings.seed, sample_points=nodes)
        for mf in spec.manifolds
    )


def build_plan(spec: ProblemSpec, charts: Sequence[Chart], grid: SolutionGrid, threads: int = 1) -> PicardPlan:
    n = spec.n
    N = len(grid.values)
    nodes = grid.nodes()
    h_flow = spec.box.diameter / spec.settings.flow_steps_per_diameter
    ts, segs_all = [], []
    data = np.zeros((N, spec.m))
    for a, chart in enumerate(charts):
        mf = chart.manifold
        p = mf.codim
        t = chart.psi_inverse(nodes, threads=threads)
        ts.append(t)
        params = t[:, p:]
        data[:, a] = mf.data_values(params)
        X = mf.point(params)
        segs = []
        for j, i in enumerate(mf.index_set):
            tj = t[:, j]
            K = np.maximum(1, np.ceil(np.abs(tj) / h_flow)).astype(int)
            pts, wts, own = [], [], []
            field_i = spec.frame.field(i)
            for k in np.unique(K):
                rows = np.flatnonzero(K == k)
                path = rk4_path(field_i, X[rows], tj[rows], int(k))  # (k+1, R, n)
                w = trapezoid_weights(int(k))[:, None] * (tj[rows] / k)[None, :]
                pts.append(path.reshape(-1, n))
                wts.append(w.ravel())
                own.append(np.broadcast_to(rows[None, :], w.shape).ravel())
                X[rows] = path[-1]
            segs.append(_Segment(np.concatenate(pts), np.concatenate(wts), np.concatenate(own), spec.f(a, i)))
        segs_all.append(segs)
    return PicardPlan(spec, tuple(charts), grid, ts, data, segs_all, h_flow)


def value_box(spec: ProblemSpec, plan: PicardPlan, M: float) -> tuple[np.ndarray, float, float]:
    """Center, radius and max flow time of the clamping box ``B_r(g(x_bar))``.

    r = 2 max_alpha sup |g_alpha - g_alpha(x_bar)| + 2 n M max|t_j|
    """
    ghat = np.array([mf.data_values(np.zeros((1, mf.n_params)))[0] for mf in spec.manifolds])
    spread = float(np.max(np.abs(plan.data - ghat[None, :])))
    max_t = max((float(np.max(np.abs(t[:, : c.p]))) if c.p else 0.0) for t, c in zip(plan.t, plan.charts))
    r = spec.value_radius if spec.value_radius is not None else 2.0 * spread + 2.0 * spec.n * M * max_t
    return ghat, float(r), max_t


def initial_iterate(spec: ProblemSpec, plan: PicardPlan, kind: str = "data") -> SolutionGrid:
    """``data``: data carried constantly along the flows; ``constant``: g at the base point."""
    if kind == "data":
        vals = plan.data.copy()
    elif kind == "constant":
        vals = np.broadcast_to(plan.ghat, plan.data.shape).copy()
    else:
        raise ValueError(f"unknown initial iterate {kind!r}")
    return plan.grid.with_values(vals)


def picard_step(plan: PicardPlan, u: SolutionGrid, radius: float | None = None) -> tuple[SolutionGrid, int]:
    """One application of the Picard functional; returns the new grid and the clamp count."""
    N = len(u.values)
    out = np.empty_like(u.values)
    for a, segs in enumerate(plan.segments):
        total = plan.data[:, a].copy()
        for seg in segs:
            try:
                U = u.interpolate(seg.points, tol=BOUNDARY_TOL)
            except OutOfBoxError as exc:
                bad = u.box.excursion(seg.points) > BOUNDARY_TOL
                node = u.nodes()[seg.owner[np.argmax(bad)]]
                raise OutOfBoxError(
                    f"alpha={a + 1}: the integration path to node {node.tolist()} leaves the box "
                    f"(SCC violated or resolution too coarse): {exc}",
                    exc.points,
                ) from None
            F = np.asarray(ex.evaluate_on(seg.rhs, _xu_binding(seg.points, U), (len(seg.points),)))
            total += np.bincount(seg.owner, weights=seg.weights * F, minlength=N)
        out[:, a] = total
    clamps = 0
    if radius is not None and plan.ghat is not None:
        lo, hi = plan.ghat - radius, plan.ghat + radius
        clipped = np.clip(out, lo, hi)
        clamps = int(np.count_nonzero(clipped != out))
        out = clipped
    return u.with_values(out), clamps


@dataclass
class SolveResult:
    grid: SolutionGrid
    trace: IterationTrace
    plan: PicardPlan

    @property
    def converged(self) -> bool:
        return self.trace.termination == "converged"


def solve(
    spec: ProblemSpec,
    charts: Sequence[Chart] | None = None,
    grid_shape: Sequence[int] | None = None,
    tol: float | None = None,
    max_iter: int | None = None,
    *,
    initial: str = "data",
    threads: int = 1,
    plan: PicardPlan | None = None,
) -> SolveResult:
    """Iterate the Picard functional to a fixed point.

    Raises :class:`ConvergenceError` (carrying the trace) on non-convergence
    or on sustained growth of the step distances.
    """
    tol = spec.settings.tol if tol is None else tol
    max_iter = spec.settings.max_iter if max_iter is None else max_iter
    if plan is None:
        shape = tuple(grid_shape or spec.grid)
        charts = charts or chart_for(spec)
        plan = build_plan(spec, charts, SolutionGrid.zeros(spec.box, shape, spec.m), threads=threads)
    L, M = lipschitz_and_bound(spec, draw_samples(spec))
    ghat, r, max_t = value_box(spec, plan, M)
    plan.ghat = ghat
    trace = IterationTrace(
        lipschitz=L, bound=M, value_radius=r, max_t=max_t, sizing_ok=bool(spec.n * L * max_t <= 0.5), initial=initial
    )
    u = initial_iterate(spec, plan, initial)
    u = u.with_values(np.clip(u.values, ghat - r, ghat + r))
    growth = 0
    for _ in range(max_iter):
        nxt, clamps = picard_step(plan, u, r)
        trace.clamp_events += clamps
        d = nxt.sup_distance(u)
        if trace.distances:
            prev = trace.distances[-1]
            trace.ratios.append(d / prev if prev > 0 else 0.0)
            growth = growth + 1 if d > prev else 0
        trace.distances.append(d)
        u = nxt
        if d <= tol:
            trace.termination = "converged"
            return SolveResult(u, trace, plan)
        if growth >= STAGNATION_LIMIT:
            trace.termination = "non-contraction"
            raise ConvergenceError(
                f"step distances grew {STAGNATION_LIMIT} times in a row (last ratio {trace.ratios[-1]:.3g})", trace, u
            )
    trace.termination = "max-iterations"
    raise ConvergenceError(f"no convergence within {max_iter} iterations (last distance {trace.distances[-1]:.3g})",
                           trace, u)


def _frame_derivative(spec: ProblemSpec, sol: SolutionGrid, a: int, i: int, x: np.ndarray, h: float):
    """Central difference of the interpolated ``u_a`` along the flow of ``r_i``."""
    field_i = spec.frame.field(i)
    fwd = rk4_integrate(field_i, x, h, 2)
    bwd = rk4_integrate(field_i, x, -h, 2)
    ok = sol.box.contains(fwd, BOUNDARY_TOL) & sol.box.contains(bwd, BOUNDARY_TOL)
    d = np.full(len(x), np.nan)
    if np.any(ok):
        d[ok] = (sol.interpolate(fwd[ok], BOUNDARY_TOL)[:, a] - sol.interpolate(bwd[ok], BOUNDARY_TOL)[:, a]) / (2 * h)
    return d, ok


def residual_at(spec: ProblemSpec, sol: SolutionGrid, a: int, i: int, x: np.ndarray, h: float) -> np.ndarray:
    """|A_i^a(x)| = |r_i(u_a) - f_i^a(x, u)|; NaN where the difference stencil leaves the box."""
    d, ok = _frame_derivative(spec, sol, a, i, x, h)
    u = sol.interpolate(x, BOUNDARY_TOL)
    f = np.asarray(ex.evaluate_on(spec.f(a, i), _xu_binding(x, u), (len(x),)))
    return np.abs(d - f)


def _sup(v: np.ndarray) -> float:
    v = v[np.isfinite(v)]
    return float(np.max(v)) if v.size else 0.0


def residuals(
    spec: ProblemSpec,
    charts: Sequence[Chart],
    sol: SolutionGrid,
    *,
    node_t: Sequence[np.ndarray] | None = None,
    resolution: int | None = None,
    step: float | None = None,
) -> ResidualReport:
    """Full-grid and restricted residual sups plus data attainment.

    Full sups use interior nodes (one-cell margin).  The restricted sup for
    equation ``j`` of unknown ``alpha`` is taken over samples of the j-th
    swept submanifold lying at least one cell inside the box.
    """
    resolution = resolution or spec.settings.sample_resolution
    h = step if step is not None else 0.5 * float(np.min(sol.spacing))
    nodes = sol.nodes()
    interior = nodes[sol.interior_mask()]
    inner = Box(sol.box.center, tuple(np.asarray(sol.box.half_widths) - sol.spacing))
    full, restricted, data = [], [], []
    for a, chart in enumerate(charts):
        I = chart.manifold.index_set
        for i in I:
            full.append({"alpha": a + 1, "i": i + 1, "sup": _sup(residual_at(spec, sol, a, i, interior, h)),
                         "samples": int(len(interior))})
        if node_t is not None:
            t = node_t[a]
        else:
            t = chart.psi_inverse(nodes)
        t_box = (t.min(axis=0), t.max(axis=0))
        for j in range(0, chart.p + 1):
            pts, ts = xi_alpha_j_sample(chart, j, resolution, t_box)
            if j == 0:
                keep = sol.box.contains(pts, BOUNDARY_TOL)
                pts, ts = pts[keep], ts[keep]
                g = chart.manifold.data_values(ts[:, chart.p :])
                err = np.abs(sol.interpolate(pts, BOUNDARY_TOL)[:, a] - g) if len(pts) else np.zeros(0)
                data.append({"alpha": a + 1, "sup": _sup(err), "samples": int(len(pts))})
                continue
            keep = inner.contains(pts, 0.0) if min(inner.half_widths) > 0 else np.zeros(len(pts), bool)
            pts = pts[keep]
            res = residual_at(spec, sol, a, I[j - 1], pts, h) if len(pts) else np.zeros(0)
            restricted.append({"alpha": a + 1, "j": j, "i": I[j - 1] + 1, "sup": _sup(res), "samples": int(len(pts))})
    return ResidualReport(
        full=full,
        restricted=restricted,
        data=data,
        step=h,
        full_sup=max((e["sup"] for e in full), default=0.0),
        restricted_sup=max((e["sup"] for e in restricted), default=0.0),
        data_sup=max((e["sup"] for e in data), default=0.0),
    )


def residual_threshold(spec: ProblemSpec, sol: SolutionGrid) -> float:
    h = float(np.max(sol.spacing))
    return spec.settings.residual_tol + spec.settings.residual_h2_coefficient * h * h


def exact_error(spec: ProblemSpec, sol: SolutionGrid) -> float | None:
    if spec.exact is None:
        return None
    nodes = sol.nodes()
    b = {f"x{k + 1}": nodes[:, k] for k in range(spec.n)}
    exact = np.stack([ex.evaluate_on(e, b, (len(nodes),)) for e in spec.exact], axis=1)
    return float(np.max(np.abs(exact - sol.values)))


def write_table(sol: SolutionGrid, path) -> None:
    """Header ``x1,...,xn,u1,...,um`` then one row per node, 17 significant digits."""
    nodes = sol.nodes()
    n, m = nodes.shape[1], sol.m
    header = ",".join([f"x{k + 1}" for k in range(n)] + [f"u{a + 1}" for a in range(m)])
    lines = [header]
    for x, u in zip(nodes, sol.values):
        lines.append(",".join(f"{v:.17g}" for v in (*x, *u)))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


class TableError(SolverError):
    pass


def read_table(path, box: Box, shape: Sequence[int], m: int) -> SolutionGrid:
    """Read a solution table and check it matches the grid over ``box``."""
    n = box.dim
    try:
        with open(path, encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise TableError(f"unreadable table: {exc}") from None
    if not lines:
        raise TableError("empty table")
    expected = [f"x{k + 1}" for k in range(n)] + [f"u{a + 1}" for a in range(m)]
    if lines[0].split(",") != expected:
        raise TableError(f"header {lines[0]!r} does not match {','.join(expected)!r}")
    try:
        rows = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    except ValueError as exc:
        raise TableError(f"unreadable table: {exc}") from None
    count = int(math.prod(shape))
    if rows.shape != (count, n + m):
        raise TableError(f"table has shape {rows.shape}, expected ({count}, {n + m})")
    nodes = box_grid(box, shape)
    scale = max(1.0, float(np.max(np.abs(nodes))))
    if np.max(np.abs(rows[:, :n] - nodes)) > 1e-12 * scale:
        raise TableError("node coordinates do not match the problem grid")
    try:
        return SolutionGrid(box, tuple(shape), rows[:, n:])
    except ValueError as exc:
        raise TableError(str(exc)) from None
