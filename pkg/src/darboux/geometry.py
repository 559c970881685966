"""Data manifolds, flow-composition charts and the stable-configuration check.

For an unknown with ordered index set ``I = (i_1 < ... < i_p)`` and data
manifold parametrized by ``xi(s_1, ..., s_{n-p})`` the chart is

    psi(t) = W_{i_p}^{t_p} ... W_{i_1}^{t_1} xi(t_{p+1}, ..., t_n)

where ``W_i^t`` is the flow of ``r_i``.  Flow times occupy the first ``p``
slots of ``t`` and manifold parameters the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expr as ex
from .frame import Frame
from .numerics import NewtonError, NewtonSettings, chunked_map, newton_solve, rk4_integrate
from .reports import HypothesisReport, SccReport

TRANSVERSALITY_THRESHOLD = 1e-8
BOUNDARY_TOL = 1e-9
ROUND_TRIP_TOL = 1e-7
MAX_SHRINKS = 6


class ChartError(Exception):
    pass


class OutsideChartError(ChartError):
    def __init__(self, message: str, points: np.ndarray | None = None):
        self.points = points
        super().__init__(message)


def s_names(k: int) -> list[str]:
    return [f"s{j + 1}" for j in range(k)]


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``center +- half_widths``."""

    center: tuple[float, ...]
    half_widths: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "half_widths", tuple(float(h) for h in self.half_widths))
        if len(self.center) != len(self.half_widths):
            raise ValueError("box center and half-widths differ in length")
        if any(not h > 0 for h in self.half_widths):
            raise ValueError("box half-widths must be positive")

    @property
    def dim(self) -> int:
        return len(self.center)

    @property
    def lower(self) -> np.ndarray:
        return np.subtract(self.center, self.half_widths)

    @property
    def upper(self) -> np.ndarray:
        return np.add(self.center, self.half_widths)

    @property
    def diameter(self) -> float:
        """Sup-norm diameter."""
        return 2.0 * max(self.half_widths)

    def excursion(self, points: np.ndarray) -> np.ndarray:
        """Sup-norm distance of each point outside the box (0 inside)."""
        d = np.abs(np.asarray(points) - np.asarray(self.center)) - np.asarray(self.half_widths)
        return np.maximum(d.max(axis=-1), 0.0)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return self.excursion(points) <= tol

    def shrunk(self, factor: float) -> Box:
        return Box(self.center, tuple(h * factor for h in self.half_widths))


@dataclass(frozen=True)
class DataManifold:
    """Parametrized data manifold carrying the data for one unknown.

    ``index_set`` is 0-based and strictly increasing; ``parametrization``
    holds ``n`` expressions in ``s1..s(n-p)`` and ``data`` one more.
    """

    index_set: tuple[int, ...]
    parametrization: tuple[ex.Expression, ...]
    data: ex.Expression
    param_half_widths: tuple[float, ...]
    _tangent: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.parametrization)
        I = tuple(int(i) for i in self.index_set)
        if not I or any(b <= a for a, b in zip(I, I[1:])) or I[0] < 0 or I[-1] >= n:
            raise ValueError(f"index set {I} must be strictly increasing within 0..{n - 1}")
        k = n - len(I)
        if len(self.param_half_widths) != k:
            raise ValueError(f"expected {k} parameter half-widths, got {len(self.param_half_widths)}")
        names = set(s_names(k))
        for e in (*self.parametrization, self.data):
            extra = e.free_variables() - names
            if extra:
                raise ValueError(f"manifold expression {e} uses {sorted(extra)}; allowed {sorted(names)}")
        object.__setattr__(self, "index_set", I)
        object.__setattr__(self, "param_half_widths", tuple(float(h) for h in self.param_half_widths))
        tangent = tuple(tuple(ex.diff(e, s) for s in s_names(k)) for e in self.parametrization)
        object.__setattr__(self, "_tangent", tangent)

    @property
    def n(self) -> int:
        return len(self.parametrization)

    @property
    def codim(self) -> int:
        return len(self.index_set)

    @property
    def n_params(self) -> int:
        return self.n - self.codim

    def _params(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if s.ndim < 2:
            s = s.reshape(1 if self.n_params == 0 or s.size == self.n_params else -1, self.n_params)
        if s.shape[-1] != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters per row, got {s.shape[-1]}")
        return s

    def _binding(self, s: np.ndarray) -> dict:
        return {f"s{j + 1}": s[:, j] for j in range(s.shape[1])}

    def point(self, s) -> np.ndarray:
        """``xi(s)`` for a batch of parameters ``(N, n-p)``."""
        s = self._params(s)
        b = self._binding(s)
        return np.stack([ex.evaluate_on(e, b, (s.shape[0],)) for e in self.parametrization], axis=1)

    def data_values(self, s) -> np.ndarray:
        s = self._params(s)
        return np.array(ex.evaluate_on(self.data, self._binding(s), (s.shape[0],)))

    def tangent(self, s) -> np.ndarray:
        """``d xi / d s`` with shape ``(N, n, n-p)``."""
        s = self._params(s)
        b = self._binding(s)
        N = s.shape[0]
        out = np.zeros((N, self.n, self.n_params))
        for a in range(self.n):
            for j in range(self.n_params):
                out[:, a, j] = ex.evaluate_on(self._tangent[a][j], b, (N,))
        return out

    def parameter_grid(self, resolution: int) -> np.ndarray:
        axes = [np.linspace(-h, h, resolution) for h in self.param_half_widths]
        return _tensor_grid(axes, self.n_params)


def _tensor_grid(axes: Sequence[np.ndarray], dim: int) -> np.ndarray:
    if dim == 0:
        return np.zeros((1, 0))
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass(frozen=True)
class Chart:
    """Flow-composition chart ``psi`` for one data manifold.

    ``theta`` holds the half-widths of the certified t-box; ``substeps`` is the
    fixed RK4 step count used for every flow in ``psi``.
    """

    frame: Frame
    manifold: DataManifold
    theta: tuple[float, ...]
    substeps: int
    newton: NewtonSettings = NewtonSettings()

    @property
    def n(self) -> int:
        return self.frame.n

    @property
    def p(self) -> int:
        return self.manifold.codim

    def psi(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        single = t.ndim == 1
        t = t.reshape(-1, self.n)
        x = self.manifold.point(t[:, self.p :])
        for j, i in enumerate(self.manifold.index_set):
            if np.any(t[:, j]):
                x = rk4_integrate(self.frame.field(i), x, t[:, j], self.substeps)
        return x[0] if single else x

    def psi_inverse(self, x, threads: int = 1) -> np.ndarray:
        """Invert ``psi`` by Newton from ``t = 0``; raises :class:`OutsideChartError`."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = x.reshape(-1, self.n)

        def solve(rows: np.ndarray) -> np.ndarray:
            def F(t, idx):
                return self.psi(t) - rows[idx]

            try:
                return newton_solve(F, np.zeros_like(rows), self.newton, indexed=True)
            except (NewtonError, ex.ExpressionError) as exc:
                failed = getattr(exc, "failed", None)
                pts = rows[failed] if failed is not None else rows
                raise OutsideChartError(f"point outside chart: {exc}", pts) from None

        t = chunked_map(solve, x, threads)
        return t[0] if single else t

    def staircase(self, t: np.ndarray, resolution: int) -> np.ndarray:
        """Points of the accessibility path to each ``t``; shape ``(N, p*(resolution+2), n)``.

        Segment ``j`` runs from ``(t_1..t_j, 0, .., 0, t_{p+})`` to
        ``(t_1..t_{j+1}, 0, .., t_{p+})`` and is sampled at ``resolution``
        interior points plus both ends.
        """
        t = np.asarray(t, dtype=float).reshape(-1, self.n)
        lam = np.linspace(0.0, 1.0, resolution + 2)
        pieces = []
        for j in range(self.p):
            base = t.copy()
            base[:, j + 1 : self.p] = 0.0
            seg = np.repeat(base[:, None, :], lam.size, axis=1)
            seg[:, :, j] = lam[None, :] * t[:, j, None]
            pieces.append(seg)
        if not pieces:
            return t[:, None, :]
        return np.concatenate(pieces, axis=1)

    def in_theta(self, t: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        return np.all(np.abs(t) <= np.asarray(self.theta) + tol, axis=-1)

    def round_trip_error(self, count: int = 200, seed: int = 0) -> float:
        rng = np.random.default_rng(seed)
        t = rng.uniform(-1.0, 1.0, size=(count, self.n)) * np.asarray(self.theta)
        back = self.psi_inverse(self.psi(t))
        return float(np.max(np.abs(back - t)))


def xi_alpha_j_sample(chart: Chart, j: int, resolution: int, t_box: tuple | None = None):
    """Uniform sample of the j-th swept submanifold.

    Slots ``j+1..p`` of ``t`` are zeroed; the free slots range over ``t_box``
    (a ``(lower, upper)`` pair, default the chart's theta box).  Returns
    ``(points, t)``.
    """
    p, n = chart.p, chart.n
    if not 0 <= j <= p:
        raise ValueError(f"j must lie in 0..{p}")
    if t_box is None:
        lo, hi = -np.asarray(chart.theta), np.asarray(chart.theta)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in t_box)
    free = list(range(j)) + list(range(p, n))
    axes = [np.linspace(lo[k], hi[k], resolution) for k in free]
    sub = _tensor_grid(axes, len(free))
    t = np.zeros((sub.shape[0], n))
    t[:, free] = sub
    return chart.psi(t), t


def build_chart(
    frame: Frame,
    manifold: DataManifold,
    box: Box,
    h_flow: float,
    *,
    seed: int = 0,
    sample_points: np.ndarray | None = None,
) -> Chart:
    """Size the t-box, then validate it by the round trip, halving on failure."""
    if sample_points is None:
        sample_points = box_grid(box, 5)
    mags = [np.max(np.abs(frame.vector(i, sample_points))) for i in manifold.index_set]
    flow_hw = box.diameter / max(max(mags, default=1.0), 1e-12)
    theta = np.array([flow_hw] * manifold.codim + list(manifold.param_half_widths))
    last_error = "unknown"
    for _ in range(MAX_SHRINKS + 1):
        substeps = max(1, math.ceil(flow_hw / h_flow)) if manifold.codim else 1
        chart = Chart(frame, manifold, tuple(float(v) for v in theta), substeps)
        try:
            err = chart.round_trip_error(seed=seed)
            if err <= ROUND_TRIP_TOL:
                return chart
            last_error = f"round-trip error {err:.3g}"
        except (ChartError, ex.ExpressionError) as exc:
            last_error = str(exc)
        theta = theta * 0.5
        flow_hw *= 0.5
    raise ChartError(f"could not certify a chart box after {MAX_SHRINKS} shrinks: {last_error}")


def box_grid(box: Box, nodes: int | Sequence[int]) -> np.ndarray:
    if isinstance(nodes, int):
        nodes = [nodes] * box.dim
    axes = [np.linspace(lo, hi, k) for lo, hi, k in zip(box.lower, box.upper, nodes)]
    return _tensor_grid(axes, box.dim)


def check_transversality(manifold: DataManifold, frame: Frame, samples: int | np.ndarray = 9) -> HypothesisReport:
    """min |det[d xi/ds | r_i, i in I]| over parameter samples; pass iff >= 1e-8."""
    s = manifold.parameter_grid(samples) if isinstance(samples, int) else np.asarray(samples, dtype=float)
    try:
        pts = manifold.point(s)
        cols = [manifold.tangent(s)] + [frame.vector(i, pts)[:, :, None] for i in manifold.index_set]
        dets = np.abs(np.linalg.det(np.concatenate(cols, axis=2)))
    except ex.ExpressionError as exc:
        return HypothesisReport("transversality", False, 0.0, TRANSVERSALITY_THRESHOLD, len(s), message=str(exc))
    k = int(np.argmin(dets))
    return HypothesisReport(
        "transversality",
        bool(dets[k] >= TRANSVERSALITY_THRESHOLD),
        float(dets[k]),
        TRANSVERSALITY_THRESHOLD,
        len(s),
        witness={"s": s[k], "x": pts[k]},
        message="min |det| of tangent and transverse fields",
    )


def check_scc(
    charts: Sequence[Chart],
    box: Box,
    resolution: int,
    nodes: np.ndarray,
    tol: float = BOUNDARY_TOL,
    threads: int = 1,
) -> SccReport:
    """Certify (at the given resolution) that every staircase path stays in the box.

    For each node and each chart, the node is pulled back by ``psi_inverse``
    and the staircase path from the parameter slice is mapped forward again.
    """
    excursions = []
    offending = None
    messages = []
    for alpha, chart in enumerate(charts):
        try:
            t = chart.psi_inverse(nodes, threads=threads)
        except OutsideChartError as exc:
            pt = exc.points[0] if exc.points is not None and len(exc.points) else None
            excursions.append(float("inf"))
            offending = offending or {"alpha": alpha + 1, "x": pt, "reason": "chart inversion failed"}
            messages.append(f"alpha={alpha + 1}: {exc}")
            continue
        outside = ~chart.in_theta(t)
        if np.any(outside):
            k = int(np.argmax(outside))
            offending = offending or {"alpha": alpha + 1, "x": nodes[k], "t": t[k], "reason": "outside certified chart box"}
            messages.append(f"alpha={alpha + 1}: {int(outside.sum())} node(s) outside the certified t-box")
        path_t = chart.staircase(t, resolution)
        N, P, n = path_t.shape

        def image_excursion(rows):
            return box.excursion(chart.psi(rows))

        try:
            exc_vals = chunked_map(image_excursion, path_t.reshape(-1, n), threads).reshape(N, P)
        except ex.ExpressionError as exc:
            excursions.append(float("inf"))
            offending = offending or {"alpha": alpha + 1, "reason": str(exc)}
            continue
        per_node = exc_vals.max(axis=1)
        k = int(np.argmax(per_node))
        excursions.append(float(per_node[k]))
        if per_node[k] > tol:
            offending = offending or {"alpha": alpha + 1, "x": nodes[k], "t": t[k], "excursion": float(per_node[k]),
                                      "reason": "staircase path leaves the box"}
    passed = offending is None and all(e <= tol for e in excursions)
    return SccReport(
        passed=bool(passed),
        resolution=resolution,
        tolerance=tol,
        excursions=excursions,
        offending=offending,
        nodes=int(len(nodes)),
        message="; ".join(messages),
    )


__all__ = [
    "Box",
    "DataManifold",
    "Chart",
    "ChartError",
    "OutsideChartError",
    "build_chart",
    "box_grid",
    "check_scc",
    "check_transversality",
    "xi_alpha_j_sample",
]
