"""Frames of vector fields: flows, Lie brackets and structure coefficients.

Field indices are 0-based in the Python API.  The components of every field
are expressions in ``x1..xn``; brackets use their exact symbolic derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import expr as ex
from .numerics import OdeField, rk4_integrate, solve_dense
from .reports import HypothesisReport

DET_THRESHOLD = 1e-8


def x_names(n: int) -> list[str]:
    return [f"x{k + 1}" for k in range(n)]


def x_binding(x: np.ndarray) -> dict[str, np.ndarray]:
    """Binding for a batch of points ``(N, n)``."""
    return {f"x{k + 1}": x[:, k] for k in range(x.shape[1])}


@dataclass(frozen=True)
class Frame:
    """``components[i][k]`` is the k-th Cartesian component of field ``r_{i+1}``."""

    components: tuple[tuple[ex.Expression, ...], ...]
    _jacobian: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = len(self.components)
        if any(len(c) != n for c in self.components):
            raise ValueError("a frame on R^n needs n fields with n components each")
        names = x_names(n)
        for comp in self.components:
            for e in comp:
                extra = e.free_variables() - set(names)
                if extra:
                    raise ValueError(f"frame component {e} uses non-coordinate variables {sorted(extra)}")
        jac = tuple(tuple(tuple(ex.diff(e, v) for v in names) for e in comp) for comp in self.components)
        object.__setattr__(self, "_jacobian", jac)

    @classmethod
    def from_strings(cls, rows: Sequence[Sequence[str]]) -> Frame:
        return cls(tuple(tuple(ex.parse(s) for s in row) for row in rows))

    @classmethod
    def coordinate(cls, n: int) -> Frame:
        return cls(tuple(tuple(ex.ONE if k == i else ex.ZERO for k in range(n)) for i in range(n)))

    @property
    def n(self) -> int:
        return len(self.components)

    def vector(self, i: int, x) -> np.ndarray:
        """Field ``r_i`` at a batch of points; returns shape ``(N, n)``."""
        x, single = _batch(x)
        b = x_binding(x)
        out = np.stack([ex.evaluate_on(e, b, (x.shape[0],)) for e in self.components[i]], axis=1)
        return out[0] if single else out

    def matrix(self, x) -> np.ndarray:
        """Matrix whose columns are ``r_1(x), ..., r_n(x)``; shape ``(N, n, n)``."""
        x, single = _batch(x)
        out = np.stack([self.vector(i, x) for i in range(self.n)], axis=2)
        return out[0] if single else out

    def field(self, i: int) -> OdeField:
        return OdeField(self.n, lambda y, i=i: self.vector(i, y))

    def flow(self, i: int, x0, t, substeps: int = 16) -> np.ndarray:
        return rk4_integrate(self.field(i), x0, t, substeps)

    def lie_bracket(self, i: int, j: int, x) -> np.ndarray:
        x, single = _batch(x)
        N, n = x.shape
        if i == j:
            out = np.zeros((N, n))
            return out[0] if single else out
        b = x_binding(x)
        ri = self.vector(i, x)
        rj = self.vector(j, x)
        out = np.zeros((N, n))
        for l in range(n):
            for k in range(n):
                dj = self._jacobian[j][l][k]
                di = self._jacobian[i][l][k]
                if not ex.is_zero(dj):
                    out[:, l] += ri[:, k] * ex.evaluate_on(dj, b, (N,))
                if not ex.is_zero(di):
                    out[:, l] -= rj[:, k] * ex.evaluate_on(di, b, (N,))
        return out[0] if single else out

    def structure_coeffs(self, i: int, j: int, x) -> np.ndarray:
        """Coefficients ``c_ij^k`` with ``[r_i, r_j] = sum_k c_ij^k r_k``."""
        x, single = _batch(x)
        c = solve_dense(self.matrix(x), self.lie_bracket(i, j, x))
        return c[0] if single else c

    def determinant(self, x) -> np.ndarray:
        x, single = _batch(x)
        d = np.linalg.det(self.matrix(x))
        return d[0] if single else d


def check_frame(frame: Frame, points: np.ndarray) -> HypothesisReport:
    """Nonsingularity of the frame matrix at the given points."""
    try:
        dets = np.abs(frame.determinant(points))
    except ex.ExpressionError as exc:
        return HypothesisReport("frame", False, float("inf"), DET_THRESHOLD, len(points), message=str(exc))
    k = int(np.argmin(dets))
    worst = float(dets[k])
    return HypothesisReport(
        "frame",
        bool(worst >= DET_THRESHOLD),
        worst,
        DET_THRESHOLD,
        len(points),
        witness={"x": points[k]},
        message="min |det| of frame matrix over grid nodes",
    )


def _batch(x) -> tuple[np.ndarray, bool]:
    arr = np.array(x, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False
