"""Sampled verification of the dependency, involution, integrability and
coefficient-boundedness hypotheses.

"Identically zero" is certified by evaluating exact symbolic derivatives at
K seeded random points of the domain box times the u-sample box.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from itertools import combinations

import numpy as np

from . import expr as ex
from .geometry import box_grid
from .numerics import SingularMatrixError
from .problem import ProblemSpec
from .reports import HypothesisReport

DEPENDENCY_TOL = 1e-10
INVOLUTION_TOL = 1e-9
INTEGRABILITY_TOL = 1e-9
U_BOX_MARGIN = 1.0


def u_sample_box(spec: ProblemSpec, resolution: int = 9) -> np.ndarray:
    """Bounds ``(m, 2)`` of the u-samples: data range on the manifolds, +-1."""
    if spec.u_sample_box is not None:
        return np.array(spec.u_sample_box, dtype=float)
    rows = []
    for mf in spec.manifolds:
        g = mf.data_values(mf.parameter_grid(resolution))
        rows.append((g.min() - U_BOX_MARGIN, g.max() + U_BOX_MARGIN))
    return np.array(rows)


@dataclass
class SampleSet:
    x: np.ndarray
    u: np.ndarray
    seed: int

    @cached_property
    def binding(self) -> dict:
        b = {f"x{k + 1}": self.x[:, k] for k in range(self.x.shape[1])}
        b.update({f"u{a + 1}": self.u[:, a] for a in range(self.u.shape[1])})
        return b

    def __len__(self) -> int:
        return len(self.x)

    def eval(self, e: ex.Expression) -> np.ndarray:
        return np.asarray(ex.evaluate_on(e, self.binding, (len(self),)))

    def witness(self, k: int) -> dict:
        return {"x": self.x[k], "u": self.u[k]}


def draw_samples(spec: ProblemSpec, count: int | None = None, seed: int | None = None) -> SampleSet:
    count = spec.settings.samples if count is None else count
    seed = spec.settings.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    x = rng.uniform(spec.box.lower, spec.box.upper, size=(count, spec.n))
    ub = u_sample_box(spec)
    u = rng.uniform(ub[:, 0], ub[:, 1], size=(count, spec.m))
    return SampleSet(x, u, seed)


def _one_based(*idx: int) -> list[int]:
    return [i + 1 for i in idx]


def check_dependency(spec: ProblemSpec, samples: SampleSet | None = None) -> HypothesisReport:
    """For i != j in I_alpha and every beta with i not in I_beta, d f_j^alpha / d u_beta must vanish."""
    samples = samples or draw_samples(spec)
    worst, witness, violations = 0.0, None, []
    for a in range(spec.m):
        I = spec.index_set(a)
        for i in I:
            for j in I:
                if i == j:
                    continue
                for b in range(spec.m):
                    if i in spec.index_set(b):
                        continue
                    d = ex.diff(spec.f(a, j), f"u{b + 1}")
                    if ex.is_zero(d):
                        continue
                    try:
                        vals = np.abs(samples.eval(d))
                    except ex.ExpressionError as exc:
                        return HypothesisReport("dependency", False, float("inf"), DEPENDENCY_TOL, len(samples),
                                                seed=samples.seed, message=str(exc))
                    k = int(np.argmax(vals))
                    if vals[k] > DEPENDENCY_TOL:
                        violations.append({"alpha": a + 1, "i": i + 1, "j": j + 1, "beta": b + 1, "max": float(vals[k])})
                    if vals[k] > worst or witness is None:
                        worst, witness = float(vals[k]), samples.witness(k)
    return HypothesisReport(
        "dependency",
        worst <= DEPENDENCY_TOL,
        worst,
        DEPENDENCY_TOL,
        len(samples),
        witness=witness,
        seed=samples.seed,
        details={"violations": violations},
    )


def check_involution(spec: ProblemSpec, samples: SampleSet | None = None) -> HypothesisReport:
    """Brackets of fields within each I_alpha must have no components outside I_alpha."""
    samples = samples or draw_samples(spec)
    worst, witness, violations = 0.0, None, []
    for a in range(spec.m):
        I = spec.index_set(a)
        outside = [l for l in range(spec.n) if l not in I]
        for j, k in combinations(I, 2):
            if not outside:
                continue
            try:
                c = spec.frame.structure_coeffs(j, k, samples.x)
            except (SingularMatrixError, ex.ExpressionError) as exc:
                return HypothesisReport("involution", False, float("inf"), INVOLUTION_TOL, len(samples),
                                        seed=samples.seed, message=str(exc))
            mags = np.abs(c[:, outside])
            s, l = np.unravel_index(int(np.argmax(mags)), mags.shape)
            val = float(mags[s, l])
            if val > INVOLUTION_TOL:
                violations.append({"alpha": a + 1, "pair": _one_based(j, k), "l": outside[l] + 1, "max": val})
            if val > worst or witness is None:
                worst = val
                witness = {"x": samples.x[s], "pair": _one_based(j, k), "l": outside[l] + 1, "c": float(c[s, outside[l]])}
    return HypothesisReport(
        "involution",
        worst <= INVOLUTION_TOL,
        worst,
        INVOLUTION_TOL,
        len(samples),
        witness=witness,
        seed=samples.seed,
        details={"violations": violations},
    )


def integrability_terms(spec: ProblemSpec, a: int, i: int, j: int, samples: SampleSet) -> tuple[np.ndarray, np.ndarray]:
    """Both sides of the integrability identity for unknown ``a`` and fields ``i != j``.

    LHS = grad_x f_j . r_i + sum_{b: i in I_b} d_{u_b} f_j f_i^b
          - grad_x f_i . r_j - sum_{b: j in I_b} d_{u_b} f_i f_j^b
    RHS = sum_{k in I_a} c_ij^k f_k
    """
    fi, fj = spec.f(a, i), spec.f(a, j)
    x = samples.x
    ri = spec.frame.vector(i, x)
    rj = spec.frame.vector(j, x)
    lhs = np.zeros(len(samples))
    for k in range(spec.n):
        var = f"x{k + 1}"
        dfj, dfi = ex.diff(fj, var), ex.diff(fi, var)
        if not ex.is_zero(dfj):
            lhs += samples.eval(dfj) * ri[:, k]
        if not ex.is_zero(dfi):
            lhs -= samples.eval(dfi) * rj[:, k]
    for b in range(spec.m):
        var = f"u{b + 1}"
        Ib = spec.index_set(b)
        if i in Ib:
            d = ex.diff(fj, var)
            if not ex.is_zero(d):
                lhs += samples.eval(d) * samples.eval(spec.f(b, i))
        if j in Ib:
            d = ex.diff(fi, var)
            if not ex.is_zero(d):
                lhs -= samples.eval(d) * samples.eval(spec.f(b, j))
    c = spec.frame.structure_coeffs(i, j, x)
    rhs = np.zeros(len(samples))
    for k in spec.index_set(a):
        rhs += c[:, k] * samples.eval(spec.f(a, k))
    return lhs, rhs


def check_integrability(spec: ProblemSpec, samples: SampleSet | None = None) -> HypothesisReport:
    samples = samples or draw_samples(spec)
    worst, worst_rhs, witness, per_pair = 0.0, 0.0, None, []
    for a in range(spec.m):
        for i, j in combinations(spec.index_set(a), 2):
            try:
                lhs, rhs = integrability_terms(spec, a, i, j, samples)
            except (SingularMatrixError, ex.ExpressionError) as exc:
                return HypothesisReport("integrability", False, float("inf"), INTEGRABILITY_TOL, len(samples),
                                        seed=samples.seed, message=str(exc))
            res = np.abs(lhs - rhs)
            k = int(np.argmax(res))
            per_pair.append({"alpha": a + 1, "pair": _one_based(i, j), "max": float(res[k])})
            worst_rhs = max(worst_rhs, float(np.max(np.abs(rhs))))
            if res[k] > worst or witness is None:
                worst, witness = float(res[k]), samples.witness(k)
    tol = INTEGRABILITY_TOL * (1.0 + worst_rhs)
    return HypothesisReport(
        "integrability",
        worst <= tol,
        worst,
        tol,
        len(samples),
        witness=witness,
        seed=samples.seed,
        details={"pairs": per_pair, "max_rhs": worst_rhs},
    )


def check_bounded_coeffs(spec: ProblemSpec, points: np.ndarray | None = None) -> HypothesisReport:
    """Max |c_ij^k| for i, j, k in I_alpha over grid nodes; passes iff finite."""
    points = box_grid(spec.box, spec.grid) if points is None else points
    worst, witness = 0.0, None
    for a in range(spec.m):
        I = list(spec.index_set(a))
        for i, j in combinations(I, 2):
            try:
                c = spec.frame.structure_coeffs(i, j, points)[:, I]
            except (SingularMatrixError, ex.ExpressionError) as exc:
                return HypothesisReport("bounded_coeffs", False, float("inf"), float("inf"), len(points), message=str(exc))
            mags = np.abs(c)
            s = int(np.argmax(np.max(mags, axis=1)))
            val = float(np.max(mags))
            if not np.isfinite(val) or val > worst:
                worst, witness = val, {"x": points[s], "pair": _one_based(i, j)}
    return HypothesisReport(
        "bounded_coeffs",
        bool(np.isfinite(worst)),
        worst,
        float("inf"),
        len(points),
        witness=witness,
        message="max |c_ij^k| over grid nodes, i, j, k in I_alpha",
    )


def lipschitz_and_bound(spec: ProblemSpec, samples: SampleSet | None = None) -> tuple[float, float]:
    """Sampled sup-norm Lipschitz constant in u and bound of all right-hand sides."""
    samples = samples or draw_samples(spec)
    L, M = 0.0, 0.0
    for (a, i), f in spec.rhs.items():
        M = max(M, float(np.max(np.abs(samples.eval(f)))))
        row = np.zeros(len(samples))
        for b in range(spec.m):
            d = ex.diff(f, f"u{b + 1}")
            if not ex.is_zero(d):
                row += np.abs(samples.eval(d))
        L = max(L, float(np.max(row)))
    return L, M
