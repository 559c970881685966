"""Shared numerical kernels: RK4 flows, dense solves, Newton, trapezoid.

Every kernel accepts a single point of shape ``(n,)`` or a batch of points of
shape ``(N, n)``; batched calls treat each row independently, so results do
not depend on how a workload is chunked.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

VectorField = Callable[[np.ndarray], np.ndarray]


class NumericsError(Exception):
    pass


class SingularMatrixError(NumericsError):
    pass


class NewtonError(NumericsError):
    def __init__(self, message: str, failed: np.ndarray | None = None):
        self.failed = failed
        super().__init__(message)


class NonConvergenceError(NewtonError):
    pass


@dataclass(frozen=True)
class OdeField:
    """Autonomous vector field dx/dt = func(x) on R^dim.

    ``func`` maps an ``(N, dim)`` array to an ``(N, dim)`` array.
    """

    dim: int
    func: VectorField

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = np.asarray(self.func(x), dtype=float)
        if out.shape != x.shape:
            raise ValueError(f"field returned shape {out.shape}, expected {x.shape}")
        return out


@dataclass(frozen=True)
class NewtonSettings:
    tolerance: float = 1e-10
    max_iterations: int = 50
    damping: float = 1.0
    fd_step: float = 1e-6
    max_halvings: int = 8

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


def _as_batch(x) -> tuple[np.ndarray, bool]:
    arr = np.array(x, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def rk4_integrate(field: OdeField | VectorField, x0, t, substeps: int) -> np.ndarray:
    """Classical RK4 with ``substeps`` equal steps of size ``t / substeps``.

    ``t`` may be a scalar or one time per row of a batched ``x0``.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    x, single = _as_batch(x0)
    tt = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    h = (tt / substeps)[:, None]
    if not np.any(h):
        return x[0] if single else x
    for _ in range(substeps):
        k1 = field(x)
        k2 = field(x + 0.5 * h * k1)
        k3 = field(x + 0.5 * h * k2)
        k4 = field(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x[0] if single else x


def rk4_path(field: OdeField | VectorField, x0, t, substeps: int) -> np.ndarray:
    """Like :func:`rk4_integrate` but returns every step, shape ``(substeps+1, N, n)``."""
    x, _ = _as_batch(x0)
    tt = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],))
    h = (tt / substeps)[:, None]
    out = np.empty((substeps + 1,) + x.shape)
    out[0] = x
    for k in range(substeps):
        k1 = field(x)
        k2 = field(x + 0.5 * h * k1)
        k3 = field(x + 0.5 * h * k2)
        k4 = field(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[k + 1] = x
    return out


def solve_dense(A, b, rel_pivot_tol: float = 1e-12) -> np.ndarray:
    """Gaussian elimination with partial pivoting.

    Accepts ``A`` of shape ``(n, n)`` or a stack ``(N, n, n)`` with matching
    ``b``.  A pivot with ``|pivot| < rel_pivot_tol * max|A|`` raises
    :class:`SingularMatrixError`.
    """
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    single = A.ndim == 2
    if single:
        A, b = A[None], b[None]
    N, n, n2 = A.shape
    if n != n2 or b.shape != (N, n):
        raise ValueError("solve_dense needs a square matrix and a matching vector")
    scale = np.abs(A).reshape(N, -1).max(axis=1)
    rows = np.arange(N)
    for k in range(n):
        piv = k + np.argmax(np.abs(A[:, k:, k]), axis=1)
        pivval = A[rows, piv, k]
        bad = ~(np.abs(pivval) >= rel_pivot_tol * scale) | (scale == 0)
        if np.any(bad):
            raise SingularMatrixError(
                f"matrix singular to tolerance at column {k} (batch index {int(np.argmax(bad))})"
            )
        swap = piv != k
        if np.any(swap):
            idx = rows[swap]
            A[idx, k], A[idx, piv[swap]] = A[idx, piv[swap]].copy(), A[idx, k].copy()
            b[idx, k], b[idx, piv[swap]] = b[idx, piv[swap]].copy(), b[idx, k].copy()
        if k + 1 < n:
            factors = A[:, k + 1 :, k] / A[:, k, k][:, None]
            A[:, k + 1 :, :] -= factors[:, :, None] * A[:, k, None, :]
            b[:, k + 1 :] -= factors * b[:, k, None]
    x = np.empty_like(b)
    for k in range(n - 1, -1, -1):
        x[:, k] = (b[:, k] - np.einsum("ij,ij->i", A[:, k, k + 1 :], x[:, k + 1 :])) / A[:, k, k]
    return x[0] if single else x


def newton_solve(F: Callable[..., np.ndarray], x0, settings: NewtonSettings | None = None, *, indexed: bool = False):
    """Damped Newton iteration for ``F(x) = 0`` with a forward-difference Jacobian.

    ``F`` maps ``(N, n)`` to ``(N, n)``.  Each row iterates independently and
    stops once its residual sup-norm is below ``settings.tolerance``.  A step
    that increases the residual is halved up to ``max_halvings`` times.

    With ``indexed=True``, ``F`` is called as ``F(x, rows)`` where ``rows``
    are the positions of the given points within the original batch.
    """
    settings = settings or NewtonSettings()
    x, single = _as_batch(x0)
    N, n = x.shape
    if indexed:
        call = F
    else:
        def call(y, rows):
            return F(y)
    fx = np.asarray(call(x, np.arange(N)), dtype=float).reshape(N, n)
    res = np.abs(fx).max(axis=1)
    active = res > settings.tolerance
    for _ in range(settings.max_iterations):
        if not np.any(active):
            break
        idx = np.flatnonzero(active)
        xa, fa, ra = x[idx], fx[idx], res[idx]
        J = np.empty((idx.size, n, n))
        for k in range(n):
            step = settings.fd_step * np.maximum(1.0, np.abs(xa[:, k]))
            xp = xa.copy()
            xp[:, k] += step
            J[:, :, k] = (np.asarray(call(xp, idx), dtype=float).reshape(-1, n) - fa) / step[:, None]
        try:
            delta = solve_dense(J, fa)
        except SingularMatrixError as exc:
            raise NewtonError(f"singular Jacobian: {exc}", failed=idx) from None
        lam = np.full(idx.size, settings.damping)
        xn = xa - lam[:, None] * delta
        fn = np.asarray(call(xn, idx), dtype=float).reshape(-1, n)
        rn = np.abs(fn).max(axis=1)
        for _ in range(settings.max_halvings):
            worse = ~(rn <= ra)
            if not np.any(worse):
                break
            lam[worse] *= 0.5
            w = np.flatnonzero(worse)
            xw = xa[w] - lam[w, None] * delta[w]
            fw = np.asarray(call(xw, idx[w]), dtype=float).reshape(-1, n)
            xn[w], fn[w], rn[w] = xw, fw, np.abs(fw).max(axis=1)
        x[idx], fx[idx], res[idx] = xn, fn, rn
        active = ~(res <= settings.tolerance)
    if np.any(active):
        failed = np.flatnonzero(active)
        raise NonConvergenceError(
            f"Newton did not converge for {failed.size} point(s) after "
            f"{settings.max_iterations} iterations (worst residual {np.nanmax(res[failed]):.3g})",
            failed=failed,
        )
    return x[0] if single else x


def trapezoid(samples: Sequence[tuple[float, float]]) -> float:
    """Composite trapezoid rule over ``(s, value)`` pairs sorted by ``s``."""
    if len(samples) < 2:
        raise ValueError("trapezoid needs at least two samples")
    s = np.array([p[0] for p in samples], dtype=float)
    v = np.array([p[1] for p in samples], dtype=float)
    return float(np.sum(0.5 * (v[1:] + v[:-1]) * np.diff(s)))


def trapezoid_weights(steps: int) -> np.ndarray:
    """Unit-step trapezoid weights for ``steps`` intervals (``steps + 1`` nodes)."""
    w = np.ones(steps + 1)
    w[0] = w[-1] = 0.5
    return w


def sup_norm(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.max(np.abs(a))) if a.size else 0.0


def chunked_map(fn: Callable[[np.ndarray], np.ndarray], rows: np.ndarray, threads: int = 1) -> np.ndarray:
    """Apply a row-wise batch function over chunks, optionally on a thread pool.

    Output rows are concatenated in input order.
    """
    if threads <= 1 or len(rows) < 2 * threads:
        return fn(rows)
    size = math.ceil(len(rows) / threads)
    chunks = [rows[i : i + size] for i in range(0, len(rows), size)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(fn, chunks))
    return np.concatenate(parts, axis=0)
