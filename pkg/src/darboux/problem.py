"""Problem files: schema, loading and validation.

A problem file is a JSON object.  Indices (``alpha``, ``i``, index sets) are
1-based in the file and converted to 0-based on load.  Expressions use the
canonical names ``x1..xn``, ``u1..um`` and ``s1..sk``; a ``variables`` block
may declare aliases (e.g. ``x``/``y``/``u``/``v``) that are rewritten on load.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import expr as ex
from .frame import Frame
from .geometry import Box, DataManifold, s_names

log = logging.getLogger(__name__)

BASE_POINT_TOL = 1e-12
_IDENT = re.compile(r"[A-Za-z][A-Za-z0-9]*")


class ProblemError(Exception):
    """Invalid problem file; ``path`` locates the offending field."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


_EXPR = {"type": "string", "minLength": 1}
_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["n", "m", "frame", "equations", "manifolds", "base_point", "domain_half_widths", "grid"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "n": {"type": "integer", "minimum": 1},
        "m": {"type": "integer", "minimum": 1},
        "variables": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "x": {"type": "array", "items": {"type": "string"}},
                "u": {"type": "array", "items": {"type": "string"}},
            },
        },
        "frame": {"type": "array", "items": {"type": "array", "items": _EXPR}},
        "equations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["alpha", "i", "rhs"],
                "additionalProperties": False,
                "properties": {
                    "alpha": {"type": "integer", "minimum": 1},
                    "i": {"type": "integer", "minimum": 1},
                    "rhs": _EXPR,
                },
            },
        },
        "manifolds": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["alpha", "index_set", "parametrization", "data"],
                "additionalProperties": False,
                "properties": {
                    "alpha": {"type": "integer", "minimum": 1},
                    "index_set": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                    "parametrization": {"type": "array", "items": _EXPR},
                    "data": _EXPR,
                    "parameter_half_widths": {"type": "array", "items": _POS},
                },
            },
        },
        "base_point": {"type": "array", "items": _NUM},
        "domain_half_widths": {"type": "array", "items": _POS},
        "value_radius": _POS,
        "u_sample_box": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
        "grid": {"type": "array", "items": {"type": "integer", "minimum": 2}},
        "exact_solution": {"type": "array", "items": _EXPR},
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": _POS,
                "max_iter": {"type": "integer", "minimum": 1},
                "flow_steps_per_diameter": {"type": "integer", "minimum": 1},
                "samples": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "scc_resolution": {"type": "integer", "minimum": 0},
                "residual_tol": _POS,
                "residual_h2_coefficient": {"type": "number", "minimum": 0},
                "data_tol": _POS,
                "sample_resolution": {"type": "integer", "minimum": 2},
            },
        },
    },
}


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 1e-10
    max_iter: int = 200
    flow_steps_per_diameter: int = 64
    samples: int = 500
    seed: int = 0
    scc_resolution: int = 8
    residual_tol: float = 1e-3
    residual_h2_coefficient: float = 0.0
    data_tol: float = 1e-3
    sample_resolution: int = 21


@dataclass(frozen=True)
class ProblemSpec:
    """A fully validated system with data, domain and solver settings.

    ``rhs[(alpha, i)]`` (0-based) is the right-hand side of
    ``r_i(u_alpha) = f_i^alpha(x, u)``.
    """

    name: str
    n: int
    m: int
    frame: Frame
    rhs: dict
    manifolds: tuple[DataManifold, ...]
    base_point: tuple[float, ...]
    box: Box
    grid: tuple[int, ...]
    settings: SolverSettings = SolverSettings()
    value_radius: float | None = None
    u_sample_box: tuple | None = None
    exact: tuple[ex.Expression, ...] | None = None
    aliases: dict = field(default_factory=dict)
    warnings: tuple[str, ...] = ()

    def index_set(self, alpha: int) -> tuple[int, ...]:
        return self.manifolds[alpha].index_set

    def f(self, alpha: int, i: int) -> ex.Expression:
        return self.rhs[(alpha, i)]

    def with_settings(self, **changes) -> ProblemSpec:
        return replace(self, settings=replace(self.settings, **changes))

    def with_grid(self, grid) -> ProblemSpec:
        return replace(self, grid=tuple(int(g) for g in grid))


def _parse(source: str, path: str, aliases: dict[str, str], allowed: set[str]) -> ex.Expression:
    try:
        e = ex.parse(source)
    except ex.ParseError as exc:
        raise ProblemError(str(exc), path) from None
    e = e.rename(aliases) if aliases else e
    extra = e.free_variables() - allowed
    if extra:
        raise ProblemError(f"unknown variable(s) {sorted(extra)}; allowed {sorted(allowed)}", path)
    return e


def from_dict(data: dict, name: str = "problem") -> ProblemSpec:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        loc = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ProblemError(f"schema violation: {err.message}", loc)

    n, m = data["n"], data["m"]
    warnings: list[str] = []
    xs = [f"x{k + 1}" for k in range(n)]
    us = [f"u{a + 1}" for a in range(m)]
    aliases: dict[str, str] = {}
    declared: list[str] = []
    variables = data.get("variables", {})
    for key, canon in (("x", xs), ("u", us)):
        names = variables.get(key)
        if names is None:
            continue
        if len(names) != len(canon):
            raise ProblemError(f"expected {len(canon)} names", f"variables/{key}")
        declared.extend(names)
        aliases.update({a: c for a, c in zip(names, canon) if a != c})
    # an alias may only spell its own canonical name, never another one
    shadowed = set(aliases) & (set(xs) | set(us))
    if len(set(declared)) != len(declared) or shadowed or any(not _IDENT.fullmatch(a) or a in ex.FUNCTIONS for a in declared):
        raise ProblemError("ambiguous or invalid variable aliases", "variables")

    def check_len(seq, size, path):
        if len(seq) != size:
            raise ProblemError(f"expected {size} entries, got {len(seq)}", path)

    check_len(data["frame"], n, "frame")
    rows = []
    for i, row in enumerate(data["frame"]):
        check_len(row, n, f"frame/{i}")
        rows.append(tuple(_parse(s, f"frame/{i}/{k}", aliases, set(xs)) for k, s in enumerate(row)))
    frame = Frame(tuple(rows))

    base = tuple(float(v) for v in data["base_point"])
    check_len(base, n, "base_point")
    check_len(data["domain_half_widths"], n, "domain_half_widths")
    box = Box(base, tuple(data["domain_half_widths"]))
    grid = tuple(data["grid"])
    check_len(grid, n, "grid")

    by_alpha: dict[int, tuple[int, dict]] = {}
    for k, mf in enumerate(data["manifolds"]):
        a = mf["alpha"]
        if a > m:
            raise ProblemError(f"alpha {a} exceeds m={m}", f"manifolds/{k}/alpha")
        if a in by_alpha:
            raise ProblemError(f"duplicate manifold for alpha {a}", f"manifolds/{k}")
        by_alpha[a] = (k, mf)
    missing = [a for a in range(1, m + 1) if a not in by_alpha]
    if missing:
        raise ProblemError(f"no manifold given for alpha {missing}", "manifolds")

    manifolds = []
    for a in range(1, m + 1):
        k, mf = by_alpha[a]
        path = f"manifolds/{k}"
        I = list(mf["index_set"])
        if any(i > n for i in I):
            raise ProblemError(f"index out of range 1..{n}", f"{path}/index_set")
        if len(set(I)) != len(I):
            raise ProblemError("repeated index", f"{path}/index_set")
        if I != sorted(I):
            msg = f"{path}/index_set {I} normalized to {sorted(I)}"
            log.warning(msg)
            warnings.append(msg)
            I = sorted(I)
        k_params = n - len(I)
        s_allowed = set(s_names(k_params))
        check_len(mf["parametrization"], n, f"{path}/parametrization")
        param = tuple(
            _parse(s, f"{path}/parametrization/{c}", {}, s_allowed) for c, s in enumerate(mf["parametrization"])
        )
        g = _parse(mf["data"], f"{path}/data", {}, s_allowed)
        hw = mf.get("parameter_half_widths", [box.diameter] * k_params)
        check_len(hw, k_params, f"{path}/parameter_half_widths")
        manifold = DataManifold(tuple(i - 1 for i in I), param, g, tuple(hw))
        at0 = manifold.point(np.zeros((1, k_params)))[0]
        if np.max(np.abs(at0 - np.asarray(base))) > BASE_POINT_TOL:
            raise ProblemError(f"parametrization at 0 is {at0.tolist()}, not the base point", f"{path}/parametrization")
        manifolds.append(manifold)

    rhs: dict[tuple[int, int], ex.Expression] = {}
    for k, eq in enumerate(data["equations"]):
        a, i = eq["alpha"] - 1, eq["i"] - 1
        path = f"equations/{k}"
        if a >= m or i >= n:
            raise ProblemError(f"(alpha, i) = ({a + 1}, {i + 1}) out of range", path)
        if (a, i) in rhs:
            raise ProblemError(f"duplicate equation for (alpha, i) = ({a + 1}, {i + 1})", path)
        if i not in manifolds[a].index_set:
            raise ProblemError(f"equation for i={i + 1} but index set of alpha={a + 1} is "
                               f"{[j + 1 for j in manifolds[a].index_set]}", path)
        rhs[(a, i)] = _parse(eq["rhs"], f"{path}/rhs", aliases, set(xs) | set(us))
    for a, mf in enumerate(manifolds):
        for i in mf.index_set:
            if (a, i) not in rhs:
                raise ProblemError(f"no equation for (alpha, i) = ({a + 1}, {i + 1})", "equations")

    u_box = data.get("u_sample_box")
    if u_box is not None:
        check_len(u_box, m, "u_sample_box")
        if any(lo >= hi for lo, hi in u_box):
            raise ProblemError("each u_sample_box entry must be [lo, hi] with lo < hi", "u_sample_box")
        u_box = tuple(tuple(float(v) for v in pair) for pair in u_box)

    exact = data.get("exact_solution")
    if exact is not None:
        check_len(exact, m, "exact_solution")
        exact = tuple(_parse(s, f"exact_solution/{a}", aliases, set(xs)) for a, s in enumerate(exact))

    settings = SolverSettings(**data.get("solver", {}))
    return ProblemSpec(
        name=data.get("name", name),
        n=n,
        m=m,
        frame=frame,
        rhs=rhs,
        manifolds=tuple(manifolds),
        base_point=base,
        box=box,
        grid=grid,
        settings=settings,
        value_radius=data.get("value_radius"),
        u_sample_box=u_box,
        exact=exact,
        aliases=aliases,
        warnings=tuple(warnings),
    )


def bundled_names() -> list[str]:
    root = resources.files(__package__) / "problems"
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def bundled_path(name: str):
    return resources.files(__package__) / "problems" / f"{name}.json"


def resolve(path: str | Path):
    """Return a readable path, falling back to the bundled corpus by stem.

    ``examples/scc_a``, ``scc_a`` and ``scc_a.json`` all resolve to the bundled
    file when no such file exists on disk.
    """
    p = Path(path)
    if p.is_file():
        return p
    stem = p.name[:-5] if p.name.endswith(".json") else p.name
    if stem in bundled_names():
        return bundled_path(stem)
    raise ProblemError(f"no such problem file: {path}")


def load(path: str | Path) -> ProblemSpec:
    src = resolve(path)
    try:
        data = json.loads(src.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ProblemError(f"invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ProblemError("problem file must hold a JSON object")
    stem = Path(str(path)).name
    stem = stem[:-5] if stem.endswith(".json") else stem
    return from_dict(data, name=stem)
