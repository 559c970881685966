"""Structured diagnostic records and their JSON round-trip."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any


def _clean(value: Any) -> Any:
    """Coerce numpy scalars/arrays and tuples to plain JSON-able builtins."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "tolist"):
        return _clean(value.tolist())
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(value, int):
        return int(value)
    if isinstance(value, float):
        return float(value)
    return value


class _Record:
    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _clean(getattr(self, f.name)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})


@dataclass
class HypothesisReport(_Record):
    """Pass/fail record for one sampled hypothesis check.

    ``worst`` is the largest residual seen; ``witness`` holds the sample
    point achieving it (keys ``x`` and, where relevant, ``u``).
    """

    name: str
    passed: bool
    worst: float = 0.0
    tolerance: float = 0.0
    samples: int = 0
    witness: dict | None = None
    seed: int | None = None
    details: dict = field(default_factory=dict)
    message: str = ""


@dataclass
class SccReport(_Record):
    passed: bool
    resolution: int
    tolerance: float
    excursions: list = field(default_factory=list)  # worst distance outside the box, per alpha
    offending: dict | None = None
    nodes: int = 0
    message: str = ""


@dataclass
class IterationTrace(_Record):
    distances: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    termination: str = ""
    clamp_events: int = 0
    lipschitz: float = 0.0
    bound: float = 0.0
    value_radius: float = 0.0
    max_t: float = 0.0
    sizing_ok: bool = False
    initial: str = "data"

    @property
    def iterations(self) -> int:
        return len(self.distances)


@dataclass
class ResidualReport(_Record):
    """Residual sups of the frame derivatives against the right-hand sides.

    ``full`` holds one entry ``{alpha, i, sup, samples}`` (1-based) per
    equation, with the sup over interior grid nodes; ``restricted`` holds
    ``{alpha, j, i, sup, samples}`` for the j-th equation of unknown alpha
    over samples of the j-th swept submanifold.
    """

    full: list = field(default_factory=list)
    restricted: list = field(default_factory=list)
    data: list = field(default_factory=list)  # per alpha: sup |u_alpha - g_alpha| on the data manifold
    step: float = 0.0
    full_sup: float = 0.0
    restricted_sup: float = 0.0
    data_sup: float = 0.0


@dataclass
class DiagnosticsReport(_Record):
    problem: str
    command: str
    version: str
    seed: int
    passed: bool
    exit_code: int
    sections: dict = field(default_factory=dict)  # name -> HypothesisReport/SccReport dict
    trace: dict | None = None
    residuals: dict | None = None
    summary: dict = field(default_factory=dict)
    forced: bool = False
    timings: dict | None = None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> DiagnosticsReport:
        return cls.from_dict(json.loads(text))

    def section(self, name: str) -> dict:
        return self.sections[name]
