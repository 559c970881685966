import copy
import json

import pytest

from darboux import problem as pr


def bundled(name: str) -> dict:
    return json.loads(pr.bundled_path(name).read_text(encoding="utf-8"))


def make_spec(name: str, **overrides):
    data = copy.deepcopy(bundled(name))
    data.update(overrides)
    return pr.from_dict(data, name=name)


def point_problem(frame, eqs, data="1", hw=(0.1, 0.1), grid=(21, 21), exact=None):
    """Single unknown with point data at the origin of the plane."""
    d = {
        "n": 2,
        "m": 1,
        "variables": {"x": ["x", "y"], "u": ["u"]},
        "frame": frame,
        "equations": [{"alpha": 1, "i": i + 1, "rhs": rhs} for i, rhs in enumerate(eqs)],
        "manifolds": [{"alpha": 1, "index_set": [1, 2], "parametrization": ["0", "0"], "data": data}],
        "base_point": [0.0, 0.0],
        "domain_half_widths": list(hw),
        "grid": list(grid),
    }
    if exact:
        d["exact_solution"] = [exact]
    return d


@pytest.fixture
def scc_a():
    return make_spec("scc_a")
