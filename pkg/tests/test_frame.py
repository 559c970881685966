import math

import numpy as np
import pytest

from darboux.frame import Frame, check_frame

NONCOMMUTING = Frame.from_strings([["1", "0"], ["x1", "1"]])
WAVY = Frame.from_strings([["1 + 0.3*sin(x2)", "0.2*x1^2"], ["0.1*exp(x1)", "cos(x1*x2)"]])


def random_points(n=100, dim=2, seed=0, scale=0.5):
    return np.random.default_rng(seed).uniform(-scale, scale, size=(n, dim))


def test_flows():
    coord = Frame.coordinate(2)
    assert np.allclose(coord.flow(0, [0.0, 0.0], 0.3), [0.3, 0.0], atol=1e-15)
    assert np.allclose(NONCOMMUTING.flow(1, [1.0, 0.0], 1.0, substeps=64), [math.e, 1.0], atol=1e-6)
    assert np.array_equal(WAVY.flow(1, [0.2, 0.1], 0.0), [0.2, 0.1])


def test_brackets():
    x = random_points(10)
    assert np.all(Frame.coordinate(2).lie_bracket(0, 1, x) == 0.0)
    assert np.allclose(NONCOMMUTING.lie_bracket(0, 1, x), np.tile([1.0, 0.0], (10, 1)), atol=1e-15)
    assert np.all(WAVY.lie_bracket(1, 1, x) == 0.0)


def test_structure_coefficients():
    x = random_points(10)
    assert np.all(Frame.coordinate(3).structure_coeffs(0, 2, random_points(10, 3)) == 0.0)
    c = NONCOMMUTING.structure_coeffs(0, 1, x)
    assert np.allclose(c, np.tile([1.0, 0.0], (10, 1)), atol=1e-14)
    assert np.all(NONCOMMUTING.structure_coeffs(1, 1, x) == 0.0)


@pytest.mark.parametrize("frame", [NONCOMMUTING, WAVY], ids=["noncommuting", "wavy"])
def test_bracket_reconstruction(frame):
    x = random_points(100, seed=5)
    M = frame.matrix(x)
    for i in range(2):
        for j in range(2):
            c = frame.structure_coeffs(i, j, x)
            rebuilt = np.einsum("nlk,nk->nl", M, c)
            assert np.max(np.abs(rebuilt - frame.lie_bracket(i, j, x))) <= 1e-9


def test_bracket_antisymmetry():
    x = random_points(100, seed=6)
    ab = WAVY.lie_bracket(0, 1, x)
    ba = WAVY.lie_bracket(1, 0, x)
    assert np.max(np.abs(ab + ba)) <= 1e-12
    c = WAVY.structure_coeffs(0, 1, x) + WAVY.structure_coeffs(1, 0, x)
    assert np.max(np.abs(c)) <= 1e-9


def test_matrix_columns_are_fields():
    x = random_points(3)
    M = WAVY.matrix(x)
    assert np.array_equal(M[:, :, 1], WAVY.vector(1, x))


def test_check_frame_flags_singular_points():
    grid = np.array([[a, b] for a in np.linspace(-1, 1, 5) for b in np.linspace(-1, 1, 5)])
    assert check_frame(NONCOMMUTING, grid).passed
    singular = Frame.from_strings([["x1", "0"], ["0", "1"]])
    rep = check_frame(singular, grid)
    assert not rep.passed
    assert rep.witness["x"][0] == 0.0


def test_frame_rejects_bad_shapes():
    with pytest.raises(ValueError):
        Frame.from_strings([["1", "0"], ["0"]])
    with pytest.raises(ValueError):
        Frame.from_strings([["1", "u1"], ["0", "1"]])
