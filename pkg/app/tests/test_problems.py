import logging

import numpy as np
import pytest

from app.dtos.numerics import ProblemSpec
from app.exceptions import IncompatibleProblemError, InvalidProblemParameterError, UnknownProblemError
from app.utils import problems
from app.utils.problems import ProblemLibrary, builtin, manufactured, oscillating_center


def test_library_labels():
    assert set(ProblemLibrary.labels()) == {"ex1d", "ex2d", "ex3d", "oscillating"}


def test_ex1d_source_at_origin():
    problem = builtin("ex1d")
    assert problem.source(0.0, 0.0) == pytest.approx(2.0)
    assert problem.dim == 1
    assert problem.t_end == 1.0


@pytest.mark.parametrize("label,dim,duration,diffusion", [
    ("ex2d", 2, 0.6, 1.0),
    ("ex3d", 3, 0.4, 0.125),
])
def test_multidimensional_examples(label, dim, duration, diffusion):
    problem = builtin(label)
    assert problem.dim == dim
    assert problem.duration == duration
    assert problem.diffusion == diffusion


def test_ex2d_exact_at_start_equals_initial():
    problem = builtin("ex2d")
    rng = np.random.default_rng(5)
    points = problem.sample_points(rng, 50)
    np.testing.assert_allclose(
        ProblemSpec.evaluate(problem.exact, 0.0, points),
        ProblemSpec.evaluate(problem.initial, None, points),
        atol=1e-15,
    )


@pytest.mark.parametrize("label", ["ex1d", "ex2d", "ex3d"])
def test_builtin_exact_solutions_solve_the_pde(label):
    problem = builtin(label)
    rng = np.random.default_rng(17)
    assert problems.max_residual(problem, rng, 200) <= 1e-9


def test_oscillating_parameters():
    problem = builtin("oscillating", alpha=0.01, freq=1.0)
    assert problem.diffusion == 0.01
    assert problem.exact is None
    assert oscillating_center(0.0, 1.0, 0.05) == pytest.approx(0.5)
    assert problem.source(0.0, 0.5) == pytest.approx(10.0)
    assert problem.source(0.0, 0.6) == pytest.approx(0.0)


def test_oscillating_source_is_bounded_by_its_height():
    problem = builtin("oscillating", alpha=0.04)
    x = np.linspace(0.0, 1.0, 501)
    for t in np.linspace(0.0, 1.0, 21):
        values = problem.source(t, x)
        assert np.all(values >= 0.0)
        assert np.max(values) <= 20.0 + 1e-12


def test_oscillating_rejects_bad_parameters():
    with pytest.raises(InvalidProblemParameterError):
        builtin("oscillating", alpha=0.0)
    with pytest.raises(InvalidProblemParameterError):
        builtin("oscillating", width=0.7)
    with pytest.raises(InvalidProblemParameterError):
        builtin("oscillating", speed=2.0)


def test_unknown_label():
    with pytest.raises(UnknownProblemError) as excinfo:
        builtin("ex4d")
    assert "ex1d" in str(excinfo.value)


def test_manufactured_recovers_ex1d():
    problem = manufactured(
        "mms-ex1d", [0.0], [1.0], 1.0,
        u_exact=lambda t, x: x * (1.0 - x) * np.exp(t),
        u_t=lambda t, x: x * (1.0 - x) * np.exp(t),
        laplacian=lambda t, x: -2.0 * np.exp(t) + 0.0 * x,
    )
    x = np.linspace(0.0, 1.0, 11)
    for t in (0.0, 0.3, 1.0):
        np.testing.assert_allclose(problem.source(t, x), builtin("ex1d").source(t, x), rtol=1e-14)


def test_manufactured_zero_solution_has_zero_source():
    problem = manufactured(
        "zero", [0.0, 0.0], [1.0, 2.0], 3.0,
        u_exact=lambda t, x, y: 0.0 * x * y,
        u_t=lambda t, x, y: 0.0 * x * y,
        laplacian=lambda t, x, y: 0.0 * x * y,
    )
    assert np.all(problem.source(0.5, np.linspace(0, 1, 5), np.linspace(0, 2, 5)) == 0.0)


def test_manufactured_decaying_sine(caplog):
    with caplog.at_level(logging.WARNING):
        problem = manufactured(
            "decay", [0.0], [1.0], 1.0,
            u_exact=lambda t, x: np.exp(-t) * np.sin(np.pi * x),
            u_t=lambda t, x: -np.exp(-t) * np.sin(np.pi * x),
            laplacian=lambda t, x: -np.pi ** 2 * np.exp(-t) * np.sin(np.pi * x),
        )
    x = np.linspace(0.0, 1.0, 9)
    np.testing.assert_allclose(problem.source(0.4, x), (np.pi ** 2 - 1.0) * np.exp(-0.4) * np.sin(np.pi * x),
                               rtol=1e-13, atol=1e-15)
    assert "disagree" not in caplog.text


def test_manufactured_warns_on_inconsistent_derivatives(caplog):
    with caplog.at_level(logging.WARNING):
        manufactured(
            "wrong", [0.0], [1.0], 1.0,
            u_exact=lambda t, x: np.exp(-t) * np.sin(np.pi * x),
            u_t=lambda t, x: -np.exp(-t) * np.sin(np.pi * x),
            laplacian=lambda t, x: np.exp(-t) * np.sin(np.pi * x),
        )
    assert "disagree with finite differences" in caplog.text


def test_initial_data_must_vanish_on_the_boundary():
    with pytest.raises(IncompatibleProblemError):
        ProblemSpec(label="bad", lower=(0.0,), upper=(1.0,), diffusion=1.0, duration=1.0,
                    source=lambda t, x: 0.0 * x, initial=lambda x: 1.0 + 0.0 * x)


def test_exact_solution_must_start_at_initial_data():
    with pytest.raises(IncompatibleProblemError):
        ProblemSpec(label="bad", lower=(0.0,), upper=(1.0,), diffusion=1.0, duration=1.0,
                    source=lambda t, x: 0.0 * x, initial=lambda x: x * (1.0 - x),
                    exact=lambda t, x: 2.0 * x * (1.0 - x))
