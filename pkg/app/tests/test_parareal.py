import numpy as np
import pytest

from app.dtos.dtos import PararealRun
from app.dtos.numerics import StageNodes, TensorGrid
from app.exceptions import FieldMismatchError, InvalidPararealRunError, PararealWorkerError
from app.services import eife, spectral
from app.services.parareal import PararealSolver, parareal_solve, sequential_fine_reference
from app.tests.conftest import heat_problem
from app.utils.problems import builtin


@pytest.fixture
def ex1d():
    return builtin("ex1d")


@pytest.fixture
def grid_1d(ex1d):
    return TensorGrid.from_cells(ex1d.lower, ex1d.upper, [32])


def make_run(**kwargs):
    params = dict(coarse_intervals=4, fine_steps=3, coarse_stages=1, fine_stages=3, k_max=4)
    params.update(kwargs)
    return PararealRun(**params)


def test_run_validation():
    with pytest.raises(InvalidPararealRunError):
        make_run(coarse_stages=3, fine_stages=2)
    with pytest.raises(InvalidPararealRunError):
        make_run(k_max=None, tol=0.0)
    with pytest.raises(InvalidPararealRunError):
        make_run(coarse_intervals=0)
    with pytest.raises(InvalidPararealRunError):
        make_run(workers=0)
    assert make_run(k_max=None, tol=1e-8).k_max is None
    assert make_run(k_max=0).total_steps == 12
    assert make_run().method_tag() == "PEIFE-p1q3"


def test_zero_iterations_is_the_coarse_sweep(ex1d, grid_1d):
    run = make_run(k_max=0, coarse_stages=2)
    checkpoints, trace = parareal_solve(ex1d, grid_1d, run)

    basis = spectral.build_basis(grid_1d, ex1d.diffusion)
    coarse = eife.EifePropagator(grid_1d, basis, StageNodes.uniform(2), 0.25, ex1d.source)
    u0 = eife.project_initial(grid_1d, basis, ex1d.initial)
    expected = eife.integrate(coarse, u0, 0.0, 4)

    np.testing.assert_array_equal(checkpoints[-1].values, expected.values)
    assert trace.iterations == 0
    assert len(checkpoints) == 5


def test_n_iterations_reproduce_the_fine_integration_bitwise(ex1d, grid_1d):
    run = make_run(k_max=4)
    checkpoints, _ = parareal_solve(ex1d, grid_1d, run)
    reference = sequential_fine_reference(ex1d, grid_1d, run)

    assert len(checkpoints) == len(reference) == 5
    for mine, fine in zip(checkpoints, reference):
        np.testing.assert_array_equal(mine.values, fine.values)


def test_fine_reference_equals_sequential_integration(ex1d, grid_1d):
    run = make_run(coarse_intervals=2, fine_steps=4, coarse_stages=2, fine_stages=2)
    reference = sequential_fine_reference(ex1d, grid_1d, run)

    basis = spectral.build_basis(grid_1d, ex1d.diffusion)
    fine = eife.EifePropagator(grid_1d, basis, StageNodes.uniform(2), 0.125, ex1d.source)
    u0 = eife.project_initial(grid_1d, basis, ex1d.initial)
    np.testing.assert_allclose(reference[-1].values, eife.integrate(fine, u0, 0.0, 8).values, rtol=1e-13, atol=1e-16)


def test_leading_checkpoints_lock_after_each_iteration(ex1d, grid_1d):
    run = make_run(k_max=2)
    checkpoints, _ = parareal_solve(ex1d, grid_1d, run)
    reference = sequential_fine_reference(ex1d, grid_1d, run)

    for n in range(3):
        np.testing.assert_array_equal(checkpoints[n].values, reference[n].values)


@pytest.mark.parametrize("workers", [2, 4])
def test_worker_count_does_not_change_results(ex1d, grid_1d, workers):
    serial, _ = parareal_solve(ex1d, grid_1d, make_run(k_max=2, workers=1))
    pooled, _ = parareal_solve(ex1d, grid_1d, make_run(k_max=2, workers=workers))

    for a, b in zip(serial, pooled):
        np.testing.assert_array_equal(a.values, b.values)


def test_one_iteration_reaches_fine_accuracy(ex1d, grid_1d):
    """Both propagators treat the linear part exactly, so only the source terms differ"""
    run = make_run(k_max=1)
    reference = sequential_fine_reference(ex1d, grid_1d, run)
    _, trace = parareal_solve(ex1d, grid_1d, run, reference=reference)

    fine_l2, _ = eife.solution_errors(reference[-1], ex1d.exact, ex1d.t_end)
    assert trace.records[0].l2_error > 2.0 * fine_l2
    assert trace.records[1].l2_error == pytest.approx(fine_l2, rel=1e-6)
    assert trace.records[1].l2_vs_fine < 1e-10


def test_trace_records_every_iteration(ex1d, grid_1d):
    run = make_run(k_max=3)
    reference = sequential_fine_reference(ex1d, grid_1d, run)
    _, trace = parareal_solve(ex1d, grid_1d, run, reference=reference)

    assert [r.iteration for r in trace.records] == [0, 1, 2, 3]
    assert trace.records[0].increment is None
    assert all(r.increment >= 0 for r in trace.records[1:])
    assert all(len(r.checkpoints) == 5 for r in trace.records)
    assert trace.records[0].coarse_seconds > 0
    assert trace.mean_iteration_seconds() > 0


def test_last_only_retention(ex1d, grid_1d):
    run = make_run(k_max=3, trace_retention="last")
    _, trace = parareal_solve(ex1d, grid_1d, run)

    assert all(r.checkpoints is None for r in trace.records[:-1])
    assert len(trace.records[-1].checkpoints) == 5


def test_budget_is_capped_at_interval_count(ex1d, grid_1d):
    _, trace = parareal_solve(ex1d, grid_1d, make_run(coarse_intervals=3, k_max=10))
    assert trace.iterations == 3


def test_tolerance_stops_early(ex1d, grid_1d):
    _, trace = parareal_solve(ex1d, grid_1d, make_run(k_max=None, tol=1e300))
    assert trace.iterations == 1


def test_worker_failure_names_the_interval():
    def source(t, x):
        if abs(t - 0.625) < 1e-12:
            raise RuntimeError("source blew up")
        return 0.0 * x

    problem = heat_problem(source, lambda x: x * (1.0 - x))
    grid = TensorGrid.from_cells(problem.lower, problem.upper, [8])
    run = make_run(coarse_intervals=4, fine_steps=2, coarse_stages=1, fine_stages=2, workers=2)

    with pytest.raises(PararealWorkerError) as excinfo:
        parareal_solve(problem, grid, run)
    assert excinfo.value.interval == 2
    assert "source blew up" in str(excinfo.value)


def test_solver_rejects_grid_of_other_domain(ex1d):
    grid = TensorGrid.from_cells([0.0], [2.0], [8])
    with pytest.raises(FieldMismatchError):
        PararealSolver(ex1d, grid, make_run())


@pytest.mark.integration
def test_pararealized_table_row_matches_sequential_row(ex1d):
    grid = TensorGrid.from_cells(ex1d.lower, ex1d.upper, [256])
    run = PararealRun(coarse_intervals=4, fine_steps=2, coarse_stages=2, fine_stages=2, k_max=4)
    checkpoints, _ = parareal_solve(ex1d, grid, run)

    basis = spectral.build_basis(grid, ex1d.diffusion)
    prop = eife.EifePropagator(grid, basis, StageNodes.uniform(2), 0.125, ex1d.source)
    sequential = eife.integrate(prop, eife.project_initial(grid, basis, ex1d.initial), 0.0, 8)

    parareal_l2, _ = eife.solution_errors(checkpoints[-1], ex1d.exact, 1.0)
    sequential_l2, _ = eife.solution_errors(sequential, ex1d.exact, 1.0)
    assert f"{parareal_l2:.4e}" == f"{sequential_l2:.4e}"


@pytest.mark.integration
def test_scaled_2d_problem_is_exact_after_n_iterations_and_close_after_two():
    problem = builtin("ex2d")
    grid = TensorGrid.from_cells(problem.lower, problem.upper, [256, 128])
    full = PararealRun(coarse_intervals=8, fine_steps=8, coarse_stages=2, fine_stages=3, k_max=8)
    reference = sequential_fine_reference(problem, grid, full)

    checkpoints, _ = parareal_solve(problem, grid, full)
    for mine, fine in zip(checkpoints, reference):
        np.testing.assert_array_equal(mine.values, fine.values)

    early, _ = parareal_solve(problem, grid, full.model_copy(update={"k_max": 2}))
    fine_l2, _ = eife.solution_errors(reference[-1], problem.exact, problem.t_end)
    early_l2, _ = eife.solution_errors(early[-1], problem.exact, problem.t_end)
    assert early_l2 == pytest.approx(fine_l2, rel=0.05)
