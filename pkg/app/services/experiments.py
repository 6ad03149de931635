import logging
import math
import os
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.interpolate import RegularGridInterpolator

from app.config import settings
from app.dtos.dtos import ExperimentConfig, IterationTrace, PararealRun, ResultRow, Scheme, StudyAxis
from app.dtos.numerics import NodalField, ProblemSpec, QuadratureRule, SpectralField, StageNodes, TensorGrid
from app.exceptions import (
    ExperimentConfigError,
    MissingExactSolutionError,
    SnapshotTimeError,
    get_root_cause_message,
)
from app.services import eife, grid_fem, spectral
from app.services.parareal import PararealSolver, parareal_solve, sequential_fine_reference
from app.utils.problems import builtin

logger = logging.getLogger(__name__)

CONVERGENCE_COLUMNS = ["method", "N_T", "grid", "L2_error", "Linf_error", "CR", "wall_seconds"]
TRACE_COLUMNS = ["k", "L2_error", "Linf_error", "L2_vs_fine", "Linf_vs_fine", "increment", "plateau"]
PERF_COLUMNS = ["grid", "nodes", "N_T", "seconds_per_iteration", "growth_factor"]
SPEEDUP_COLUMNS = ["method", "N_T", "grid", "L2_error", "Linf_error", "wall_seconds", "speedup"]

ERROR_FORMAT = "{:.4e}"
RATE_FORMAT = "{:.2f}"
SECONDS_FORMAT = "{:.3f}"
SNAPSHOT_FORMAT = "%.10e"

PLATEAU_RTOL = 0.01
# Self-convergence references: time step refinement and grid refinement factors.
SELF_REFERENCE_STEP_FACTOR = 4
SELF_REFERENCE_GRID_FACTOR = 2
# Relative slack when deciding that a snapshot time sits on a fine step.
STEP_MATCH_RTOL = 1e-9


def convergence_rate(previous_error: float, error: float, refinement: float) -> Optional[float]:
    """CR = log(e_coarse / e_fine) / log(refinement); log2 for halvings"""
    if previous_error is None or error is None or previous_error <= 0 or error <= 0:
        return None
    return math.log(previous_error / error) / math.log(refinement)


def growth_factor(coarse_seconds: float, fine_seconds: float, coarse_nodes: int, fine_nodes: int) -> Optional[float]:
    """log2(t_fine / t_coarse) / log2(nodes_fine / nodes_coarse); 1.0 means linear growth"""
    if coarse_seconds <= 0 or fine_seconds <= 0 or fine_nodes <= coarse_nodes:
        return None
    return math.log2(fine_seconds / coarse_seconds) / math.log2(fine_nodes / coarse_nodes)


def within_plateau(error: float, plateau: float, rtol: float = PLATEAU_RTOL) -> bool:
    """|e_k - e_fine| <= rtol * e_fine; iterates far below the plateau are not on it"""
    return abs(error - plateau) <= rtol * plateau


def _whole_steps(ratio: float) -> int:
    """floor(ratio), snapping to the nearest integer within rounding noise"""
    nearest = round(ratio)
    if abs(ratio - nearest) <= STEP_MATCH_RTOL * max(abs(ratio), 1.0):
        return int(nearest)
    return int(math.floor(ratio))


def discrete_function(field: NodalField) -> Callable:
    """The multilinear FE function of a nodal field, callable on broadcastable coordinates"""
    grid = field.grid
    axes = [np.concatenate(([grid.lower[a]], grid.coordinates(a), [grid.upper[a]])) for a in range(grid.dim)]
    interpolator = RegularGridInterpolator(axes, np.pad(field.tensor(), 1), bounds_error=False, fill_value=0.0)

    def evaluate(*x):
        arrays = np.broadcast_arrays(*x)
        points = np.stack([a.ravel() for a in arrays], axis=-1)
        return interpolator(points).reshape(arrays[0].shape)

    return evaluate


def write_table(frame: pd.DataFrame, path: Path, formats: Dict[str, str]) -> Path:
    """UTF-8 CSV with fixed per-column number formats; missing values stay empty"""
    out = frame.copy()
    for column, fmt in formats.items():
        out[column] = [
            "" if value is None or (isinstance(value, float) and math.isnan(value)) else fmt.format(value)
            for value in out[column]
        ]
    out.to_csv(path, index=False, encoding="utf-8")
    logger.info(f"Wrote {len(out)} rows to {path}")
    return path


def frame_records(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    return frame.astype(object).where(frame.notna(), None).to_dict("records")


def rows_to_frame(rows: Sequence[ResultRow]) -> pd.DataFrame:
    return pd.DataFrame(
        [[r.method, r.steps, r.grid, r.l2_error, r.linf_error, r.rate, r.wall_seconds] for r in rows],
        columns=CONVERGENCE_COLUMNS,
    )


class ExperimentRunner:
    """Runs one experiment config and writes its CSV tables into the output directory"""

    def __init__(self, config: ExperimentConfig, problem: Optional[ProblemSpec] = None):
        self.config = config
        self.problem = problem or builtin(config.problem, **config.problem_params)
        self.rule = (QuadratureRule.gauss_legendre(config.quadrature_points)
                     if config.quadrature_points else grid_fem.default_rule())
        self.workers = config.workers or settings.PEIFE_WORKERS
        self.output_dir = Path(config.output_dir or settings.OUTPUT_DIR)
        self._prepare_output_dir()
        if config.seed is not None:
            logger.debug(f"Seed {config.seed} recorded; the solver has no stochastic components")

    def _prepare_output_dir(self) -> None:
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ExperimentConfigError(f"Cannot create output directory {self.output_dir}: {e}") from e
        if not os.access(self.output_dir, os.W_OK):
            raise ExperimentConfigError(f"Output directory {self.output_dir} is not writable")

    def grid_for(self, cells) -> TensorGrid:
        counts = [cells] * self.problem.dim if isinstance(cells, int) else list(cells)
        if len(counts) != self.problem.dim:
            raise ExperimentConfigError(
                f"Cell counts {cells} do not match the {self.problem.dim}D problem {self.problem.label}"
            )
        return TensorGrid.from_cells(self.problem.lower, self.problem.upper, counts)

    def parareal_run(self, coarse_intervals: int, fine_steps: int, record_trace: bool = False,
                     trace_retention: Optional[str] = None) -> PararealRun:
        c = self.config
        sequential = c.scheme == Scheme.EIFE
        # sequential runs only use the fine propagator of the run
        return PararealRun(
            coarse_intervals=coarse_intervals,
            fine_steps=fine_steps,
            coarse_stages=c.q if sequential else c.p,
            fine_stages=c.q,
            k_max=0 if sequential else c.k_max,
            tol=0.0 if sequential else c.tol,
            record_trace=record_trace,
            trace_retention=trace_retention or c.trace_retention,
            workers=self.workers,
        )

    def steps_label(self, coarse_intervals: int, fine_steps: int) -> str:
        if self.config.scheme == Scheme.EIFE:
            return str(coarse_intervals * fine_steps)
        return f"{coarse_intervals}x{fine_steps}"

    def _sequential(self, grid: TensorGrid, stages: int, total_steps: int) -> SpectralField:
        basis = spectral.build_basis(grid, self.problem.diffusion)
        prop = eife.EifePropagator(
            grid, basis, StageNodes.uniform(stages), self.problem.duration / total_steps,
            self.problem.source, self.rule, self.config.source_mode,
        )
        u0 = eife.project_initial(grid, basis, self.problem.initial, self.rule)
        return eife.integrate(prop, u0, self.problem.t0, total_steps)

    def solve(self, grid: TensorGrid, coarse_intervals: int, fine_steps: int) -> Tuple[SpectralField, float]:
        """Terminal solution of the configured scheme and its wall time"""
        started = time.perf_counter()
        if self.config.scheme == Scheme.EIFE:
            final = self._sequential(grid, self.config.q, coarse_intervals * fine_steps)
        else:
            checkpoints, _ = parareal_solve(
                self.problem, grid, self.parareal_run(coarse_intervals, fine_steps), self.rule,
                source_mode=self.config.source_mode,
            )
            final = checkpoints[-1]
        return final, time.perf_counter() - started

    def _require_reference(self) -> None:
        if self.problem.exact is None and self.config.reference != "self":
            raise MissingExactSolutionError(
                f"Problem {self.problem.label} has no exact solution; "
                f"set reference to 'self' for a self-convergence study"
            )

    def _errors_vs_exact(self, final: SpectralField) -> Tuple[float, float]:
        return eife.solution_errors(final, self.problem.exact, self.problem.t_end, self.rule)

    def run_convergence_study(self) -> List[ResultRow]:
        """Spatial or temporal refinement table with convergence rates"""
        c = self.config
        if c.study not in (StudyAxis.SPATIAL, StudyAxis.TEMPORAL):
            raise ExperimentConfigError(f"Study {c.study.value} is not a convergence study")
        self._require_reference()
        use_exact = self.problem.exact is not None and c.reference == "exact"
        tag = c.method_tag()
        logger.info(f"Starting {c.study.value} convergence study of {tag} on {self.problem.label}")

        if c.study == StudyAxis.SPATIAL:
            coarse_intervals, fine_steps = c.temporal_levels()[-1]
            levels = [(self.grid_for(cells), coarse_intervals, fine_steps) for cells in c.cells]
        else:
            grid = self.grid_for(c.cells[-1])
            levels = [(grid, n, m) for n, m in c.temporal_levels()]

        compare = self._errors_vs_exact if use_exact else self._self_reference(levels)

        rows: List[ResultRow] = []
        previous = None
        for grid, n, m in levels:
            final, seconds = self.solve(grid, n, m)
            l2, linf = compare(final)
            rate = None
            if previous is not None:
                prev_grid, prev_steps, prev_l2 = previous
                refinement = (grid.cells[0] / prev_grid.cells[0] if c.study == StudyAxis.SPATIAL
                              else (n * m) / prev_steps)
                rate = convergence_rate(prev_l2, l2, refinement)
            row = ResultRow(
                method=tag, steps=self.steps_label(n, m), grid=grid.label(),
                l2_error=l2, linf_error=linf, rate=rate, wall_seconds=seconds,
            )
            logger.info(
                f"{tag} {row.steps} on {row.grid}: L2 {l2:.4e}, Linf {linf:.4e}"
                + (f", CR {rate:.2f}" if rate is not None else "")
            )
            rows.append(row)
            previous = (grid, n * m, l2)
        return rows

    def _self_reference(self, levels) -> Callable[[SpectralField], Tuple[float, float]]:
        """Comparison against a refined run of the same problem"""
        c = self.config
        grid, n, m = levels[-1]
        if c.study == StudyAxis.TEMPORAL:
            total = SELF_REFERENCE_STEP_FACTOR * n * m
            logger.info(f"Self-convergence reference: EIFE-s{c.q} with {total} steps on {grid.label()}")
            reference = self._sequential(grid, c.q, total)
            return lambda final: eife.field_distance(final, reference, self.rule)

        ref_grid = self.grid_for([SELF_REFERENCE_GRID_FACTOR * cc for cc in grid.cells])
        logger.info(f"Self-convergence reference: {c.method_tag()} {n}x{m} on {ref_grid.label()}")
        reference, _ = self.solve(ref_grid, n, m)
        exact = discrete_function(spectral.dst_backward(reference))

        def compare(final: SpectralField) -> Tuple[float, float]:
            nodal = spectral.dst_backward(final)
            return (grid_fem.l2_error(final.grid, nodal, exact, self.rule),
                    grid_fem.linf_error(nodal, exact))

        return compare

    def run_parareal_trace(self) -> Tuple[pd.DataFrame, IterationTrace]:
        """Error against the exact solution and the sequential fine run at every iteration"""
        c = self.config
        grid = self.grid_for(c.cells[-1])
        n, m = c.temporal_levels()[-1]
        run = self.parareal_run(n, m, record_trace=True)
        logger.info(f"Tracing {run.method_tag()} {n}x{m} on {grid.label()} for {self.problem.label}")

        reference = sequential_fine_reference(self.problem, grid, run, self.rule, c.source_mode)
        _, trace = parareal_solve(self.problem, grid, run, self.rule, reference, c.source_mode)

        if self.problem.exact is not None:
            plateau_l2, _ = self._errors_vs_exact(reference[-1])
            within = lambda r: within_plateau(r.l2_error, plateau_l2)
        else:
            fine_norm, _ = eife.field_distance(reference[-1], SpectralField.zeros(grid), self.rule)
            within = lambda r: r.l2_vs_fine <= PLATEAU_RTOL * fine_norm

        records = []
        first_plateau = None
        for r in trace.records:
            on_plateau = bool(within(r))
            if on_plateau and first_plateau is None:
                first_plateau = r.iteration
            records.append([r.iteration, r.l2_error, r.linf_error, r.l2_vs_fine, r.linf_vs_fine,
                            r.increment, on_plateau])
        logger.info(
            f"{run.method_tag()}: plateau reached at k={first_plateau}" if first_plateau is not None
            else f"{run.method_tag()}: plateau not reached within {trace.iterations} iterations"
        )
        return pd.DataFrame(records, columns=TRACE_COLUMNS), trace

    def run_perf_growth(self) -> pd.DataFrame:
        """Mean wall time per Parareal iteration over a sequence of growing grids"""
        c = self.config
        if c.k_max is not None and c.k_max < 1:
            raise ExperimentConfigError("Performance runs need at least one Parareal iteration")
        n, m = c.temporal_levels()[-1]
        records = []
        previous = None
        for cells in c.cells:
            grid = self.grid_for(cells)
            run = self.parareal_run(n, m, record_trace=True, trace_retention="last")
            _, trace = PararealSolver(self.problem, grid, run, self.rule, c.source_mode).solve()
            seconds = trace.mean_iteration_seconds()
            factor = None
            if previous is not None:
                factor = growth_factor(previous[1], seconds, previous[0], grid.size)
            logger.info(f"{run.method_tag()} on {grid.label()} ({grid.size} nodes): {seconds:.3f}s per iteration")
            records.append([grid.label(), grid.size, f"{n}x{m}", seconds, factor])
            previous = (grid.size, seconds)
        return pd.DataFrame(records, columns=PERF_COLUMNS)

    def run_speedup(self) -> pd.DataFrame:
        """Sequential EIFE-s{q} against PEIFE-p{p}q{q} at the same fine step: errors, wall times, speedup"""
        c = self.config
        grid = self.grid_for(c.cells[-1])
        n, m = c.temporal_levels()[-1]
        run = self.parareal_run(n, m)
        logger.info(f"Timing EIFE-s{c.q} against {run.method_tag()} {n}x{m} on {grid.label()} "
                    f"with {run.workers} worker(s)")

        started = time.perf_counter()
        sequential = self._sequential(grid, c.q, n * m)
        sequential_seconds = time.perf_counter() - started

        started = time.perf_counter()
        checkpoints, trace = parareal_solve(self.problem, grid, run, self.rule, source_mode=c.source_mode)
        parallel_seconds = time.perf_counter() - started

        if self.problem.exact is not None:
            sequential_errors = self._errors_vs_exact(sequential)
            parallel_errors = self._errors_vs_exact(checkpoints[-1])
        else:
            # without an exact solution PEIFE is measured against the sequential run
            sequential_errors = (None, None)
            parallel_errors = eife.field_distance(checkpoints[-1], sequential, self.rule)

        speedup = sequential_seconds / parallel_seconds if parallel_seconds > 0 else None
        logger.info(f"EIFE-s{c.q}: {sequential_seconds:.3f}s, {run.method_tag()} after {trace.iterations} "
                    f"iteration(s): {parallel_seconds:.3f}s, speedup {speedup or float('nan'):.2f}")
        records = [
            [f"EIFE-s{c.q}", str(n * m), grid.label(), *sequential_errors, sequential_seconds, 1.0],
            [run.method_tag(), f"{n}x{m}", grid.label(), *parallel_errors, parallel_seconds, speedup],
        ]
        return pd.DataFrame(records, columns=SPEEDUP_COLUMNS)

    def run_single(self) -> List[ResultRow]:
        c = self.config
        grid = self.grid_for(c.cells[0])
        n, m = c.temporal_levels()[0]
        final, seconds = self.solve(grid, n, m)
        l2 = linf = None
        if self.problem.exact is not None:
            l2, linf = self._errors_vs_exact(final)
        elif c.reference == "self":
            l2, linf = self._self_reference([(grid, n, m)])(final)
        row = ResultRow(method=c.method_tag(), steps=self.steps_label(n, m), grid=grid.label(),
                        l2_error=l2, linf_error=linf, wall_seconds=seconds)
        logger.info(f"{row.method} {row.steps} on {row.grid} finished in {seconds:.3f}s")
        return [row]

    def _checkpoints(self, grid: TensorGrid, n: int, m: int) -> List[SpectralField]:
        run = self.parareal_run(n, m)
        if self.config.scheme == Scheme.EIFE:
            return sequential_fine_reference(self.problem, grid, run, self.rule, self.config.source_mode)
        checkpoints, _ = parareal_solve(self.problem, grid, run, self.rule, source_mode=self.config.source_mode)
        return checkpoints

    def emit_snapshots(self, times: Optional[Sequence[float]] = None) -> List[Path]:
        """Nodal solution values at the requested times, one CSV per time"""
        c = self.config
        times = list(c.snapshot_times if times is None else times)
        t0, t_end = self.problem.t0, self.problem.t_end
        for t in times:
            if not t0 <= t <= t_end:
                raise SnapshotTimeError(f"Snapshot time {t} outside [{t0}, {t_end}]")

        grid = self.grid_for(c.cells[-1])
        n, m = c.temporal_levels()[-1]
        checkpoints = self._checkpoints(grid, n, m)
        coarse_step = self.problem.duration / n
        fine_step = coarse_step / m
        basis = spectral.build_basis(grid, self.problem.diffusion)
        fine_nodes = StageNodes.uniform(c.q)
        fine = eife.EifePropagator(grid, basis, fine_nodes, fine_step, self.problem.source, self.rule, c.source_mode)

        mesh = np.broadcast_arrays(*grid.open_mesh())
        columns = {f"x{axis + 1}": mesh[axis].ravel(order="F") for axis in range(grid.dim)}
        paths = []
        for t in times:
            state = self._state_at(t, checkpoints, fine, coarse_step, fine_nodes, basis, grid)
            frame = pd.DataFrame({**columns, "value": spectral.dst_backward(state).values})
            path = self.output_dir / f"snapshot_t{t:.4f}.csv"
            frame.to_csv(path, index=False, float_format=SNAPSHOT_FORMAT, encoding="utf-8")
            logger.info(f"Snapshot at t={t:g} written to {path}")
            paths.append(path)
        return paths

    def _state_at(self, t: float, checkpoints: List[SpectralField], fine: eife.EifePropagator,
                  coarse_step: float, fine_nodes: StageNodes, basis, grid: TensorGrid) -> SpectralField:
        """Latest checkpoint at or before t, fine steps, then one shortened step for any remainder"""
        index = min(_whole_steps((t - self.problem.t0) / coarse_step), len(checkpoints) - 1)
        state = checkpoints[index]
        t_n = self.problem.t0 + index * coarse_step
        steps = _whole_steps((t - t_n) / fine.step)
        if steps == 0 and t - t_n <= STEP_MATCH_RTOL * fine.step:
            return state

        coeffs = fine.advance_many(state.values, t_n, steps)
        remainder = t - (t_n + steps * fine.step)
        if remainder > STEP_MATCH_RTOL * fine.step:
            short = eife.EifePropagator(grid, basis, fine_nodes, remainder, self.problem.source,
                                        self.rule, self.config.source_mode)
            coeffs = short.advance(coeffs, t_n + steps * fine.step)
        return SpectralField(grid=grid, values=coeffs)

    def run(self) -> Tuple[List[Dict[str, Any]], List[str]]:
        """Dispatch on the study axis, write the tables and return (records, written files)"""
        c = self.config
        tag = c.method_tag()
        logger.info(f"Running {c.study.value} study of {tag} on {self.problem.label}")
        try:
            if c.study in (StudyAxis.SPATIAL, StudyAxis.TEMPORAL):
                frame = rows_to_frame(self.run_convergence_study())
                path = write_table(frame, self.output_dir / f"convergence_{c.study.value}_{tag}.csv",
                                   self._convergence_formats())
            elif c.study == StudyAxis.PARAREAL_TRACE:
                frame, _ = self.run_parareal_trace()
                path = write_table(frame, self.output_dir / f"trace_{tag}.csv", {
                    "L2_error": ERROR_FORMAT, "Linf_error": ERROR_FORMAT, "L2_vs_fine": ERROR_FORMAT,
                    "Linf_vs_fine": ERROR_FORMAT, "increment": ERROR_FORMAT,
                })
            elif c.study == StudyAxis.PERF:
                frame = self.run_perf_growth()
                path = write_table(frame, self.output_dir / f"perf_{tag}.csv", {
                    "seconds_per_iteration": SECONDS_FORMAT, "growth_factor": RATE_FORMAT,
                })
            elif c.study == StudyAxis.SPEEDUP:
                frame = self.run_speedup()
                path = write_table(frame, self.output_dir / f"speedup_{tag}.csv", {
                    "L2_error": ERROR_FORMAT, "Linf_error": ERROR_FORMAT, "wall_seconds": SECONDS_FORMAT,
                    "speedup": RATE_FORMAT,
                })
            else:
                frame = rows_to_frame(self.run_single())
                path = write_table(frame, self.output_dir / f"run_{tag}.csv", self._convergence_formats())
        except Exception as e:
            logger.error(f"Study {c.study.value} of {tag} failed: {get_root_cause_message(e)}")
            raise
        return frame_records(frame), [str(path)]

    @staticmethod
    def _convergence_formats() -> Dict[str, str]:
        return {"L2_error": ERROR_FORMAT, "Linf_error": ERROR_FORMAT, "CR": RATE_FORMAT,
                "wall_seconds": SECONDS_FORMAT}


def run_convergence_study(config: ExperimentConfig) -> List[ResultRow]:
    return ExperimentRunner(config).run_convergence_study()


def run_parareal_trace(config: ExperimentConfig) -> pd.DataFrame:
    frame, _ = ExperimentRunner(config).run_parareal_trace()
    return frame


def run_perf_growth(config: ExperimentConfig) -> pd.DataFrame:
    return ExperimentRunner(config).run_perf_growth()


def emit_snapshots(config: ExperimentConfig, times: Optional[Sequence[float]] = None) -> List[Path]:
    return ExperimentRunner(config).emit_snapshots(times)


def run_speedup(config: ExperimentConfig) -> pd.DataFrame:
    return ExperimentRunner(config).run_speedup()
