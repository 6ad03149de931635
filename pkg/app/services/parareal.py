"""Parareal iteration around two EIFE propagators (PEIFE-linear).

    U^{n+1,(k+1)} = G(U^{n,(k+1)}) + F^M(U^{n,(k)}) - G(U^{n,(k)})

The fine sweeps F^M run concurrently on a thread pool; coarse sweeps and the
correction run on the calling thread. The correction is evaluated as
F + (G_new - G_old), so once a start value stops changing the coarse terms
cancel exactly and the checkpoint equals the fine result bit for bit.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.dtos.dtos import IterationRecord, IterationTrace, PararealRun
from app.dtos.numerics import ProblemSpec, QuadratureRule, SpectralField, StageNodes, TensorGrid
from app.exceptions import FieldMismatchError, PararealWorkerError, get_root_cause_message
from app.services import eife, grid_fem
from app.services.spectral import build_basis

logger = logging.getLogger(__name__)


class PararealSolver:

    def __init__(
            self,
            problem: ProblemSpec,
            grid: TensorGrid,
            run: PararealRun,
            rule: Optional[QuadratureRule] = None,
            source_mode: Optional[eife.SourceMode] = None,
    ):
        if grid.lower != problem.lower or grid.upper != problem.upper:
            raise FieldMismatchError(f"Grid domain does not match problem {problem.label}")
        self.problem = problem
        self.grid = grid
        self.run = run
        self.rule = rule or grid_fem.default_rule()
        self.basis = build_basis(grid, problem.diffusion)

        self.coarse_step = problem.duration / run.coarse_intervals
        self.fine_step = self.coarse_step / run.fine_steps
        self.checkpoint_times = [problem.t0 + n * self.coarse_step for n in range(run.coarse_intervals + 1)]

        self.coarse = eife.EifePropagator(
            grid, self.basis, StageNodes.uniform(run.coarse_stages), self.coarse_step,
            problem.source, self.rule, source_mode,
        )
        self.fine = eife.EifePropagator(
            grid, self.basis, StageNodes.uniform(run.fine_stages), self.fine_step,
            problem.source, self.rule, source_mode,
        )

    def initial_state(self) -> np.ndarray:
        return eife.project_initial(self.grid, self.basis, self.problem.initial, self.rule).values

    def coarse_step_from(self, n: int, coeffs: np.ndarray) -> np.ndarray:
        return self.coarse.advance(coeffs, self.checkpoint_times[n])

    def fine_sweep(self, n: int, coeffs: np.ndarray) -> np.ndarray:
        """F^M over [T_n, T_{n+1}]"""
        return self.fine.advance_many(coeffs, self.checkpoint_times[n], self.run.fine_steps)

    def fine_reference(self) -> List[np.ndarray]:
        """Sequential fine integration over all N*M steps, state at every T_n"""
        states = [self.initial_state()]
        for n in range(self.run.coarse_intervals):
            states.append(self.fine_sweep(n, states[n]))
        return states

    def _fields(self, states: Sequence[np.ndarray]) -> List[SpectralField]:
        return [SpectralField(grid=self.grid, values=s) for s in states]

    def _record(self, k: int, states: List[np.ndarray], increment: Optional[float],
                reference: Optional[Sequence[np.ndarray]], timings: Tuple[float, float, float]) -> IterationRecord:
        record = IterationRecord(
            iteration=k,
            checkpoints=self._fields(states),
            increment=increment,
            coarse_seconds=timings[0],
            fine_seconds=timings[1],
            correction_seconds=timings[2],
        )
        terminal = SpectralField(grid=self.grid, values=states[-1])
        if self.problem.exact is not None:
            record.l2_error, record.linf_error = eife.solution_errors(
                terminal, self.problem.exact, self.problem.t_end, self.rule
            )
        if reference is not None:
            record.l2_vs_fine, record.linf_vs_fine = eife.field_distance(
                terminal, SpectralField(grid=self.grid, values=reference[-1]), self.rule
            )
        return record

    def _run_fine_sweeps(self, pool: ThreadPoolExecutor, states: List[np.ndarray],
                         fine: List[Optional[np.ndarray]], first: int) -> None:
        futures = {n: pool.submit(self.fine_sweep, n, states[n]) for n in range(first, self.run.coarse_intervals)}
        for n, future in futures.items():
            try:
                fine[n] = future.result()
            except Exception as e:
                logger.exception(f"Fine sweep on interval {n} failed: {get_root_cause_message(e)}")
                for pending in futures.values():
                    pending.cancel()
                raise PararealWorkerError(n, get_root_cause_message(e)) from e

    def solve(self, reference: Optional[Sequence[np.ndarray]] = None) -> Tuple[List[SpectralField], IterationTrace]:
        run = self.run
        N = run.coarse_intervals
        trace = IterationTrace()

        started = time.perf_counter()
        states = [self.initial_state()]
        coarse_old: List[np.ndarray] = []
        for n in range(N):
            coarse_old.append(self.coarse_step_from(n, states[n]))
            states.append(coarse_old[n])
        predictor_seconds = time.perf_counter() - started
        if run.record_trace:
            trace.records.append(self._record(0, states, None, reference, (predictor_seconds, 0.0, 0.0)))
        logger.info(f"{run.method_tag()}: coarse predictor over N={N} intervals took {predictor_seconds:.3f}s")

        budget = N if run.k_max is None else min(run.k_max, N)
        if run.k_max is not None and run.k_max > N:
            logger.info(f"Iteration budget {run.k_max} capped at N={N}: later iterations change nothing")

        fine: List[Optional[np.ndarray]] = [None] * N
        k = 0
        with ThreadPoolExecutor(max_workers=run.workers) as pool:
            while k < budget:
                t_fine = time.perf_counter()
                # intervals n < k start from locked values; their sweeps are unchanged
                self._run_fine_sweeps(pool, states, fine, k)
                fine_seconds = time.perf_counter() - t_fine

                t_corr = time.perf_counter()
                new_states = states[:k + 1]
                coarse_new = coarse_old[:k]
                for n in range(k, N):
                    g_new = self.coarse_step_from(n, new_states[n])
                    coarse_new.append(g_new)
                    new_states.append(fine[n] + (g_new - coarse_old[n]))
                correction_seconds = time.perf_counter() - t_corr

                increment = max(float(np.max(np.abs(a - b))) for a, b in zip(new_states, states))
                states, coarse_old = new_states, coarse_new
                k += 1

                if run.record_trace:
                    record = self._record(k, states, increment, reference, (0.0, fine_seconds, correction_seconds))
                    if run.trace_retention == "last":
                        for previous in trace.records:
                            previous.checkpoints = None
                    trace.records.append(record)
                logger.info(
                    f"{run.method_tag()}: iteration {k} increment {increment:.3e} "
                    f"(fine {fine_seconds:.3f}s, correction {correction_seconds:.3f}s)"
                )
                if run.tol > 0 and increment <= run.tol:
                    logger.info(f"{run.method_tag()}: increment below tol={run.tol:g} after {k} iterations")
                    break

        return self._fields(states), trace


def parareal_solve(problem: ProblemSpec, grid: TensorGrid, run: PararealRun,
                   rule: Optional[QuadratureRule] = None,
                   reference: Optional[Sequence[SpectralField]] = None,
                   source_mode: Optional[eife.SourceMode] = None) -> Tuple[List[SpectralField], IterationTrace]:
    solver = PararealSolver(problem, grid, run, rule, source_mode)
    ref = None if reference is None else [r.values for r in reference]
    return solver.solve(ref)


def sequential_fine_reference(problem: ProblemSpec, grid: TensorGrid, run: PararealRun,
                              rule: Optional[QuadratureRule] = None,
                              source_mode: Optional[eife.SourceMode] = None) -> List[SpectralField]:
    solver = PararealSolver(problem, grid, run, rule, source_mode)
    return solver._fields(solver.fine_reference())
