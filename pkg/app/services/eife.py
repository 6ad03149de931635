"""Sequential exponential-integrator finite element stepping (EIFE-linear).

    u^{n+1} = e^{-dt L_h} u^n + dt * sum_i b_i(-dt L_h) P_h f(t_n + c_i dt)

is evaluated mode by mode in the sine eigenbasis. The state stays in spectral
space; nodal space is entered only to build load vectors.
"""
import logging
from typing import Callable, Literal, Optional, Tuple

import numpy as np

from app.config import settings
from app.dtos.numerics import QuadratureRule, SpectralBasis, SpectralField, StageNodes, TensorGrid
from app.exceptions import FieldMismatchError, InvalidStepError
from app.services import grid_fem, spectral
from app.services.exp_weights import build_weight_table

logger = logging.getLogger(__name__)

SourceMode = Literal["projection", "nodal"]


class EifePropagator:
    """One uniform step of size `step` with s interpolation nodes.

    Immutable after construction; a single instance may be shared by every
    worker of a Parareal fine sweep.
    """

    def __init__(
            self,
            grid: TensorGrid,
            basis: SpectralBasis,
            nodes: StageNodes,
            step: float,
            source: Callable,
            rule: Optional[QuadratureRule] = None,
            source_mode: Optional[SourceMode] = None,
    ):
        if not step > 0:
            raise InvalidStepError(f"Step size must be positive, got {step}")
        if basis.grid != grid:
            raise FieldMismatchError("Spectral basis was built for a different grid")
        self.grid = grid
        self.basis = basis
        self.nodes = nodes
        self.step = float(step)
        self.source = source
        self.rule = rule or grid_fem.default_rule()
        if source_mode is None:
            source_mode = "nodal" if settings.NODAL_SOURCE else "projection"
        if source_mode == "nodal":
            logger.warning("Nodal source interpolation enabled: P_h f is replaced by the nodal interpolant of f")
        self.source_mode = source_mode
        self.table = build_weight_table(nodes, self.step, basis)

    @property
    def stages(self) -> int:
        return self.nodes.stages

    def projected_source(self, t: float) -> np.ndarray:
        """Spectral coefficients of P_h f(t) (or of the nodal interpolant of f(t))"""
        if self.source_mode == "nodal":
            values = grid_fem.nodal_values(self.grid, lambda *x: self.source(t, *x))
            return spectral.dst_forward(values).values
        load = grid_fem.load_vector(self.grid, self.source, t, self.rule)
        return spectral.project_l2(self.basis, load).values

    def advance(self, coeffs: np.ndarray, t_n: float) -> np.ndarray:
        """One step on raw coefficients; evaluates f at exactly s stage times"""
        forcing = None
        for i, c in enumerate(self.nodes.nodes):
            contribution = self.table.weights[i] * self.projected_source(t_n + c * self.step)
            forcing = contribution if forcing is None else forcing + contribution
        return self.table.decay * coeffs + self.step * forcing

    def advance_many(self, coeffs: np.ndarray, t_start: float, n_steps: int) -> np.ndarray:
        for j in range(n_steps):
            coeffs = self.advance(coeffs, t_start + j * self.step)
        return coeffs


def project_initial(grid: TensorGrid, basis: SpectralBasis, u0: Callable,
                    rule: Optional[QuadratureRule] = None) -> SpectralField:
    """Spectral coefficients of P_h u0"""
    load = grid_fem.load_vector(grid, lambda t, *x: u0(*x), 0.0, rule)
    return spectral.project_l2(basis, load)


def eife_step(prop: EifePropagator, state: SpectralField, t_n: float) -> SpectralField:
    if state.grid != prop.grid:
        raise FieldMismatchError("State does not belong to the propagator's grid")
    return SpectralField(grid=prop.grid, values=prop.advance(state.values, t_n))


def integrate(prop: EifePropagator, u0_spec: SpectralField, t0: float, n_steps: int) -> SpectralField:
    """n_steps uniform steps from t0; bitwise deterministic"""
    if n_steps < 1:
        raise InvalidStepError(f"At least one step is required, got {n_steps}")
    if u0_spec.grid != prop.grid:
        raise FieldMismatchError("Initial state does not belong to the propagator's grid")
    logger.debug(f"Integrating {n_steps} steps of {prop.step:.6e} with s={prop.stages} from t={t0}")
    return SpectralField(grid=prop.grid, values=prop.advance_many(u0_spec.values, t0, n_steps))


def solution_errors(spec: SpectralField, exact: Callable, t: float,
                    rule: Optional[QuadratureRule] = None) -> Tuple[float, float]:
    """(L2, Linf) distance between the discrete solution and exact(t, *x)"""
    nodal = spectral.dst_backward(spec)
    exact_at_t = lambda *x: exact(t, *x)
    return (grid_fem.l2_error(spec.grid, nodal, exact_at_t, rule),
            grid_fem.linf_error(nodal, exact_at_t))


def field_distance(a: SpectralField, b: SpectralField,
                   rule: Optional[QuadratureRule] = None) -> Tuple[float, float]:
    """(L2, Linf) norms of the difference of two discrete solutions"""
    diff = spectral.dst_backward(SpectralField(grid=a.grid, values=a.values - b.values))
    zero = lambda *x: 0.0
    return grid_fem.l2_error(a.grid, diff, zero, rule), grid_fem.linf_error(diff, zero)
