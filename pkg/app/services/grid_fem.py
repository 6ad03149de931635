"""Piecewise multilinear finite elements on a uniform tensor grid.

Only interior unknowns are stored; boundary values are identically zero. All
quadrature is done on the tensor product of a per-axis Gauss-Legendre rule, one
axis at a time, so the cost stays O(prod(n_i * q)) and the summation order is
fixed.
"""
import logging
from typing import Callable, List, Optional, Tuple

import numpy as np
import scipy.sparse as spp

from app.config import settings
from app.dtos.numerics import NodalField, QuadratureRule, TensorGrid, _open_mesh
from app.exceptions import FieldMismatchError, InvalidDiffusionError, InvalidDirectionError, NonFiniteValueError

logger = logging.getLogger(__name__)


def default_rule() -> QuadratureRule:
    return QuadratureRule.gauss_legendre(settings.QUADRATURE_POINTS)


def assemble_1d_matrices(grid: TensorGrid, direction: int, diffusion: float) -> Tuple[spp.csr_matrix, spp.csr_matrix]:
    """Interior-node mass (h/6)tridiag(1,4,1) and stiffness (D/h)tridiag(-1,2,-1).

    `direction` is 1-based. Used as a dense oracle only; the solver never
    factorizes these.
    """
    if not 1 <= direction <= grid.dim:
        raise InvalidDirectionError(f"Direction {direction} outside 1..{grid.dim}")
    if diffusion <= 0:
        raise InvalidDiffusionError(f"Diffusion coefficient must be positive, got {diffusion}")

    n = grid.interior[direction - 1]
    h = grid.spacing[direction - 1]
    mass = (h / 6.0) * spp.diags([1.0, 4.0, 1.0], [-1, 0, 1], shape=(n, n), format="csr")
    stiffness = (diffusion / h) * spp.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(n, n), format="csr")
    return mass, stiffness


def quadrature_points(grid: TensorGrid, axis: int, rule: QuadratureRule) -> np.ndarray:
    """Gauss points of every cell along an axis, cell-major (cells * q entries)"""
    h = grid.spacing[axis]
    left = grid.lower[axis] + np.arange(grid.cells[axis]) * h
    return (left[:, None] + h * rule.abscissae[None, :]).ravel()


def quadrature_mesh(grid: TensorGrid, rule: QuadratureRule) -> List[np.ndarray]:
    return _open_mesh([quadrature_points(grid, axis, rule) for axis in range(grid.dim)])


def sample(fn: Callable, args, shape, what: str) -> np.ndarray:
    """Evaluate fn on broadcastable coordinates and reject non-finite values"""
    values = np.broadcast_to(np.asarray(fn(*args), dtype=np.float64), shape)
    finite = np.isfinite(values)
    if not finite.all():
        idx = np.unravel_index(int(np.flatnonzero(~finite.ravel())[0]), shape)
        coords = args[-len(shape):]
        point = tuple(float(np.broadcast_to(c, shape)[idx]) for c in coords)
        raise NonFiniteValueError(f"{what} is not finite", coordinates=point)
    return values


def _test_against_hats(values: np.ndarray, axis: int, rule: QuadratureRule, h: float) -> np.ndarray:
    """Contract one axis of quadrature-point values against the interior hat functions"""
    v = np.moveaxis(values, axis, -1)
    v = v.reshape(v.shape[:-1] + (-1, rule.points))
    rising = v @ (h * rule.weights * rule.abscissae)
    falling = v @ (h * rule.weights * (1.0 - rule.abscissae))
    # node j collects the rising half of cell j-1 and the falling half of cell j
    tested = rising[..., :-1] + falling[..., 1:]
    return np.moveaxis(tested, -1, axis)


def load_vector(grid: TensorGrid, f: Callable, t: float, rule: Optional[QuadratureRule] = None) -> NodalField:
    """Entries (f(t), phi_j) by tensor Gauss-Legendre quadrature over each node's support"""
    rule = rule or default_rule()
    mesh = quadrature_mesh(grid, rule)
    shape = tuple(m.size for m in mesh)
    values = sample(f, (t, *mesh), shape, f"Source at t={t}")
    for axis in range(grid.dim):
        values = _test_against_hats(values, axis, rule, grid.spacing[axis])
    return NodalField.from_tensor(grid, values)


def _interpolate_axis(values: np.ndarray, axis: int, rule: QuadratureRule) -> np.ndarray:
    v = np.moveaxis(values, axis, -1)
    pad = [(0, 0)] * (v.ndim - 1) + [(1, 1)]
    padded = np.pad(v, pad)
    left = padded[..., :-1, None]
    right = padded[..., 1:, None]
    at_points = (1.0 - rule.abscissae) * left + rule.abscissae * right
    at_points = at_points.reshape(at_points.shape[:-2] + (-1,))
    return np.moveaxis(at_points, -1, axis)


def interpolant_at_quadrature(field: NodalField, rule: QuadratureRule) -> np.ndarray:
    """Multilinear interpolant of the nodal values (zero on the boundary) at all Gauss points"""
    values = field.tensor()
    for axis in range(field.grid.dim):
        values = _interpolate_axis(values, axis, rule)
    return values


def l2_error(grid: TensorGrid, field: NodalField, exact: Callable, rule: Optional[QuadratureRule] = None) -> float:
    """Continuous L2 norm of (interpolant - exact) by tensor Gauss quadrature; exact(*x)"""
    if field.grid != grid:
        raise FieldMismatchError("Field does not belong to the given grid")
    rule = rule or default_rule()
    mesh = quadrature_mesh(grid, rule)
    shape = tuple(m.size for m in mesh)
    diff = interpolant_at_quadrature(field, rule) - sample(exact, mesh, shape, "Exact solution")
    err2 = diff * diff
    for axis in range(grid.dim):
        w = np.tile(grid.spacing[axis] * rule.weights, grid.cells[axis])
        err2 = np.tensordot(err2, w, axes=([0], [0]))
    return float(np.sqrt(err2))


def nodal_values(grid: TensorGrid, fn: Callable) -> NodalField:
    """Values fn(*x) at the interior nodes"""
    mesh = grid.open_mesh()
    return NodalField.from_tensor(grid, sample(fn, mesh, grid.shape, "Nodal function"))


def linf_error(field: NodalField, exact: Callable) -> float:
    """max_j |field_j - exact(x_j)| over interior nodes"""
    reference = nodal_values(field.grid, exact)
    return float(np.max(np.abs(field.values - reference.values)))
