from typing import Any, Callable, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.exceptions import (
    FieldMismatchError,
    IncompatibleProblemError,
    InvalidGridError,
    InvalidStageNodesError,
    NonFiniteValueError,
    WeightError,
)

MAX_DIM = 3
# Nodes closer than this make the Vandermonde system of the stage nodes unusable.
MIN_NODE_GAP = 1e-8
COMPATIBILITY_TOL = 1e-12


class TensorGrid(BaseModel):
    """Uniform rectangular partition of a d-dimensional box, interior nodes only.

    Direction i (0-based here) spans [lower[i], upper[i]] with interior[i] nodes,
    i.e. interior[i] + 1 cells of width spacing[i].
    """
    model_config = ConfigDict(frozen=True)

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    interior: Tuple[int, ...]

    def __init__(self, **data):
        super().__init__(**data)
        self._validate_state()

    def _validate_state(self) -> None:
        if not (len(self.lower) == len(self.upper) == len(self.interior)):
            raise InvalidGridError("Bounds and node counts must have one entry per direction")
        if not 1 <= len(self.interior) <= MAX_DIM:
            raise InvalidGridError(f"Only 1 to {MAX_DIM} dimensions are supported, got {len(self.interior)}")
        for i, (lo, hi, n) in enumerate(zip(self.lower, self.upper, self.interior)):
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi <= lo:
                raise InvalidGridError(f"Direction {i + 1}: upper bound {hi} must exceed lower bound {lo}")
            if n < 1:
                raise InvalidGridError(f"Direction {i + 1}: at least one interior node is required, got {n}")
        if self.size * np.dtype(np.float64).itemsize > np.iinfo(np.intp).max:
            raise InvalidGridError(f"Grid with {self.size} nodes does not fit addressable memory")

    @classmethod
    def from_cells(cls, lower, upper, cells) -> 'TensorGrid':
        """Build a grid from per-direction cell counts (interior nodes = cells - 1)"""
        return cls(
            lower=tuple(float(v) for v in lower),
            upper=tuple(float(v) for v in upper),
            interior=tuple(int(c) - 1 for c in cells),
        )

    @property
    def dim(self) -> int:
        return len(self.interior)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.interior)

    @property
    def size(self) -> int:
        return int(np.prod(self.interior, dtype=np.int64))

    @property
    def cells(self) -> Tuple[int, ...]:
        return tuple(n + 1 for n in self.interior)

    @property
    def spacing(self) -> Tuple[float, ...]:
        return tuple((hi - lo) / (n + 1) for lo, hi, n in zip(self.lower, self.upper, self.interior))

    def coordinates(self, axis: int) -> np.ndarray:
        """Interior node coordinates x_j = lo + j*h, j = 1..n, along a 0-based axis"""
        n = self.interior[axis]
        return self.lower[axis] + np.arange(1, n + 1) * self.spacing[axis]

    def open_mesh(self):
        """Broadcastable per-axis coordinate arrays of all interior nodes"""
        return _open_mesh([self.coordinates(axis) for axis in range(self.dim)])

    def label(self) -> str:
        return "x".join(str(c) for c in self.cells)


def _open_mesh(axes):
    dim = len(axes)
    mesh = []
    for axis, values in enumerate(axes):
        shape = [1] * dim
        shape[axis] = len(values)
        mesh.append(np.asarray(values, dtype=np.float64).reshape(shape))
    return mesh


class _GridArray(BaseModel):
    """Flat array aligned with a grid, direction 1 varying fastest"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    grid: TensorGrid
    values: np.ndarray

    def __init__(self, **data):
        super().__init__(**data)
        self._validate_state()

    def _validate_state(self) -> None:
        if self.values.ndim != 1 or self.values.shape[0] != self.grid.size:
            raise FieldMismatchError(
                f"{type(self).__name__} holds {self.values.size} values, grid has {self.grid.size} nodes"
            )
        if not np.all(np.isfinite(self.values)):
            bad = int(np.flatnonzero(~np.isfinite(self.values))[0])
            raise NonFiniteValueError(f"{type(self).__name__} contains a non-finite entry", coordinates=bad)

    @classmethod
    def from_tensor(cls, grid: TensorGrid, tensor: np.ndarray):
        return cls(grid=grid, values=np.asarray(tensor, dtype=np.float64).ravel(order="F"))

    @classmethod
    def zeros(cls, grid: TensorGrid):
        return cls(grid=grid, values=np.zeros(grid.size))

    def tensor(self) -> np.ndarray:
        """View with axis i holding direction i"""
        return self.values.reshape(self.grid.shape, order="F")


class NodalField(_GridArray):
    """Nodal coefficients of a function in V_h"""


class SpectralField(_GridArray):
    """Coefficients of a function in V_h in the tensor sine eigenbasis"""

    @property
    def coeffs(self) -> np.ndarray:
        return self.values


class QuadratureRule(BaseModel):
    """Gauss-Legendre rule on the reference element [0, 1]"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    points: int
    abscissae: np.ndarray
    weights: np.ndarray

    def __init__(self, **data):
        super().__init__(**data)
        self._validate_state()

    def _validate_state(self) -> None:
        if self.points < 1 or self.abscissae.shape != (self.points,) or self.weights.shape != (self.points,):
            raise InvalidGridError(f"Quadrature rule with {self.points} points is malformed")
        if abs(float(self.weights.sum()) - 1.0) > 1e-14:
            raise InvalidGridError("Quadrature weights must sum to 1 on the reference element")

    @classmethod
    def gauss_legendre(cls, points: int) -> 'QuadratureRule':
        if points < 1:
            raise InvalidGridError(f"Quadrature needs at least one point, got {points}")
        x, w = np.polynomial.legendre.leggauss(points)
        return cls(points=points, abscissae=0.5 * (x + 1.0), weights=0.5 * w)


class SpectralBasis(BaseModel):
    """Closed-form eigenvalues diagonalizing mass and stiffness simultaneously"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    grid: TensorGrid
    diffusion: float
    stiffness_eigs: Tuple[np.ndarray, ...]
    mass_eigs: Tuple[np.ndarray, ...]
    eigenvalues: np.ndarray
    mass_products: np.ndarray

    def __init__(self, **data):
        super().__init__(**data)
        self._validate_state()

    def _validate_state(self) -> None:
        if self.eigenvalues.shape != (self.grid.size,) or self.mass_products.shape != (self.grid.size,):
            raise FieldMismatchError("Eigenvalue arrays must have one entry per grid node")
        if not np.all(self.eigenvalues > 0):
            raise FieldMismatchError("Operator eigenvalues must be positive")
        if not np.all(self.mass_products > 0):
            raise FieldMismatchError("Mass eigenvalue products must be positive")


class StageNodes(BaseModel):
    """Interpolation nodes c_1 < ... < c_s in [0, 1]"""
    model_config = ConfigDict(frozen=True)

    nodes: Tuple[float, ...]

    def __init__(self, **data):
        super().__init__(**data)
        self._validate_state()

    def _validate_state(self) -> None:
        c = np.asarray(self.nodes, dtype=np.float64)
        if c.size < 1:
            raise InvalidStageNodesError("At least one interpolation node is required")
        if np.any(c < 0.0) or np.any(c > 1.0):
            raise InvalidStageNodesError(f"Interpolation nodes must lie in [0, 1], got {self.nodes}")
        if c.size > 1 and np.min(np.diff(c)) < MIN_NODE_GAP:
            raise InvalidStageNodesError(
                f"Interpolation nodes must be strictly increasing and separated by {MIN_NODE_GAP}, got {self.nodes}"
            )

    @classmethod
    def uniform(cls, stages: int) -> 'StageNodes':
        """c_i = (i-1)/s: {0}, {0, 1/2}, {0, 1/3, 2/3}, ...; the right endpoint is never a node"""
        if stages < 1:
            raise InvalidStageNodesError(f"Stage count must be positive, got {stages}")
        return cls(nodes=tuple(i / stages for i in range(stages)))

    @property
    def stages(self) -> int:
        return len(self.nodes)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.nodes, dtype=np.float64)


class WeightTable(BaseModel):
    """Per-eigenvalue decay factors and exponential weights for one step size"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    step: float
    nodes: StageNodes
    decay: np.ndarray
    weights: np.ndarray

    def __init__(self, **data):
        super().__init__(**data)
        self._validate_state()

    def _validate_state(self) -> None:
        if self.weights.shape != (self.nodes.stages, self.decay.size):
            raise WeightError(
                f"Weight array shape {self.weights.shape} does not match {self.nodes.stages} stages"
            )
        # e^{-z} underflows to exactly 0 for very stiff modes
        if np.any(self.decay < 0.0) or np.any(self.decay > 1.0):
            raise WeightError("Decay factors must lie in [0, 1]")


class ProblemSpec(BaseModel):
    """u_t = D*Lap(u) + f(t, x) on a box with homogeneous Dirichlet data.

    Callables take broadcastable coordinate arrays: source(t, *x), initial(*x),
    exact(t, *x). exact_dt and exact_laplacian, when known, allow PDE residual
    checks.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    label: str
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    diffusion: float
    t0: float = 0.0
    duration: float
    source: Callable[..., Any]
    initial: Callable[..., Any]
    exact: Optional[Callable[..., Any]] = None
    exact_dt: Optional[Callable[..., Any]] = None
    exact_laplacian: Optional[Callable[..., Any]] = None

    def __init__(self, **data):
        super().__init__(**data)
        self._validate_state()

    def _validate_state(self) -> None:
        if len(self.lower) != len(self.upper) or not 1 <= len(self.lower) <= MAX_DIM:
            raise IncompatibleProblemError(f"Problem {self.label}: malformed domain bounds")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise IncompatibleProblemError(f"Problem {self.label}: empty domain")
        if self.diffusion <= 0:
            raise IncompatibleProblemError(f"Problem {self.label}: diffusion must be positive")
        if self.duration <= 0:
            raise IncompatibleProblemError(f"Problem {self.label}: duration must be positive")

        rng = np.random.default_rng(0)
        inside = self.sample_points(rng, 16)
        if self.exact is not None:
            mismatch = np.max(np.abs(self.evaluate(self.exact, self.t0, inside) - self.evaluate(self.initial, None, inside)))
            if mismatch > COMPATIBILITY_TOL:
                raise IncompatibleProblemError(
                    f"Problem {self.label}: exact solution at t0 differs from u0 by {mismatch:.3e}"
                )
        for axis in range(self.dim):
            for bound in (self.lower[axis], self.upper[axis]):
                pts = self.sample_points(rng, 8)
                pts[axis] = np.full_like(pts[axis], bound)
                trace = np.max(np.abs(self.evaluate(self.initial, None, pts)))
                if trace > COMPATIBILITY_TOL:
                    raise IncompatibleProblemError(
                        f"Problem {self.label}: u0 does not vanish on the boundary ({trace:.3e} at x{axis + 1}={bound})"
                    )

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def t_end(self) -> float:
        return self.t0 + self.duration

    def sample_points(self, rng: np.random.Generator, count: int):
        return [rng.uniform(lo, hi, size=count) for lo, hi in zip(self.lower, self.upper)]

    @staticmethod
    def evaluate(fn: Callable[..., Any], t: Optional[float], points) -> np.ndarray:
        """Evaluate on matching 1-D point arrays, broadcasting constant results"""
        args = points if t is None else (t, *points)
        return np.broadcast_to(np.asarray(fn(*args), dtype=np.float64), np.shape(points[0]))
