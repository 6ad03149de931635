import logging
from typing import Callable, Dict, Sequence

import numpy as np

from app.dtos.numerics import ProblemSpec
from app.exceptions import InvalidProblemParameterError, UnknownProblemError

logger = logging.getLogger(__name__)

PI = np.pi
RESIDUAL_TOL = 1e-8
# Finite-difference probe of a manufactured solution; only warns.
FD_TIME_STEP = 1e-5
FD_SPACE_STEP = 1e-4
FD_RTOL = 1e-4


def _ex1d() -> ProblemSpec:
    def exact(t, x):
        return x * (1.0 - x) * np.exp(t)

    return ProblemSpec(
        label="ex1d",
        lower=(0.0,),
        upper=(1.0,),
        diffusion=1.0,
        t0=0.0,
        duration=1.0,
        source=lambda t, x: (2.0 + x * (1.0 - x)) * np.exp(t),
        initial=lambda x: x * (1.0 - x),
        exact=exact,
        exact_dt=exact,
        exact_laplacian=lambda t, x: -2.0 * np.exp(t) + 0.0 * x,
    )


def _ex2d() -> ProblemSpec:
    def shape(x, y):
        return np.sin(PI * (x - 0.25)) * np.sin(2.0 * PI * (y - 0.125))

    def exact(t, x, y):
        return np.exp(-4.0 * PI ** 2 * t) * shape(x, y)

    return ProblemSpec(
        label="ex2d",
        lower=(0.25, 0.125),
        upper=(1.25, 0.625),
        diffusion=1.0,
        t0=0.0,
        duration=0.6,
        source=lambda t, x, y: PI ** 2 * exact(t, x, y),
        initial=shape,
        exact=exact,
        exact_dt=lambda t, x, y: -4.0 * PI ** 2 * exact(t, x, y),
        exact_laplacian=lambda t, x, y: -5.0 * PI ** 2 * exact(t, x, y),
    )


def _ex3d() -> ProblemSpec:
    def shape(x, y, z):
        return (np.sin(4.0 * PI * (x - 0.25))
                * np.sin(4.0 * PI * (y - 0.125))
                * np.sin(4.0 * PI * (z - 0.5)))

    def exact(t, x, y, z):
        return np.exp(-4.0 * PI ** 2 * t) * shape(x, y, z)

    return ProblemSpec(
        label="ex3d",
        lower=(0.0, 0.125, 0.0),
        upper=(0.25, 0.375, 0.25),
        diffusion=0.125,
        t0=0.0,
        duration=0.4,
        source=lambda t, x, y, z: 2.0 * PI ** 2 * exact(t, x, y, z),
        initial=shape,
        exact=exact,
        exact_dt=lambda t, x, y, z: -4.0 * PI ** 2 * exact(t, x, y, z),
        exact_laplacian=lambda t, x, y, z: -48.0 * PI ** 2 * exact(t, x, y, z),
    )


def oscillating_center(t, freq: float, width: float):
    return 0.5 + (0.5 - width) * np.sin(2.0 * PI * freq * t)


def _oscillating(alpha: float = 0.01, freq: float = 1.0, width: float = 0.05) -> ProblemSpec:
    if alpha <= 0:
        raise InvalidProblemParameterError(f"Oscillating problem needs alpha > 0, got {alpha}")
    if not 0 < width < 0.5:
        raise InvalidProblemParameterError(f"Hat half-width must lie in (0, 0.5), got {width}")
    height = 100.0 * np.sqrt(alpha)

    def source(t, x):
        center = oscillating_center(t, freq, width)
        return height * np.maximum(1.0 - np.abs(center - x) / width, 0.0)

    return ProblemSpec(
        label=f"oscillating(alpha={alpha:g},freq={freq:g})",
        lower=(0.0,),
        upper=(1.0,),
        diffusion=float(alpha),
        t0=0.0,
        duration=1.0,
        source=source,
        initial=lambda x: 4.0 * x * (1.0 - x),
    )


class ProblemLibrary:
    BUILDERS: Dict[str, Callable[..., ProblemSpec]] = {
        "ex1d": _ex1d,
        "ex2d": _ex2d,
        "ex3d": _ex3d,
        "oscillating": _oscillating,
    }

    @classmethod
    def labels(cls) -> Sequence[str]:
        return tuple(cls.BUILDERS)

    @classmethod
    def builtin(cls, label: str, **params) -> ProblemSpec:
        """Problems of the convergence and oscillation experiments"""
        builder = cls.BUILDERS.get(label)
        if builder is None:
            raise UnknownProblemError(f"Unknown problem '{label}'. Available: {', '.join(cls.BUILDERS)}")
        try:
            return builder(**params)
        except TypeError as e:
            raise InvalidProblemParameterError(f"Invalid parameters for problem '{label}': {params}") from e


def builtin(label: str, **params) -> ProblemSpec:
    return ProblemLibrary.builtin(label, **params)


def manufactured(
        label: str,
        lower: Sequence[float],
        upper: Sequence[float],
        diffusion: float,
        u_exact: Callable,
        u_t: Callable,
        laplacian: Callable,
        t0: float = 0.0,
        duration: float = 1.0,
) -> ProblemSpec:
    """Problem whose source is f = u_t - D*Lap(u) for a caller-supplied solution"""

    def source(t, *x):
        return u_t(t, *x) - diffusion * laplacian(t, *x)

    problem = ProblemSpec(
        label=label,
        lower=tuple(float(v) for v in lower),
        upper=tuple(float(v) for v in upper),
        diffusion=float(diffusion),
        t0=t0,
        duration=duration,
        source=source,
        initial=lambda *x: u_exact(t0, *x),
        exact=u_exact,
        exact_dt=u_t,
        exact_laplacian=laplacian,
    )

    rng = np.random.default_rng(10)
    residual = max_residual(problem, rng, 10)
    if residual > RESIDUAL_TOL:
        logger.warning(f"Manufactured problem {label}: PDE residual {residual:.3e} at sampled points")
    mismatch = _finite_difference_mismatch(problem, rng)
    if mismatch > FD_RTOL:
        logger.warning(
            f"Manufactured problem {label}: supplied derivatives disagree with finite differences "
            f"(relative mismatch {mismatch:.3e})"
        )
    return problem


def pde_residual(problem: ProblemSpec, t, points) -> np.ndarray:
    """u_t - D*Lap(u) - f for problems with known derivatives"""
    if problem.exact_dt is None or problem.exact_laplacian is None:
        raise InvalidProblemParameterError(f"Problem {problem.label} has no analytic derivatives")
    ev = ProblemSpec.evaluate
    return (ev(problem.exact_dt, t, points)
            - problem.diffusion * ev(problem.exact_laplacian, t, points)
            - ev(problem.source, t, points))


def max_residual(problem: ProblemSpec, rng: np.random.Generator, count: int) -> float:
    t = rng.uniform(problem.t0, problem.t_end, size=count)
    points = problem.sample_points(rng, count)
    return float(np.max(np.abs(pde_residual(problem, t, points))))


def _finite_difference_mismatch(problem: ProblemSpec, rng: np.random.Generator) -> float:
    t = float(rng.uniform(problem.t0, problem.t_end))
    x = [np.array([v]) for v in problem.sample_points(rng, 1)]
    u = problem.exact
    ev = ProblemSpec.evaluate

    dt_fd = (ev(u, t + FD_TIME_STEP, x) - ev(u, t - FD_TIME_STEP, x)) / (2.0 * FD_TIME_STEP)
    lap_fd = np.zeros(1)
    for axis in range(problem.dim):
        plus = [c.copy() for c in x]
        minus = [c.copy() for c in x]
        plus[axis] = plus[axis] + FD_SPACE_STEP
        minus[axis] = minus[axis] - FD_SPACE_STEP
        lap_fd = lap_fd + (ev(u, t, plus) - 2.0 * ev(u, t, x) + ev(u, t, minus)) / FD_SPACE_STEP ** 2

    dt_given = ev(problem.exact_dt, t, x)
    lap_given = ev(problem.exact_laplacian, t, x)
    scale = 1.0 + float(np.max(np.abs(dt_given)) + np.max(np.abs(lap_given)))
    return float(np.max(np.abs(dt_fd - dt_given)) + np.max(np.abs(lap_fd - lap_given))) / scale
