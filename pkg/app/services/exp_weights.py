"""phi-functions and exponential Runge-Kutta weights.

phi_j(z) = int_0^1 e^{z(1-theta)} theta^{j-1}/(j-1)! dtheta, phi_0(z) = e^z.
b_i(z)   = int_0^1 e^{z(1-theta)} l_i(theta) dtheta = sum_j a_ij (j-1)! phi_j(z)
where l_i(theta) = sum_j a_ij theta^{j-1} are the Lagrange polynomials of the
stage nodes. Default nodes are c_i = (i-1)/s, so s = 2 gives {0, 1/2} and
s = 3 gives {0, 1/3, 2/3}; other placements are passed as explicit StageNodes.

Only z <= 0 occurs (mu_k > 0). For |z| < 1 the Taylor series is summed; for
z <= -1 the upward recurrence phi_{j+1} = (phi_j - 1/j!)/z is used. The
recurrence loses digits just past the switch: near z = -1.04 phi_5 and phi_6
carry relative errors of 1e-14 to 6e-14, while phi_1..phi_4 (all that s <= 4
stages need) stay below 3e-15.
"""
import logging
import math
from collections import OrderedDict
from threading import Lock
from typing import Union

import numpy as np
from numpy.polynomial import polynomial as P

from app.dtos.numerics import SpectralBasis, StageNodes, WeightTable
from app.exceptions import InvalidPhiOrderError, InvalidStepError

logger = logging.getLogger(__name__)

TAYLOR_RADIUS = 1.0
TAYLOR_RTOL = 1e-20
TAYLOR_MAX_TERMS = 80


def _phi_taylor(j: int, z: np.ndarray) -> np.ndarray:
    term = np.full_like(z, 1.0 / math.factorial(j))
    total = term.copy()
    for m in range(1, TAYLOR_MAX_TERMS):
        term = term * z / (m + j)
        total = total + term
        if np.all(np.abs(term) <= TAYLOR_RTOL * np.abs(total)):
            break
    return total


def phi_table(order: int, z: Union[float, np.ndarray]) -> np.ndarray:
    """phi_0..phi_order at every z; shape (order + 1,) + shape(z)"""
    if order < 0:
        raise InvalidPhiOrderError(f"phi-function order must be non-negative, got {order}")
    z = np.asarray(z, dtype=np.float64)
    if np.any(z > 0) or not np.all(np.isfinite(z)):
        raise InvalidPhiOrderError("phi-functions are evaluated for finite z <= 0 only")

    flat = z.ravel()
    out = np.empty((order + 1, flat.size))
    out[0] = np.exp(flat)
    small = np.abs(flat) < TAYLOR_RADIUS
    large = ~small

    if np.any(large):
        zl = flat[large]
        current = out[0, large]
        for j in range(order):
            current = (current - 1.0 / math.factorial(j)) / zl
            out[j + 1, large] = current
    if np.any(small):
        zs = flat[small]
        for j in range(1, order + 1):
            out[j, small] = _phi_taylor(j, zs)
    return out.reshape((order + 1,) + z.shape)


def phi(j: int, z: float) -> float:
    if j < 0:
        raise InvalidPhiOrderError(f"phi-function order must be non-negative, got {j}")
    return float(phi_table(j, z)[j])


def lagrange_monomial_matrix(nodes: StageNodes) -> np.ndarray:
    """a[i, j] with l_i(theta) = sum_j a[i, j] theta^j (0-based powers)"""
    c = nodes.as_array()
    s = c.size
    a = np.zeros((s, s))
    for i in range(s):
        others = np.delete(c, i)
        coeffs = P.polyfromroots(others) if others.size else np.ones(1)
        a[i, :] = coeffs / np.prod(c[i] - others)
    return a


def _weights_for(nodes: StageNodes, z: np.ndarray) -> np.ndarray:
    s = nodes.stages
    phis = phi_table(s, z)[1:]
    factorials = np.array([math.factorial(j) for j in range(s)], dtype=np.float64)
    scaled = phis * factorials.reshape((s,) + (1,) * z.ndim)
    return np.tensordot(lagrange_monomial_matrix(nodes), scaled, axes=([1], [0]))


def weights_b(nodes: StageNodes, z: float) -> np.ndarray:
    """b_1(z)..b_s(z); at z = 0 these are the Newton-Cotes weights of the nodes"""
    return _weights_for(nodes, np.asarray(z, dtype=np.float64))


def weight_table_from_eigenvalues(nodes: StageNodes, dt: float, eigenvalues: np.ndarray) -> WeightTable:
    if not dt > 0:
        raise InvalidStepError(f"Step size must be positive, got {dt}")
    z = -dt * np.asarray(eigenvalues, dtype=np.float64)
    return WeightTable(step=float(dt), nodes=nodes, decay=np.exp(z), weights=_weights_for(nodes, z))


class WeightTableCache:
    """Process-wide cache of weight tables keyed by (nodes, exact step bits, grid, D)"""
    _instance = None
    _lock = Lock()

    MAX_ENTRIES = 64

    def __new__(cls):
        with cls._lock:
            if cls._instance is None:
                cls._instance = super(WeightTableCache, cls).__new__(cls)
                cls._instance._initialized = False
            return cls._instance

    def __init__(self):
        if not self._initialized:
            self._tables: "OrderedDict[tuple, WeightTable]" = OrderedDict()
            self._tables_lock = Lock()
            self.hits = 0
            self.misses = 0
            self._initialized = True

    def get(self, nodes: StageNodes, dt: float, basis: SpectralBasis) -> WeightTable:
        if not dt > 0:
            raise InvalidStepError(f"Step size must be positive, got {dt}")
        key = (nodes.nodes, float(dt).hex(), basis.grid, basis.diffusion)
        with self._tables_lock:
            table = self._tables.get(key)
            if table is not None:
                self._tables.move_to_end(key)
                self.hits += 1
                return table
        table = weight_table_from_eigenvalues(nodes, dt, basis.eigenvalues)
        with self._tables_lock:
            self.misses += 1
            self._tables[key] = table
            while len(self._tables) > self.MAX_ENTRIES:
                self._tables.popitem(last=False)
        logger.debug(f"Built weight table for s={nodes.stages}, dt={dt:.6e} on {basis.grid.label()}")
        return table

    def clear(self) -> None:
        with self._tables_lock:
            self._tables.clear()
            self.hits = 0
            self.misses = 0


def build_weight_table(nodes: StageNodes, dt: float, basis: SpectralBasis) -> WeightTable:
    """Decay factors e^{-dt mu_k} and weights b_i(-dt mu_k) for every eigenvalue"""
    return WeightTableCache().get(nodes, dt, basis)
