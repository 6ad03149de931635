"""Simultaneous diagonalization of the FEM mass and stiffness operators.

On a uniform grid with homogeneous Dirichlet data the sine vectors
v_j[i] = sin(i*j*pi/(n+1)) are eigenvectors of both 1D tridiagonal matrices, so
the tensor operator L_h = M^{-1}K is diagonal in the tensor sine basis. The
synthesis S along one axis is a DST-I, computed here from an odd extension of
length 2(n+1) and a real FFT.

Normalization: dst_forward applies (2/(n+1)) S per axis and dst_backward applies
plain S, so S(2/(n+1))S = I and the L2 projection is a diagonal divide.
"""
import logging

import numpy as np
import scipy.fft as sfft

from app.dtos.numerics import NodalField, SpectralBasis, SpectralField, TensorGrid, _open_mesh
from app.exceptions import FieldMismatchError, InvalidDiffusionError

logger = logging.getLogger(__name__)


def _axis_eigenvalues(grid: TensorGrid, axis: int, diffusion: float):
    n = grid.interior[axis]
    h = grid.spacing[axis]
    theta = np.arange(1, n + 1) * np.pi / (n + 1)
    # (2D/h)(1 - cos theta) written without the cancellation near theta = 0
    stiffness = (4.0 * diffusion / h) * np.sin(0.5 * theta) ** 2
    mass = (h / 6.0) * (4.0 + 2.0 * np.cos(theta))
    return stiffness, mass


def build_basis(grid: TensorGrid, diffusion: float) -> SpectralBasis:
    """Closed-form eigenvalues mu_k = sum_i kappa_i / m_i and mass products prod_i m_i"""
    if not diffusion > 0:
        raise InvalidDiffusionError(f"Diffusion coefficient must be positive, got {diffusion}")

    stiffness_eigs, mass_eigs = [], []
    for axis in range(grid.dim):
        kappa, m = _axis_eigenvalues(grid, axis, diffusion)
        stiffness_eigs.append(kappa)
        mass_eigs.append(m)

    ratios = _open_mesh([k / m for k, m in zip(stiffness_eigs, mass_eigs)])
    masses = _open_mesh(mass_eigs)
    mu = np.zeros(grid.shape)
    mprod = np.ones(grid.shape)
    for r, m in zip(ratios, masses):
        mu = mu + r
        mprod = mprod * m

    logger.debug(f"Built spectral basis for grid {grid.label()} (D={diffusion}), mu in [{mu.min():.3e}, {mu.max():.3e}]")
    return SpectralBasis(
        grid=grid,
        diffusion=float(diffusion),
        stiffness_eigs=tuple(stiffness_eigs),
        mass_eigs=tuple(mass_eigs),
        eigenvalues=mu.ravel(order="F"),
        mass_products=mprod.ravel(order="F"),
    )


def sine_synthesis(values: np.ndarray, axis: int) -> np.ndarray:
    """(S u)_k = sum_j u_j sin(jk*pi/(n+1)) along one axis via odd-extension FFT"""
    v = np.moveaxis(values, axis, -1)
    n = v.shape[-1]
    extended = np.zeros(v.shape[:-1] + (2 * (n + 1),))
    extended[..., 1:n + 1] = v
    extended[..., n + 2:] = -v[..., ::-1]
    spectrum = sfft.rfft(extended, axis=-1)
    out = -0.5 * spectrum.imag[..., 1:n + 1]
    return np.moveaxis(out, -1, axis)


def dst_forward(field: NodalField) -> SpectralField:
    """Nodal values -> sine coefficients, (2/(n_i+1)) S along every axis"""
    values = field.tensor()
    for axis in range(field.grid.dim):
        values = sine_synthesis(values, axis) * (2.0 / (field.grid.interior[axis] + 1))
    return SpectralField.from_tensor(field.grid, values)


def dst_backward(spec: SpectralField) -> NodalField:
    """Sine coefficients -> nodal values, plain S along every axis"""
    values = spec.tensor()
    for axis in range(spec.grid.dim):
        values = sine_synthesis(values, axis)
    return NodalField.from_tensor(spec.grid, values)


def project_l2(basis: SpectralBasis, load: NodalField) -> SpectralField:
    """Coefficients of P_h f from the load vector (f, phi_j): diagonal mass solve"""
    if load.grid != basis.grid:
        raise FieldMismatchError("Load vector and spectral basis live on different grids")
    transformed = dst_forward(load)
    return SpectralField(grid=basis.grid, values=transformed.values / basis.mass_products)


def apply_semigroup(basis: SpectralBasis, spec: SpectralField, tau: float) -> SpectralField:
    """e^{-tau L_h} applied mode by mode"""
    return SpectralField(grid=basis.grid, values=np.exp(-tau * basis.eigenvalues) * spec.values)


def semigroup_bound(basis: SpectralBasis, tau: float, gamma: int) -> float:
    """max_k (tau mu_k)^gamma e^{-tau mu_k}; bounded by sup_x x^gamma e^{-x} = (gamma/e)^gamma"""
    z = tau * basis.eigenvalues
    return float(np.max(z ** gamma * np.exp(-z)))
