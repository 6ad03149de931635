import math

import numpy as np
import pytest
from numpy.polynomial import polynomial as P
from scipy.integrate import quad

from app.dtos.numerics import StageNodes
from app.exceptions import InvalidPhiOrderError, InvalidStageNodesError, InvalidStepError
from app.services import exp_weights, spectral
from app.tests.conftest import unit_grid


def weight_by_quadrature(nodes: StageNodes, i: int, z: float) -> float:
    """b_i(z) = int_0^1 e^{z sigma} l_i(1 - sigma) dsigma"""
    c = nodes.as_array()
    others = np.delete(c, i)

    def integrand(sigma):
        theta = 1.0 - sigma
        return math.exp(z * sigma) * float(np.prod((theta - others) / (c[i] - others)))

    split = min(1.0, 50.0 / abs(z)) if z != 0 else 1.0
    head, _ = quad(integrand, 0.0, split, epsabs=1e-16, epsrel=1e-13, limit=200)
    tail = 0.0
    if split < 1.0:
        tail, _ = quad(integrand, split, 1.0, epsabs=1e-16, epsrel=1e-13, limit=200)
    return head + tail


def phi_by_quadrature(j: int, z: float) -> float:
    value, _ = quad(lambda s: math.exp(z * (1.0 - s)) * s ** (j - 1) / math.factorial(j - 1), 0.0, 1.0,
                    epsabs=1e-16, epsrel=1e-13)
    return value


@pytest.mark.parametrize("j", range(0, 7))
def test_phi_at_zero(j):
    assert exp_weights.phi(j, 0.0) == pytest.approx(1.0 / math.factorial(j), rel=1e-15)


@pytest.mark.parametrize("z", [-1e-6, -0.3, -0.99, -1.0, -3.7, -50.0])
def test_phi_closed_forms(z):
    assert exp_weights.phi(0, z) == pytest.approx(math.exp(z), rel=1e-15)
    assert exp_weights.phi(1, z) == pytest.approx(-math.expm1(z) / -z, rel=1e-12)
    if abs(z) >= 0.1:
        assert exp_weights.phi(2, z) == pytest.approx((math.expm1(z) - z) / z ** 2, rel=1e-12)


@pytest.mark.parametrize("j,low", [(1, 0.5), (2, 0.5), (3, 0.5), (4, 1.0), (5, 1.0), (6, 1.0)])
def test_phi_series_and_recurrence_agree_across_the_switch(j, low):
    for z in -np.linspace(low, 2.0, 31):
        assert exp_weights.phi(j, z) == pytest.approx(phi_by_quadrature(j, z), rel=1e-11, abs=1e-15)


def test_phi_table_shape_and_domain():
    z = -np.array([[0.1, 2.0], [5.0, 0.0]])
    table = exp_weights.phi_table(3, z)
    assert table.shape == (4, 2, 2)
    np.testing.assert_allclose(table[0], np.exp(z))

    with pytest.raises(InvalidPhiOrderError):
        exp_weights.phi_table(2, 0.5)
    with pytest.raises(InvalidPhiOrderError):
        exp_weights.phi_table(-1, -1.0)


def test_newton_cotes_at_zero():
    np.testing.assert_allclose(exp_weights.weights_b(StageNodes.uniform(1), 0.0), [1.0], rtol=1e-15)
    np.testing.assert_allclose(exp_weights.weights_b(StageNodes(nodes=(0.0, 1.0)), 0.0), [0.5, 0.5], rtol=1e-14)
    np.testing.assert_allclose(exp_weights.weights_b(StageNodes(nodes=(0.0, 0.5, 1.0)), 0.0), [1 / 6, 4 / 6, 1 / 6],
                               rtol=1e-14)


@pytest.mark.parametrize("s", [1, 2, 3, 4])
def test_weights_sum_to_phi1(s):
    nodes = StageNodes.uniform(s)
    for z in [-1e-3, -0.7, -4.0, -300.0]:
        assert exp_weights.weights_b(nodes, z).sum() == pytest.approx(exp_weights.phi(1, z), rel=1e-12)


def test_lagrange_basis_is_cardinal():
    nodes = StageNodes(nodes=(0.0, 0.3, 0.5, 1.0))
    a = exp_weights.lagrange_monomial_matrix(nodes)
    values = np.array([P.polyval(nodes.as_array(), a[i]) for i in range(nodes.stages)])
    np.testing.assert_allclose(values, np.eye(nodes.stages), atol=1e-13)


@pytest.mark.parametrize("s", [1, 2, 3, 4])
def test_weights_match_adaptive_quadrature(s):
    nodes = StageNodes.uniform(s)
    for z in -np.logspace(-8, 6, 200):
        weights = exp_weights.weights_b(nodes, z)
        expected = [weight_by_quadrature(nodes, i, z) for i in range(s)]
        np.testing.assert_allclose(weights, expected, rtol=0, atol=1e-12)


def test_stage_nodes_validation():
    with pytest.raises(InvalidStageNodesError):
        StageNodes(nodes=(0.5, 0.5))
    with pytest.raises(InvalidStageNodesError):
        StageNodes(nodes=(0.2, 0.1))
    with pytest.raises(InvalidStageNodesError):
        StageNodes(nodes=(0.0, 1.5))
    with pytest.raises(InvalidStageNodesError):
        StageNodes.uniform(0)
    assert StageNodes.uniform(1).nodes == (0.0,)
    assert StageNodes.uniform(2).nodes == (0.0, 0.5)
    assert StageNodes.uniform(3).nodes == (0.0, 1 / 3, 2 / 3)


def test_weight_table_for_basis():
    basis = spectral.build_basis(unit_grid(16), 1.0)
    nodes = StageNodes.uniform(2)
    table = exp_weights.build_weight_table(nodes, 0.01, basis)

    assert table.weights.shape == (2, 15)
    np.testing.assert_allclose(table.decay, np.exp(-0.01 * basis.eigenvalues), rtol=1e-15)
    k = 4
    np.testing.assert_allclose(table.weights[:, k], exp_weights.weights_b(nodes, -0.01 * basis.eigenvalues[k]),
                               rtol=1e-14)


def test_weight_tables_are_cached():
    cache = exp_weights.WeightTableCache()
    basis = spectral.build_basis(unit_grid(8), 1.0)
    nodes = StageNodes.uniform(3)

    first = exp_weights.build_weight_table(nodes, 0.125, basis)
    second = exp_weights.build_weight_table(nodes, 0.125, basis)
    other = exp_weights.build_weight_table(nodes, 0.0625, basis)

    assert first is second
    assert other is not first
    assert cache.hits == 1
    assert cache.misses == 2


def test_step_must_be_positive():
    basis = spectral.build_basis(unit_grid(8), 1.0)
    with pytest.raises(InvalidStepError):
        exp_weights.build_weight_table(StageNodes.uniform(2), 0.0, basis)


def test_stiff_decay_underflows_to_zero():
    table = exp_weights.weight_table_from_eigenvalues(StageNodes(nodes=(0.0, 1.0)), 1.0, np.array([1e4]))
    assert table.decay[0] == 0.0
    np.testing.assert_allclose(table.weights[:, 0], [1e-8, 1e-4 - 1e-8], rtol=1e-10)


def test_phi_recurrence_holds_across_the_range():
    z = -np.logspace(-8, 6, 300)
    table = exp_weights.phi_table(6, z)
    for j in range(6):
        lhs = z * table[j + 1]
        rhs = table[j] - 1.0 / math.factorial(j)
        scale = np.abs(table[j]) + 1.0 / math.factorial(j)
        assert np.all(np.abs(lhs - rhs) <= 1e-13 * scale), f"phi_{j + 1}"


def test_phi1_is_increasing_and_bounded():
    z = np.sort(-np.logspace(-8, 6, 400))
    values = exp_weights.phi_table(1, z)[1]

    assert np.all(np.diff(values) > 0)
    assert np.all(values > 0)
    assert np.all(values <= 1.0)


def test_low_order_phi_is_accurate_past_the_taylor_switch():
    z = np.linspace(-1.2, -1.0, 21)
    table = exp_weights.phi_table(4, z)
    for j in range(1, 5):
        np.testing.assert_allclose(table[j], exp_weights._phi_taylor(j, z), rtol=1e-14)


@pytest.mark.parametrize("nodes", [(0.0,), (0.0, 0.5), (0.0, 1 / 3, 2 / 3), (0.0, 0.3, 0.5, 1.0)])
def test_weights_bounded_by_lagrange_mass(nodes):
    stage_nodes = StageNodes(nodes=nodes)
    c = stage_nodes.as_array()
    bounds = []
    for i in range(stage_nodes.stages):
        others = np.delete(c, i)
        value, _ = quad(lambda theta: abs(np.prod((theta - others) / (c[i] - others))), 0.0, 1.0,
                        points=[x for x in c if 0.0 < x < 1.0] or None, epsabs=1e-15)
        bounds.append(value)

    for z in -np.logspace(-8, 6, 120):
        assert np.all(np.abs(exp_weights.weights_b(stage_nodes, z)) <= np.array(bounds) + 1e-13)
