import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid

from gmekit.gme import (
    GaussianMetaEmbedding,
    IllConditionedError,
    Partition,
    PartitionError,
    SharedPrecisionBasis,
    llr_binary,
    llr_partition,
    log_expectation,
    log_inner_product,
    pool,
)
from gmekit.quadrature import QuadratureSpec, oracle_llr_partition, oracle_log_expectation

from conftest import random_basis, random_gme, random_psd


def _quad_1d(fn):
    """Independent 1-D trapezoid integral of fn(z) N(z|0,1) on [-12, 12]."""
    z = np.linspace(-12, 12, 100_000)
    return trapezoid(fn(z) * np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi), z)


def test_pool_single_is_identity(rng):
    f = random_gme(rng, 3)
    assert pool([f]) is f


def test_pool_scaled_adds_scalars(rng):
    basis = random_basis(rng, 3)
    f = GaussianMetaEmbedding.scaled(rng.standard_normal(3), 0.5, basis)
    g = GaussianMetaEmbedding.scaled(rng.standard_normal(3), 1.5, basis)
    p = pool([f, g])
    assert p.is_scaled
    assert p.precision.b == 2.0
    np.testing.assert_array_equal(p.a, f.a + g.a)


def test_pool_order_independent(rng):
    f, g, h = (random_gme(rng, 4) for _ in range(3))
    p1, p2 = pool([f, g, h]), pool([h, f, g])
    np.testing.assert_allclose(p1.a, p2.a, rtol=0, atol=1e-12)
    np.testing.assert_allclose(p1.B, p2.B, rtol=0, atol=1e-12)


def test_pool_associative(rng):
    f, g, h = (random_gme(rng, 3) for _ in range(3))
    left = pool([pool([f, g]), h])
    right = pool([f, pool([g, h])])
    np.testing.assert_allclose(left.a, right.a, atol=1e-12)
    np.testing.assert_allclose(left.B, right.B, atol=1e-12)


def test_pool_errors(rng):
    with pytest.raises(ValueError):
        pool([])
    with pytest.raises(ValueError):
        pool([random_gme(rng, 2), random_gme(rng, 3)])
    b1, b2 = random_basis(rng, 2), random_basis(rng, 2)
    with pytest.raises(ValueError, match="densify"):
        pool([GaussianMetaEmbedding.scaled(np.zeros(2), 1.0, b1),
              GaussianMetaEmbedding.scaled(np.zeros(2), 1.0, b2)])
    with pytest.raises(ValueError, match="densify"):
        pool([GaussianMetaEmbedding.scaled(np.zeros(2), 1.0, b1), random_gme(rng, 2)])


def test_log_expectation_unit_is_zero():
    assert log_expectation(GaussianMetaEmbedding.unit(3)) == 0.0


def test_log_expectation_1d_against_quadrature():
    f = GaussianMetaEmbedding.dense([1.0], [[1.0]])
    expected = np.log(_quad_1d(lambda z: np.exp(z - 0.5 * z * z)))
    # closed form for reference: 0.25 - 0.5 log 2
    assert expected == pytest.approx(0.25 - 0.5 * np.log(2), abs=1e-10)
    assert log_expectation(f) == pytest.approx(expected, abs=1e-10)


def test_dense_and_scaled_agree(rng):
    basis = random_basis(rng, 2)
    for _ in range(20):
        a = rng.standard_normal(2)
        b = rng.uniform(0, 3)
        s = GaussianMetaEmbedding.scaled(a, b, basis)
        assert log_expectation(s) == pytest.approx(log_expectation(s.densify()), abs=1e-10)


def test_ill_conditioned_reported():
    f = GaussianMetaEmbedding.dense([1.0, 0.0], [[-2.0, 0.0], [0.0, 1.0]])
    with pytest.raises(IllConditionedError):
        log_expectation(f)


def test_inner_product_with_unit(rng):
    f = random_gme(rng, 3)
    assert log_inner_product(f, GaussianMetaEmbedding.unit(3)) == pytest.approx(
        log_expectation(f), abs=1e-14
    )


def test_inner_product_symmetric(rng):
    f, g = random_gme(rng, 4), random_gme(rng, 4)
    assert log_inner_product(f, g) == log_inner_product(g, f)


def test_inner_product_1d_quadrature():
    f = GaussianMetaEmbedding.dense([0.7], [[0.4]])
    g = GaussianMetaEmbedding.dense([-0.3], [[1.3]])
    expected = np.log(_quad_1d(lambda z: np.exp(0.4 * z - 0.85 * z * z)))
    assert log_inner_product(f, g) == pytest.approx(expected, abs=1e-9)


def test_llr_binary_units_zero():
    u = GaussianMetaEmbedding.unit(2)
    assert llr_binary(u, u) == 0.0


def test_llr_binary_1d_quadrature():
    f = GaussianMetaEmbedding.dense([1.0], [[1.0]])
    g = GaussianMetaEmbedding.dense([-1.0], [[1.0]])
    num = _quad_1d(lambda z: np.exp(-(z * z)))
    den = _quad_1d(lambda z: np.exp(z - 0.5 * z * z)) * _quad_1d(lambda z: np.exp(-z - 0.5 * z * z))
    assert llr_binary(f, g) == pytest.approx(np.log(num / den), abs=1e-9)


def test_llr_depends_only_on_natural_parameters(rng):
    # rebuilding from copies of (a, B) gives the identical score
    f, g = random_gme(rng, 3), random_gme(rng, 3)
    f2 = GaussianMetaEmbedding.dense(f.a.copy(), f.B.copy())
    assert llr_binary(f, g) == llr_binary(f2, g)


def test_partition_validation():
    Partition.of([0, 1], [2])
    with pytest.raises(PartitionError):
        Partition.of([0, 1], [1, 2])
    with pytest.raises(PartitionError):
        Partition.of([0], [2])
    with pytest.raises(PartitionError):
        Partition.of([0], [])


def test_llr_partition_special_cases(rng):
    gmes = [random_gme(rng, 2) for _ in range(3)]
    A = Partition.of([0, 1, 2])
    assert llr_partition(gmes, A, A) == 0.0
    two = gmes[:2]
    assert llr_partition(two, Partition.of([0, 1]), Partition.of([0], [1])) == pytest.approx(
        llr_binary(*two), abs=1e-12
    )
    with pytest.raises(PartitionError):
        llr_partition(gmes, Partition.of([0, 1]), A)


def test_llr_partition_antisymmetric(rng):
    gmes = [random_gme(rng, 3) for _ in range(4)]
    A = Partition.of([0, 2], [1, 3])
    B = Partition.of([0], [1, 2, 3])
    assert llr_partition(gmes, A, B) == -llr_partition(gmes, B, A)


def test_llr_partition_three_1d_quadrature():
    params = [(0.5, 0.8), (-0.2, 1.5), (1.1, 0.3)]
    gmes = [GaussianMetaEmbedding.dense([a], [[b]]) for a, b in params]

    def e(members):
        a = sum(params[i][0] for i in members)
        b = sum(params[i][1] for i in members)
        return np.log(_quad_1d(lambda z: np.exp(a * z - 0.5 * b * z * z)))

    expected = e([0, 1, 2]) - e([0]) - e([1, 2])
    got = llr_partition(gmes, Partition.of([0, 1, 2]), Partition.of([0], [1, 2]))
    assert got == pytest.approx(expected, abs=1e-9)


def test_oracle_unit_zero():
    assert oracle_log_expectation(GaussianMetaEmbedding.unit(1)) == pytest.approx(0.0, abs=1e-8)
    assert oracle_log_expectation(
        GaussianMetaEmbedding.unit(2), QuadratureSpec(n_points=801)
    ) == pytest.approx(0.0, abs=1e-8)


def test_oracle_rejects_high_dim(rng):
    with pytest.raises(ValueError):
        oracle_log_expectation(random_gme(rng, 3))


def test_oracle_matches_closed_form_1d(rng):
    for _ in range(100):
        f = random_gme(rng, 1)
        want = oracle_log_expectation(f)
        assert log_expectation(f) == pytest.approx(want, abs=1e-6 * max(1.0, abs(want)))


def test_oracle_matches_closed_form_2d_sample(rng):
    # the full 100-sample sweep lives in the acceptance suite
    for _ in range(5):
        f = random_gme(rng, 2)
        want = oracle_log_expectation(f)
        assert log_expectation(f) == pytest.approx(want, abs=1e-5 * max(1.0, abs(want)))


def test_oracle_partition_1d(rng):
    gmes = [random_gme(rng, 1) for _ in range(3)]
    A, B = Partition.of([0, 1, 2]), Partition.of([0, 2], [1])
    assert llr_partition(gmes, A, B) == pytest.approx(oracle_llr_partition(gmes, A, B), abs=1e-6)


@st.composite
def gme_pairs(draw, d=3):
    seed = draw(st.integers(0, 2**32 - 1))
    scale = draw(st.floats(0.01, 10.0))
    rng = np.random.default_rng(seed)
    return random_gme(rng, d, scale), random_gme(rng, d, scale)


@settings(max_examples=200, deadline=None)
@given(gme_pairs())
def test_cauchy_schwarz_log_domain(pair):
    f, g = pair
    lhs = log_inner_product(f, g)
    rhs = 0.5 * log_inner_product(f, f) + 0.5 * log_inner_product(g, g)
    assert lhs <= rhs + 1e-10


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 20.0))
def test_scaled_densified_equivalence(seed, b):
    rng = np.random.default_rng(seed)
    basis = SharedPrecisionBasis.from_matrix(random_psd(rng, 4, 5.0))
    f = GaussianMetaEmbedding.scaled(rng.standard_normal(4), b, basis)
    assert log_expectation(f) == pytest.approx(log_expectation(f.densify()), abs=1e-10)


def test_all_partitions_of_three_antisymmetric(rng):
    gmes = [random_gme(rng, 2) for _ in range(3)]
    parts = [
        Partition.of([0, 1, 2]),
        Partition.of([0], [1, 2]),
        Partition.of([1], [0, 2]),
        Partition.of([2], [0, 1]),
        Partition.of([0], [1], [2]),
    ]
    for A, B in itertools.product(parts, parts):
        assert llr_partition(gmes, A, B) == -llr_partition(gmes, B, A)


def test_basis_reconstructs(rng):
    basis = random_basis(rng, 5)
    V, lam = basis.eigvecs, basis.eigvals
    np.testing.assert_allclose((V * lam) @ V.T, basis.Bbar, atol=1e-12)
    np.testing.assert_allclose(V.T @ V, np.eye(5), atol=1e-12)


def test_basis_clamps_tiny_negative_eigenvalues():
    M = np.diag([1.0, -1e-14])
    basis = SharedPrecisionBasis.from_matrix(M)
    assert basis.eigvals.min() == 0.0
