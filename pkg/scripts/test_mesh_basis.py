"""
Tests for grids, hat projectors and Gram matrices
"""

import math

import numpy as np
import pytest
import scipy.sparse as sp
from numpy.testing import assert_allclose

from errors import (
    DimensionMismatch,
    DimensionUnsupported,
    FactorizationFailed,
    InsufficientSamples,
    NonConformingSpacing,
)
from mesh_basis import (
    assemble_gram,
    build_projector,
    build_tensor_grid,
    discrete_inner,
    discrete_norm,
    fit_order,
    gram_from_matrix,
    grid_document,
    l2_error,
    lumped_mass,
    projection_order_estimate,
)


def sine(*x):
    value = 1.0
    for coordinate in x:
        value = value * np.sin(math.pi * np.asarray(coordinate))
    return value


class TestGrid:

    def test_unit_interval_quarter(self):
        grid = build_tensor_grid((0.0, 1.0), 0.25)
        assert_allclose(grid.nodes[:, 0], [0.0, 0.25, 0.5, 0.75, 1.0])
        assert int(grid.interior_mask.sum()) == 3
        assert grid.boundary_mask[0] and grid.boundary_mask[-1]

    def test_unit_square_half_has_one_interior_node(self):
        grid = build_tensor_grid([(0.0, 1.0), (0.0, 1.0)], 0.5)
        assert grid.node_count == 9
        interior = grid.nodes[grid.interior_mask]
        assert_allclose(interior, [[0.5, 0.5]])

    def test_masks_partition_nodes(self):
        grid = build_tensor_grid([(0.0, 2.0), (-1.0, 1.0)], 0.25)
        assert np.all(grid.interior_mask ^ grid.boundary_mask)
        assert grid.shape == (9, 9)
        assert len(grid.index_map) == grid.node_count

    def test_nonconforming_spacing(self):
        with pytest.raises(NonConformingSpacing):
            build_tensor_grid((0.0, 1.0), 0.3)

    def test_four_dimensions_unsupported(self):
        with pytest.raises(DimensionUnsupported):
            build_tensor_grid([(0.0, 1.0)] * 4, 0.5)


class TestProjector:

    def test_decompose_is_nodal_sampling(self):
        proj = build_projector(build_tensor_grid((0.0, 1.0), 0.25))
        expected = np.sin(math.pi * np.array([0.25, 0.5, 0.75]))
        assert_allclose(proj.decompose(lambda x: np.sin(math.pi * x)), expected)

    @pytest.mark.parametrize("bounds", [(0.0, 1.0), [(0.0, 1.0), (0.0, 1.0)]])
    def test_decompose_expand_identity(self, bounds):
        proj = build_projector(build_tensor_grid(bounds, 0.25))
        for k in range(proj.dof_count):
            unit = np.zeros(proj.dof_count)
            unit[k] = 1.0
            assert_allclose(proj.decompose(proj.expand(unit)), unit, atol=1e-15)

    def test_expand_reproduces_bilinear_fields(self):
        proj = build_projector(build_tensor_grid([(0.0, 1.0), (0.0, 2.0)], 0.25, bc="none"))
        field = proj.expand(proj.decompose(lambda x, y: 1.0 + 2.0 * x - y + 3.0 * x * y))
        points = np.array([[0.1, 0.3], [0.77, 1.9], [0.5, 0.5]])
        assert_allclose(field(points[:, 0], points[:, 1]),
                        1.0 + 2.0 * points[:, 0] - points[:, 1] + 3.0 * points[:, 0] * points[:, 1])

    def test_expand_supports_complex_coefficients(self):
        proj = build_projector(build_tensor_grid((0.0, 1.0), 0.25))
        coeffs = np.array([1.0 + 1.0j, 2.0, -1.0j])
        assert_allclose(proj.expand(coeffs)(np.array([0.5])), [2.0])
        assert_allclose(proj.expand(coeffs)(np.array([0.375])), [1.5 + 0.5j])

    def test_wrong_coefficient_length(self):
        proj = build_projector(build_tensor_grid((0.0, 1.0), 0.25))
        with pytest.raises(DimensionMismatch):
            proj.expand(np.zeros(5))


class TestGram:

    def test_one_dimensional_hat_mass(self):
        h = 1 / 8
        mass = assemble_gram(build_projector(build_tensor_grid((0.0, 1.0), h)))
        M = mass.matrix.toarray()
        assert_allclose(np.diag(M), 2 * h / 3)
        assert_allclose(np.diag(M, 1), h / 6)
        assert_allclose(np.diag(M, 2), 0.0)

    @pytest.mark.parametrize("h", [1 / 4, 1 / 16, 1 / 64])
    @pytest.mark.parametrize("dim", [1, 2])
    def test_symmetric_and_factorized(self, h, dim):
        mass = assemble_gram(build_projector(build_tensor_grid([(0.0, 1.0)] * dim, h)))
        M = mass.matrix
        assert abs(M - M.T).max() <= 1e-12 * abs(M).max()
        assert np.all(mass.band[0] > 0)
        assert_allclose((mass.lower @ mass.lower.T).toarray(), M.toarray(), atol=1e-15)
        assert mass.kappa >= 1.0
        assert mass.space_volume > 0

    def test_full_space_integrates_area(self):
        mass = assemble_gram(build_projector(build_tensor_grid([(0.0, 1.0), (0.0, 2.0)], 0.25, bc="none")))
        ones = np.ones(mass.size)
        assert_allclose(ones @ mass.matrix @ ones, 2.0)
        assert_allclose(lumped_mass(mass).sum(), 2.0)

    def test_identity_gram(self):
        g = gram_from_matrix(np.eye(3), label="identity")
        assert g.kappa == 1.0
        assert_allclose(g.lower.toarray(), np.eye(3))

    def test_solves_invert_the_factor(self, line16, rng):
        x = rng.standard_normal(line16.mass.size)
        assert_allclose(line16.mass.solve(line16.mass.matrix @ x), x, rtol=1e-10)
        assert_allclose(line16.mass.solve_factor(line16.mass.apply_factor(x)), x, rtol=1e-10)
        z = x + 1j * rng.standard_normal(x.size)
        assert_allclose(line16.mass.solve(line16.mass.matrix @ z), z, rtol=1e-10)

    def test_rejects_nonsymmetric(self):
        with pytest.raises(FactorizationFailed):
            gram_from_matrix(np.array([[2.0, 1.0], [0.0, 2.0]]))

    def test_rejects_indefinite(self):
        with pytest.raises(FactorizationFailed):
            gram_from_matrix(sp.diags([1.0, -1.0, 2.0]))


class TestDiscreteNorms:

    def test_zero_vector(self, line8):
        assert discrete_norm(np.zeros(line8.mass.size), line8.mass) == 0.0

    def test_euclidean_case(self):
        assert_allclose(discrete_norm(np.array([3.0, 4.0]), gram_from_matrix(np.eye(2))), 5.0)

    def test_ones_match_entry_sum(self):
        mass = assemble_gram(build_projector(build_tensor_grid((0.0, 1.0), 0.25)))
        ones = np.ones(3)
        assert_allclose(discrete_norm(ones, mass) ** 2, mass.matrix.sum())

    def test_inner_positive_and_consistent(self, square8, rng):
        for _ in range(10):
            x = rng.standard_normal(square8.mass.size)
            inner = discrete_inner(x, x, square8.mass)
            assert inner > 0
            assert abs(discrete_norm(x, square8.mass) ** 2 - inner) <= 1e-12 * inner

    def test_complex_inner_is_conjugate_linear_in_second_slot(self, line8, rng):
        x = rng.standard_normal(line8.mass.size)
        y = rng.standard_normal(line8.mass.size)
        assert_allclose(discrete_inner(x, 1j * y, line8.mass), -1j * discrete_inner(x, y, line8.mass))

    def test_dimension_mismatch(self, line8):
        with pytest.raises(DimensionMismatch):
            discrete_norm(np.ones(line8.mass.size + 1), line8.mass)


class TestProjectionOrder:

    def test_sine_is_second_order(self):
        family = [build_projector(build_tensor_grid((0.0, 1.0), h)) for h in (1 / 8, 1 / 16, 1 / 32, 1 / 64)]
        fit = projection_order_estimate(family, sine)
        assert fit.order == pytest.approx(2.0, abs=0.2)
        assert all(a > b for a, b in zip(fit.errors, fit.errors[1:]))

    def test_two_dimensional_sine(self):
        family = [build_projector(build_tensor_grid([(0.0, 1.0)] * 2, h)) for h in (1 / 4, 1 / 8, 1 / 16)]
        assert projection_order_estimate(family, sine).order == pytest.approx(2.0, abs=0.2)

    def test_basis_function_is_reproduced(self):
        coarse = build_projector(build_tensor_grid((0.0, 1.0), 1 / 8))
        hat = coarse.basis_function(3)
        family = [build_projector(build_tensor_grid((0.0, 1.0), h)) for h in (1 / 8, 1 / 16, 1 / 32)]
        assert projection_order_estimate(family, hat).order == math.inf

    def test_constant_without_boundary_condition(self):
        proj = build_projector(build_tensor_grid((0.0, 1.0), 1 / 8, bc="none"))
        assert l2_error(proj, lambda x: 2.5 + 0.0 * x) <= 1e-12

    def test_needs_three_samples(self):
        with pytest.raises(InsufficientSamples):
            fit_order([0.5, 0.25], [1.0, 0.25])


def test_grid_document(square8):
    doc = grid_document(square8.proj)
    assert doc == {"dim": 2, "bounds": [[0.0, 1.0], [0.0, 1.0]], "h": [0.125, 0.125],
                   "bc": "dirichlet", "dof_count": 49}
