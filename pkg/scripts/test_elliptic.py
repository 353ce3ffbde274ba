"""
Tests for the discrete Green operator and the semilinear contraction solver
"""

import gc
import math
import weakref

import numpy as np
import pytest
import scipy.sparse as sp
from numpy.testing import assert_allclose

import elliptic
from elliptic import (
    SemilinearProblem,
    clear_green_cache,
    elliptic_apriori_bound,
    green_apply,
    self_convergence_order,
    semilinear_solve,
)
from errors import (
    BallEscape,
    ContractionConditionViolated,
    DimensionMismatch,
    InvalidConstants,
    SingularOperator,
)
from mesh_basis import discrete_norm
from operator_factory import DiscreteOperator, assemble_operator
from problems import instantiate
from spectral import spectral_bracketing


def constant_source(value):
    return lambda u: np.full_like(u, value, dtype=float)


@pytest.fixture(scope="module")
def poisson():
    problem = instantiate("semilinear_poisson_2d", h=1 / 32, r=1.0)
    u, report, certificate = semilinear_solve(problem)
    return problem, u, report, certificate


class TestGreen:

    def test_zero_data(self, line8):
        assert_allclose(green_apply(line8.S, line8.mass, np.zeros(7)), 0.0)

    def test_linearity(self, square8, rng):
        f = rng.standard_normal(square8.mass.size)
        g = rng.standard_normal(square8.mass.size)
        combined = green_apply(square8.S, square8.mass, 2.5 * f - g)
        separate = 2.5 * green_apply(square8.S, square8.mass, f) - green_apply(square8.S, square8.mass, g)
        assert_allclose(combined, separate, rtol=1e-12, atol=1e-14)

    def test_sine_solution_is_second_order(self, setup_factory):
        errors = []
        for h in (1 / 8, 1 / 16):
            setup = setup_factory((0.0, 1.0), h)
            f = setup.proj.decompose(lambda x: math.pi ** 2 * np.sin(math.pi * x))
            exact = setup.proj.decompose(lambda x: np.sin(math.pi * x))
            errors.append(np.max(np.abs(green_apply(setup.S, setup.mass, f) - exact)))
        assert 3.5 < errors[0] / errors[1] < 4.5

    def test_complex_data(self, line8):
        f = np.arange(7, dtype=float)
        u = green_apply(line8.S, line8.mass, f + 1j * f)
        assert_allclose(u, (1 + 1j) * green_apply(line8.S, line8.mass, f), rtol=1e-12)

    def test_shape_mismatch(self, line8):
        with pytest.raises(DimensionMismatch):
            green_apply(line8.S, line8.mass, np.zeros(8))

    def test_singular_stiffness(self, line8):
        zero = DiscreteOperator(matrix=sp.csr_matrix((7, 7)), domain_gram=line8.mass,
                                codomain_gram=line8.mass, label="zero", is_form=True)
        with pytest.raises(SingularOperator):
            green_apply(zero, line8.mass, np.ones(7))

    def test_cache_can_be_cleared(self, line8):
        first = green_apply(line8.S, line8.mass, np.ones(7))
        clear_green_cache()
        assert_allclose(green_apply(line8.S, line8.mass, np.ones(7)), first)

    def test_cache_releases_discarded_operators(self, line8):
        gc.collect()
        before = len(elliptic._green_factors)
        S = assemble_operator(line8.fo)
        green_apply(S, line8.mass, np.ones(7))
        assert S in elliptic._green_factors
        alive = weakref.ref(S)
        del S
        gc.collect()
        assert alive() is None
        assert len(elliptic._green_factors) == before


class TestSemilinearPoisson:

    def test_converges_with_residual_certificate(self, poisson):
        _, _, report, certificate = poisson
        assert report.converged
        assert certificate["ok"]
        assert certificate["residual"] <= 1e-10
        assert certificate["ball_ok"]

    def test_contraction_ratio(self, poisson):
        problem, _, report, certificate = poisson
        assert problem.contraction_ratio == pytest.approx(1.0 / math.pi ** 2)
        assert certificate["K"] == pytest.approx(0.10132, abs=1e-5)
        assert max(report.increment_ratios) <= 1.0 / math.pi ** 2 + 1e-3

    def test_solution_is_negative_inside(self, poisson):
        _, u, _, certificate = poisson
        assert np.all(u < 0)
        assert certificate["max_iterate_norm_inf"] <= 1.0

    def test_two_starts_reach_the_same_point(self, poisson, rng):
        problem, u, _, _ = poisson
        u0 = problem.r * rng.uniform(-1.0, 1.0, problem.mass.size)
        v, _, _ = semilinear_solve(problem, u0=u0)
        assert discrete_norm(u - v, problem.mass) <= 2e-11

    def test_bound_envelope_along_the_iteration(self, poisson):
        problem, _, report, _ = poisson
        norm_Ah = spectral_bracketing(problem.stiffness, problem.mass).norm_A
        for k, error in enumerate(report.errors_to_final):
            assert error <= elliptic_apriori_bound(problem, k, 1 / 32, norm_Ah, c_u=0.0)

    def test_radius_beyond_coercivity(self):
        problem = instantiate("semilinear_poisson_2d", h=1 / 8, r=10.0)
        with pytest.raises(ContractionConditionViolated):
            semilinear_solve(problem)

    def test_start_outside_the_ball(self):
        problem = instantiate("semilinear_poisson_2d", h=1 / 8, r=1.0)
        with pytest.raises(BallEscape) as info:
            semilinear_solve(problem, u0=np.full(problem.mass.size, 2.0))
        assert info.value.index == 0

    def test_mesh_self_convergence(self):
        solutions = []
        for h in (1 / 4, 1 / 8, 1 / 16):
            problem = instantiate("semilinear_poisson_2d", h=h)
            solutions.append((problem.fo.projector, semilinear_solve(problem)[0]))
        fine = instantiate("semilinear_poisson_2d", h=1 / 64)
        fit = self_convergence_order(solutions, (fine.fo.projector, semilinear_solve(fine)[0]))
        assert fit.order == pytest.approx(2.0, abs=0.2)


class TestConstantSource:

    def test_zero_ratio_fixed_point(self, line16):
        problem = SemilinearProblem(fo=line16.fo, mass=line16.mass, f=constant_source(-1.0),
                                    c_f=lambda r: 0.0, M_f=lambda r: 1.0, r=1.0, m=math.pi ** 2)
        u, report, certificate = semilinear_solve(problem)
        assert certificate["K"] == 0.0
        assert_allclose(u, green_apply(line16.S, line16.mass, np.full(line16.mass.size, -1.0)))
        assert report.iterations == 2
        assert report.increment_norms[-1] == 0.0

    @pytest.mark.parametrize("field, value", [("r", 0.0), ("m", -1.0)])
    def test_invalid_constants(self, line8, field, value):
        kwargs = dict(fo=line8.fo, mass=line8.mass, f=constant_source(0.0), c_f=lambda r: 0.0,
                      M_f=lambda r: 0.0, r=1.0, m=1.0)
        kwargs[field] = value
        with pytest.raises(InvalidConstants):
            SemilinearProblem(**kwargs)


class TestAprioriBound:

    @pytest.fixture(scope="class")
    def problem(self):
        return instantiate("semilinear_poisson_2d", h=1 / 32, r=1.0)

    def test_instantiated_shape_at_h_1_32(self, problem):
        K_A = problem.fo.inv_estimate
        c_u = 0.5
        for k in (0, 1, 5, 20):
            expected = (c_u * (1 / 32) ** 4
                        + (1 / math.pi ** 2) ** k / (2 * math.pi ** 2 - 2) * (K_A * 32 ** 2 + 2.0))
            got = elliptic_apriori_bound(problem, k, 1 / 32, K_A * 32 ** 2, c_u, nu=4.0, mu_G=1.0)
            assert got == pytest.approx(expected, rel=1e-12)

    def test_monotone_in_k_with_discretization_floor(self, problem):
        bounds = [elliptic_apriori_bound(problem, k, 1 / 32, 1e4, 0.3) for k in range(40)]
        assert all(b <= a for a, b in zip(bounds, bounds[1:]))
        assert bounds[-1] == pytest.approx(0.3 * (1 / 32) ** 2, rel=1e-6)

    def test_rejects_negative_inputs(self, problem):
        with pytest.raises(InvalidConstants):
            elliptic_apriori_bound(problem, -1, 1 / 32, 1.0, 0.0)
        with pytest.raises(InvalidConstants):
            elliptic_apriori_bound(problem, 1, 1 / 32, 1.0, -1.0)
