"""
Tests for Picard local solutions, the discrete semigroup and the reference exponential
"""

import dataclasses
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import evolution
from errors import (
    BallEscape,
    CertificateFailure,
    DegenerateProblem,
    IndexOutOfWindow,
    MissingConstants,
    NotContractive,
    WindowExceedsDelta,
)
from evolution import (
    EvolutionProblem,
    contractive_semigroup_check,
    decay_rate_bracket,
    delta_existence,
    integration_window,
    linear_generator,
    lipschitz_constants,
    picard_error_bound,
    picard_solve,
    semigroup_reference,
    semigroup_step,
    semigroup_step_compose,
    simpson_budget,
)
from mesh_basis import discrete_norm, gram_from_matrix
from operator_factory import DiscreteOperator, assemble_operator
from problems import initial_state, instantiate
from spectral import spectral_bracketing


def exponential_surrogate(r=3.0):
    """u' = u on the ball of radius r: c_g = 1, M_g = r, δ = 1"""
    return EvolutionProblem(f=lambda u: u, c_f=lambda r: 1.0, M_f=lambda r: r, r=r, name="surrogate")


def truncated_exponential(t, k):
    return sum(t ** j / math.factorial(j) for j in range(k + 1))


@pytest.fixture(scope="module")
def heat():
    return instantiate("heat_1d", h=1 / 16)


@pytest.fixture(scope="module")
def surrogate_solution():
    return picard_solve(exponential_surrogate(), np.array([1.0]), k=6, dt=0.01, window=(0.0, 0.5))


class TestConstants:

    def test_heat_constants(self, heat):
        constants = lipschitz_constants(heat)
        mu_AI = heat.fo.mu_AI
        assert constants["M_D"] == 1.0 and constants["c_D"] == 0.0
        assert constants["c_g"] == pytest.approx(mu_AI)
        assert constants["M_g"] == pytest.approx(heat.r * mu_AI)
        assert delta_existence(heat) == pytest.approx((1 / 16) ** 2 / heat.fo.inv_estimate, rel=1e-12)

    def test_unit_generator_gives_unit_delta(self, line8):
        fo = dataclasses.replace(line8.fo, mu_AI=1.0)
        assert delta_existence(EvolutionProblem(fo=fo, r=1.0)) == 1.0

    def test_nls_delta(self):
        h, r = 1 / 16, 1.0
        p = instantiate("nls_1d", h=h, r=r)
        K_a, mu_G = p.fo.inv_estimate, p.mass.space_volume
        expected = min(1.0 / (K_a / h ** 2 + 3 * r ** 2 * mu_G), 1.0 / (K_a / h ** 2 + r ** 2))
        assert delta_existence(p) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("r", [0.5, 1.0])
    def test_nonlinear_diffusion_delta(self, r):
        h = 1 / 16
        p = instantiate("nonlinear_diffusion_1d", h=h, r=r)
        constants = lipschitz_constants(p)
        assert constants["M_D"] == pytest.approx(r * r)
        assert constants["c_D"] == pytest.approx(2 * r)
        assert delta_existence(p) == pytest.approx(h ** 2 / (3 * r ** 2 * p.fo.inv_estimate), rel=1e-12)

    def test_zero_rhs_has_unbounded_delta(self):
        assert delta_existence(EvolutionProblem()) == math.inf

    def test_window_is_safety_scaled(self, heat):
        assert integration_window(heat, 0.5) == pytest.approx(0.5 * delta_existence(heat))
        with pytest.raises(ValueError):
            integration_window(heat, 1.5)

    def test_missing_lipschitz_model(self):
        with pytest.raises(MissingConstants):
            lipschitz_constants(EvolutionProblem(f=lambda u: u, c_f=None))

    @pytest.mark.parametrize("kwargs", [{"r": 0.0}, {"scale": 0.0}])
    def test_degenerate_problem(self, kwargs):
        with pytest.raises(DegenerateProblem):
            EvolutionProblem(**kwargs)


class TestPicardBound:

    def test_depth_zero(self):
        assert picard_error_bound(0, 1.0, 3.0, 0.5) == pytest.approx(3.0)

    def test_decreasing_in_depth(self):
        bounds = [picard_error_bound(k, 1.0, 3.0, 0.5) for k in range(12)]
        assert all(b < a for a, b in zip(bounds, bounds[1:]))

    def test_discretization_term(self):
        plain = picard_error_bound(3, 1.0, 1.0, 0.25)
        assert picard_error_bound(3, 1.0, 1.0, 0.25, c_u=2.0, h=0.1) == pytest.approx(plain + 0.02)

    def test_not_contractive(self):
        with pytest.raises(NotContractive):
            picard_error_bound(1, 2.0, 1.0, 0.5)


class TestPicardSolve:

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_surrogate_matches_truncated_series(self, k):
        sol = picard_solve(exponential_surrogate(), np.array([1.0]), k=k, dt=0.01, window=(0.0, 0.5))
        assert sol.steps == 50
        assert_allclose(sol.trajectory[:, 0], truncated_exponential(sol.time_grid, k), rtol=1e-13)

    @pytest.mark.parametrize("k", range(1, 9))
    def test_surrogate_error_under_bound(self, k):
        sol = picard_solve(exponential_surrogate(), np.array([1.0]), k=k, dt=0.01, window=(0.0, 0.5))
        error = abs(sol.trajectory[-1, 0] - math.exp(sol.time_grid[-1]))
        assert error <= sol.bound_at_k() + simpson_budget(sol)

    def test_zero_rhs_keeps_the_start(self):
        u0 = np.array([0.3, -0.2])
        sol = picard_solve(EvolutionProblem(), u0, k=3, dt=0.1, window=(0.0, 1.0))
        assert_allclose(sol.trajectory, np.broadcast_to(u0, sol.trajectory.shape))
        assert sol.sup_increment == 0.0

    def test_zero_rhs_needs_a_window(self):
        with pytest.raises(DegenerateProblem):
            picard_solve(EvolutionProblem(), np.zeros(2), k=1, dt=0.1)

    def test_window_beyond_delta(self):
        with pytest.raises(WindowExceedsDelta):
            picard_solve(exponential_surrogate(), np.array([1.0]), k=2, dt=0.01, window=(0.0, 0.95))

    def test_window_outside_delta_interval(self):
        with pytest.raises(WindowExceedsDelta):
            picard_solve(exponential_surrogate(), np.array([1.0]), k=2, dt=0.01, window=(0.5, 1.3))
        with pytest.raises(WindowExceedsDelta):
            picard_solve(exponential_surrogate(), np.array([1.0]), k=2, dt=0.01, window=(-0.95, -0.5))

    def test_window_may_start_before_zero(self):
        sol = picard_solve(exponential_surrogate(), np.array([1.0]), k=6, dt=0.01, window=(-0.4, 0.4))
        assert sol.time_grid[0] == -0.4
        assert np.max(np.abs(sol.time_grid)) < sol.delta
        assert sol.trajectory[-1][0] == pytest.approx(math.exp(0.8), rel=1e-4)

    def test_start_outside_ball(self):
        with pytest.raises(BallEscape):
            picard_solve(exponential_surrogate(r=1.0), np.array([1.5]), k=2, dt=0.01, window=(0.0, 0.5))

    def test_escape_can_be_flagged(self):
        p = exponential_surrogate(r=1.2)
        sol = picard_solve(p, np.array([1.0]), k=4, dt=0.01, window=(0.0, 0.4), on_escape="flag")
        assert not sol.confined
        assert sol.time_grid[sol.escape_index] == pytest.approx(math.log(1.2), abs=0.02)
        with pytest.raises(BallEscape):
            picard_solve(p, np.array([1.0]), k=4, dt=0.01, window=(0.0, 0.4))

    def test_heat_against_exponential_reference(self, heat):
        u0 = initial_state(heat)
        window = integration_window(heat)
        A = linear_generator(heat)
        for k in (2, 4, 8):
            sol = picard_solve(heat, u0, k=k, dt=window / 200)
            reference = semigroup_reference(A, u0, sol.time_grid[-1])
            error = discrete_norm(sol.trajectory[-1] - reference, heat.mass)
            assert error <= sol.bound_at_k() + simpson_budget(sol)

    def test_threaded_sweeps_agree(self, heat):
        u0 = initial_state(heat)
        dt = integration_window(heat) / 40
        serial = picard_solve(heat, u0, k=3, dt=dt)
        threaded = picard_solve(heat, u0, k=3, dt=dt, workers=4)
        assert_array_equal(serial.trajectory, threaded.trajectory)

    def test_nls_conserves_mass(self):
        p = instantiate("nls_1d", h=1 / 16)
        u0 = initial_state(p)
        assert np.iscomplexobj(u0)
        sol = picard_solve(p, u0, k=12, dt=integration_window(p) / 200)
        assert sol.confined
        assert sol.mass_drift() <= 1e-6

    def test_nonlinear_diffusion_stays_in_ball(self):
        p = instantiate("nonlinear_diffusion_1d", h=1 / 16)
        sol = picard_solve(p, initial_state(p), k=6, dt=integration_window(p) / 100)
        assert sol.confined
        assert discrete_norm(sol.trajectory[-1], p.mass) <= discrete_norm(sol.trajectory[0], p.mass)

    def test_summary_keys(self, surrogate_solution):
        summary = surrogate_solution.summary()
        assert summary["k"] == 6 and summary["steps"] == 50
        assert summary["confined"] is True


class TestSemigroup:

    def test_zero_step_is_identity(self, surrogate_solution):
        x = np.array([0.7])
        assert_array_equal(semigroup_step(surrogate_solution, 0, x), x)
        assert_array_equal(semigroup_step_compose(surrogate_solution, 0, 5), semigroup_step(surrogate_solution, 5))

    @pytest.mark.parametrize("n", [0, 1, 25, 50])
    def test_steps_read_the_stored_iterate(self, surrogate_solution, n):
        assert_array_equal(semigroup_step(surrogate_solution, n), surrogate_solution.trajectory[n])
        assert_array_equal(semigroup_step(surrogate_solution, n, np.array([1.0])), surrogate_solution.trajectory[n])

    @pytest.mark.parametrize("m, n", [(1, 2), (3, 4), (10, 15)])
    def test_composition(self, surrogate_solution, m, n):
        assert_allclose(semigroup_step_compose(surrogate_solution, m, n),
                        surrogate_solution.trajectory[m + n], rtol=1e-6)

    def test_commutes(self, surrogate_solution):
        assert_allclose(semigroup_step_compose(surrogate_solution, 1, 2),
                        semigroup_step_compose(surrogate_solution, 2, 1), rtol=1e-6)

    def test_step_from_another_state(self, surrogate_solution):
        assert_allclose(semigroup_step(surrogate_solution, 20, np.array([0.5])), 0.5 * math.exp(0.2), rtol=1e-6)

    def test_tracks_exponential(self, surrogate_solution):
        error = abs(semigroup_step(surrogate_solution, 50)[0] - math.exp(0.5))
        assert error <= surrogate_solution.bound_at_k() + simpson_budget(surrogate_solution)

    def test_out_of_window(self, surrogate_solution):
        with pytest.raises(IndexOutOfWindow):
            semigroup_step(surrogate_solution, 51)
        with pytest.raises(IndexOutOfWindow):
            semigroup_step_compose(surrogate_solution, 30, 21)


class TestReference:

    @pytest.fixture(scope="class")
    def identity(self):
        return gram_from_matrix(np.eye(2), label="identity")

    def test_zero_generator(self, identity):
        A = DiscreteOperator(matrix=np.zeros((2, 2)), domain_gram=identity, codomain_gram=identity)
        assert_allclose(semigroup_reference(A, np.array([1.0, -2.0]), 3.0), [1.0, -2.0])

    def test_duhamel_with_zero_generator(self, identity):
        A = DiscreteOperator(matrix=np.zeros((2, 2)), domain_gram=identity, codomain_gram=identity)
        value = semigroup_reference(A, np.zeros(2), 1.0, forcing=lambda tau: np.array([tau ** 2, 1.0]))
        assert_allclose(value, [1.0 / 3.0, 1.0], rtol=1e-12)

    def test_duhamel_scalar_decay(self, identity):
        A = DiscreteOperator(matrix=-np.eye(2), domain_gram=identity, codomain_gram=identity)
        value = semigroup_reference(A, np.zeros(2), 2.0, forcing=lambda tau: np.ones(2))
        assert_allclose(value, 1.0 - math.exp(-2.0), rtol=1e-7)

    def test_heat_semigroup_is_contractive(self, heat):
        report = contractive_semigroup_check(linear_generator(heat), initial_state(heat))
        assert report.ok
        lambda_min = spectral_bracketing(assemble_operator(heat.fo), heat.mass).lambda_min
        assert report.decay_rate == pytest.approx(lambda_min, rel=1e-8)

    def test_decay_rate_bracket(self, heat):
        A = linear_generator(heat)
        spectrum = spectral_bracketing(assemble_operator(heat.fo), heat.mass)
        for t in (0.01, 0.05, 0.1):
            check = decay_rate_bracket(A, initial_state(heat), t, spectrum.lambda_min, spectrum.lambda_max)
            assert check["ok"]

    def test_violated_decay(self, heat):
        with pytest.raises(CertificateFailure):
            semigroup_reference(linear_generator(heat), initial_state(heat), 0.05, decay_rate=1e3)

    def test_decay_checked_by_default_for_dissipative_generators(self, heat, monkeypatch):
        A = linear_generator(heat)
        u0 = initial_state(heat)
        semigroup_reference(A, u0, 0.05)
        exact = evolution._propagator
        monkeypatch.setattr(evolution, "_propagator", lambda B, t: 2.0 * exact(B, t))
        with pytest.raises(CertificateFailure):
            semigroup_reference(A, u0, 0.05)

    def test_growing_generator_is_not_decay_checked(self, identity):
        A = DiscreteOperator(matrix=np.eye(2), domain_gram=identity, codomain_gram=identity)
        assert_allclose(semigroup_reference(A, np.array([1.0, 0.0]), 1.0), [math.e, 0.0], rtol=1e-12)
