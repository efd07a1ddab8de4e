import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from orliczflow.convex_ops import (
    GradientOperator,
    check_envelope_gradient,
    envelope,
    inner_tolerance,
    resolvent,
    verify_resolvent_identities,
    yosida,
)
from orliczflow.modular_core import GridMismatchError, uniform_grid_1d, uniform_grid_2d
from orliczflow.pde_instances import InstanceConfig, build_problem


def test_quadratic_resolvent_and_yosida(quadratic_zero_order, rng):
    u = quadratic_zero_order.random_state(rng)
    for lam in (0.01, 0.5, 2.0):
        result = resolvent(quadratic_zero_order, u, lam)
        assert result.method == "prox"
        assert_allclose(result.J_lambda_u.values, u / (1.0 + lam), rtol=1e-12, atol=1e-14)
        assert_allclose(yosida(quadratic_zero_order, u, lam).values, u / (1.0 + lam), rtol=1e-10, atol=1e-12)
        assert envelope(quadratic_zero_order, u, lam) == pytest.approx(
            quadratic_zero_order.inner(u, u) / (2.0 * (1.0 + lam)), rel=1e-10)


def test_resolvent_rejects_non_positive_lambda(heat_problem):
    u = np.zeros(heat_problem.size)
    for lam in (0.0, -1.0):
        with pytest.raises(ValueError):
            resolvent(heat_problem, u, lam)


def test_resolvent_rejects_wrong_shape(heat_problem):
    with pytest.raises(GridMismatchError):
        resolvent(heat_problem, np.zeros(heat_problem.size + 1), 0.1)


def test_inner_tolerance_tracks_lambda():
    assert inner_tolerance(1.0) == pytest.approx(1e-10)
    assert inner_tolerance(1e-6) == pytest.approx(1e-12)


FAMILY_FIXTURES = ["power_zero_order", "heat_problem", "double_phase_problem",
                   "reaction_diffusion_problem", "dynamic_boundary_problem"]


@pytest.mark.parametrize("fixture", FAMILY_FIXTURES)
def test_resolvent_identities_on_200_samples(request, rng, fixture):
    problem = request.getfixturevalue(fixture)
    report = verify_resolvent_identities(problem, n_trials=70, lambda_list=(1.0, 0.1, 0.01),
                                         rng=rng, check_young=False)
    assert report.passed, report.to_text()
    assert report.details["samples"][0] >= 200
    assert "young_equality" not in {r.name for r in report.residuals}
    assert np.all(report.details["envelope_gap_smallest_lambda"] >= -1e-8)


@pytest.mark.parametrize("fixture, n_trials", [
    ("power_zero_order", 70),
    ("heat_problem", 6),
    ("double_phase_problem", 4),
    ("reaction_diffusion_problem", 4),
    ("dynamic_boundary_problem", 4),
    ("kinked_nodal_problem", 3),
])
def test_resolvent_identities_with_young(request, rng, fixture, n_trials):
    problem = request.getfixturevalue(fixture)
    young_tol = 1e-8 if problem.is_separable else 1e-6
    report = verify_resolvent_identities(problem, n_trials=n_trials, lambda_list=(1.0, 0.1, 0.01),
                                         rng=rng, young_tol=young_tol)
    assert report.passed, report.to_text()
    assert report.get("young_equality").tolerance == young_tol


def test_resolvent_identities_at_kink(rng):
    problem = build_problem(InstanceConfig("zero_order", resolution=(17,), M={"family": "orlicz_exp", "p": 1.0}))
    assert problem.has_kink
    report = verify_resolvent_identities(problem, n_trials=70, rng=rng, young_tol=1e-8)
    assert report.passed, report.to_text()


def test_resolvent_at_kink_has_flat_region():
    problem = build_problem(InstanceConfig("zero_order", resolution=(17,), M={"family": "orlicz_exp", "p": 1.0}))
    u = np.full(problem.size, 0.05)
    result = resolvent(problem, u, 0.1)
    # |u| <= lambda * M'(0+) = 0.1 sends every node to the kink
    assert_allclose(result.J_lambda_u.values, 0.0, atol=0)
    assert_allclose(result.A_lambda_u.values, u / 0.1)


def test_kinked_nodal_term_uses_splitting(kinked_nodal_problem, rng):
    problem = kinked_nodal_problem
    assert problem.has_kink
    u = problem.random_state(rng, 2.0)
    result = resolvent(problem, u, 0.1)
    assert result.method == "splitting"
    assert result.residual_norm <= inner_tolerance(0.1) * (1.0 + problem.norm(u))
    assert_allclose(result.J_lambda_u.values[problem.pinned], 0.0, atol=0)


@pytest.mark.parametrize("lam", [0.02, 0.1, 1.0])
def test_kinked_resolvent_solves_inclusion(kinked_nodal_problem, rng, lam):
    problem = kinked_nodal_problem
    u = problem.random_state(rng, 0.3)
    result = resolvent(problem, u, lam)
    J = result.J_lambda_u.values
    _, _, kink = problem.nodal_prox_parts()
    defect = J + lam * problem.subgradient(J) - u
    at_kink = J == 0.0
    defect[at_kink] = np.maximum(np.abs(defect[at_kink]) - lam * kink[at_kink], 0.0)
    defect[problem.pinned] = 0.0
    assert problem.norm(defect) <= 1e-9 * (1.0 + problem.norm(u))


def test_boundary_kink_holds_trace_at_zero(kinked_boundary_problem):
    problem = kinked_boundary_problem
    x = problem.grid.nodes[:, 0]
    u = 0.5 + 0.5 * np.cos(np.pi * x)
    result = resolvent(problem, u, 0.1)
    assert result.method == "splitting"
    assert result.residual_norm <= inner_tolerance(0.1) * (1.0 + problem.norm(u))
    # u vanishes at x = 1, well inside lambda * M_boundary'(0+)
    assert result.J_lambda_u.values[-1] == 0.0
    assert result.J_lambda_u.values[0] > 0.0


def test_kinked_gradient_energy_rejected():
    with pytest.raises(ValueError, match="differentiable"):
        build_problem(InstanceConfig("musielak_sobolev", resolution=(9,), M={"family": "orlicz_exp", "p": 1.0}))


def test_newton_resolvent_residual(heat_problem, rng):
    u = heat_problem.random_state(rng)
    result = resolvent(heat_problem, u, 0.05)
    assert result.method == "newton"
    J = result.J_lambda_u.values
    residual = J + 0.05 * heat_problem.subgradient(J) - u
    residual[heat_problem.pinned] = 0.0
    assert heat_problem.norm(residual) <= 1e-8 * (1.0 + heat_problem.norm(u))


def test_envelope_gradient_is_yosida(heat_problem, double_phase_problem, rng):
    for problem in (heat_problem, double_phase_problem):
        u = problem.random_state(rng)
        report = check_envelope_gradient(problem, u, 0.1, rng)
        assert report.passed, report.to_text()


def test_gradient_adjoint_identity(rng):
    for grid in (uniform_grid_1d(9), uniform_grid_2d(5, 6)):
        G = GradientOperator(grid)
        u = rng.standard_normal(grid.size)
        flux = rng.standard_normal((G.n_samples, grid.dim))
        lhs = float(np.sum(G.sample_weights[:, None] * G.apply(u) * flux))
        assert lhs == pytest.approx(float(np.dot(u, G.adjoint(flux))), rel=1e-12, abs=1e-12)


def test_gradient_of_linear_function_is_exact():
    grid = uniform_grid_2d(5, 4, (0.0, 2.0), (0.0, 1.0))
    G = GradientOperator(grid)
    u = 3.0 * grid.nodes[:, 0] - 2.0 * grid.nodes[:, 1]
    g = G.apply(u)
    assert_allclose(g[:, 0], 3.0, rtol=1e-12)
    assert_allclose(g[:, 1], -2.0, rtol=1e-12)
    assert_allclose(G.to_samples @ np.ones(grid.size), 1.0)


def test_evaluate_enforces_pins(heat_problem, rng):
    u = heat_problem.random_state(rng)
    assert math.isfinite(heat_problem.evaluate(u))
    u[0] = 1e-3
    assert math.isinf(heat_problem.evaluate(u))


def test_heat_energy_is_dirichlet_integral():
    problem = build_problem(InstanceConfig("classical_variational", resolution=(33,)))
    x = problem.grid.nodes[:, 0]
    u = x * (1.0 - x)
    # sum h |forward difference|^2 / 2 equals int (1 - 2x)^2 / 2 = 1/6 up to the midpoint error
    assert problem.evaluate(u) == pytest.approx(1.0 / 6.0, rel=2e-3)


def test_subgradient_split_recombines(double_phase_problem, rng):
    u = double_phase_problem.random_state(rng)
    xi1, xi2 = double_phase_problem.subgradient_split(u)
    combined = xi1 - double_phase_problem.divergence(xi2)
    combined[double_phase_problem.pinned] = 0.0
    assert_allclose(combined, double_phase_problem.subgradient(u), rtol=1e-10, atol=1e-10)


def test_separable_conjugate_matches_young(power_zero_order, rng):
    u = power_zero_order.random_state(rng)
    xi = power_zero_order.subgradient(u)
    young = power_zero_order.inner(xi, u) - power_zero_order.evaluate(u) - power_zero_order.conjugate(xi)
    assert abs(young) < 1e-10


def test_coercivity_reports(heat_problem, power_zero_order, rng):
    for problem in (heat_problem, power_zero_order):
        assert problem.coercivity is not None
        report = problem.check_coercivity(rng)
        assert report.passed, report.to_text()
