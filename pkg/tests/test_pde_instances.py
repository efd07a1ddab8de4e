import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate, optimize

from orliczflow.convex_ops import resolvent
from orliczflow.flow_solver import mode_shape, solve_implicit_euler
from orliczflow.pde_instances import (
    FAMILIES,
    InstanceConfig,
    build_problem,
    check_growth_conditions,
    quadratic_eigenpairs,
)
from orliczflow.phi_library import Family, conjugate_eval, eval_phi


def test_heat_eigenmode_decays_exactly():
    problem = build_problem(InstanceConfig("classical_variational", resolution=(64,)))
    mu, vectors = quadratic_eigenpairs(problem)
    assert np.all(np.diff(mu) >= 0)
    assert mu[0] == pytest.approx(math.pi ** 2, rel=1e-2)
    tau = 0.01
    u = vectors[:, 0]
    for _ in range(5):
        u_next = resolvent(problem, u, tau).J_lambda_u.values
        assert_allclose(u_next, u / (1.0 + tau * mu[0]), rtol=1e-8, atol=1e-12)
        u = u_next


def test_eigenvectors_are_h_orthonormal():
    problem = build_problem(InstanceConfig("classical_variational", resolution=(17,)))
    _, vectors = quadratic_eigenpairs(problem)
    gram = vectors.T @ (problem.mass[:, None] * vectors)
    assert_allclose(gram, np.eye(gram.shape[0]), atol=1e-10)
    assert_allclose(vectors[problem.pinned], 0.0)


def test_heat_coercivity_from_first_eigenvalue(heat_problem):
    c, s = heat_problem.coercivity
    mu, _ = quadratic_eigenpairs(heat_problem)
    assert s == 2.0
    assert c == pytest.approx(0.5 * mu[0], rel=1e-9)


@pytest.mark.parametrize("family", FAMILIES)
def test_every_family_builds(family):
    cfg = {
        "reaction_diffusion": InstanceConfig(family, resolution=(9,), M={"family": "power", "p": 2.0},
                                             N={"family": "power", "p": 3.0}),
        "zero_order": InstanceConfig(family, resolution=(9,), M={"family": "llogl"}),
        "musielak_sobolev": InstanceConfig(family, resolution=(9,),
                                           M={"family": "variable_exponent", "p_field": {"linear": [2.0, 3.0]}}),
        "dynamic_boundary": InstanceConfig(family, resolution=(9,), M={"family": "power", "p": 3.0},
                                           M_boundary={"family": "power", "p": 2.0, "normalized": True}),
        "classical_variational": InstanceConfig(family, resolution=(9,)),
    }[family]
    problem = build_problem(cfg)
    assert problem.size == 9
    u = problem.random_state(np.random.default_rng(5))
    assert math.isfinite(problem.evaluate(u))
    assert problem.evaluate(np.zeros(problem.size)) == 0.0


def test_boundary_treatment():
    heat = build_problem(InstanceConfig("classical_variational", resolution=(9,)))
    assert list(np.flatnonzero(heat.pinned)) == [0, 8]
    zero_order = build_problem(InstanceConfig("zero_order", resolution=(9,), M={"family": "quadratic"}))
    assert not np.any(zero_order.pinned)
    assert zero_order.is_separable


def test_reaction_diffusion_needs_exponents_at_least_two():
    with pytest.raises(ValueError):
        build_problem(InstanceConfig("reaction_diffusion", resolution=(9,), M={"family": "power", "p": 1.5},
                                     N={"family": "power", "p": 3.0}))
    with pytest.raises(ValueError):
        build_problem(InstanceConfig("reaction_diffusion", resolution=(9,), M={"family": "power", "p": 2.0}))


def test_dynamic_boundary_product_mass():
    problem = build_problem(InstanceConfig("dynamic_boundary", resolution=(9,), M={"family": "power", "p": 3.0},
                                           M_boundary={"family": "power", "p": 2.0}))
    grid = problem.grid
    assert problem.mass.sum() == pytest.approx(grid.weights.sum() + grid.boundary_weights.sum())
    assert problem.mass[0] == pytest.approx(grid.weights[0] + 1.0)
    assert not problem.is_separable
    labels = [term.label for term in problem.nodal_terms]
    assert labels == ["M", "M_boundary"]
    # a constant state pays the bulk term and the boundary term, no gradient energy
    u = np.full(problem.size, 2.0)
    assert problem.evaluate(u) == pytest.approx(8.0 + 2 * 4.0)


def test_dynamic_boundary_on_rectangle():
    problem = build_problem(InstanceConfig("dynamic_boundary", resolution=(5, 5), extents=((0, 1), (0, 1)),
                                           M={"family": "quadratic"}, M_boundary={"family": "quadratic"}))
    assert problem.grid.dim == 2
    assert problem.mass.sum() == pytest.approx(1.0 + 4.0)


def test_two_dimensional_heat():
    problem = build_problem(InstanceConfig("classical_variational", resolution=(9, 9), extents=((0, 1), (0, 1))))
    assert problem.pinned.sum() == 32
    mu, _ = quadratic_eigenpairs(problem)
    assert mu[0] == pytest.approx(2.0 * math.pi ** 2, rel=0.05)


def test_single_node_problem():
    problem = build_problem(InstanceConfig("zero_order", resolution=(1,), M={"family": "power", "p": 4.0}))
    assert problem.size == 1
    assert problem.evaluate(np.array([2.0])) == pytest.approx(16.0)
    with pytest.raises(ValueError):
        build_problem(InstanceConfig("classical_variational", resolution=(1,)))


def test_unknown_family_and_bad_geometry():
    with pytest.raises(ValueError, match="Unknown instance family"):
        InstanceConfig("porous_medium")
    with pytest.raises(ValueError):
        InstanceConfig("zero_order", resolution=(2,), M={"family": "quadratic"})
    with pytest.raises(ValueError):
        InstanceConfig("zero_order", resolution=(9, 9), M={"family": "quadratic"})


def test_missing_energy_piece():
    with pytest.raises(ValueError, match="required"):
        build_problem(InstanceConfig("zero_order", resolution=(9,)))


def test_growth_conditions(double_phase_problem):
    report = check_growth_conditions(double_phase_problem)
    assert report.passed, report.to_text()
    c1, c2 = report.details["grad_constants"]
    assert c1 > 0 and math.isfinite(c2)


def test_coercivity_override():
    problem = build_problem(InstanceConfig("zero_order", resolution=(9,), M={"family": "llogl"},
                                           coercivity=(0.01, 2.0)))
    assert problem.coercivity == (0.01, 2.0)
    problem = build_problem(InstanceConfig("zero_order", resolution=(9,), M={"family": "llogl"}))
    assert problem.coercivity is None
    assert problem.nodal_terms[0].spec.family is Family.LLOGL


def test_reaction_diffusion_energy_is_non_increasing(reaction_diffusion_problem):
    problem = reaction_diffusion_problem
    u0 = 2.0 * mode_shape(problem.grid, 1)
    traj = solve_implicit_euler(problem, u0, None, tau=0.01, T_final=0.2)
    energy = np.array([problem.evaluate(u) for u in traj.states])
    assert np.all(np.diff(energy) <= 1e-12 * (1.0 + energy[:-1]))
    assert energy[-1] < energy[0]


def _explicit_exp_decay(u0, dt, steps, every):
    """Fine explicit Euler for u' = -2u exp(u^2), sampled every `every` steps"""
    u = u0
    samples = [u]
    for k in range(1, steps + 1):
        u -= dt * 2.0 * u * math.exp(u * u)
        if k % every == 0:
            samples.append(u)
    return np.array(samples)


def test_single_node_exponential_matches_ode():
    problem = build_problem(InstanceConfig("zero_order", resolution=(1,), M={"family": "orlicz_exp", "p": 2.0}))
    T, dt = 0.5, 1e-5
    errors = []
    for tau in (2e-3, 1e-3):
        traj = solve_implicit_euler(problem, np.array([0.8]), None, tau=tau, T_final=T)
        every = int(round(tau / dt))
        oracle = _explicit_exp_decay(0.8, dt, int(round(T / dt)), every)
        errors.append(np.max(np.abs(traj.states[:, 0] - oracle)))
    assert errors[1] < 5e-3
    assert 1.6 < errors[0] / errors[1] < 2.4


def test_variable_exponent_subgradients_satisfy_young():
    problem = build_problem(InstanceConfig("zero_order", resolution=(17,),
                                           M={"family": "variable_exponent", "p_field": {"linear": [2.0, 4.0]}}))
    spec = problem.nodal_terms[0].spec
    u0 = np.random.default_rng(9).uniform(-1.5, 1.5, problem.size)
    traj = solve_implicit_euler(problem, u0, None, tau=0.05, T_final=0.25)
    for u, xi in zip(traj.states[1:], traj.subgradients):
        gap = xi * u - np.asarray(eval_phi(spec, None, u)) - np.asarray(conjugate_eval(spec, None, xi))
        assert np.max(np.abs(gap)) < 1e-8


def test_dynamic_boundary_norm_decays(dynamic_boundary_problem):
    problem = dynamic_boundary_problem
    x = problem.grid.nodes[:, 0]
    traj = solve_implicit_euler(problem, 1.0 + 0.5 * np.cos(np.pi * x), None, tau=0.02, T_final=0.4)
    norms = np.sqrt((traj.states ** 2) @ problem.mass)
    assert np.all(np.diff(norms) < 0)


def _boundary_exp_rhs(n):
    """Semi-discrete heat flow with quadratic bulk term and exp(|u|) - 1 on both trace nodes"""
    h = 1.0 / (n - 1)
    weights = np.full(n, h)
    weights[[0, -1]] = h / 2
    mass = weights.copy()
    mass[[0, -1]] += 1.0

    def rhs(t, u):
        diff = np.diff(u) / h
        force = weights * u
        force[:-1] -= diff
        force[1:] += diff
        ends = u[[0, -1]]
        force[[0, -1]] += np.sign(ends) * np.exp(np.abs(ends))
        return -force / mass

    return rhs


def test_boundary_exponential_converges_to_ode_reference(kinked_boundary_problem):
    problem = kinked_boundary_problem
    x = problem.grid.nodes[:, 0]
    u0 = 1.0 + 0.5 * np.cos(np.pi * x)
    T = 0.1
    reference = integrate.solve_ivp(_boundary_exp_rhs(problem.size), (0.0, T), u0, method="Radau",
                                    t_eval=[T], rtol=1e-10, atol=1e-12).y[:, -1]
    finals = {}
    for tau in (0.005, 0.0025, 0.00125):
        traj = solve_implicit_euler(problem, u0, None, tau=tau, T_final=T)
        finals[tau] = traj.states[-1]
    # the trace stays positive, away from the kink
    assert np.all(finals[0.00125][[0, -1]] > 0.2)
    errors = [np.max(np.abs(finals[tau] - reference)) for tau in (0.005, 0.0025, 0.00125)]
    assert 1.6 < errors[0] / errors[1] < 2.4
    assert 1.6 < errors[1] / errors[2] < 2.4
    extrapolated = 2.0 * finals[0.00125] - finals[0.0025]
    assert np.max(np.abs(extrapolated - reference)) < 1e-4


def test_p4_steps_match_direct_minimisation():
    problem = build_problem(InstanceConfig("classical_variational", resolution=(33,),
                                           M={"family": "power", "p": 4.0}))
    h = 1.0 / 32
    tau = 0.01
    traj = solve_implicit_euler(problem, mode_shape(problem.grid, 1), None, tau=tau, T_final=0.02)
    free = ~problem.pinned

    for k in (1, 2):
        previous = traj.states[k - 1][free]

        def step_energy(y):
            full = np.concatenate([[0.0], y, [0.0]])
            slopes = np.diff(full) / h
            return h * np.sum(slopes ** 4) / 4.0 + h * np.sum((y - previous) ** 2) / (2.0 * tau)

        result = optimize.minimize(step_energy, previous, method="Powell",
                                   options={"xtol": 1e-10, "ftol": 1e-15, "maxfev": 400000, "maxiter": 100000})
        assert_allclose(traj.states[k][free], result.x, atol=1e-3)


def test_heat_decay_is_second_order_in_space():
    tau, T = 0.01, 0.1
    K = int(round(T / tau))
    errors = []
    for n in (17, 33, 65):
        problem = build_problem(InstanceConfig("classical_variational", resolution=(n,)))
        shape = mode_shape(problem.grid, 1)
        traj = solve_implicit_euler(problem, shape, None, tau=tau, T_final=T)
        exact = (1.0 + tau * math.pi ** 2) ** (-K) * shape
        errors.append(np.max(np.abs(traj.states[-1] - exact)))
    assert 3.7 < errors[0] / errors[1] < 4.3
    assert 3.7 < errors[1] / errors[2] < 4.3


def test_symmetric_data_give_symmetric_trajectory(reaction_diffusion_problem):
    problem = reaction_diffusion_problem
    shape = mode_shape(problem.grid, 1) + 0.3 * mode_shape(problem.grid, 3)
    u0 = 0.5 * (shape + shape[::-1])
    traj = solve_implicit_euler(problem, u0, None, tau=0.01, T_final=0.1)
    assert_allclose(traj.states, traj.states[:, ::-1], rtol=0, atol=1e-11)


def test_symmetric_data_on_the_square():
    problem = build_problem(InstanceConfig("classical_variational", resolution=(9, 9), extents=((0, 1), (0, 1))))
    rng = np.random.default_rng(4)
    field = rng.standard_normal((9, 9))
    field = field + field[::-1, :] + field[:, ::-1] + field[::-1, ::-1]
    field[problem.pinned.reshape(9, 9)] = 0.0
    traj = solve_implicit_euler(problem, field.ravel(), None, tau=0.01, T_final=0.05)
    states = traj.states.reshape(-1, 9, 9)
    assert_allclose(states, states[:, ::-1, :], rtol=0, atol=1e-11)
    assert_allclose(states, states[:, :, ::-1], rtol=0, atol=1e-11)
