import numpy as np
import pytest
from numpy.testing import assert_allclose

from orliczflow.flow_solver import mode_shape, solve_implicit_euler
from orliczflow.mollify_lab import (
    MollifierKernel,
    MollifierResolutionError,
    chain_rule_check,
    interior_mask,
    jensen_check,
    manufactured_path,
    mollify,
    sub_markov_check,
)

TIMES = np.linspace(0.0, 0.5, 51)


@pytest.mark.parametrize("n", [1.0, 10.0, 250.0])
def test_kernel_properties(n):
    report = MollifierKernel(n).check_properties()
    assert report.passed, report.to_text()
    assert MollifierKernel(n).radius == pytest.approx(1.0 / n)


def test_kernel_rejects_bad_scale():
    with pytest.raises(ValueError):
        MollifierKernel(0.0)


def test_weights_need_fine_grid():
    kernel = MollifierKernel(10.0)
    with pytest.raises(MollifierResolutionError):
        kernel.weights(0.03)
    with pytest.raises(MollifierResolutionError):
        mollify(np.ones(11), np.linspace(0.0, 0.5, 11), 10.0)


def test_weights_are_normalized_and_even():
    w = MollifierKernel(10.0).weights(0.01)
    assert w.size % 2 == 1
    assert w.sum() == pytest.approx(1.0, abs=1e-14)
    assert np.all(w >= 0)
    assert_allclose(w, w[::-1], rtol=0, atol=1e-16)


def test_constants_are_preserved_away_from_the_ends():
    smoothed = mollify(np.full(TIMES.size, 3.0), TIMES, 10.0)
    mask = interior_mask(TIMES, 10.0)
    assert mask.sum() == 31
    assert_allclose(smoothed[mask], 3.0, rtol=1e-13)
    # zero extension pulls the ends down
    assert smoothed[0] < 3.0


def test_mollify_acts_along_time_axis(rng):
    path = rng.standard_normal((TIMES.size, 4))
    smoothed = mollify(path, TIMES, 10.0)
    assert smoothed.shape == path.shape
    assert_allclose(smoothed[:, 2], mollify(path[:, 2], TIMES, 10.0))


def test_sub_markov(rng):
    signal = rng.uniform(0.0, 1.0, TIMES.size)
    report = sub_markov_check(signal, TIMES, 10.0)
    assert report.passed, report.to_text()
    assert [r.name for r in report.residuals] == ["order_interval", "l1_contraction"]

    report = sub_markov_check(4.0 * rng.standard_normal(TIMES.size), TIMES, 10.0)
    assert [r.name for r in report.residuals] == ["l1_contraction"]
    assert report.passed


@pytest.mark.parametrize("fixture", ["power_zero_order", "heat_problem", "double_phase_problem"])
def test_jensen_along_trajectories(request, fixture):
    problem = request.getfixturevalue(fixture)
    traj = solve_implicit_euler(problem, mode_shape(problem.grid, 1), None, 0.01, 0.5)
    report = jensen_check(problem, traj.states, traj.times, 10.0)
    assert report.passed, report.to_text()
    assert [r.name for r in report.residuals] == ["jensen_alpha_0.25", "jensen_alpha_0.5", "jensen_alpha_1"]


def _manufactured_residual(problem, steps, exact):
    times = np.linspace(0.0, 1.0, steps + 1)
    w = np.linspace(-1.0, 1.0, problem.size)
    path = manufactured_path(times, np.exp, np.exp, w)
    if not exact:
        path.derivatives = None
    report = chain_rule_check(problem, path)
    assert report.passed, report.to_text()
    return report.details["max_residual"][0]


def test_manufactured_chain_rule_is_second_order_with_derivative(quadratic_zero_order):
    coarse = _manufactured_residual(quadratic_zero_order, 50, exact=True)
    fine = _manufactured_residual(quadratic_zero_order, 100, exact=True)
    assert coarse / fine == pytest.approx(4.0, rel=0.05)


def test_manufactured_chain_rule_is_first_order_with_differences(quadratic_zero_order):
    coarse = _manufactured_residual(quadratic_zero_order, 50, exact=False)
    fine = _manufactured_residual(quadratic_zero_order, 100, exact=False)
    assert coarse / fine == pytest.approx(2.0, rel=0.05)


def test_trajectory_chain_rule_halves_with_tau(quadratic_zero_order, rng):
    u0 = quadratic_zero_order.random_state(rng)
    residuals = []
    for tau in (0.02, 0.01):
        traj = solve_implicit_euler(quadratic_zero_order, u0, None, tau, 1.0)
        report = chain_rule_check(quadratic_zero_order, traj)
        assert report.passed, report.to_text()
        residuals.append(report.details["max_residual"][0])
    assert residuals[0] / residuals[1] == pytest.approx(2.0, rel=0.05)


def _total_variation(signal):
    padded = np.concatenate([[0.0], signal, [0.0]])
    return float(np.sum(np.abs(np.diff(padded))))


@pytest.mark.parametrize("n", [5.0, 20.0, 80.0, 200.0])
def test_mollified_step_does_not_gain_variation(n):
    times = np.linspace(0.0, 1.0, 1001)
    step = np.where((times >= 0.3) & (times < 0.6), 1.0, 0.0)
    noisy = step + 0.1 * np.random.default_rng(12).standard_normal(times.size)
    for signal in (step, noisy):
        smoothed = mollify(signal, times, n)
        assert _total_variation(smoothed) <= _total_variation(signal) + 1e-12
    smoothed = mollify(step, times, n)
    assert np.all(smoothed >= -1e-15) and np.all(smoothed <= 1.0 + 1e-15)


def test_mollified_path_converges_in_l1():
    times = np.linspace(0.0, 1.0, 1001)
    dt = times[1] - times[0]
    v = np.sin(2.0 * np.pi * times) + times ** 2
    errors = [dt * np.sum(np.abs(mollify(v, times, n) - v)) for n in (5.0, 10.0, 20.0, 40.0, 80.0, 160.0)]
    assert np.all(np.diff(errors) < 0)
    assert errors[-1] < 5e-3
