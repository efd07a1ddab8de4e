import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import optimize

from config import Config
from orliczflow import phi_library
from orliczflow.modular_core import luxemburg_norm, uniform_grid_1d
from orliczflow.phi_library import (
    Family,
    PhiSpec,
    check_delta2,
    check_nabla2,
    check_phi_battery,
    check_phi_conditions,
    classify_regime,
    compare_phi,
    conjugate_argmax,
    conjugate_eval,
    eval_phi,
    is_capped,
    pointwise_prox,
    subdiff,
)

N_FIELD = 11
A_FIELD = np.linspace(0.0, 1.0, N_FIELD)

SCALAR_SPECS = [
    PhiSpec(Family.QUADRATIC),
    PhiSpec(Family.POWER, p=1.5),
    PhiSpec(Family.POWER, p=3.0, normalized=True),
    PhiSpec(Family.ORLICZ_EXP, p=1.0),
    PhiSpec(Family.ORLICZ_EXP, p=2.0),
    PhiSpec(Family.LLOGL),
]

FIELD_SPECS = [
    PhiSpec(Family.VARIABLE_EXPONENT, p_field=np.linspace(1.5, 4.0, N_FIELD)),
    PhiSpec(Family.DOUBLE_PHASE, p=2.0, q=3.0, a_field=A_FIELD),
    PhiSpec(Family.WEIGHTED, p=2.5, w_field=1.0 + A_FIELD),
]

CLOSED_FORM = [
    PhiSpec(Family.QUADRATIC),
    PhiSpec(Family.POWER, p=1.5),
    PhiSpec(Family.POWER, p=3.0),
    PhiSpec(Family.POWER, p=4.0, normalized=True),
    PhiSpec(Family.ORLICZ_EXP, p=1.0),
    PhiSpec(Family.LLOGL),
]


@pytest.mark.parametrize("spec", SCALAR_SPECS, ids=lambda s: s.family.value)
def test_even_and_zero_at_origin(spec):
    z = np.linspace(-5.0, 5.0, 41)
    assert eval_phi(spec, None, 0.0) == 0.0
    assert_allclose(eval_phi(spec, None, z), eval_phi(spec, None, -z), rtol=0, atol=0)
    assert np.all(np.asarray(eval_phi(spec, None, z[z != 0])) > 0)


@pytest.mark.parametrize("spec", FIELD_SPECS, ids=lambda s: s.family.value)
def test_field_specs_evaluate_nodewise(spec):
    rng = np.random.default_rng(3)
    z = rng.standard_normal(N_FIELD)
    whole = np.asarray(eval_phi(spec, None, z))
    single = np.array([eval_phi(spec, i, z[i]) for i in range(N_FIELD)])
    assert_allclose(whole, single, rtol=1e-14)
    assert_allclose(whole, eval_phi(spec, None, -z), rtol=0, atol=0)


def test_double_phase_values():
    spec = PhiSpec(Family.DOUBLE_PHASE, p=2.0, q=3.0, a_field=A_FIELD)
    z = np.full(N_FIELD, 2.0)
    assert_allclose(eval_phi(spec, None, z), 4.0 + 8.0 * A_FIELD)


def test_exponential_growth_saturates():
    spec = PhiSpec(Family.ORLICZ_EXP, p=1.0)
    value = eval_phi(spec, None, 1000.0)
    assert value == Config.SATURATION_CAP
    assert is_capped(value)
    assert not is_capped(eval_phi(spec, None, 10.0))


@pytest.mark.parametrize("desc", [
    {"family": "power", "p": 1.0},
    {"family": "double_phase", "p": 3.0, "q": 2.0, "a": 1.0},
    {"family": "orlicz_exp", "p": 0.5},
    {"family": "weighted", "p": 2.0, "w": -1.0},
])
def test_invalid_parameters_rejected(desc):
    with pytest.raises(ValueError):
        PhiSpec.from_description(desc, np.linspace(0.0, 1.0, 5))


def test_from_description_samples_linear_field():
    spec = PhiSpec.from_description(
        {"family": "double_phase", "p": 2, "q": 3, "a": {"linear": [0.0, 1.0]}}, np.linspace(0.0, 1.0, 5))
    assert spec.family is Family.DOUBLE_PHASE
    assert spec.field_size == 5
    assert_allclose(spec.a_field, [0.0, 0.25, 0.5, 0.75, 1.0])


def test_kink_subdifferential_at_zero():
    spec = PhiSpec(Family.ORLICZ_EXP, p=1.0)
    assert spec.has_kink
    interval = subdiff(spec, None, 0.0)
    assert interval.lower == -1.0
    assert interval.upper == 1.0
    assert interval.contains(0.3)
    assert not interval.contains(1.5)
    assert interval.distance(1.5) == pytest.approx(0.5)

    smooth = subdiff(PhiSpec(Family.POWER, p=3.0), None, 0.0)
    assert smooth.lower == smooth.upper == 0.0
    assert not PhiSpec(Family.POWER, p=3.0).has_kink


def test_subdiff_is_derivative_away_from_zero():
    spec = PhiSpec(Family.POWER, p=3.0)
    z = np.array([-2.0, -0.5, 0.5, 2.0])
    interval = subdiff(spec, None, z)
    assert_allclose(interval.lower, 3.0 * z * np.abs(z))
    assert_allclose(interval.upper, interval.lower)


@pytest.mark.parametrize("spec", CLOSED_FORM, ids=lambda s: f"{s.family.value}-{s.p}")
def test_closed_form_conjugate_matches_numeric(spec):
    y = np.linspace(-5.0, 5.0, 21)
    closed = np.asarray(conjugate_eval(spec, None, y))
    numeric = np.asarray(conjugate_eval(spec, None, y, method="numeric"))
    assert_allclose(numeric, closed, rtol=1e-8, atol=1e-12)


def test_unknown_conjugate_method():
    with pytest.raises(ValueError):
        conjugate_eval(PhiSpec(Family.QUADRATIC), None, 1.0, method="magic")


@pytest.mark.parametrize("spec", CLOSED_FORM + FIELD_SPECS, ids=lambda s: s.family.value)
def test_young_equality_on_subgradients(spec):
    rng = np.random.default_rng(11)
    z = rng.uniform(-2.0, 2.0, N_FIELD)
    y = np.asarray(subdiff(spec, None, z).upper)
    gap = np.asarray(eval_phi(spec, None, z)) + np.asarray(conjugate_eval(spec, None, y)) - y * z
    assert np.max(np.abs(gap) / (1.0 + np.abs(y * z))) < 1e-8


def test_young_inequality_strict_off_the_subdifferential():
    spec = PhiSpec(Family.POWER, p=3.0)
    z = np.linspace(0.5, 2.0, 7)
    y = np.asarray(subdiff(spec, None, z).upper) + 0.1
    gap = np.asarray(eval_phi(spec, None, z)) + np.asarray(conjugate_eval(spec, None, y)) - y * z
    assert np.all(gap > 1e-7)


def test_conjugate_argmax_realises_the_sup():
    spec = PhiSpec(Family.DOUBLE_PHASE, p=2.0, q=3.0, a_field=A_FIELD)
    y = np.linspace(-3.0, 3.0, N_FIELD)
    z = np.asarray(conjugate_argmax(spec, None, y))
    assert_allclose(subdiff(spec, None, z).upper, y, atol=1e-9)


def test_quadratic_prox_is_a_contraction_towards_zero():
    v = np.linspace(-3.0, 3.0, 13)
    for lam in (0.1, 1.0, 10.0):
        assert_allclose(pointwise_prox(PhiSpec(Family.QUADRATIC), None, v, lam), v / (1.0 + lam), rtol=1e-12)


@pytest.mark.parametrize("spec", [PhiSpec(Family.POWER, p=3.0), PhiSpec(Family.ORLICZ_EXP, p=2.0),
                                  PhiSpec(Family.LLOGL)], ids=lambda s: s.family.value)
def test_prox_stationarity(spec):
    v = np.linspace(-4.0, 4.0, 17)
    lam = 0.5
    z = np.asarray(pointwise_prox(spec, None, v, lam))
    residual = z + lam * np.asarray(subdiff(spec, None, z).upper) - v
    assert np.max(np.abs(residual) / np.maximum(1.0, np.abs(v))) < 1e-10
    assert np.all(np.abs(z) <= np.abs(v))


def test_prox_at_kink_sticks_to_zero():
    spec = PhiSpec(Family.ORLICZ_EXP, p=1.0)
    lam = 0.5
    v = np.array([-0.4, 0.0, 0.3, 0.5, 2.0])
    z = np.asarray(pointwise_prox(spec, None, v, lam))
    assert_allclose(z[:4], 0.0, atol=0)
    assert z[4] + lam * np.exp(z[4]) == pytest.approx(2.0, abs=1e-10)


def test_prox_rejects_non_positive_lambda():
    with pytest.raises(ValueError):
        pointwise_prox(PhiSpec(Family.QUADRATIC), None, 1.0, 0.0)


@pytest.mark.parametrize("spec", [PhiSpec(Family.POWER, p=3.0), FIELD_SPECS[0]], ids=["power", "variable"])
def test_power_type_satisfies_both_doubling_conditions(spec):
    d2 = check_delta2(spec)
    n2 = check_nabla2(spec)
    assert d2.holds and n2.holds
    assert d2.best_k <= 2.0 ** spec.upper_exponent() * (1 + 1e-9)
    assert d2.summary().startswith("holds Δ₂")


def test_exponential_fails_delta2_with_witness():
    report = check_delta2(PhiSpec(Family.ORLICZ_EXP, p=1.0))
    assert not report.holds
    assert report.witness is not None
    assert report.summary().startswith("fails Δ₂, witness")


def test_llogl_fails_nabla2():
    assert check_delta2(PhiSpec(Family.LLOGL)).holds
    assert not check_nabla2(PhiSpec(Family.LLOGL)).holds


def test_classify_regime():
    assert classify_regime(PhiSpec(Family.POWER, p=2.5)) == "reflexive"
    assert classify_regime(PhiSpec(Family.ORLICZ_EXP, p=1.0)) == "nabla2"
    assert classify_regime(PhiSpec(Family.LLOGL)) == "delta2"


@pytest.mark.parametrize("spec", SCALAR_SPECS + FIELD_SPECS, ids=lambda s: s.family.value)
def test_phi_conditions_hold(spec):
    report = check_phi_conditions(spec)
    assert report.passed, report.to_text()


def test_compare_phi():
    result = compare_phi(PhiSpec(Family.POWER, p=2.0), PhiSpec(Family.QUADRATIC))
    assert result["holds"]
    assert result["c1"] == pytest.approx(2.0)

    result = compare_phi(PhiSpec(Family.ORLICZ_EXP, p=1.0), PhiSpec(Family.POWER, p=3.0))
    assert not result["holds"]
    assert result["witness"] is not None


ALL_SPECS = SCALAR_SPECS + FIELD_SPECS


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.family.value}-{s.p}")
def test_chord_convexity(spec):
    rng = np.random.default_rng(21)
    for _ in range(50):
        z1 = rng.uniform(-3.0, 3.0, N_FIELD)
        z2 = rng.uniform(-3.0, 3.0, N_FIELD)
        t = rng.uniform(0.0, 1.0, N_FIELD)
        left = np.asarray(eval_phi(spec, None, t * z1 + (1.0 - t) * z2))
        right = t * np.asarray(eval_phi(spec, None, z1)) + (1.0 - t) * np.asarray(eval_phi(spec, None, z2))
        assert np.all(left <= right + 1e-12 * (1.0 + right))


def _biconjugate(spec, x, z):
    """sup_y {y z - M*(x, y)}: a coarse scan, then bounded Brent around the best sample"""
    slope = abs(float(subdiff(spec, x, z).upper))
    bound = 1.1 * slope + 1.0
    ys = np.linspace(-bound, bound, 201)
    gains = z * ys - np.asarray(conjugate_eval(spec, x, ys))
    k = int(np.argmax(gains))
    dy = ys[1] - ys[0]
    refined = optimize.minimize_scalar(lambda y: float(conjugate_eval(spec, x, y)) - z * y,
                                       bounds=(ys[k] - dy, ys[k] + dy), method="bounded",
                                       options={"xatol": 1e-12})
    return max(float(gains[k]), -float(refined.fun))


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.family.value}-{s.p}")
def test_biconjugate_recovers_phi(spec):
    nodes = (0, 5, N_FIELD - 1) if spec.field_size is not None else (None,)
    for x in nodes:
        for z in (-1.0, -0.4, 0.0, 0.3, 0.9):
            expected = float(eval_phi(spec, x, z))
            assert _biconjugate(spec, x, z) == pytest.approx(expected, rel=1e-8, abs=1e-9)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.family.value}-{s.p}")
def test_subdiff_matches_central_differences(spec):
    rng = np.random.default_rng(5)
    z = rng.uniform(0.2, 1.5, N_FIELD) * rng.choice([-1.0, 1.0], N_FIELD)
    h = 1e-6
    numeric = (np.asarray(eval_phi(spec, None, z + h)) - np.asarray(eval_phi(spec, None, z - h))) / (2.0 * h)
    interval = subdiff(spec, None, z)
    assert_allclose(interval.lower, interval.upper, rtol=0, atol=0)
    assert_allclose(interval.upper, numeric, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.family.value}-{s.p}")
def test_luxemburg_triangle_inequality(spec):
    grid = uniform_grid_1d(N_FIELD)
    rng = np.random.default_rng(17)
    tol = 1e-10
    for _ in range(20):
        u = rng.standard_normal(N_FIELD)
        v = rng.standard_normal(N_FIELD)
        total = luxemburg_norm(grid, spec, u + v, tol=tol)
        bound = luxemburg_norm(grid, spec, u, tol=tol) + luxemburg_norm(grid, spec, v, tol=tol)
        assert total <= bound * (1.0 + 4.0 * tol)


@pytest.mark.parametrize("spec", ALL_SPECS, ids=lambda s: f"{s.family.value}-{s.p}")
def test_phi_battery_passes(spec):
    report = check_phi_battery(spec, rng=np.random.default_rng(8), n_samples=16)
    assert report.passed, report.to_text()
    for name in ("zero_at_origin", "chord_convexity", "young_equality", "young_inequality",
                 "prox_stationarity", "delta2", "nabla2"):
        report.get(name)


def test_phi_battery_checks_the_doubling_constant_of_power_types():
    report = check_phi_battery(PhiSpec(Family.POWER, p=3.0), n_samples=8)
    assert report.get("delta2_constant").value == pytest.approx(8.0)
    assert report.get("delta2_constant").tolerance == pytest.approx(8.0)


def test_phi_battery_records_exponential_regime():
    report = check_phi_battery(PhiSpec(Family.ORLICZ_EXP, p=1.0), n_samples=8)
    delta2 = report.get("delta2")
    assert delta2.value == 1.0 and delta2.passed
    assert "regime nabla2" in delta2.detail
    with pytest.raises(KeyError):
        report.get("delta2_constant")


def test_phi_battery_flags_a_concave_profile(monkeypatch):
    monkeypatch.setattr(phi_library, "_values_abs", lambda spec, x, r: np.sqrt(np.asarray(r, dtype=float)))
    report = check_phi_battery(PhiSpec(Family.POWER, p=2.0), n_samples=16)
    assert not report.passed
    assert not report.get("chord_convexity").passed
