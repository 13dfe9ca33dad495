import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tests import helpers  # noqa: F401  # ensures project root on path
from dnbands.ballsolver import Potential
from dnbands.errors import PreconditionError
from dnbands.geodesics import orbit_grid
from dnbands.harmonics import SphFunction, analyze_callable, synthesize
from dnbands.invariants import (
    Switches,
    TestFunction,
    beta_predict,
    by_parts_residual,
    gamma_terms,
    matrix_element_prediction,
    odd_jet,
    odd_predict,
    symbol_jet,
    third_derivative_by_parts_residual,
)


def _real_field(L, seed=0):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=3)
    return analyze_callable(lambda x: np.cos(x @ w), L)


def test_switch_validation_and_scan():
    with pytest.raises(ValueError):
        Switches(kappa_delta=0.25)
    with pytest.raises(ValueError):
        Switches(phi_arg="q1")
    with pytest.raises(ValueError):
        Switches(delta_s2_sign="*")
    combos = list(Switches.scan())
    assert len(combos) == 8
    assert len({s.label() for s in combos}) == 8
    assert Switches().sign == -1.0


def test_test_function_derivatives_are_consistent():
    for phi in (TestFunction.identity(), TestFunction.square(), TestFunction.gauss(0.7), TestFunction.polynomial([1, -2, 0, 3])):
        phi.check_consistency()
    broken = TestFunction("broken", np.sin, np.cos, np.cos)
    with pytest.raises(PreconditionError):
        broken.check_consistency()


def test_constant_potential_symbols():
    c = 2.0
    jet = symbol_jet(Potential.constant(c))
    pts = orbit_grid(10)
    assert np.allclose(synthesize(jet.q0, pts), c / 2)
    assert np.allclose(synthesize(jet.q1, pts), -3 * c / 4)
    assert jet.is_real()
    assert np.allclose(jet.W.coeffs, 0.0)


def test_constant_potential_invariants():
    c = 1.2
    jet = symbol_jet(Potential.constant(c))
    gammas = gamma_terms(jet)
    ident = beta_predict(jet, TestFunction.identity(), gammas=gammas)
    assert ident.beta0 == pytest.approx(c / 2)
    assert ident.beta1 == pytest.approx(-3 * c / 4)
    one = beta_predict(jet, TestFunction.one(), gammas=gammas)
    assert (one.beta0, one.beta1, one.beta2) == pytest.approx((1.0, 0.0, 0.0))
    square = beta_predict(jet, TestFunction.square(), gammas=gammas)
    assert square.beta0 == pytest.approx(c**2 / 4)
    assert square.beta1 == pytest.approx(2 * (c / 2) * (-3 * c / 4))
    assert set(ident.breakdown) == {"beta0", "beta1.laplace", "beta1.q1", "beta2.gamma2", "beta2.gamma1"}


def test_laplacian_switch_changes_first_order_symbol():
    q = Potential([((0, 0, 2), 1.0)])
    half = symbol_jet(q, switches=Switches(0.5), include_w=False)
    full = symbol_jet(q, switches=Switches(1.0), include_w=False)
    assert not np.allclose(half.q1.coeffs, full.q1.coeffs)
    assert np.allclose(half.q0.coeffs, full.q0.coeffs)


def test_phi_arg_only_moves_derivative_terms():
    q = Potential([((0, 0, 2), 1.0), ((0, 0, 0), 0.5)])
    base = symbol_jet(q, switches=Switches(0.5, "q0"), include_w=False)
    doubled = symbol_jet(q, switches=Switches(0.5, "qhat"), include_w=False)
    square = TestFunction.square()
    a = beta_predict(base, square)
    b = beta_predict(doubled, square)
    assert a.beta0 == pytest.approx(b.beta0)
    assert a.beta1 != pytest.approx(b.beta1)


def test_odd_case_requires_odd_restriction():
    with pytest.raises(PreconditionError):
        odd_jet(Potential([((0, 0, 2), 1.0)]))
    q = Potential([((0, 0, 1), 1.0)])
    report = odd_predict(q, TestFunction.one(), include_w=False)
    assert report.beta0 == pytest.approx(1.0)
    assert report.beta1 == pytest.approx(0.0, abs=1e-12)
    # q = x3: the radial derivative restricts to cos θ, whose circle averages vanish
    ident = odd_predict(q, TestFunction.identity(), include_w=False)
    assert ident.beta0 == pytest.approx(0.0, abs=1e-12)


def test_odd_invariants_when_quadratic_part_vanishes_on_boundary():
    # q = x3 + (1 - r^2) x3^2
    q = Potential(
        [((0, 0, 1), 1.0), ((0, 0, 2), 1.0), ((2, 0, 2), -1.0), ((0, 2, 2), -1.0), ((0, 0, 4), -1.0)]
    )
    assert q.restriction_odd
    jet = odd_jet(q, include_w=False)
    mus = orbit_grid(30)
    assert np.allclose(synthesize(jet.q0, mus), (1 - mus[:, 2] ** 2) / 4, atol=1e-10)
    report = odd_predict(q, TestFunction.identity(), include_w=False, jet=jet)
    assert report.beta0 == pytest.approx(1 / 6, abs=1e-10)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), coeffs=st.lists(st.floats(-2, 2), min_size=1, max_size=4))
def test_integration_by_parts_identities(seed, coeffs):
    u = _real_field(3, seed)
    v = _real_field(2, seed + 1)
    F = TestFunction.polynomial(coeffs)
    assert by_parts_residual(u, v, F) < 1e-9
    assert third_derivative_by_parts_residual(u, F) < 1e-9


def test_third_derivative_check_needs_d3():
    F = TestFunction("flat", np.ones_like, np.zeros_like, np.zeros_like)
    with pytest.raises(PreconditionError):
        third_derivative_by_parts_residual(SphFunction.constant(1.0, 2), F)


def test_matrix_element_fields_for_constant_potential():
    c = 0.8
    pts = orbit_grid(6)
    combined = matrix_element_prediction(Potential.constant(c), "combined")
    stationary = matrix_element_prediction(Potential.constant(c), "stationary")
    assert np.allclose(synthesize(combined[0], pts), c)
    assert np.allclose(synthesize(combined[1], pts), -15 * c / 4)
    assert np.allclose(synthesize(combined[2], pts), 405 * c / 32 - c**2)
    assert np.allclose(synthesize(stationary[2], pts), 405 * c / 32)
    with pytest.raises(ValueError):
        matrix_element_prediction(Potential.constant(c), "other")
