import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tests import helpers  # noqa: F401  # ensures project root on path
from dnbands.ballsolver import Potential
from dnbands.errors import ResourceError
from dnbands.harmonics import (
    CoherentFrame,
    HarmonicIndex,
    SphFunction,
    alpha_norms,
    alpha_pow,
    analyze,
    analyze_callable,
    apply_lambda0,
    coherent_coefficients,
    coherent_state,
    frames_from_momenta,
    inverse_norm_expansion,
    laplace_s2,
    quadrature_s2,
    sph_harm,
    synthesize,
)


def _random_points(n, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def _real_function(L, seed=0):
    quad = quadrature_s2(2 * L)
    rng = np.random.default_rng(seed)
    weights = rng.normal(size=3)
    return analyze_callable(lambda x: np.exp(x @ weights * 0.3).real, L, quad)


def test_flat_index_round_trip():
    for index in range(49):
        assert HarmonicIndex.from_flat(index).flat == index
    with pytest.raises(ValueError):
        HarmonicIndex(2, 3)


def test_low_degree_harmonics():
    pts = _random_points(20)
    Y = sph_harm(1, pts)
    assert np.allclose(Y[:, 0], 1 / math.sqrt(4 * math.pi))
    assert np.allclose(Y[:, 2], math.sqrt(3 / (4 * math.pi)) * pts[:, 2])
    # Y_{1,1} = -sqrt(3/8π) (x + i y)
    assert np.allclose(Y[:, 3], -math.sqrt(3 / (8 * math.pi)) * (pts[:, 0] + 1j * pts[:, 1]))


def test_constant_function_value():
    f = SphFunction.constant(2.5, L=3)
    assert np.allclose(synthesize(f, _random_points(10)), 2.5)


def test_analysis_recovers_band_limited_coefficients():
    rng = np.random.default_rng(3)
    f = SphFunction(6, rng.normal(size=49) + 1j * rng.normal(size=49))
    quad = quadrature_s2(12)
    g = analyze(synthesize(f, quad.nodes), 6, quad)
    assert np.allclose(g.coeffs, f.coeffs, atol=1e-12)


def test_analysis_of_x3_squared():
    f = analyze_callable(lambda x: x[..., 2] ** 2, 4)
    expected = np.zeros(25, dtype=complex)
    expected[HarmonicIndex(0, 0).flat] = math.sqrt(4 * math.pi) / 3
    expected[HarmonicIndex(2, 0).flat] = 4 / 3 * math.sqrt(math.pi / 5)
    assert np.allclose(f.coeffs, expected, atol=1e-12)
    boundary = Potential([((0, 0, 2), 1.0)]).boundary().resized(4)
    assert np.allclose(boundary.coeffs, expected, atol=1e-12)


def test_real_functions_have_conjugate_symmetric_coefficients():
    assert _real_function(8).is_real(1e-12)
    rng = np.random.default_rng(1)
    assert not SphFunction(2, rng.normal(size=9) + 1j * rng.normal(size=9)).is_real()


def test_diagonal_operators():
    f = SphFunction.from_terms({(3, -2): 1.0, (1, 0): 2.0})
    assert np.allclose(laplace_s2(f).coeffs, f.coeffs * np.array([0] + [2] * 3 + [6] * 5 + [12] * 7))
    assert np.allclose(apply_lambda0(f).coeffs, f.coeffs * np.array([0] + [1] * 3 + [2] * 5 + [3] * 7))


def test_quadrature_node_cap():
    with pytest.raises(ResourceError):
        quadrature_s2(40, max_nodes=100)
    quad = quadrature_s2(4)
    assert quad.integrate(np.ones(quad.size)) == pytest.approx(4 * math.pi)


@settings(max_examples=20, deadline=None)
@given(k=st.integers(0, 12), seed=st.integers(0, 1000))
def test_coherent_state_is_degree_k(k, seed):
    mu = _random_points(1, seed)[0]
    frame = CoherentFrame.from_momentum(mu)
    pts = _random_points(15, seed + 1)
    alpha = coherent_state(frame, k)
    assert np.allclose(synthesize(alpha, pts), alpha_pow(frame, k, pts), atol=1e-10)


def test_coherent_norms():
    for k in (0, 1, 5, 12):
        xi, eta = frames_from_momenta(_random_points(4, k))
        C = coherent_coefficients(xi, eta, k)
        sphere, ball = alpha_norms(k)
        assert np.allclose(np.sum(np.abs(C) ** 2, axis=1), sphere)
        # solid extension r^k α: ∫ r^{2k+2} dr = 1/(2k+3)
        assert ball == pytest.approx(sphere / (2 * k + 3))


def test_frames_are_positively_oriented():
    mus = _random_points(30, 4)
    mus[0] = [0.0, 0.0, 1.0]
    xi, eta = frames_from_momenta(mus)
    assert np.allclose(np.cross(xi, eta), mus)
    assert np.allclose(np.sum(xi * eta, axis=1), 0.0)


def test_frame_rotation_keeps_momentum():
    frame = CoherentFrame.from_momentum(np.array([0.0, 0.6, 0.8]))
    assert np.allclose(frame.rotated(0.7).momentum, frame.momentum)
    pt = np.array([[0.0, 0.6, 0.8]])
    # rotating the frame multiplies (x.z)^k by a phase
    z_rot = frame.rotated(0.3).z
    assert np.allclose(z_rot, np.exp(1j * 0.3) * frame.z)
    assert np.allclose(alpha_pow(frame, 3, pt), 0.0)


def test_inverse_norm_expansion_error_decays_like_k_cubed():
    errors = []
    for k in (20, 40, 80):
        exact = 1.0 / alpha_norms(k)[0]
        errors.append(abs(inverse_norm_expansion(k) / exact - 1.0))
    assert errors[0] < 1e-5
    assert errors[1] < errors[0] / 6
    assert errors[2] < errors[1] / 6


def test_printed_norm_expansion_is_worse():
    k = 40
    exact = 1.0 / alpha_norms(k)[0]
    printed = abs(inverse_norm_expansion(k, printed=True) / exact - 1.0)
    corrected = abs(inverse_norm_expansion(k) / exact - 1.0)
    assert printed > 100 * corrected
