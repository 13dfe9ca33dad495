import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tests import helpers  # noqa: F401  # ensures project root on path
from dnbands.ballsolver import Potential
from dnbands.errors import DomainError, PreconditionError
from dnbands.geodesics import (
    OrbitPoint,
    PhasePoint,
    W_integral,
    laplace_O,
    legendre_at_zero,
    local_jets,
    orbit_grid,
    phase_flow,
    poisson_O,
    poisson_TstarS2,
    polar_derivative_average,
    radon,
    radon_field,
    random_orbits,
    write_orbit_csv,
)
from dnbands.harmonics import SphFunction, laplace_s2, synthesize
from dnbands.reports import read_csv


def _random_function(L, seed=0):
    rng = np.random.default_rng(seed)
    n = (L + 1) ** 2
    return SphFunction(L, rng.normal(size=n) + 1j * rng.normal(size=n))


def test_legendre_at_zero():
    assert [legendre_at_zero(ell) for ell in range(5)] == pytest.approx([1.0, 0.0, -0.5, 0.0, 0.375])


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), phase=st.floats(0.0, 6.28))
def test_radon_transform_matches_circle_average(seed, phase):
    f = _random_function(6, seed)
    mu = random_orbits(1, seed)[0]
    orbit = OrbitPoint.from_momentum(mu, phase)
    assert radon(f, orbit) == pytest.approx(synthesize(radon_field(f), mu[None, :])[0], abs=1e-10)


def test_radon_needs_enough_circle_nodes():
    f = _random_function(4)
    with pytest.raises(PreconditionError):
        radon(f, OrbitPoint.from_momentum(np.array([0.0, 0.0, 1.0])), Ns=8)


def test_orbit_grid_is_unit_and_deterministic():
    grid = orbit_grid(50)
    assert grid.shape == (50, 3)
    assert np.allclose(np.linalg.norm(grid, axis=1), 1.0)
    assert np.array_equal(grid, orbit_grid(50))
    with pytest.raises(ValueError):
        orbit_grid(0)


def test_local_jets_laplacian_including_poles():
    f = _random_function(5, 1)
    pts = np.vstack([random_orbits(30, 2), [[0.0, 0.0, 1.0], [0.0, 0.1, -0.995]]])
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    (jet,) = local_jets([f], pts)
    assert np.allclose(jet.laplacian, synthesize(laplace_O(f), pts), atol=1e-9)


def test_poisson_bracket_is_antisymmetric_and_kills_zonal_pairs():
    f = _random_function(3, 3)
    g = _random_function(3, 4)
    pts = random_orbits(20, 5)
    assert np.allclose(poisson_O(f, g, pts), -poisson_O(g, f, pts))
    zonal = SphFunction.from_terms({(2, 0): 1.0, (4, 0): 0.5})
    other = SphFunction.from_terms({(1, 0): 1.0, (3, 0): -2.0})
    assert np.allclose(poisson_O(zonal, other, pts), 0.0, atol=1e-10)


def test_equator_average_of_second_polar_derivative():
    f = _random_function(6, 6)
    expected = synthesize(radon_field(laplace_s2(f) * -1.0), np.array([[0.0, 0.0, 1.0]]))[0]
    assert polar_derivative_average(f, 2) == pytest.approx(expected, abs=1e-9)


def test_phase_flow_preserves_speed_and_is_periodic():
    pt = PhasePoint(np.array([1.0, 0.0, 0.0]), np.array([0.0, 2.0, 0.5]))
    later = phase_flow(pt, 1.3)
    assert later.speed == pytest.approx(pt.speed)
    assert abs(later.x @ later.p) < 1e-12
    full = phase_flow(pt, 2 * np.pi)
    assert np.allclose(full.x, pt.x) and np.allclose(full.p, pt.p)
    with pytest.raises(DomainError):
        phase_flow(PhasePoint(np.array([1.0, 0.0, 0.0]), np.zeros(3)), 0.5)


def test_canonical_bracket_generates_the_flow():
    a = np.array([0.3, -0.7, 0.2])
    x = np.array([[0.0, 0.6, 0.8], [1.0, 0.0, 0.0]])
    p = np.array([[1.5, 0.0, 0.0], [0.0, -0.4, 0.9]])

    def position(X, P):
        return X @ a

    def speed(X, P):
        return np.linalg.norm(P, axis=-1)

    bracket = poisson_TstarS2(position, speed, x, p)
    p_hat = p / np.linalg.norm(p, axis=1, keepdims=True)
    assert np.allclose(bracket, p_hat @ a, atol=1e-7)
    assert np.allclose(poisson_TstarS2(speed, speed, x, p), 0.0, atol=1e-7)


def test_W_vanishes_for_constant_potential():
    orbit = OrbitPoint.from_momentum(np.array([0.2, 0.3, 0.93]))
    assert W_integral(Potential.constant(2.0), orbit, Nt=8, Ns=8) == pytest.approx(0.0, abs=1e-8)


def test_W_is_rotation_invariant_for_zonal_potential():
    q = Potential([((0, 0, 2), 1.0)])
    mu3 = 0.4
    r = np.sqrt(1 - mu3**2)
    first = W_integral(q, OrbitPoint.from_momentum(np.array([r, 0.0, mu3])), Nt=24, Ns=24)
    second = W_integral(q, OrbitPoint.from_momentum(np.array([0.0, r, mu3]), phase=1.1), Nt=24, Ns=24)
    assert first == pytest.approx(second, abs=1e-6)


def test_orbit_csv_layout(tmp_path):
    mus = orbit_grid(4)
    path = write_orbit_csv(tmp_path / "w.csv", mus, np.arange(4.0), "hash", "kappa=0.5", column="W")
    header, rows = read_csv(path)
    assert header == "# config_hash=hash; switches=kappa=0.5"
    assert list(rows[0]) == ["mu1", "mu2", "mu3", "W"]
    assert float(rows[3]["W"]) == 3.0
