"""The space of oriented great circles and the geodesic flow on T*S².

An oriented great circle is represented by its momentum vector ``μ = ξ×η``;
functions on that space are stored with the same harmonic conventions as
functions on the boundary sphere, in the variable μ.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from .errors import DomainError, PreconditionError
from .harmonics import (
    CoherentFrame,
    SphFunction,
    analyze,
    analyze_callable,
    degree_order,
    frames_from_momenta,
    legendre_table,
    quadrature_s2,
    synthesize,
    theta_derivative,
    to_spherical,
)
from .reports import write_csv

logger = logging.getLogger(__name__)

# Points closer than this to the chart poles are evaluated in a permuted frame.
POLE_CUTOFF = 0.75
FD_STEP = 1e-4


class OFunction(SphFunction):
    """Function on the space of oriented great circles, in the momentum variable."""


@dataclass(frozen=True)
class OrbitPoint:
    """An oriented great circle together with a chosen frame on it."""

    frame: CoherentFrame

    @property
    def momentum(self) -> NDArray[np.float64]:
        return self.frame.momentum

    @classmethod
    def from_momentum(cls, mu: NDArray[np.float64], phase: float = 0.0) -> "OrbitPoint":
        return cls(CoherentFrame.from_momentum(mu, phase))

    def shifted(self, t: float) -> "OrbitPoint":
        """Same circle, frame moved by the geodesic flow."""
        return OrbitPoint(self.frame.rotated(t))

    def circle(self, s: NDArray[np.float64]) -> NDArray[np.float64]:
        s = np.asarray(s, dtype=np.float64)[..., None]
        return self.frame.xi * np.cos(s) + self.frame.eta * np.sin(s)


@dataclass(frozen=True)
class PhasePoint:
    """A point ``(x, p)`` of T*S² with the covector identified via the round metric."""

    x: NDArray[np.float64]
    p: NDArray[np.float64]

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=np.float64).reshape(3)
        p = np.asarray(self.p, dtype=np.float64).reshape(3)
        if abs(x @ x - 1.0) > 1e-10:
            raise ValueError("Position must be a unit vector")
        if abs(x @ p) > 1e-10:
            raise ValueError("Momentum must be tangent to the sphere at x")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "p", p)

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.p))

    @classmethod
    def from_orbit(cls, orbit: OrbitPoint) -> "PhasePoint":
        return cls(orbit.frame.xi, orbit.frame.eta)


# ---------------------------------------------------------------------------
# Radon transform
# ---------------------------------------------------------------------------


def legendre_at_zero(ell: int) -> float:
    """``P_l(0)``."""
    if ell % 2:
        return 0.0
    value = 1.0
    for j in range(1, ell // 2 + 1):
        value *= -(2 * j - 1) / (2 * j)
    return value


def radon(f: SphFunction, orbit: OrbitPoint, Ns: int | None = None) -> complex:
    """Average of ``f`` over the great circle ``orbit`` (periodic trapezoid rule)."""
    Ns = 2 * f.L + 2 if Ns is None else Ns
    if Ns < 2 * f.L + 2:
        raise PreconditionError(f"Ns={Ns} is below 2L+2={2 * f.L + 2}")
    s = 2.0 * np.pi * np.arange(Ns) / Ns
    return complex(np.mean(synthesize(f, orbit.circle(s))))


def radon_field(f: SphFunction) -> OFunction:
    """Radon transform as a function of the momentum: degree ``l`` scales by ``P_l(0)``."""
    factors = np.array([legendre_at_zero(ell) for ell in range(f.L + 1)])
    ells, _ = degree_order(f.L)
    return OFunction(f.L, f.coeffs * factors[ells])


def as_ofunction(f: SphFunction) -> OFunction:
    return OFunction(f.L, f.coeffs.copy())


# ---------------------------------------------------------------------------
# Orbit grids
# ---------------------------------------------------------------------------


def orbit_grid(n: int) -> NDArray[np.float64]:
    """Deterministic Fibonacci grid of ``n`` momentum vectors."""
    if n <= 0:
        raise ValueError(f"Grid size must be positive, got {n}")
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5**0.5) * i
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def random_orbits(n: int, seed: int = 0) -> NDArray[np.float64]:
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=(n, 3))
    return mu / np.linalg.norm(mu, axis=1, keepdims=True)


def write_orbit_csv(
    path: Path | str,
    mus: NDArray[np.float64],
    values: NDArray,
    config_hash: str = "",
    switches: str = "",
    column: str = "value",
) -> Path:
    """Orbit samples as rows ``mu1, mu2, mu3, value`` (real part)."""
    rows = ((float(m[0]), float(m[1]), float(m[2]), float(np.real(v))) for m, v in zip(mus, values))
    return write_csv(path, ("mu1", "mu2", "mu3", column), rows, config_hash, switches)


# ---------------------------------------------------------------------------
# Calculus on the space of great circles
# ---------------------------------------------------------------------------


@dataclass
class LocalJet:
    """Value, gradient and covariant Hessian in a positively oriented orthonormal frame."""

    value: NDArray[np.complex128]
    g1: NDArray[np.complex128]
    g2: NDArray[np.complex128]
    h11: NDArray[np.complex128]
    h12: NDArray[np.complex128]
    h22: NDArray[np.complex128]

    @property
    def laplacian(self) -> NDArray[np.complex128]:
        """Positive Laplacian ``-(H11 + H22)``."""
        return -(self.h11 + self.h22)


def _permuted(f: SphFunction) -> SphFunction:
    """Coefficients of ``f'(μ') = f(μ'_3, μ'_1, μ'_2)``."""
    return type(f)(f.L, analyze_callable(lambda x: synthesize(f, x[..., [2, 0, 1]]), f.L).coeffs)


def _spherical_jets(f: SphFunction, points: NDArray[np.float64]) -> LocalJet:
    cos_theta, phi = to_spherical(points)
    sin_theta = np.sqrt(np.clip(1.0 - cos_theta**2, 0.0, None))
    cot = cos_theta / sin_theta
    _, ms = degree_order(f.L)
    T = legendre_table(f.L, cos_theta)
    dT = theta_derivative(T, f.L)
    d2T = theta_derivative(dT, f.L)
    phase = np.exp(1j * ms * phi[..., None]) * f.coeffs
    value = np.sum(T * phase, axis=-1)
    f_t = np.sum(dT * phase, axis=-1)
    f_tt = np.sum(d2T * phase, axis=-1)
    f_p = np.sum(1j * ms * T * phase, axis=-1)
    f_tp = np.sum(1j * ms * dT * phase, axis=-1)
    f_pp = np.sum(-(ms**2) * T * phase, axis=-1)
    return LocalJet(
        value=value,
        g1=f_t,
        g2=f_p / sin_theta,
        h11=f_tt,
        h12=(f_tp - cot * f_p) / sin_theta,
        h22=f_pp / sin_theta**2 + cot * f_t,
    )


def local_jets(funcs: Sequence[SphFunction], points: NDArray[np.float64]) -> list[LocalJet]:
    """Jets of several functions at ``points``, all in the same frame per point.

    Points near the poles of the (θ, φ) chart are handled in a cyclically
    permuted copy of the coordinates; the quantities built from jets
    (gradients, brackets, D1, D2) do not depend on the frame.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    polar = np.abs(pts[:, 2]) > POLE_CUTOFF
    out = []
    for f in funcs:
        fields = {name: np.zeros(pts.shape[0], dtype=np.complex128) for name in LocalJet.__dataclass_fields__}
        if np.any(~polar):
            jet = _spherical_jets(f, pts[~polar])
            for name in fields:
                fields[name][~polar] = getattr(jet, name)
        if np.any(polar):
            jet = _spherical_jets(_permuted(f), pts[polar][:, [1, 2, 0]])
            for name in fields:
                fields[name][polar] = getattr(jet, name)
        out.append(LocalJet(**fields))
    return out


def laplace_O(f: SphFunction) -> OFunction:
    return OFunction(f.L, f.map_degrees(lambda ell: ell * (ell + 1.0)).coeffs)


def gradient_inner(f: SphFunction, g: SphFunction, points: NDArray[np.float64]) -> NDArray[np.complex128]:
    """``<∇f, ∇g>`` (bilinear) at ``points``."""
    jf, jg = local_jets([f, g], points)
    return jf.g1 * jg.g1 + jf.g2 * jg.g2


def calculus_O(f: SphFunction) -> tuple[OFunction, OFunction]:
    """Laplacian (coefficientwise) and squared gradient norm re-expanded at degree 2L."""
    L2 = 2 * f.L
    quad = quadrature_s2(2 * L2)
    samples = gradient_inner(f, f, quad.nodes).real
    return laplace_O(f), OFunction(L2, analyze(samples, L2, quad).coeffs)


def poisson_O(f: SphFunction, g: SphFunction, points: NDArray[np.float64]) -> NDArray[np.complex128]:
    """Poisson bracket for the area form of total mass 4π, sign ``ω(·, ξ_f) = df``."""
    jf, jg = local_jets([f, g], points)
    return -(jf.g1 * jg.g2 - jf.g2 * jg.g1)


def polar_derivative_average(f: SphFunction, order: int, Ns: int | None = None) -> complex:
    """Mean over the equator of ``∂_θ^order f`` (θ the polar angle).

    This is the Radon-type average along the circle with momentum +x3.
    """
    Ns = 2 * f.L + 2 if Ns is None else Ns
    table = legendre_table(f.L, np.zeros(1))
    for _ in range(order):
        table = theta_derivative(table, f.L)
    _, ms = degree_order(f.L)
    phi = 2.0 * np.pi * np.arange(Ns) / Ns
    values = (table[0] * f.coeffs) @ np.exp(1j * np.outer(ms, phi))
    return complex(np.mean(values))


# ---------------------------------------------------------------------------
# Geodesic flow and brackets on T*S²
# ---------------------------------------------------------------------------


def flow_arrays(x: NDArray, p: NDArray, t: NDArray | float) -> tuple[NDArray, NDArray]:
    """Vectorized geodesic flow; ``t`` broadcasts against the leading axes."""
    speed = np.linalg.norm(p, axis=-1, keepdims=True)
    if np.any(speed == 0):
        raise DomainError("Geodesic flow is undefined at zero momentum")
    t = np.asarray(t, dtype=np.float64)[..., None]
    c, s = np.cos(t), np.sin(t)
    return x * c + (p / speed) * s, p * c - speed * x * s


def phase_flow(pt: PhasePoint, t: float) -> PhasePoint:
    if pt.speed == 0:
        raise DomainError("Geodesic flow is undefined at zero momentum")
    x, p = flow_arrays(pt.x, pt.p, t)
    return PhasePoint(x / np.linalg.norm(x), p - (p @ x) * x / (x @ x))


PhaseFunction = Callable[[NDArray[np.float64], NDArray[np.float64]], NDArray]


def _chart_rotation(x0: NDArray, p0: NDArray) -> NDArray:
    """Rotation taking (e1, e2, e3) to (x0, p0/|p0|, x0 × p0/|p0|)."""
    p_hat = p0 / np.linalg.norm(p0, axis=-1, keepdims=True)
    return np.stack([x0, p_hat, np.cross(x0, p_hat)], axis=-1)


def _chart_points(coords: NDArray, rotation: NDArray) -> tuple[NDArray, NDArray]:
    theta, phi, p_theta, p_phi = np.moveaxis(coords, -1, 0)
    st, ct, sp, cp = np.sin(theta), np.cos(theta), np.sin(phi), np.cos(phi)
    x_loc = np.stack([st * cp, st * sp, ct], axis=-1)
    e_theta = np.stack([ct * cp, ct * sp, -st], axis=-1)
    e_phi = np.stack([-sp, cp, np.zeros_like(sp)], axis=-1)
    p_loc = p_theta[..., None] * e_theta + (p_phi / st)[..., None] * e_phi
    return np.einsum("...ij,...j->...i", rotation, x_loc), np.einsum("...ij,...j->...i", rotation, p_loc)


def chart_stencil(x0: NDArray, p0: NDArray, h: float = FD_STEP) -> tuple[NDArray, NDArray]:
    """Phase points displaced along each canonical coordinate.

    The base point sits on the chart equator with coordinates
    ``(π/2, 0, 0, |p0|)``. Returns arrays of shape ``(..., 4, 4, 3)``:
    coordinate index, then offsets ``(-h, +h, -h/2, +h/2)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    p0 = np.asarray(p0, dtype=np.float64)
    rotation = _chart_rotation(x0, p0)[..., None, None, :, :]
    base = np.stack(
        [
            np.full(x0.shape[:-1], np.pi / 2),
            np.zeros(x0.shape[:-1]),
            np.zeros(x0.shape[:-1]),
            np.linalg.norm(p0, axis=-1),
        ],
        axis=-1,
    )
    offsets = np.array([-h, h, -h / 2, h / 2])
    coords = np.broadcast_to(base[..., None, None, :], base.shape[:-1] + (4, 4, 4)).copy()
    for i in range(4):
        coords[..., i, :, i] += offsets
    return _chart_points(coords, rotation)


def stencil_gradient(values: NDArray, h: float = FD_STEP) -> NDArray:
    """Richardson-extrapolated central differences from stencil values (axes ``..., 4, 4``)."""
    coarse = (values[..., 1] - values[..., 0]) / (2 * h)
    fine = (values[..., 3] - values[..., 2]) / h
    return (4.0 * fine - coarse) / 3.0


def _bracket_from_gradients(dF: NDArray, dG: NDArray) -> NDArray:
    return dF[..., 0] * dG[..., 2] - dF[..., 2] * dG[..., 0] + dF[..., 1] * dG[..., 3] - dF[..., 3] * dG[..., 1]


def poisson_TstarS2(f: PhaseFunction, g: PhaseFunction, x: NDArray, p: NDArray, h: float = FD_STEP) -> NDArray:
    """Canonical bracket ``{f, g}`` at phase points ``(x, p)`` (vectorized over leading axes).

    Derivatives are taken in a rotated spherical chart with the evaluation
    point on the chart equator, so the chart is never near its poles.
    """
    X, P = chart_stencil(x, p, h)
    return _bracket_from_gradients(stencil_gradient(f(X, P), h), stencil_gradient(g(X, P), h))


def poisson_at(f: PhaseFunction, g: PhaseFunction, pt: PhasePoint, h: float = FD_STEP) -> float:
    return float(np.real(poisson_TstarS2(f, g, pt.x, pt.p, h)))


# ---------------------------------------------------------------------------
# The W double integral
# ---------------------------------------------------------------------------


def _boundary_callable(q) -> Callable[[NDArray], NDArray]:
    return q.boundary_values if hasattr(q, "boundary_values") else q


def W_integral(q, orbit: OrbitPoint, Nt: int = 64, Ns: int = 64, h: float = FD_STEP) -> float:
    """``(-1/32π²) ∫_0^{2π} t ∫_0^{2π} {φ*_{t+s} f, φ*_s f}(z) ds dt`` with ``f = q(x)/|p|``.

    ``q`` is a :class:`Potential` (its boundary values are used) or a
    vectorized callable on unit vectors.
    """
    values = _boundary_callable(q)
    X, P = chart_stencil(orbit.frame.xi, orbit.frame.eta, h)
    x_nodes, w_nodes = np.polynomial.legendre.leggauss(Nt)
    t = np.pi * (x_nodes + 1.0)
    wt = np.pi * w_nodes
    s = 2.0 * np.pi * np.arange(Ns) / Ns
    speed = np.linalg.norm(P, axis=-1)

    def pulled(times: NDArray) -> NDArray:
        # stencil axes (4, 4) broadcast against the time grid
        xs, _ = flow_arrays(X[..., None, :], P[..., None, :], times.reshape(-1))
        return (values(xs) / speed[..., None]).reshape((4, 4) + times.shape)

    # gradients over the stencil: (Nt, Ns, 4) and (Ns, 4)
    dF = stencil_gradient(np.moveaxis(pulled(t[:, None] + s[None, :]), (0, 1), (-2, -1)), h)
    dG = stencil_gradient(np.moveaxis(pulled(s), (0, 1), (-2, -1)), h)
    bracket = _bracket_from_gradients(dF, dG[None, :, :])
    inner = bracket.sum(axis=1) * (2.0 * np.pi / Ns)
    value = -np.sum(wt * t * inner) / (32.0 * np.pi**2)
    if abs(np.imag(value)) > 1e-8:
        logger.warning("W integral has imaginary residue %.2e", abs(np.imag(value)))
    return float(np.real(value))


def _w_chunk(q, mus: NDArray, Nt: int, Ns: int) -> NDArray:
    xi, eta = frames_from_momenta(mus)
    return np.array([W_integral(q, OrbitPoint(CoherentFrame(a, b)), Nt, Ns) for a, b in zip(xi, eta)])


def W_field(q, L: int, Nt: int = 64, Ns: int = 64, workers: int = 1) -> OFunction:
    """W sampled on the orbit quadrature grid and projected onto degree ``L``."""
    quad = quadrature_s2(2 * L)
    mus = quad.nodes
    if workers > 1:
        chunks = np.array_split(mus, workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_w_chunk, [q] * len(chunks), chunks, [Nt] * len(chunks), [Ns] * len(chunks)))
        samples = np.concatenate(parts)
    else:
        samples = _w_chunk(q, mus, Nt, Ns)
    logger.info("W field sampled on %d orbits (Nt=%d, Ns=%d)", mus.shape[0], Nt, Ns)
    return OFunction(L, analyze(samples, L, quad).coeffs)
