"""Spherical harmonics on S², product quadrature and coherent states.

Conventions
-----------
* Complex orthonormal harmonics ``Y_lm`` with the Condon-Shortley phase,
  flat index ``l*l + l + m``.
* ``theta`` is the polar angle measured from +x3, ``phi`` the azimuth.
* ``laplace_s2`` has the positive spectrum ``l(l+1)``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Iterable, Mapping

import numpy as np
from numpy.typing import NDArray
from scipy.special import betaln

from .errors import PreconditionError, ResourceError
from .gaunt import GauntTable, gaunt, wigner_3j  # noqa: F401  re-exported

logger = logging.getLogger(__name__)

FOUR_PI = 4.0 * np.pi
DEFAULT_MAX_NODES = int(os.getenv("DNBANDS_MAX_NODES", "4000000"))
# Chunk size for batched coherent-state analysis.
FRAME_BATCH = 256


def n_coeffs(L: int) -> int:
    return (L + 1) ** 2


def flat_index(ell, m):
    return ell * ell + ell + m


@lru_cache(maxsize=None)
def _degree_order(L: int) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    ells = np.concatenate([np.full(2 * ell + 1, ell) for ell in range(L + 1)]).astype(np.int64)
    ms = np.concatenate([np.arange(-ell, ell + 1) for ell in range(L + 1)]).astype(np.int64)
    ells.flags.writeable = False
    ms.flags.writeable = False
    return ells, ms


def degree_order(L: int) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    """Return arrays ``(ell, m)`` for every flat index up to degree ``L``."""
    if L < 0:
        raise ValueError(f"Degree must be non-negative, got {L}")
    return _degree_order(int(L))


@dataclass(frozen=True)
class HarmonicIndex:
    """A (degree, order) pair of the harmonic basis."""

    ell: int
    m: int

    def __post_init__(self) -> None:
        if self.ell < 0 or abs(self.m) > self.ell:
            raise ValueError(f"Invalid harmonic index (ell={self.ell}, m={self.m})")

    @property
    def flat(self) -> int:
        return flat_index(self.ell, self.m)

    @classmethod
    def from_flat(cls, index: int) -> "HarmonicIndex":
        if index < 0:
            raise ValueError(f"Flat index must be non-negative, got {index}")
        ell = int(np.floor(np.sqrt(index)))
        return cls(ell, index - ell * ell - ell)


@dataclass(eq=False)
class SphFunction:
    """Band-limited function on S² stored as harmonic coefficients."""

    L: int
    coeffs: NDArray[np.complex128] = field(repr=False)

    def __post_init__(self) -> None:
        self.coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if self.L < 0 or self.coeffs.shape != (n_coeffs(self.L),):
            raise ValueError(
                f"Coefficient vector of shape {self.coeffs.shape} does not match degree {self.L}"
            )

    @classmethod
    def zeros(cls, L: int) -> "SphFunction":
        return cls(L, np.zeros(n_coeffs(L), dtype=np.complex128))

    @classmethod
    def from_terms(cls, terms: Mapping[tuple[int, int], complex], L: int | None = None) -> "SphFunction":
        if L is None:
            L = max((ell for ell, _ in terms), default=0)
        out = cls.zeros(L)
        for (ell, m), value in terms.items():
            out.coeffs[HarmonicIndex(ell, m).flat] += value
        return out

    @classmethod
    def constant(cls, value: float, L: int = 0) -> "SphFunction":
        out = cls.zeros(L)
        out.coeffs[0] = value * np.sqrt(FOUR_PI)
        return out

    def resized(self, L: int) -> "SphFunction":
        out = type(self).zeros(L)
        n = min(n_coeffs(L), self.coeffs.size)
        out.coeffs[:n] = self.coeffs[:n]
        return out

    def copy(self) -> "SphFunction":
        return type(self)(self.L, self.coeffs.copy())

    def degree_block(self, ell: int) -> NDArray[np.complex128]:
        if ell > self.L:
            return np.zeros(2 * ell + 1, dtype=np.complex128)
        start = ell * ell
        return self.coeffs[start : start + 2 * ell + 1]

    def degree_support(self, tol: float = 1e-12) -> list[int]:
        ells, _ = degree_order(self.L)
        return sorted({int(e) for e in ells[np.abs(self.coeffs) > tol]})

    def is_real(self, tol: float = 1e-10) -> bool:
        ells, ms = degree_order(self.L)
        partner = self.coeffs[flat_index(ells, -ms)]
        expected = ((-1.0) ** ms) * np.conj(partner)
        return bool(np.max(np.abs(self.coeffs - expected), initial=0.0) <= tol)

    def map_degrees(self, factor) -> "SphFunction":
        """Multiply every degree-``l`` coefficient by ``factor(l)``."""
        ells, _ = degree_order(self.L)
        return type(self)(self.L, self.coeffs * np.asarray(factor(ells.astype(float))))

    def norm(self) -> float:
        return float(np.linalg.norm(self.coeffs))

    def _align(self, other: "SphFunction") -> tuple["SphFunction", "SphFunction"]:
        L = max(self.L, other.L)
        return self.resized(L), other.resized(L)

    def __add__(self, other: "SphFunction") -> "SphFunction":
        a, b = self._align(other)
        return type(self)(a.L, a.coeffs + b.coeffs)

    def __sub__(self, other: "SphFunction") -> "SphFunction":
        a, b = self._align(other)
        return type(self)(a.L, a.coeffs - b.coeffs)

    def __neg__(self) -> "SphFunction":
        return type(self)(self.L, -self.coeffs)

    def __mul__(self, scalar: complex) -> "SphFunction":
        return type(self)(self.L, self.coeffs * scalar)

    __rmul__ = __mul__

    def __call__(self, points: NDArray[np.float64]) -> NDArray[np.complex128]:
        return synthesize(self, points)


# ---------------------------------------------------------------------------
# Associated Legendre tables
# ---------------------------------------------------------------------------


def legendre_table(L: int, cos_theta: NDArray[np.float64]) -> NDArray[np.float64]:
    """Theta parts ``T_lm`` with ``Y_lm = T_lm(theta) exp(i m phi)``.

    Normalized recursion, stable through the degrees used here. Returns an
    array of shape ``cos_theta.shape + ((L+1)**2,)``.
    """
    x = np.asarray(cos_theta, dtype=np.float64)
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    out = np.zeros(x.shape + (n_coeffs(L),), dtype=np.float64)
    pmm = np.full(x.shape, 1.0 / np.sqrt(FOUR_PI))
    for m in range(L + 1):
        if m > 0:
            pmm = -np.sqrt((2 * m + 1) / (2.0 * m)) * s * pmm
        out[..., flat_index(m, m)] = pmm
        if m == L:
            break
        p0 = pmm
        p1 = np.sqrt(2 * m + 3.0) * x * pmm
        out[..., flat_index(m + 1, m)] = p1
        for ell in range(m + 2, L + 1):
            a = np.sqrt((4.0 * ell * ell - 1.0) / (ell * ell - m * m))
            b = np.sqrt(((ell - 1.0) ** 2 - m * m) / (4.0 * (ell - 1.0) ** 2 - 1.0))
            p0, p1 = p1, a * (x * p1 - b * p0)
            out[..., flat_index(ell, m)] = p1
    ells, ms = degree_order(L)
    neg = ms < 0
    out[..., neg] = ((-1.0) ** ms[neg]) * out[..., flat_index(ells[neg], -ms[neg])]
    return out


@lru_cache(maxsize=None)
def _ladder(L: int) -> tuple[NDArray, NDArray, NDArray, NDArray]:
    ells, ms = degree_order(L)
    size = n_coeffs(L)
    up = np.where(ms < ells, flat_index(ells, np.minimum(ms + 1, ells)), size)
    down = np.where(ms > -ells, flat_index(ells, np.maximum(ms - 1, -ells)), size)
    a_up = np.sqrt(np.clip((ells - ms) * (ells + ms + 1), 0, None).astype(float))
    a_down = np.sqrt(np.clip((ells + ms) * (ells - ms + 1), 0, None).astype(float))
    return up, down, a_up, a_down


def theta_derivative(table: NDArray[np.float64], L: int) -> NDArray[np.float64]:
    """Apply d/dtheta to a table produced by :func:`legendre_table`.

    Uses the ladder identity
    ``dT_lm = (a+ T_l,m+1 - a- T_l,m-1) / 2``.
    """
    up, down, a_up, a_down = _ladder(L)
    padded = np.concatenate([table, np.zeros(table.shape[:-1] + (1,))], axis=-1)
    return 0.5 * (a_up * padded[..., up] - a_down * padded[..., down])


def to_spherical(points: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    pts = np.asarray(points, dtype=np.float64)
    norm = np.linalg.norm(pts, axis=-1)
    cos_theta = np.clip(pts[..., 2] / np.where(norm > 0, norm, 1.0), -1.0, 1.0)
    phi = np.arctan2(pts[..., 1], pts[..., 0])
    return cos_theta, phi


def sph_harm(L: int, points: NDArray[np.float64]) -> NDArray[np.complex128]:
    """All ``Y_lm`` for ``l <= L`` at unit vectors ``points`` (shape ``(..., 3)``)."""
    cos_theta, phi = to_spherical(points)
    _, ms = degree_order(L)
    return legendre_table(L, cos_theta) * np.exp(1j * ms * phi[..., None])


# ---------------------------------------------------------------------------
# Quadrature and transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class S2Quadrature:
    """Gauss-Legendre in cos(theta) times an equispaced azimuth."""

    degree: int
    cos_theta: NDArray[np.float64] = field(repr=False)
    theta_weights: NDArray[np.float64] = field(repr=False)
    phi: NDArray[np.float64] = field(repr=False)

    @property
    def n_theta(self) -> int:
        return self.cos_theta.size

    @property
    def n_phi(self) -> int:
        return self.phi.size

    @property
    def size(self) -> int:
        return self.n_theta * self.n_phi

    @cached_property
    def grid(self) -> NDArray[np.float64]:
        sin_theta = np.sqrt(1.0 - self.cos_theta**2)
        x = sin_theta[:, None] * np.cos(self.phi)[None, :]
        y = sin_theta[:, None] * np.sin(self.phi)[None, :]
        z = np.broadcast_to(self.cos_theta[:, None], x.shape)
        return np.stack([x, y, z], axis=-1)

    @property
    def nodes(self) -> NDArray[np.float64]:
        return self.grid.reshape(-1, 3)

    @cached_property
    def grid_weights(self) -> NDArray[np.float64]:
        return np.outer(self.theta_weights, np.full(self.n_phi, 2.0 * np.pi / self.n_phi))

    @property
    def weights(self) -> NDArray[np.float64]:
        return self.grid_weights.reshape(-1)

    def integrate(self, values: NDArray) -> NDArray:
        """Integrate samples given on the grid (``(..., nθ, nφ)`` or ``(..., N)``)."""
        vals = np.asarray(values)
        if vals.shape[-1] == self.size and (vals.ndim == 1 or vals.shape[-2:] != (self.n_theta, self.n_phi)):
            vals = vals.reshape(vals.shape[:-1] + (self.n_theta, self.n_phi))
        return np.sum(vals * self.grid_weights, axis=(-2, -1))

    def average(self, values: NDArray) -> NDArray:
        """Integral against the normalized measure (total mass 1)."""
        return self.integrate(values) / FOUR_PI


@lru_cache(maxsize=32)
def _quadrature(degree: int) -> S2Quadrature:
    n_theta = degree + 1
    n_phi = 2 * degree + 2
    x, w = np.polynomial.legendre.leggauss(n_theta)
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    for arr in (x, w, phi):
        arr.flags.writeable = False
    return S2Quadrature(degree, x, w, phi)


def quadrature_s2(exactness_degree: int, max_nodes: int | None = None) -> S2Quadrature:
    """Product rule exact for harmonic products through ``exactness_degree``."""
    if exactness_degree < 0:
        raise ValueError(f"Exactness degree must be non-negative, got {exactness_degree}")
    cap = DEFAULT_MAX_NODES if max_nodes is None else max_nodes
    count = (exactness_degree + 1) * (2 * exactness_degree + 2)
    if count > cap:
        raise ResourceError(
            f"Quadrature of exactness {exactness_degree} needs {count} nodes (cap {cap})"
        )
    return _quadrature(int(exactness_degree))


def _as_grid(samples: NDArray, quad: S2Quadrature) -> NDArray:
    vals = np.asarray(samples)
    if vals.shape[-2:] == (quad.n_theta, quad.n_phi):
        return vals
    if vals.shape[-1] != quad.size:
        raise ValueError(f"Expected {quad.size} samples per function, got {vals.shape[-1]}")
    return vals.reshape(vals.shape[:-1] + (quad.n_theta, quad.n_phi))


def analyze_coeffs(samples: NDArray, L: int, quad: S2Quadrature, degrees: Iterable[int] | None = None) -> NDArray[np.complex128]:
    """Batched analysis: coefficient arrays for samples of shape ``(..., nθ, nφ)``.

    With ``degrees`` given, only those degree blocks are computed and the
    result holds their concatenation.
    """
    if quad.degree < 2 * L:
        raise PreconditionError(
            f"Quadrature exactness {quad.degree} is below 2L = {2 * L}"
        )
    vals = _as_grid(samples, quad)
    spectrum = np.fft.fft(vals, axis=-1) * (2.0 * np.pi / quad.n_phi)
    ells, ms = degree_order(L)
    table = legendre_table(L, quad.cos_theta)
    if degrees is not None:
        keep = np.isin(ells, list(degrees))
        ms = ms[keep]
        table = table[:, keep]
    picked = spectrum[..., :, ms % quad.n_phi]
    return np.einsum("...ai,ai,a->...i", picked, table, quad.theta_weights)


def analyze(samples: NDArray, L: int, quad: S2Quadrature | None = None) -> SphFunction:
    """Harmonic coefficients up to degree ``L`` from samples on ``quad``."""
    if quad is None:
        quad = quadrature_s2(2 * L)
    coeffs = analyze_coeffs(samples, L, quad)
    if coeffs.ndim != 1:
        raise ValueError("analyze expects samples of a single function; use analyze_coeffs")
    return SphFunction(L, coeffs)


def analyze_callable(func, L: int, quad: S2Quadrature | None = None) -> SphFunction:
    """Analyze a vectorized callable of unit vectors."""
    if quad is None:
        quad = quadrature_s2(2 * L)
    return analyze(func(quad.grid), L, quad)


def synthesize(f: SphFunction, points: NDArray[np.float64]) -> NDArray[np.complex128]:
    return sph_harm(f.L, points) @ f.coeffs


def synthesize_grid(coeffs: NDArray[np.complex128], L: int, quad: S2Quadrature) -> NDArray[np.complex128]:
    """Evaluate coefficient arrays (``(..., (L+1)**2)``) on the quadrature grid."""
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    _, ms = degree_order(L)
    if 2 * L + 1 > quad.n_phi:
        raise PreconditionError(f"Azimuthal resolution {quad.n_phi} too small for degree {L}")
    table = legendre_table(L, quad.cos_theta)
    scatter = np.zeros((n_coeffs(L), quad.n_phi))
    scatter[np.arange(n_coeffs(L)), ms % quad.n_phi] = 1.0
    spectrum = np.empty(coeffs.shape[:-1] + (quad.n_theta, quad.n_phi), dtype=np.complex128)
    for a in range(quad.n_theta):
        spectrum[..., a, :] = (coeffs * table[a]) @ scatter
    return np.fft.ifft(spectrum, axis=-1) * quad.n_phi


# ---------------------------------------------------------------------------
# Diagonal operators
# ---------------------------------------------------------------------------


def apply_lambda0(f: SphFunction) -> SphFunction:
    """Dirichlet-to-Neumann map of the free Laplacian: multiply degree l by l."""
    return f.map_degrees(lambda ell: ell)


def laplace_s2(f: SphFunction) -> SphFunction:
    return f.map_degrees(lambda ell: ell * (ell + 1.0))


# ---------------------------------------------------------------------------
# Coherent states
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CoherentFrame:
    """Orthonormal pair ``(xi, eta)``; the null vector is ``z = xi + i eta``."""

    xi: NDArray[np.float64]
    eta: NDArray[np.float64]

    def __post_init__(self) -> None:
        xi = np.asarray(self.xi, dtype=np.float64).reshape(3)
        eta = np.asarray(self.eta, dtype=np.float64).reshape(3)
        if abs(xi @ xi - 1.0) > 1e-10 or abs(eta @ eta - 1.0) > 1e-10 or abs(xi @ eta) > 1e-10:
            raise ValueError("Frame vectors must be orthonormal")
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "eta", eta)

    @property
    def z(self) -> NDArray[np.complex128]:
        return self.xi + 1j * self.eta

    @property
    def momentum(self) -> NDArray[np.float64]:
        return np.cross(self.xi, self.eta)

    def rotated(self, t: float) -> "CoherentFrame":
        """Frame of ``exp(i t) z``."""
        c, s = np.cos(t), np.sin(t)
        return CoherentFrame(c * self.xi - s * self.eta, s * self.xi + c * self.eta)

    def transformed(self, rotation: NDArray[np.float64]) -> "CoherentFrame":
        return CoherentFrame(rotation @ self.xi, rotation @ self.eta)

    @classmethod
    def from_momentum(cls, mu: NDArray[np.float64], phase: float = 0.0) -> "CoherentFrame":
        xi, eta = frames_from_momenta(np.asarray(mu, dtype=np.float64)[None, :])
        return cls(xi[0], eta[0]).rotated(phase)


def frames_from_momenta(mus: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Canonical orthonormal frames with ``xi x eta = mu`` for each row of ``mus``."""
    mu = np.asarray(mus, dtype=np.float64)
    mu = mu / np.linalg.norm(mu, axis=-1, keepdims=True)
    helper = np.zeros_like(mu)
    axis = np.argmin(np.abs(mu), axis=-1)
    np.put_along_axis(helper, axis[..., None], 1.0, axis=-1)
    xi = helper - np.sum(helper * mu, axis=-1, keepdims=True) * mu
    xi /= np.linalg.norm(xi, axis=-1, keepdims=True)
    eta = np.cross(mu, xi)
    return xi, eta


def alpha_pow(frame: CoherentFrame, k: int, point: NDArray[np.float64]) -> NDArray[np.complex128]:
    """Coherent state ``(x . z)^k`` evaluated at unit vectors."""
    pts = np.asarray(point, dtype=np.float64)
    return (pts @ frame.xi + 1j * (pts @ frame.eta)) ** k


def coherent_coefficients(xi: NDArray[np.float64], eta: NDArray[np.float64], k: int) -> NDArray[np.complex128]:
    """Degree-``k`` coefficients of ``(x . (xi + i eta))^k`` for batches of frames.

    ``xi``/``eta`` have shape ``(..., 3)``; the result has shape ``(..., 2k+1)``.
    """
    xi = np.asarray(xi, dtype=np.float64)
    eta = np.asarray(eta, dtype=np.float64)
    batch = xi.shape[:-1]
    xi2 = xi.reshape(-1, 3)
    eta2 = eta.reshape(-1, 3)
    quad = quadrature_s2(2 * k)
    grid = quad.grid
    out = np.empty((xi2.shape[0], 2 * k + 1), dtype=np.complex128)
    for start in range(0, xi2.shape[0], FRAME_BATCH):
        sl = slice(start, start + FRAME_BATCH)
        dots = np.einsum("abi,ni->nab", grid, xi2[sl]) + 1j * np.einsum("abi,ni->nab", grid, eta2[sl])
        out[sl] = analyze_coeffs(dots**k, k, quad, degrees=[k])
    return out.reshape(batch + (2 * k + 1,))


def coherent_state(frame: CoherentFrame, k: int, L: int | None = None) -> SphFunction:
    """The coherent state as a :class:`SphFunction` of degree ``max(k, L)``."""
    L = k if L is None else max(L, k)
    out = SphFunction.zeros(L)
    out.coeffs[k * k : (k + 1) ** 2] = coherent_coefficients(frame.xi, frame.eta, k)
    return out


def alpha_norms(k: int) -> tuple[float, float]:
    """Squared norms of the coherent state on the sphere and of its solid extension on the ball."""
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    sphere = 2.0 * np.pi * np.exp(betaln(k + 1.0, 0.5))
    ball = np.pi / (k + 1.0) * np.exp(betaln(k + 2.0, 0.5))
    return float(sphere), float(ball)


def inverse_norm_expansion(k: float, printed: bool = False) -> float:
    """Large-k expansion of ``1 / (2 pi B(k+1, 1/2))`` through the k^-2 correction.

    ``printed=True`` substitutes the literal constant ``3/(4(2 pi))`` for the
    ``3/(8k)`` term; that variant is kept for discrepancy reports only.
    """
    first = 3.0 / (8.0 * np.pi) if printed else 3.0 / (8.0 * k)
    if printed:
        logger.warning("Using printed coherent-norm expansion term 3/(4(2pi)) instead of 3/(4(2k))")
    series = 1.0 + first - 7.0 / (128.0 * k * k)
    return float(np.sqrt(k / np.pi) / (2.0 * np.pi) * series)
