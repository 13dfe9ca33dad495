"""Berezin symbols on the degree-k harmonics and the star-product machinery on the orbit space."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import eigh

from .ballsolver import DtNMatrix
from .errors import PreconditionError
from .geodesics import LocalJet, OFunction, OrbitPoint, calculus_O, gradient_inner, laplace_O, local_jets
from .harmonics import (
    CoherentFrame,
    SphFunction,
    alpha_norms,
    analyze,
    coherent_coefficients,
    degree_order,
    frames_from_momenta,
    quadrature_s2,
    synthesize,
)

if TYPE_CHECKING:
    from .invariants import SymbolJet

logger = logging.getLogger(__name__)

HERMITIAN_TOL = 1e-8
ILL_CONDITIONED = 1e10


@dataclass
class BlockOperator:
    """Dense operator on the degree-``k`` harmonics in the ``(k, m)`` basis."""

    k: int
    matrix: NDArray[np.complex128] = field(repr=False)

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.complex128)
        n = 2 * self.k + 1
        if self.matrix.shape != (n, n):
            raise ValueError(f"Block for k={self.k} must be {n}x{n}, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError(f"Block for k={self.k} has non-finite entries")

    @classmethod
    def identity(cls, k: int) -> "BlockOperator":
        return cls(k, np.eye(2 * k + 1))

    @classmethod
    def from_dtn(cls, dtn: DtNMatrix, k: int, part: str = "full") -> "BlockOperator":
        if k > dtn.L:
            raise PreconditionError(f"k={k} exceeds the matrix degree {dtn.L}")
        source = dtn.matrix if part == "full" else dtn.perturbation()
        return cls(k, dtn.block(k, matrix=source).copy())

    def hermitian_defect(self) -> float:
        norm = np.linalg.norm(self.matrix)
        return 0.0 if norm == 0 else float(np.linalg.norm(self.matrix - self.matrix.conj().T) / norm)

    @property
    def self_adjoint(self) -> bool:
        return self.hermitian_defect() <= HERMITIAN_TOL

    def symmetrized(self) -> "BlockOperator":
        return BlockOperator(self.k, 0.5 * (self.matrix + self.matrix.conj().T))

    def __matmul__(self, other: "BlockOperator") -> "BlockOperator":
        if other.k != self.k:
            raise PreconditionError(f"Cannot compose blocks of degree {self.k} and {other.k}")
        return BlockOperator(self.k, self.matrix @ other.matrix)


# ---------------------------------------------------------------------------
# Symbols
# ---------------------------------------------------------------------------


def _block_matrix(T: BlockOperator | DtNMatrix | NDArray, k: int) -> NDArray[np.complex128]:
    if isinstance(T, DtNMatrix):
        if k > T.L:
            raise PreconditionError(f"Coherent state of degree {k} is not representable at L={T.L}")
        return T.block(k)
    if isinstance(T, BlockOperator):
        if T.k != k:
            raise PreconditionError(f"Block has degree {T.k}, symbol requested at k={k}")
        return T.matrix
    return np.asarray(T, dtype=np.complex128)


def berezin_symbols(T, xi: NDArray[np.float64], eta: NDArray[np.float64], k: int) -> NDArray[np.complex128]:
    """Batched ``<T α, α> / <α, α>`` for frames ``(xi, eta)`` of shape ``(N, 3)``."""
    M = _block_matrix(T, k)
    C = coherent_coefficients(xi, eta, k)
    norm_sq, _ = alpha_norms(k)
    return np.einsum("ni,ij,nj->n", C.conj(), M, C) / norm_sq


def berezin_symbol(T, frame: CoherentFrame, k: int) -> complex:
    return complex(berezin_symbols(T, frame.xi[None, :], frame.eta[None, :], k)[0])


@dataclass
class SymbolSamples:
    """Symbol values on an orbit grid for several degrees."""

    mus: NDArray[np.float64] = field(repr=False)
    ks: NDArray[np.int64]
    values: NDArray[np.complex128] = field(repr=False)  # (n_orbits, n_k)

    def rows(self):
        for i, mu in enumerate(self.mus):
            for j, k in enumerate(self.ks):
                v = self.values[i, j]
                yield (float(mu[0]), float(mu[1]), float(mu[2]), int(k), float(v.real), float(v.imag))


def sample_symbols(
    dtn: DtNMatrix, mus: NDArray[np.float64], ks: Sequence[int], part: str = "perturbation", scale_by_k: bool = False
) -> SymbolSamples:
    """Symbols of ``Λ_q`` (``part="full"``) or ``S = Λ_q - Λ_0`` at every ``(orbit, k)``."""
    xi, eta = frames_from_momenta(mus)
    values = np.empty((len(mus), len(ks)), dtype=np.complex128)
    source = dtn.matrix if part == "full" else dtn.perturbation()
    for j, k in enumerate(ks):
        values[:, j] = berezin_symbols(dtn.block(k, matrix=source), xi, eta, k) * (k if scale_by_k else 1)
    return SymbolSamples(np.asarray(mus, dtype=float), np.asarray(ks, dtype=np.int64), values)


# ---------------------------------------------------------------------------
# Expansion fits in 1/k
# ---------------------------------------------------------------------------


@dataclass
class FitResult:
    """Least-squares coefficients of ``Σ_j c_j k^-j`` (one column per series)."""

    coefficients: NDArray[np.complex128] = field(repr=False)  # (J+1, n_series)
    residuals: NDArray[np.float64] = field(repr=False)
    condition: float
    ks: NDArray[np.float64] = field(repr=False)
    ill_conditioned: bool = False

    @property
    def order(self) -> int:
        return self.coefficients.shape[0] - 1

    def coefficient(self, j: int) -> NDArray[np.complex128]:
        return self.coefficients[j]

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "ks": [float(k) for k in self.ks],
            "condition": self.condition,
            "ill_conditioned": self.ill_conditioned,
            "max_residual": float(np.max(self.residuals, initial=0.0)),
        }


def fit_series(ks: Sequence[float], values: NDArray, J: int) -> FitResult:
    """Weighted least squares of ``values`` (rows indexed by k) against ``{k^-j}``, weights ``k^J``."""
    k = np.asarray(ks, dtype=float)
    y = np.asarray(values)
    if y.ndim == 1:
        y = y[:, None]
    if len(np.unique(k)) < J + 3:
        raise PreconditionError(f"Order-{J} fit needs at least {J + 3} distinct k values, got {len(np.unique(k))}")
    V = k[:, None] ** -np.arange(J + 1)[None, :]
    w = k**J
    A = V * w[:, None]
    # normalize columns so the reported condition reflects the basis, not the scale
    scale = np.linalg.norm(A, axis=0)
    coeffs, *_ = np.linalg.lstsq(A / scale, y * w[:, None], rcond=None)
    coeffs = coeffs / scale[:, None]
    condition = float(np.linalg.cond(A / scale))
    residuals = np.linalg.norm((V @ coeffs - y) * w[:, None], axis=0)
    flagged = condition > ILL_CONDITIONED
    if flagged:
        logger.warning("Expansion fit of order %d is ill-conditioned (cond %.2e)", J, condition)
    return FitResult(coeffs, residuals, condition, k, flagged)


def expansion_fit(samples: SymbolSamples, J: int, k_range: tuple[int, int] | None = None) -> FitResult:
    """Per-orbit fit of the symbol samples in powers of ``1/k``."""
    mask = np.ones(len(samples.ks), dtype=bool)
    if k_range is not None:
        mask = (samples.ks >= k_range[0]) & (samples.ks <= k_range[1])
    return fit_series(samples.ks[mask], samples.values[:, mask].T, J)


# ---------------------------------------------------------------------------
# Berezin kernel and transform
# ---------------------------------------------------------------------------


def _momentum(p) -> NDArray[np.float64]:
    return p.momentum if isinstance(p, OrbitPoint) else np.asarray(p, dtype=float)


def berezin_kernel(p, q, k: int) -> NDArray[np.float64] | float:
    """``(2k+1) ((1 + cos θ)/2)^(2k)`` with θ the angle between momenta."""
    cos = np.clip(np.sum(_momentum(p) * _momentum(q), axis=-1), -1.0, 1.0)
    return (2 * k + 1) * ((1.0 + cos) / 2.0) ** (2 * k)


def funk_hecke_eigenvalue(k: int, ell: int) -> float:
    """Eigenvalue of the Berezin transform on degree ``ell``: ``Π_{j<=ell} (2k+1-j)/(2k+1+j)``."""
    value = 1.0
    for j in range(1, ell + 1):
        value *= (2 * k + 1 - j) / (2 * k + 1 + j)
    return value


def berezin_expansion_eigenvalue(k: float, ell: int, order: int = 2) -> float:
    """Truncation of ``1 - L/(2k) + L(L+2)/(8k²)`` with ``L = ell(ell+1)``."""
    L = ell * (ell + 1.0)
    terms = (1.0, -L / (2.0 * k), L * (L + 2.0) / (8.0 * k * k))
    return float(sum(terms[: order + 1]))


def berezin_transform(f: SphFunction, k: int) -> OFunction:
    ells, _ = degree_order(f.L)
    factors = np.array([funk_hecke_eigenvalue(k, ell) for ell in range(f.L + 1)])
    return OFunction(f.L, f.coeffs * factors[ells])


def berezin_transform_quadrature(f: SphFunction, k: int, exactness: int | None = None) -> OFunction:
    """Berezin transform by direct quadrature against the kernel."""
    inner = quadrature_s2(exactness if exactness is not None else f.L + 2 * k)
    outer = quadrature_s2(2 * f.L)
    K = berezin_kernel(outer.nodes[:, None, :], inner.nodes[None, :, :], k)
    values = (K * (inner.weights * synthesize(f, inner.nodes))[None, :]).sum(axis=1) / (4.0 * np.pi)
    return OFunction(f.L, analyze(values, f.L, outer).coeffs)


# ---------------------------------------------------------------------------
# Star-product operators
# ---------------------------------------------------------------------------


def D1_from_jets(jf: LocalJet, jg: LocalJet) -> NDArray[np.complex128]:
    return 0.5 * (jf.g1 - 1j * jf.g2) * (jg.g1 + 1j * jg.g2)


def D2_from_jets(jf: LocalJet, jg: LocalJet) -> NDArray[np.complex128]:
    left = jf.h11 - jf.h22 - 2j * jf.h12
    right = jg.h11 - jg.h22 + 2j * jg.h12
    return left * right / 8.0


def D1(f: SphFunction, g: SphFunction, points: NDArray[np.float64]) -> NDArray[np.complex128]:
    """First star-product operator: ``(ν²/2) ∂_w f ∂_w̄ g`` in a stereographic chart."""
    jf, jg = local_jets([f, g], points)
    return D1_from_jets(jf, jg)


def D2(f: SphFunction, g: SphFunction, points: NDArray[np.float64]) -> NDArray[np.complex128]:
    """Second star-product operator, from covariant Hessians in an orthonormal frame."""
    jf, jg = local_jets([f, g], points)
    return D2_from_jets(jf, jg)


def exact_composition_check(
    A: BlockOperator, B: BlockOperator, mus: NDArray[np.float64], exactness: int | None = None
) -> float:
    """Max over ``mus`` of ``|S_AB(p) - (2k+1) ∫ <Bα_p, α_q><Aα_q, α_p> / |α|⁴ dq|``."""
    if A.k != B.k:
        raise PreconditionError(f"Blocks have different degrees {A.k} and {B.k}")
    k = A.k
    exactness = 4 * k + 2 if exactness is None else exactness
    if exactness < 4 * k + 2:
        raise PreconditionError(f"Composition quadrature exactness {exactness} below 4k+2 = {4 * k + 2}")
    quad = quadrature_s2(exactness)
    norm_sq, _ = alpha_norms(k)
    Cp = coherent_coefficients(*frames_from_momenta(mus), k)
    Cq = coherent_coefficients(*frames_from_momenta(quad.nodes), k)
    a_qp = Cp.conj() @ A.matrix @ Cq.T  # <A α_q, α_p>
    b_pq = Cq.conj() @ B.matrix @ Cp.T  # <B α_p, α_q>
    integral = (2 * k + 1) * (a_qp * b_pq.T) @ quad.weights / (4.0 * np.pi) / norm_sq**2
    direct = np.einsum("ni,ij,nj->n", Cp.conj(), A.matrix @ B.matrix, Cp) / norm_sq
    return float(np.max(np.abs(direct - integral), initial=0.0))


# ---------------------------------------------------------------------------
# Exponential symbol
# ---------------------------------------------------------------------------


def exp_symbol_coeffs(
    jet: "SymbolJet", t: float, points: NDArray[np.float64]
) -> tuple[NDArray[np.complex128], NDArray[np.complex128], NDArray[np.complex128]]:
    """``(a0, a1, a2)`` of the symbol of ``exp(it Λ0 Q)`` sampled at ``points``."""
    q0f, q1f, q2f = jet.q0, jet.q1, jet.q2
    _, grad_sq = calculus_O(q0f)
    j0, j1 = local_jets([q0f, q1f], points)
    q0 = j0.value
    q1 = j1.value
    q2 = synthesize(q2f, points)
    G = j0.g1 * j0.g1 + j0.g2 * j0.g2
    grad_G = gradient_inner(q0f, grad_sq, points)
    lap0 = synthesize(laplace_O(q0f), points)
    phase = np.exp(1j * t * q0)
    a0 = phase
    a1 = phase * (-(t**2 / 4.0) * G + 1j * t * q1)
    a2 = phase * (
        (t**4 / 32.0) * G**2
        - 1j * (t**3 / 12.0) * (grad_G + 0.5 * G * lap0 + 3.0 * q1 * G)
        - (t**2 / 2.0) * (q1**2 + j0.g1 * j1.g1 + j0.g2 * j1.g2 + D2_from_jets(j0, j0))
        + 1j * t * q2
    )
    return a0, a1, a2


def exp_symbol_recursion_residual(
    jet: "SymbolJet", t: float, points: NDArray[np.float64], dt: float = 1e-4, degree: int = 40
) -> tuple[float, float]:
    """Max deviation of ``ȧ_j`` from ``i q0 a_j + F_j`` for ``j = 1, 2``.

    The time derivative is a central difference; the bidifferential terms
    act on ``a0, a1`` re-expanded at ``degree`` on the orbit space.
    """
    quad = quadrature_s2(2 * degree)
    a0s, a1s, _ = exp_symbol_coeffs(jet, t, quad.nodes)
    A0 = analyze(a0s, degree, quad)
    A1 = analyze(a1s, degree, quad)
    q0f, q1f = jet.q0.resized(degree), jet.q1.resized(degree)
    jq0, jq1, ja0, ja1 = local_jets([q0f, q1f, A0, A1], points)

    a0, a1, a2 = exp_symbol_coeffs(jet, t, points)
    _, p1, p2 = exp_symbol_coeffs(jet, t + dt, points)
    _, m1, m2 = exp_symbol_coeffs(jet, t - dt, points)
    d1 = (p1 - m1) / (2.0 * dt)
    d2 = (p2 - m2) / (2.0 * dt)
    q0 = jq0.value
    q1 = jq1.value
    q2 = synthesize(jet.q2, points)
    F1 = 1j * (D1_from_jets(jq0, ja0) + q1 * a0)
    F2 = 1j * (
        q1 * a1 + q2 * a0 + D1_from_jets(jq1, ja0) + D1_from_jets(jq0, ja1) + D2_from_jets(jq0, ja0)
    )
    r1 = np.max(np.abs(d1 - (1j * q0 * a1 + F1)), initial=0.0)
    r2 = np.max(np.abs(d2 - (1j * q0 * a2 + F2)), initial=0.0)
    return float(r1), float(r2)


def numeric_exp_symbol(Q_block: BlockOperator, t: float, frame: CoherentFrame, k: int | None = None) -> complex:
    """Berezin symbol of ``exp(i t k Q)`` through a Hermitian eigendecomposition."""
    k = Q_block.k if k is None else k
    block = Q_block
    defect = block.hermitian_defect()
    if defect > HERMITIAN_TOL:
        logger.warning("Symmetrizing block k=%d with Hermitian defect %.2e", k, defect)
    block = block.symmetrized()
    values, vectors = eigh(block.matrix)
    U = (vectors * np.exp(1j * t * k * values)) @ vectors.conj().T
    return berezin_symbol(BlockOperator(k, U), frame, k)
