"""Symbol jets on the orbit space and the band-invariant functionals built from them."""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.typing import NDArray

from .ballsolver import Potential
from .berezin import D2_from_jets
from .errors import PreconditionError
from .gaunt import GauntTable
from .geodesics import (
    OFunction,
    W_field,
    as_ofunction,
    calculus_O,
    gradient_inner,
    laplace_O,
    local_jets,
    radon_field,
)
from .harmonics import S2Quadrature, SphFunction, analyze, quadrature_s2, synthesize

logger = logging.getLogger(__name__)

KAPPA_CHOICES = (0.5, 1.0)
PHI_ARG_CHOICES = ("q0", "qhat")
SIGN_CHOICES = ("+", "-")


@dataclass(frozen=True)
class Switches:
    """Convention switches for the formulas whose printed forms disagree.

    ``kappa_delta``: weight of the sphere Laplacian inside ``q1``.
    ``phi_arg``: evaluate the derivative terms at ``q0`` or at ``q̂ = 2 q0``.
    ``delta_s2_sign``: ``"-"`` reads the sphere Laplacian as the
    negative-semidefinite operator, ``"+"`` as its positive counterpart.
    """

    kappa_delta: float = 0.5
    phi_arg: str = "q0"
    delta_s2_sign: str = "-"

    def __post_init__(self) -> None:
        if self.kappa_delta not in KAPPA_CHOICES:
            raise ValueError(f"kappa_delta must be one of {KAPPA_CHOICES}, got {self.kappa_delta}")
        if self.phi_arg not in PHI_ARG_CHOICES:
            raise ValueError(f"phi_arg must be one of {PHI_ARG_CHOICES}, got {self.phi_arg!r}")
        if self.delta_s2_sign not in SIGN_CHOICES:
            raise ValueError(f"delta_s2_sign must be one of {SIGN_CHOICES}, got {self.delta_s2_sign!r}")

    @property
    def sign(self) -> float:
        return -1.0 if self.delta_s2_sign == "-" else 1.0

    def as_dict(self) -> dict:
        return asdict(self)

    def label(self) -> str:
        return f"kappa={self.kappa_delta},phi_arg={self.phi_arg},sign={self.delta_s2_sign}"

    @classmethod
    def scan(cls) -> Iterator["Switches"]:
        """All eight convention combinations."""
        for kappa, arg, sign in itertools.product(KAPPA_CHOICES, PHI_ARG_CHOICES, SIGN_CHOICES):
            yield cls(kappa, arg, sign)


# ---------------------------------------------------------------------------
# Test functions
# ---------------------------------------------------------------------------

Scalar = Callable[[NDArray[np.float64]], NDArray[np.float64]]


@dataclass(frozen=True)
class TestFunction:
    """A test function with its first derivatives supplied analytically."""

    __test__ = False  # not a pytest class

    name: str
    value: Scalar
    d1: Scalar
    d2: Scalar
    d3: Scalar | None = None
    degree: int | None = None  # polynomial degree, None for transcendental

    @classmethod
    def polynomial(cls, coeffs: Sequence[float], name: str | None = None) -> "TestFunction":
        """``coeffs[i]`` multiplies ``s**i``."""
        poly = np.polynomial.Polynomial(np.asarray(coeffs, dtype=float))
        return cls(
            name or "poly" + str(list(coeffs)).replace(" ", ""),
            poly,
            poly.deriv(1),
            poly.deriv(2),
            poly.deriv(3),
            max(poly.degree(), 0),
        )

    @classmethod
    def one(cls) -> "TestFunction":
        return cls.polynomial([1.0], "one")

    @classmethod
    def identity(cls) -> "TestFunction":
        return cls.polynomial([0.0, 1.0], "id")

    @classmethod
    def square(cls) -> "TestFunction":
        return cls.polynomial([0.0, 0.0, 1.0], "square")

    @classmethod
    def gauss(cls, sigma: float) -> "TestFunction":
        if sigma <= 0:
            raise ValueError(f"Gaussian width must be positive, got {sigma}")
        s2 = sigma * sigma

        def value(s):
            return np.exp(-np.asarray(s) ** 2 / (2.0 * s2))

        return cls(
            f"gauss({sigma:g})",
            value,
            lambda s: -np.asarray(s) / s2 * value(s),
            lambda s: (np.asarray(s) ** 2 / s2**2 - 1.0 / s2) * value(s),
            lambda s: (3.0 * np.asarray(s) / s2**2 - np.asarray(s) ** 3 / s2**3) * value(s),
        )

    def check_consistency(self, points: NDArray[np.float64] | None = None, h: float = 1e-5, tol: float = 1e-6) -> None:
        """Spot-check the supplied derivatives against central differences."""
        s = np.linspace(-1.5, 1.5, 13) if points is None else np.asarray(points, dtype=float)
        pairs = [("d1", self.value, self.d1), ("d2", self.d1, self.d2)]
        if self.d3 is not None:
            pairs.append(("d3", self.d2, self.d3))
        for label, lower, upper in pairs:
            fd = (lower(s + h) - lower(s - h)) / (2.0 * h)
            exact = upper(s)
            err = np.max(np.abs(fd - exact) / np.maximum(1.0, np.abs(exact)))
            if err > tol:
                raise PreconditionError(f"Test function {self.name}: {label} inconsistent (error {err:.2e})")


# ---------------------------------------------------------------------------
# Symbol jets
# ---------------------------------------------------------------------------


def _signed(q: Potential, sign: float) -> dict[str, SphFunction]:
    """Boundary fields of ``q`` with the sphere Laplacian read under ``sign``."""
    return {
        "q": q.boundary(),
        "dr": q.radial_derivative(1),
        "drr": q.radial_derivative(2),
        "lap": q.boundary_laplacian(1) * sign,
        "lap2": q.boundary_laplacian(2),
        "dr_lap": q.radial_derivative_laplacian() * sign,
    }


def _radon(f: SphFunction, L: int) -> OFunction:
    return as_ofunction(radon_field(f).resized(L))


@dataclass
class SymbolJet:
    """Leading symbols ``(q0, q1, q2)`` of the averaged potential on the orbit space."""

    q0: OFunction
    q1: OFunction
    q2: OFunction
    W: OFunction
    switches: Switches
    L: int
    includes_w: bool = True

    def is_real(self, tol: float = 1e-10) -> bool:
        return all(f.is_real(tol) for f in (self.q0, self.q1, self.q2))

    def fields(self) -> dict[str, OFunction]:
        return {"q0": self.q0, "q1": self.q1, "q2": self.q2, "W": self.W}


def symbol_jet(
    q: Potential,
    L: int | None = None,
    switches: Switches = Switches(),
    include_w: bool = True,
    Nt: int = 64,
    Ns: int = 64,
    workers: int = 1,
    table: GauntTable | None = None,
    w_field: OFunction | None = None,
) -> SymbolJet:
    """Build ``q0 = ½ I(q)``, ``q1`` and ``q2`` (with the W field) at degree ``L``.

    All boundary restrictions are taken at ``r = 1`` before the Radon
    transform. ``L`` defaults to ``2 deg q + 4``. A precomputed ``w_field``
    is reused as is; it does not depend on the switches.
    """
    d = q.max_degree
    L = 2 * d + 4 if L is None else L
    if L < 2 * d:
        raise PreconditionError(f"Jet degree {L} cannot hold q^2 (needs {2 * d})")
    s = switches.sign
    f = _signed(q, s)
    square = q.square_boundary(table or GauntTable(2 * d))
    q0 = _radon(f["q"], L) * 0.5
    q1 = _radon(f["q"] * -3.0 - f["dr"] + f["lap"] * switches.kappa_delta, L) * 0.25
    inner = (
        f["q"] * (307.0 / 32.0)
        + square * 2.0
        + f["dr"] * 5.0
        + f["drr"]
        - f["lap"] * (9.0 / 8.0)
        + f["lap2"] * (1.0 / 8.0)
        - f["dr_lap"] * 0.5
    )
    q2 = _radon(inner, L) * 0.125
    if include_w and w_field is not None:
        W = as_ofunction(w_field.resized(L))
    elif include_w and q.constant_value() is None:
        W = as_ofunction(W_field(q, L, Nt=Nt, Ns=Ns, workers=workers))
    else:
        W = OFunction.zeros(L)
    q2 = as_ofunction(q2 + W)
    logger.debug("Symbol jet for q=%s at L=%d (%s)", q.hash(), L, switches.label())
    return SymbolJet(as_ofunction(q0), as_ofunction(q1), q2, W, switches, L, include_w)


def _base(jet: SymbolJet) -> OFunction:
    """The function whose derivatives enter β1 and β2 under the ``phi_arg`` switch."""
    return jet.q0 if jet.switches.phi_arg == "q0" else as_ofunction(jet.q0 * 2.0)


def gamma_terms(jet: SymbolJet) -> tuple[OFunction, OFunction]:
    """``(Γ1, Γ2)``; Γ2 is re-expanded at twice the jet degree."""
    base = _base(jet)
    lap_base = laplace_O(base)
    gamma1 = as_ofunction(jet.q2 - laplace_O(jet.q1) * 0.25 - laplace_O(lap_base) * (7.0 / 96.0))

    L2 = 2 * jet.L
    quad = quadrature_s2(2 * L2)
    nodes = quad.nodes
    _, grad_sq = calculus_O(base)
    lap = synthesize(lap_base, nodes)
    q1 = synthesize(jet.q1, nodes)
    j0, j1 = local_jets([base, jet.q1], nodes)
    samples = (
        (7.0 / 96.0) * lap**2
        + (5.0 / 96.0) * synthesize(laplace_O(grad_sq), nodes)
        + 0.25 * q1 * lap
        + 0.5 * (q1**2 + j0.g1 * j1.g1 + j0.g2 * j1.g2 + D2_from_jets(j0, j0))
    )
    gamma2 = OFunction(L2, analyze(samples, L2, quad).coeffs)
    return gamma1, gamma2


# ---------------------------------------------------------------------------
# Band invariants
# ---------------------------------------------------------------------------


@dataclass
class InvariantReport:
    phi: str
    beta0: float
    beta1: float
    beta2: float
    breakdown: dict[str, float] = field(default_factory=dict)
    switches: dict = field(default_factory=dict)
    quadrature: dict = field(default_factory=dict)

    @property
    def betas(self) -> tuple[float, float, float]:
        return self.beta0, self.beta1, self.beta2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OddInvariantReport:
    phi: str
    beta0: float
    beta1: float
    breakdown: dict[str, float] = field(default_factory=dict)
    switches: dict = field(default_factory=dict)
    quadrature: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _adaptive_average(
    integrands: Callable[[NDArray[np.float64]], dict[str, NDArray]],
    start: int,
    tol: float,
    max_doublings: int,
) -> tuple[dict[str, float], dict]:
    """Average each integrand over the orbit space, doubling exactness until stable."""

    def evaluate(exactness: int) -> dict[str, float]:
        quad = quadrature_s2(exactness)
        values = integrands(quad.nodes)
        return {key: float(np.real(quad.average(v))) for key, v in values.items()}

    exactness = start
    current = evaluate(exactness)
    drift = float("inf")
    for _ in range(max_doublings):
        refined = evaluate(2 * exactness)
        drift = max(abs(refined[key] - current[key]) for key in current)
        exactness *= 2
        current = refined
        if drift < tol:
            break
    else:
        logger.warning("Orbit-space quadrature drift %.2e above %.1e at exactness %d", drift, tol, exactness)
    return current, {"exactness": exactness, "drift": drift}


def beta_predict(
    jet: SymbolJet,
    phi: TestFunction,
    tol: float = 1e-8,
    max_doublings: int = 3,
    gammas: tuple[OFunction, OFunction] | None = None,
) -> InvariantReport:
    """``β0 = ∫φ(q0)``, ``β1 = ∫φ'(u)(¼Δu + q1)``, ``β2 = ∫φ''(u)Γ2 + ∫φ'(u)Γ1``.

    ``u`` is ``q0`` or ``2 q0`` according to ``jet.switches.phi_arg``.
    Integrals use the normalized measure on the orbit space.
    """
    gamma1, gamma2 = gamma_terms(jet) if gammas is None else gammas
    base = _base(jet)
    lap_base = laplace_O(base)

    def integrands(nodes: NDArray[np.float64]) -> dict[str, NDArray]:
        q0 = synthesize(jet.q0, nodes).real
        u = synthesize(base, nodes).real
        dphi = phi.d1(u)
        return {
            "beta0": phi.value(q0),
            "beta1.laplace": dphi * 0.25 * synthesize(lap_base, nodes),
            "beta1.q1": dphi * synthesize(jet.q1, nodes),
            "beta2.gamma2": phi.d2(u) * synthesize(gamma2, nodes),
            "beta2.gamma1": dphi * synthesize(gamma1, nodes),
        }

    parts, quad_meta = _adaptive_average(integrands, 2 * gamma2.L + 8, tol, max_doublings)
    quad_meta["L"] = jet.L
    quad_meta["includes_w"] = jet.includes_w
    return InvariantReport(
        phi=phi.name,
        beta0=parts["beta0"],
        beta1=parts["beta1.laplace"] + parts["beta1.q1"],
        beta2=parts["beta2.gamma2"] + parts["beta2.gamma1"],
        breakdown=parts,
        switches=jet.switches.as_dict(),
        quadrature=quad_meta,
    )


@dataclass
class OddJet:
    """Symbols ``(q̃0, q̃1)`` for potentials whose boundary restriction is odd."""

    q0: OFunction
    q1: OFunction
    radon_dr: OFunction
    W: OFunction
    switches: Switches
    L: int


def odd_jet(
    q: Potential,
    L: int | None = None,
    switches: Switches = Switches(),
    include_w: bool = True,
    Nt: int = 64,
    Ns: int = 64,
    workers: int = 1,
    w_field: OFunction | None = None,
) -> OddJet:
    if not q.restriction_odd:
        raise PreconditionError("Odd-case invariants need a potential with odd boundary restriction")
    d = q.max_degree
    L = 2 * d + 4 if L is None else L
    f = _signed(q, switches.sign)
    square = q.square_boundary(GauntTable(2 * d))
    radon_dr = _radon(f["dr"], L)
    q0 = radon_dr * -0.25
    q1 = _radon(square * 2.0 + f["dr"] * 5.0 + f["drr"] - f["dr_lap"] * 0.5, L) * 0.125
    if not include_w:
        W = OFunction.zeros(L)
    elif w_field is not None:
        W = as_ofunction(w_field.resized(L))
    else:
        W = as_ofunction(W_field(q, L, Nt=Nt, Ns=Ns, workers=workers))
    return OddJet(as_ofunction(q0), as_ofunction(q1 + W), radon_dr, W, switches, L)


def odd_predict(
    q: Potential,
    phi: TestFunction,
    L: int | None = None,
    switches: Switches = Switches(),
    include_w: bool = True,
    tol: float = 1e-8,
    max_doublings: int = 3,
    jet: OddJet | None = None,
) -> OddInvariantReport:
    """``β̃0 = ∫φ(q̃0)`` and ``β̃1 = ∫φ'(q̃0)(-(1/16)Δ I(∂_r q) + q̃1)``."""
    jet = jet or odd_jet(q, L, switches, include_w)
    lap = laplace_O(jet.radon_dr)

    def integrands(nodes: NDArray[np.float64]) -> dict[str, NDArray]:
        q0 = synthesize(jet.q0, nodes).real
        dphi = phi.d1(q0)
        return {
            "beta0": phi.value(q0),
            "beta1.laplace": dphi * (-1.0 / 16.0) * synthesize(lap, nodes),
            "beta1.q1": dphi * synthesize(jet.q1, nodes),
        }

    parts, quad_meta = _adaptive_average(integrands, 2 * jet.L + 8, tol, max_doublings)
    quad_meta["L"] = jet.L
    return OddInvariantReport(
        phi=phi.name,
        beta0=parts["beta0"],
        beta1=parts["beta1.laplace"] + parts["beta1.q1"],
        breakdown=parts,
        switches=jet.switches.as_dict(),
        quadrature=quad_meta,
    )


# ---------------------------------------------------------------------------
# Matrix-element predictions
# ---------------------------------------------------------------------------

MATRIX_ELEMENT_VARIANTS = ("combined", "stationary")


def matrix_element_prediction(
    q: Potential,
    variant: str = "combined",
    switches: Switches = Switches(),
    L: int | None = None,
) -> list[OFunction]:
    """Coefficient fields ``P_j`` with ``<S α, α> ≈ 2π √(π/k) Σ_j P_j / (2k)^j``, j = 1..3.

    ``S = Λ_q - Λ_0`` and the Radon transform is the normalized circle
    average. The ``"combined"`` third-order field includes the second
    Neumann term (``-q²``, ``-3/2`` on the Laplacian); ``"stationary"`` is
    the first Neumann term alone (``-7/2``, no ``q²``).
    """
    if variant not in MATRIX_ELEMENT_VARIANTS:
        raise ValueError(f"Unknown matrix-element variant {variant!r}")
    d = q.max_degree
    L = 2 * d if L is None else L
    f = _signed(q, switches.sign)
    p1 = f["q"]
    p2 = f["q"] * (-15.0 / 4.0) - f["dr"] + f["lap"] * 0.5
    p3 = (
        f["q"] * (405.0 / 32.0)
        + f["dr"] * (23.0 / 4.0)
        + f["drr"]
        + f["lap"] * (-1.5 if variant == "combined" else -3.5)
        + f["lap2"] * (1.0 / 8.0)
        - f["dr_lap"] * 0.5
    )
    if variant == "combined":
        p3 = p3 - q.square_boundary(GauntTable(2 * d))
    return [_radon(p, L) for p in (p1, p2, p3)]


# ---------------------------------------------------------------------------
# Integration by parts on the orbit space
# ---------------------------------------------------------------------------


def _by_parts_quadrature(L: int, F: TestFunction, exactness: int | None) -> S2Quadrature:
    if exactness is None:
        exactness = ((F.degree if F.degree is not None else 6) + 2) * L + 4
    return quadrature_s2(exactness)


def by_parts_residual(u: SphFunction, v: SphFunction, F: TestFunction, exactness: int | None = None) -> float:
    """``∫vF''(u)|∇u|² - (∫F'(u) v Δu - ∫F(u) Δv)`` with the positive Laplacian."""
    L = max(u.L, v.L)
    quad = _by_parts_quadrature(L, F, exactness)
    nodes = quad.nodes
    uu = synthesize(u, nodes).real
    vv = synthesize(v, nodes)
    lhs = vv * F.d2(uu) * gradient_inner(u, u, nodes)
    rhs = F.d1(uu) * vv * synthesize(laplace_O(u), nodes) - F.value(uu) * synthesize(laplace_O(v), nodes)
    return float(abs(quad.average(lhs - rhs)))


def third_derivative_by_parts_residual(u: SphFunction, F: TestFunction, exactness: int | None = None) -> float:
    """``∫|∇u|² F'''(u) Δu - (∫F''(u)(Δu)² - ∫F'(u)Δ²u)``."""
    if F.d3 is None:
        raise PreconditionError(f"Test function {F.name} has no third derivative")
    quad = _by_parts_quadrature(u.L, F, exactness)
    nodes = quad.nodes
    uu = synthesize(u, nodes).real
    lap_u = laplace_O(u)
    lap = synthesize(lap_u, nodes)
    lhs = gradient_inner(u, u, nodes) * F.d3(uu) * lap
    rhs = F.d2(uu) * lap**2 - F.d1(uu) * synthesize(laplace_O(lap_u), nodes)
    return float(abs(quad.average(lhs - rhs)))
