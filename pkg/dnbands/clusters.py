"""Eigenvalue clusters of the DtN matrix, averaged blocks and rescaled cluster moments."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import eigh, eigvalsh

from .ballsolver import DtNMatrix
from .berezin import BlockOperator, FitResult, fit_series
from .errors import ClusterCountError, ClusterOverlapError, DataQualityError, PreconditionError
from .invariants import TestFunction

logger = logging.getLogger(__name__)

ASYMMETRY_TOL = 1e-8
DEFAULT_K_MIN = 5
TRUSTED_FRACTION = 0.8


@dataclass
class ClusterSpectrum:
    """Cluster shifts ``μ_{k,j} = λ - k`` per degree, sorted within each cluster."""

    clusters: dict[int, NDArray[np.float64]] = field(repr=False)
    window: tuple[int, int]
    alpha: int = 1
    source: str = "full"

    @property
    def ks(self) -> list[int]:
        return sorted(self.clusters)

    def scaled_widths(self) -> dict[int, float]:
        """``max_j |μ_{k,j}| k^α`` for each k."""
        return {k: float(np.max(np.abs(mu), initial=0.0) * k**self.alpha) for k, mu in sorted(self.clusters.items())}

    def rows(self):
        for k in self.ks:
            for j, mu in enumerate(self.clusters[k]):
                yield k, j, float(mu)


def _check_symmetric(A: DtNMatrix) -> None:
    asym = A.asymmetry()
    if asym > ASYMMETRY_TOL:
        raise DataQualityError(f"DtN matrix asymmetry {asym:.2e} exceeds {ASYMMETRY_TOL:.0e}")


def _window(A: DtNMatrix, k_min: int, k_max: int | None, fraction: float) -> tuple[int, int]:
    trusted = A.trusted_max_k(fraction)
    hi = trusted if k_max is None else min(k_max, trusted)
    if k_max is not None and k_max > trusted:
        logger.warning("k_max=%d beyond trusted window k<=%d; clipped", k_max, trusted)
    return k_min, hi


# ---------------------------------------------------------------------------
# Averaged route
# ---------------------------------------------------------------------------


def averaged_block(S: DtNMatrix, k: int, order: int = 1, fraction: float = TRUSTED_FRACTION) -> BlockOperator:
    """Degree-``k`` block of the averaged perturbation.

    Order 1 is ``Π_k S Π_k``. Order 2 adds the averaged commutator
    ``½[F₂, S]``, whose degree-``k`` block is ``Σ_{k'≠k} S_kk' S_k'k / (k - k')``.
    """
    if order not in (1, 2):
        raise ValueError(f"Averaging order must be 1 or 2, got {order}")
    if k > S.trusted_max_k(fraction):
        raise PreconditionError(f"k={k} is outside the trusted window k<={S.trusted_max_k(fraction)}")
    P = S.perturbation()
    block = S.block(k, matrix=P).copy()
    if order == 2:
        for k2 in range(S.L + 1):
            if k2 != k:
                block += S.block(k, k2, P) @ S.block(k2, k, P) / (k - k2)
    return BlockOperator(k, block)


def averaged_spectrum(
    A: DtNMatrix,
    window: tuple[int, int] | None = None,
    order: int = 2,
    alpha: int = 1,
    fraction: float = TRUSTED_FRACTION,
) -> ClusterSpectrum:
    _check_symmetric(A)
    lo, hi = window if window is not None else (DEFAULT_K_MIN, A.trusted_max_k(fraction))
    A = A.symmetrized()
    clusters = {}
    for k in range(lo, hi + 1):
        clusters[k] = np.sort(eigvalsh(averaged_block(A, k, order, fraction).symmetrized().matrix))
    logger.info("Averaged spectrum (order %d) for k in [%d, %d]", order, lo, hi)
    return ClusterSpectrum(clusters, (lo, hi), alpha, f"averaged{order}")


# ---------------------------------------------------------------------------
# Full route
# ---------------------------------------------------------------------------


def full_spectrum_clusters(
    A: DtNMatrix,
    alpha: int = 1,
    k_min: int = DEFAULT_K_MIN,
    k_max: int | None = None,
    fraction: float = TRUSTED_FRACTION,
) -> ClusterSpectrum:
    """Dense eigenvalues grouped by nearest integer, validated inside the trusted window."""
    _check_symmetric(A)
    lo, hi = _window(A, k_min, k_max, fraction)
    eigenvalues = eigvalsh(A.symmetrized().matrix)
    nearest = np.rint(eigenvalues).astype(int)
    clusters = {}
    offenders = []
    for k in range(lo, hi + 1):
        members = np.sort(eigenvalues[nearest == k]) - k
        if members.size != 2 * k + 1:
            offenders.append((k, int(members.size)))
        clusters[k] = members
    if offenders:
        raise ClusterCountError(offenders)
    spec = ClusterSpectrum(clusters, (lo, hi), alpha, "full")
    widths = spec.scaled_widths()
    C = max(widths.values(), default=0.0)
    overlapping = [k for k in range(lo, hi + 1) if C / k**alpha + C / (k + 1) ** alpha >= 1.0]
    if overlapping:
        raise ClusterOverlapError(overlapping, C)
    logger.info("Full spectrum: %d clusters, width constant %.4g", len(clusters), C)
    return spec


def route_agreement(averaged: ClusterSpectrum, full: ClusterSpectrum) -> dict[int, float]:
    """Max eigenvalue difference per k between two routes."""
    return {
        k: float(np.max(np.abs(averaged.clusters[k] - full.clusters[k]), initial=0.0))
        for k in sorted(set(averaged.clusters) & set(full.clusters))
    }


# ---------------------------------------------------------------------------
# Moments and fits
# ---------------------------------------------------------------------------


@dataclass
class MomentSeries:
    phi: str
    ks: NDArray[np.int64]
    values: NDArray[np.float64]
    alpha: int = 1
    fit: "AsymptoticFit | None" = None

    def rows(self):
        for k, value in zip(self.ks, self.values):
            yield int(k), float(value)


def moments(spec: ClusterSpectrum, phi: TestFunction, alpha: int | None = None) -> MomentSeries:
    """``T_k = (2k+1)^-1 Σ_j φ(k^α μ_{k,j})``."""
    alpha = spec.alpha if alpha is None else alpha
    if alpha != spec.alpha:
        raise PreconditionError(f"Moment scaling {alpha} does not match spectrum scaling {spec.alpha}")
    ks = np.array(spec.ks, dtype=np.int64)
    values = np.array([np.mean(phi.value(k**alpha * spec.clusters[k])) for k in spec.ks], dtype=float)
    return MomentSeries(phi.name, ks, values, alpha)


@dataclass
class AsymptoticFit:
    betas: tuple[float, ...]
    residual: float
    condition: float
    ill_conditioned: bool
    fit: FitResult = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "betas": list(self.betas),
            "residual": self.residual,
            "condition": self.condition,
            "ill_conditioned": self.ill_conditioned,
        }


def asymptotic_fit(ms: MomentSeries, J: int = 2) -> AsymptoticFit:
    if len(ms.ks) < 6:
        raise PreconditionError(f"Asymptotic fit needs at least 6 k values, got {len(ms.ks)}")
    fit = fit_series(ms.ks, ms.values, J)
    betas = tuple(float(c.real) for c in fit.coefficients[:, 0])
    result = AsymptoticFit(betas, float(fit.residuals[0]), fit.condition, fit.ill_conditioned, fit)
    ms.fit = result
    return result


# ---------------------------------------------------------------------------
# Localization bound
# ---------------------------------------------------------------------------


@dataclass
class BoundReport:
    norm_B: float
    slack: float
    checked: int
    violations: int
    max_excess: float
    margin: float

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {
            "norm_B": self.norm_B,
            "slack": self.slack,
            "checked": self.checked,
            "violations": self.violations,
            "max_excess": self.max_excess,
            "margin": self.margin,
            "passed": self.passed,
        }


def cluster_bound_check(A: DtNMatrix, fraction: float = TRUSTED_FRACTION, slack: float | None = None) -> BoundReport:
    """Check ``min_k |λ² - k²| <= ||B||₂ + slack`` with ``B = Λ0 S + S Λ0 + S²``.

    On the truncated space ``A² = Λ0² + B`` exactly, so the slack only
    absorbs rounding in forming ``B`` and in the eigen-solves.
    """
    A = A.symmetrized()
    L0 = A.free_part()
    S = A.perturbation()
    B = L0 @ S + S @ L0 + S @ S
    B = 0.5 * (B + B.conj().T)
    norm_B = float(np.max(np.abs(eigh(B, eigvals_only=True)), initial=0.0))
    eigenvalues = eigvalsh(A.matrix)
    scale = float(np.max(np.abs(eigenvalues), initial=0.0)) ** 2
    if slack is None:
        slack = 64.0 * A.size * np.finfo(float).eps * max(scale, 1.0)
    trusted = A.trusted_max_k(fraction)
    windowed = eigenvalues[np.rint(eigenvalues) <= trusted]
    squares = np.arange(A.L + 1, dtype=float) ** 2
    gaps = np.min(np.abs(windowed[:, None] ** 2 - squares[None, :]), axis=1) if windowed.size else np.zeros(0)
    excess = gaps - (norm_B + slack)
    violations = int(np.sum(excess > 0))
    if violations:
        logger.warning("Localization bound violated by %d eigenvalues", violations)
    return BoundReport(
        norm_B=norm_B,
        slack=float(slack),
        checked=int(windowed.size),
        violations=violations,
        max_excess=float(np.max(excess, initial=-math.inf)) if excess.size else 0.0,
        margin=float(-np.max(excess)) if excess.size else norm_B + slack,
    )
