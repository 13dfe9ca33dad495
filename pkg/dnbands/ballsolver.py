"""Closed-form solves on the unit ball and Neumann-series assembly of the DtN map.

Functions on the ball are finite sums ``c r^n (ln r)^p Y_lm``. Multiplication
by a polynomial potential and the Dirichlet inverse of the Laplacian keep
that class, so every column of the Dirichlet-to-Neumann matrix is computed
without spatial discretization.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.special import roots_jacobi

from .errors import DomainError, PreconditionError, ResourceError
from .gaunt import GauntTable
from .harmonics import (
    DEFAULT_MAX_NODES,
    CoherentFrame,
    SphFunction,
    alpha_norms,
    analyze_callable,
    coherent_coefficients,
    degree_order,
    flat_index,
    n_coeffs,
    quadrature_s2,
    sph_harm,
    synthesize_grid,
)
from .reports import write_json

logger = logging.getLogger(__name__)

Key = tuple[int, int, int, int]  # (n, p, ell, m)

# Smallest positive Dirichlet eigenvalue of -Δ on the unit ball.
DIRICHLET_GROUND = math.pi**2
DEFAULT_DEPTH = 3
MAX_AUTO_DEPTH = 24
COEFF_TOL = 1e-13


class BallFunction:
    """Finite sum of terms ``coeff * r^n (ln r)^p Y_lm`` on the closed unit ball."""

    __slots__ = ("terms",)

    def __init__(self, terms: Mapping[Key, complex] | None = None):
        self.terms: dict[Key, complex] = {}
        for key, value in (terms or {}).items():
            if value != 0:
                self.terms[key] = complex(value)

    @classmethod
    def from_list(cls, rows: Iterable[tuple[int, int, int, int, complex]]) -> "BallFunction":
        merged: dict[Key, complex] = {}
        for n, p, ell, m, coeff in rows:
            if n < 0 or p < 0 or abs(m) > ell:
                raise ValueError(f"Invalid term (n={n}, p={p}, ell={ell}, m={m})")
            merged[(n, p, ell, m)] = merged.get((n, p, ell, m), 0) + coeff
        return cls(merged)

    def as_list(self) -> list[tuple[int, int, int, int, complex]]:
        return [(*key, value) for key, value in sorted(self.terms.items())]

    def __len__(self) -> int:
        return len(self.terms)

    def __bool__(self) -> bool:
        return bool(self.terms)

    @property
    def max_degree(self) -> int:
        return max((key[2] for key in self.terms), default=0)

    @property
    def max_power(self) -> int:
        return max((key[0] for key in self.terms), default=0)

    @property
    def min_power(self) -> int:
        return min((key[0] for key in self.terms), default=0)

    @property
    def max_log(self) -> int:
        return max((key[1] for key in self.terms), default=0)

    def __add__(self, other: "BallFunction") -> "BallFunction":
        out = dict(self.terms)
        for key, value in other.terms.items():
            out[key] = out.get(key, 0) + value
        return BallFunction(out)

    def __sub__(self, other: "BallFunction") -> "BallFunction":
        return self + other * -1

    def __mul__(self, scalar: complex) -> "BallFunction":
        return BallFunction({key: value * scalar for key, value in self.terms.items()})

    __rmul__ = __mul__

    def pruned(self, tol: float = 0.0) -> "BallFunction":
        return BallFunction({k: v for k, v in self.terms.items() if abs(v) > tol})

    def trace(self, L: int | None = None) -> SphFunction:
        """Restriction to r = 1 (log terms vanish there)."""
        return self.radial_derivative_trace(0, L)

    def radial_derivative_trace(self, order: int = 1, L: int | None = None) -> SphFunction:
        """``∂_r^order`` at r = 1, evaluated term by term."""
        L = self.max_degree if L is None else L
        out = SphFunction.zeros(L)
        for (n, p, ell, m), coeff in self.terms.items():
            if ell > L:
                continue
            factor = _radial_derivative_at_one(n, p, order)
            if factor:
                out.coeffs[flat_index(ell, m)] += factor * coeff
        return out

    def normal_derivative(self, L: int | None = None) -> SphFunction:
        return self.radial_derivative_trace(1, L)

    def laplacian(self) -> "BallFunction":
        """Euclidean Laplacian, term-exact."""
        out: dict[Key, complex] = {}
        for (s, a, ell, m), coeff in self.terms.items():
            pieces = (
                (a, s * (s + 1) - ell * (ell + 1)),
                (a - 1, a * (2 * s + 1)),
                (a - 2, a * (a - 1)),
            )
            for power, factor in pieces:
                if power < 0 or factor == 0:
                    continue
                if s < 2:
                    raise DomainError(f"Laplacian of r^{s} term with ell={ell} is singular at the origin")
                key = (s - 2, power, ell, m)
                out[key] = out.get(key, 0) + factor * coeff
        return BallFunction(out).pruned(0.0)

    def evaluate(self, points: NDArray[np.float64]) -> NDArray[np.complex128]:
        """Pointwise values at Cartesian points inside the ball."""
        pts = np.asarray(points, dtype=np.float64)
        r = np.linalg.norm(pts, axis=-1)
        safe = np.where(r > 0, r, 1.0)
        Y = sph_harm(self.max_degree, pts / safe[..., None])
        with np.errstate(divide="ignore"):
            log_r = np.log(safe)
        out = np.zeros(pts.shape[:-1], dtype=np.complex128)
        for (n, p, ell, m), coeff in self.terms.items():
            radial = r**n * log_r**p if p else r**n
            out += coeff * radial * Y[..., flat_index(ell, m)]
        return out


def _radial_derivative_at_one(n: int, p: int, order: int) -> float:
    """``d^order/dr^order [r^n (ln r)^p]`` at r = 1."""
    poly = {(n, p): 1.0}
    for _ in range(order):
        nxt: dict[tuple[int, int], float] = {}
        for (a, b), c in poly.items():
            if a:
                nxt[(a - 1, b)] = nxt.get((a - 1, b), 0.0) + a * c
            if b:
                nxt[(a - 1, b - 1)] = nxt.get((a - 1, b - 1), 0.0) + b * c
        poly = nxt
    return sum(c for (_, b), c in poly.items() if b == 0)


def harmonic_extension(f: SphFunction) -> BallFunction:
    ells, ms = degree_order(f.L)
    return BallFunction(
        {(int(ell), 0, int(ell), int(m)): c for ell, m, c in zip(ells, ms, f.coeffs) if c != 0}
    )


def solve_R0(F: BallFunction) -> BallFunction:
    """Solve ``Δu = F`` with ``u = 0`` on the unit sphere, term by term."""
    out: dict[Key, complex] = {}

    def add(key: Key, value: complex) -> None:
        out[key] = out.get(key, 0) + value

    for (n, p, ell, m), coeff in F.terms.items():
        s = n + 2
        twice = 2 * s + 1
        if s == ell:
            # resonant: u = sum_{a=1}^{p+1} c_a r^s (ln r)^a Y
            c = [0.0] * (p + 3)
            for b in range(p, -1, -1):
                rhs = (1.0 if b == p else 0.0) - c[b + 2] * (b + 2) * (b + 1)
                c[b + 1] = rhs / ((b + 1) * twice)
            for a in range(1, p + 2):
                if c[a]:
                    add((s, a, ell, m), coeff * c[a])
        else:
            D = (s - ell) * (s + ell + 1)
            c = [0.0] * (p + 3)
            for b in range(p, -1, -1):
                rhs = (1.0 if b == p else 0.0) - c[b + 1] * (b + 1) * twice - c[b + 2] * (b + 2) * (b + 1)
                c[b] = rhs / D
            for a in range(p + 1):
                if c[a]:
                    add((s, a, ell, m), coeff * c[a])
            add((ell, 0, ell, m), -coeff * c[0])
    return BallFunction(out)


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------

Monomial = tuple[tuple[int, int, int], float]


class Potential:
    """Real polynomial potential given by monomials ``coeff * x1^a x2^b x3^c``."""

    def __init__(self, monomials: Sequence[Monomial] = ()):
        merged: dict[tuple[int, int, int], float] = {}
        for powers, coeff in monomials:
            powers = tuple(int(v) for v in powers)
            if len(powers) != 3 or min(powers) < 0:
                raise ValueError(f"Invalid monomial exponents {powers}")
            if not np.isfinite(coeff):
                raise ValueError(f"Non-finite coefficient for monomial {powers}")
            merged[powers] = merged.get(powers, 0.0) + float(coeff)
        self.monomials: tuple[Monomial, ...] = tuple(
            sorted((p, c) for p, c in merged.items() if c != 0.0)
        )
        self.field = self._to_ball()
        self.restriction_odd = self._detect_odd()

    # -- construction ------------------------------------------------------

    @classmethod
    def constant(cls, value: float) -> "Potential":
        return cls([((0, 0, 0), value)])

    @classmethod
    def zero(cls) -> "Potential":
        return cls([])

    @classmethod
    def from_spec(cls, spec: Iterable[Mapping]) -> "Potential":
        """Build from ``[{"monomial": [a, b, c], "coeff": x}, ...]``."""
        return cls([(tuple(item["monomial"]), float(item["coeff"])) for item in spec])

    @classmethod
    def from_callable(
        cls, func: Callable[[NDArray[np.float64]], NDArray[np.float64]], degree: int, n_samples: int = 2000, seed: int = 0
    ) -> tuple["Potential", float]:
        """Least-squares projection of ``func`` onto monomials of total degree <= ``degree``.

        Returns the potential and the max absolute projection error on an
        independent validation sample.
        """
        rng = np.random.default_rng(seed)
        powers = [
            (a, b, d - a - b) for d in range(degree + 1) for a in range(d + 1) for b in range(d - a + 1)
        ]

        def sample(count: int) -> NDArray[np.float64]:
            direction = rng.normal(size=(count, 3))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            return direction * rng.uniform(0.0, 1.0, size=(count, 1)) ** (1.0 / 3.0)

        def design(points: NDArray[np.float64]) -> NDArray[np.float64]:
            return np.stack([np.prod(points**np.array(p), axis=1) for p in powers], axis=1)

        fit_pts = sample(n_samples)
        coeffs, *_ = np.linalg.lstsq(design(fit_pts), func(fit_pts), rcond=None)
        check_pts = sample(n_samples // 2)
        error = float(np.max(np.abs(design(check_pts) @ coeffs - func(check_pts))))
        logger.info("Projected potential onto degree %d monomials (max error %.3e)", degree, error)
        return cls(list(zip(powers, coeffs))), error

    def _to_ball(self) -> BallFunction:
        terms: dict[Key, complex] = {}
        for (a, b, c), coeff in self.monomials:
            d = a + b + c
            ang = analyze_callable(
                lambda x, a=a, b=b, c=c: x[..., 0] ** a * x[..., 1] ** b * x[..., 2] ** c, d
            )
            ells, ms = degree_order(d)
            for ell, m, value in zip(ells, ms, ang.coeffs):
                if abs(value) > COEFF_TOL:
                    key = (d, 0, int(ell), int(m))
                    terms[key] = terms.get(key, 0) + coeff * value
        return BallFunction(terms).pruned(COEFF_TOL)

    def _detect_odd(self, tol: float = 1e-12) -> bool:
        boundary = self.boundary()
        ells, _ = degree_order(boundary.L)
        return bool(np.max(np.abs(boundary.coeffs[ells % 2 == 0]), initial=0.0) <= tol)

    # -- properties --------------------------------------------------------

    @property
    def degree(self) -> int:
        return max((sum(p) for p, _ in self.monomials), default=0)

    @property
    def max_degree(self) -> int:
        return self.field.max_degree

    @property
    def is_zero(self) -> bool:
        return not self.monomials

    def constant_value(self) -> float | None:
        """The value if the potential is constant, otherwise ``None``."""
        if self.is_zero:
            return 0.0
        if len(self.monomials) == 1 and self.monomials[0][0] == (0, 0, 0):
            return self.monomials[0][1]
        return None

    def hash(self) -> str:
        payload = json.dumps([[list(p), repr(c)] for p, c in self.monomials])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def scaled(self, factor: float) -> "Potential":
        return Potential([(p, c * factor) for p, c in self.monomials])

    def evaluate(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        pts = np.asarray(points, dtype=np.float64)
        out = np.zeros(pts.shape[:-1])
        for (a, b, c), coeff in self.monomials:
            out = out + coeff * pts[..., 0] ** a * pts[..., 1] ** b * pts[..., 2] ** c
        return out

    boundary_values = evaluate

    def sup_norm(self, samples: int = 20000, seed: int = 0) -> float:
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(samples, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        pts *= rng.uniform(0.0, 1.0, size=(samples, 1)) ** (1.0 / 3.0)
        pts = np.concatenate([pts, pts / np.linalg.norm(pts, axis=1, keepdims=True)])
        return float(np.max(np.abs(self.evaluate(pts)), initial=0.0))

    def dirichlet_margin(self, samples: int = 20000, seed: int = 0) -> float:
        """``min q + π²``; positive values guarantee -Δ+q is invertible."""
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(samples, 3))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
        pts *= rng.uniform(0.0, 1.0, size=(samples, 1)) ** (1.0 / 3.0)
        lowest = float(np.min(self.evaluate(pts), initial=0.0)) if not self.is_zero else 0.0
        margin = lowest + DIRICHLET_GROUND
        if margin <= 0:
            logger.warning("Potential minimum %.4g may admit a zero Dirichlet eigenvalue", lowest)
        return margin

    # -- boundary fields ---------------------------------------------------

    def _boundary_field(self, weight: Callable[[int, int], float]) -> SphFunction:
        out = SphFunction.zeros(max(self.max_degree, 0))
        for (n, _, ell, m), coeff in self.field.terms.items():
            out.coeffs[flat_index(ell, m)] += weight(n, ell) * coeff
        return out

    def boundary(self) -> SphFunction:
        return self._boundary_field(lambda n, ell: 1.0)

    def radial_derivative(self, order: int = 1) -> SphFunction:
        return self._boundary_field(lambda n, ell: float(math.perm(n, order)) if n >= order else 0.0)

    def boundary_laplacian(self, power: int = 1) -> SphFunction:
        """``Δ_{S²}^power q`` at r = 1, positive spectrum."""
        return self._boundary_field(lambda n, ell: float(ell * (ell + 1)) ** power)

    def radial_derivative_laplacian(self) -> SphFunction:
        """``∂_r Δ_{S²} q`` at r = 1, positive spectrum."""
        return self._boundary_field(lambda n, ell: float(n * ell * (ell + 1)))

    def square_boundary(self, table: GauntTable | None = None) -> SphFunction:
        table = table or GauntTable(2 * self.max_degree)
        return multiply_potential(self, self.field, table).trace(2 * self.max_degree)

    def __repr__(self) -> str:
        return f"Potential({list(self.monomials)!r})"


def multiply_potential(q: Potential, u: BallFunction, table: GauntTable) -> BallFunction:
    """Exact product ``q u`` with angular parts coupled through Gaunt coefficients."""
    if not table.covers(q.max_degree + u.max_degree):
        raise PreconditionError(
            f"Gaunt table of degree {table.max_degree} cannot cover "
            f"{q.max_degree} + {u.max_degree}"
        )
    out: dict[Key, complex] = {}
    for (nq, _, lq, mq), cq in q.field.terms.items():
        for (n, p, ell, m), cu in u.terms.items():
            base = cq * cu
            for l3, g in table.couplings(lq, mq, ell, m):
                key = (nq + n, p, l3, mq + m)
                out[key] = out.get(key, 0) + base * g
    return BallFunction(out).pruned(0.0)


# ---------------------------------------------------------------------------
# Inner products on the ball
# ---------------------------------------------------------------------------


def _radial_moment(N: int, P: int) -> float:
    """``∫_0^1 r^N (ln r)^P dr``."""
    return (-1) ** P * math.factorial(P) / (N + 1.0) ** (P + 1)


def ball_inner(u: BallFunction, v: BallFunction) -> complex:
    """``∫_B u conj(v)`` in closed form."""
    by_harmonic: dict[tuple[int, int], list[tuple[int, int, complex]]] = {}
    for (n, p, ell, m), c in v.terms.items():
        by_harmonic.setdefault((ell, m), []).append((n, p, c))
    total = 0j
    for (n1, p1, ell, m), c1 in u.terms.items():
        for n2, p2, c2 in by_harmonic.get((ell, m), ()):
            total += c1 * np.conj(c2) * _radial_moment(n1 + n2 + 2, p1 + p2)
    return complex(total)


def _radial_profiles(u: BallFunction, radii: NDArray[np.float64], shift: int, L: int) -> NDArray[np.complex128]:
    profiles = np.zeros((radii.size, n_coeffs(L)), dtype=np.complex128)
    log_r = np.log(radii)
    for (n, p, ell, m), c in u.terms.items():
        profiles[:, flat_index(ell, m)] += c * radii ** (n - shift) * (log_r**p if p else 1.0)
    return profiles


def ball_inner_quadrature(u: BallFunction, v: BallFunction, max_nodes: int | None = None) -> complex:
    """``∫_B u conj(v)`` by Gauss-Jacobi in r times the product rule on S².

    The common factor ``r^(min n_u + min n_v + 2)`` is absorbed into the
    Jacobi weight so the remaining radial polynomial is integrated exactly.
    """
    if not u or not v:
        return 0j
    cap = DEFAULT_MAX_NODES if max_nodes is None else max_nodes
    a, b = u.min_power, v.min_power
    beta = a + b + 2
    remaining = u.max_power + v.max_power + 2 - beta
    n_r = remaining // 2 + 1
    if u.max_log or v.max_log:
        n_r += 16
    L = max(u.max_degree, v.max_degree)
    quad = quadrature_s2(u.max_degree + v.max_degree, max_nodes=cap)
    if n_r * quad.size > cap:
        raise ResourceError(f"Ball quadrature needs {n_r * quad.size} nodes (cap {cap})")
    x, w = roots_jacobi(n_r, 0.0, float(beta))
    radii = 0.5 * (1.0 + x)
    weights = w / 2.0 ** (beta + 1)
    U = synthesize_grid(_radial_profiles(u, radii, a, L), L, quad)
    V = synthesize_grid(_radial_profiles(v, radii, b, L), L, quad)
    per_radius = quad.integrate(U * np.conj(V))
    return complex(np.sum(weights * per_radius))


# ---------------------------------------------------------------------------
# Neumann series and DtN assembly
# ---------------------------------------------------------------------------


def neumann_terms(q: Potential, h: BallFunction, depth: int, table: GauntTable) -> list[BallFunction]:
    """``[h, w_1, ..., w_depth]`` with ``w_j = (R0 M_{-q}) w_{j-1}``."""
    if depth < 0:
        raise PreconditionError(f"Neumann depth must be non-negative, got {depth}")
    out = [h]
    for _ in range(depth):
        out.append(solve_R0(multiply_potential(q, out[-1], table)))
    return out


def _ball_norm(u: BallFunction) -> float:
    return math.sqrt(max(ball_inner(u, u).real, 0.0))


@dataclass
class DtNMatrix:
    """Dense matrix of the Dirichlet-to-Neumann map in the harmonic basis."""

    L: int
    matrix: NDArray[np.complex128] = field(repr=False)
    J: int
    residual: float
    flagged: bool = False
    q_hash: str = ""
    dirichlet_margin: float | None = None

    @property
    def size(self) -> int:
        return n_coeffs(self.L)

    def asymmetry(self) -> float:
        norm = np.linalg.norm(self.matrix)
        if norm == 0:
            return 0.0
        return float(np.linalg.norm(self.matrix - self.matrix.conj().T) / norm)

    def symmetrized(self) -> "DtNMatrix":
        sym = 0.5 * (self.matrix + self.matrix.conj().T)
        return DtNMatrix(self.L, sym, self.J, self.residual, self.flagged, self.q_hash, self.dirichlet_margin)

    def free_part(self) -> NDArray[np.float64]:
        ells, _ = degree_order(self.L)
        return np.diag(ells.astype(float))

    def perturbation(self) -> NDArray[np.complex128]:
        """``S = Λ_q - Λ_0``."""
        return self.matrix - self.free_part()

    def block(self, k: int, k2: int | None = None, matrix: NDArray | None = None) -> NDArray[np.complex128]:
        k2 = k if k2 is None else k2
        src = self.matrix if matrix is None else matrix
        return src[k * k : (k + 1) ** 2, k2 * k2 : (k2 + 1) ** 2]

    def trusted_max_k(self, fraction: float = 0.8) -> int:
        return int(math.floor(fraction * self.L))

    def save(self, path: Path, config_hash: str = "", switches: str = "") -> tuple[Path, Path]:
        """Write raw little-endian complex128 (row-major) plus a JSON sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(self.matrix, dtype="<c16").tofile(path)
        meta = {
            "L": self.L,
            "J": self.J,
            "residual": self.residual,
            "flagged": self.flagged,
            "q_hash": self.q_hash,
            "dirichlet_margin": self.dirichlet_margin,
            "dtype": "complex128 interleaved little-endian f64, row-major",
        }
        return path, write_json(path.with_suffix(".json"), meta, config_hash, switches)

    @classmethod
    def load(cls, path: Path) -> "DtNMatrix":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        n = n_coeffs(meta["L"])
        matrix = np.fromfile(path, dtype="<c16").reshape(n, n)
        return cls(
            meta["L"],
            matrix,
            meta["J"],
            meta["residual"],
            meta.get("flagged", False),
            meta["q_hash"],
            meta.get("dirichlet_margin"),
        )


def _assemble_columns(
    q: Potential, L: int, depth: int | None, tol: float, table_degree: int, columns: Sequence[int]
) -> list[tuple[int, NDArray[np.complex128], float, int]]:
    table = GauntTable.cached(table_degree)
    ells, ms = degree_order(L)
    out = []
    for col in columns:
        ell, m = int(ells[col]), int(ms[col])
        h = BallFunction({(ell, 0, ell, m): 1.0})
        u = h
        w = h
        residual = _ball_norm(multiply_potential(q, h, table)) if not q.is_zero else 0.0
        used = 0
        limit = MAX_AUTO_DEPTH if depth is None else depth
        while used < limit and residual > 0.0:
            w = solve_R0(multiply_potential(q, w, table))
            u = u + w
            used += 1
            residual = _ball_norm(multiply_potential(q, w, table))
            if depth is None and residual < tol:
                break
        out.append((col, u.normal_derivative(L).coeffs, residual, used))
    table.persist()
    return out


def assemble_dtn(
    q: Potential,
    L: int,
    J: int | None = DEFAULT_DEPTH,
    tol: float = 1e-10,
    residual_tolerance: float = 1e-6,
    workers: int = 1,
) -> DtNMatrix:
    """Assemble ``Λ_q`` on harmonics of degree <= ``L``.

    ``J=None`` selects the depth per column by the residual ``||q w_J||_B < tol``.
    """
    if J is not None and J < 0:
        raise PreconditionError(f"Neumann depth must be non-negative, got {J}")
    depth_cap = MAX_AUTO_DEPTH if J is None else J
    table_degree = L + (depth_cap + 1) * q.max_degree
    n = n_coeffs(L)
    chunks = [list(range(i, n, max(workers, 1))) for i in range(max(workers, 1))]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(
                _assemble_columns,
                [q] * len(chunks),
                [L] * len(chunks),
                [J] * len(chunks),
                [tol] * len(chunks),
                [table_degree] * len(chunks),
                chunks,
            )
            rows = [item for chunk in results for item in chunk]
    else:
        rows = _assemble_columns(q, L, J, tol, table_degree, range(n))
    matrix = np.zeros((n, n), dtype=np.complex128)
    residual = 0.0
    used_depth = 0
    for col, column, res, used in sorted(rows, key=lambda item: item[0]):
        matrix[:, col] = column
        residual = max(residual, res)
        used_depth = max(used_depth, used)
    flagged = residual > residual_tolerance
    if flagged:
        logger.warning("Neumann residual %.3e exceeds tolerance %.1e (J=%d)", residual, residual_tolerance, used_depth)
    logger.info("Assembled DtN matrix L=%d depth=%d residual=%.3e", L, used_depth, residual)
    return DtNMatrix(
        L,
        matrix,
        used_depth,
        residual,
        flagged,
        q.hash(),
        q.dirichlet_margin() if not q.is_zero else None,
    )


# ---------------------------------------------------------------------------
# Oracles and matrix elements
# ---------------------------------------------------------------------------


def dtn_constant_oracle(c: float, k: int) -> float:
    """``√c i_k'(√c) / i_k(√c)`` from the power series of ``i_k``."""
    if c <= 0:
        raise PreconditionError(f"Constant potential must be positive, got {c}")
    term = 1.0
    num = 0.0
    den = 1.0
    j = 0
    while True:
        j += 1
        term *= c / (2.0 * j * (2 * k + 2 * j + 1))
        num += 2 * j * term
        den += term
        if term < 1e-16 * den and j > 1:
            break
    return k + num / den


@dataclass
class MatrixElement:
    """``<Λ_q α, α>`` split into the free part and Neumann contributions."""

    k: int
    value: complex
    terms: list[complex]
    norm_sq: float

    @property
    def normalized(self) -> complex:
        return self.value / self.norm_sq


def berezin_matrix_element(
    q: Potential,
    frame: CoherentFrame,
    k: int,
    J: int = DEFAULT_DEPTH,
    table: GauntTable | None = None,
    exact: bool = False,
    max_nodes: int | None = None,
) -> MatrixElement:
    """Diagonal matrix element of ``Λ_q`` on the coherent state of degree ``k``."""
    if J < 0:
        raise PreconditionError(f"Neumann depth must be non-negative, got {J}")
    table = table or GauntTable(k + (J + 1) * q.max_degree)
    norm_sq, _ = alpha_norms(k)
    coeffs = coherent_coefficients(frame.xi, frame.eta, k)
    h = BallFunction({(k, 0, k, m): c for m, c in zip(range(-k, k + 1), coeffs) if c != 0})
    inner = ball_inner if exact else (lambda a, b: ball_inner_quadrature(a, b, max_nodes))
    terms: list[complex] = []
    if not q.is_zero:
        qh = multiply_potential(q, h, table)
        for w in neumann_terms(q, h, J, table):
            terms.append(inner(w, qh))
    value = k * norm_sq + sum(terms)
    return MatrixElement(k, complex(value), terms, norm_sq)


@dataclass(frozen=True)
class RadialMomentCheck:
    expansion: tuple[float, float, float]
    exact: float

    @property
    def residual(self) -> float:
        return self.exact - sum(self.expansion)


def radial_moment_check(coeffs: Sequence[float], k: int, printed: bool = False) -> RadialMomentCheck:
    """Three-term expansion of ``∫_0^1 f(t) t^(2k+2) dt`` for polynomial ``f``.

    ``coeffs[i]`` multiplies ``t^i``. The third coefficient is
    ``9 f(1) + 7 f'(1) + f''(1)``; ``printed=True`` uses the weight 5 on
    ``f'(1)`` instead, which leaves an O(k^-3) residual whenever f'(1) != 0.
    """
    c = np.asarray(coeffs, dtype=float)
    i = np.arange(c.size)
    f1 = float(c.sum())
    d1 = float((i * c).sum())
    d2 = float((i * (i - 1) * c).sum())
    two_k = 2.0 * k
    expansion = (f1 / two_k, -(3 * f1 + d1) / two_k**2, (9 * f1 + (5 if printed else 7) * d1 + d2) / two_k**3)
    exact = float(np.sum(c / (2 * k + 3 + i)))
    return RadialMomentCheck(expansion, exact)
