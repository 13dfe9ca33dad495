"""Wigner 3j symbols and Gaunt coupling coefficients with an on-disk cache.

3j symbols are evaluated from the Racah sum in exact rational arithmetic, so
there is no cancellation at large degree; only the final square root is
taken in floating point.
"""

from __future__ import annotations

import logging
import math
import os
import struct
import tempfile
import zlib
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

from .errors import PreconditionError

logger = logging.getLogger(__name__)

MAGIC = b"GAUNTv1"
_HEADER = struct.Struct("<7sIII")
_RECORD = struct.Struct("<6Hd")

CACHE_DIR = os.getenv("DNBANDS_GAUNT_CACHE", None)
if CACHE_DIR is None:
    CACHE_DIR = Path.home() / ".cache" / "dnbands"
else:
    CACHE_DIR = Path(CACHE_DIR)


def _triangle(j1: int, j2: int, j3: int) -> bool:
    return abs(j1 - j2) <= j3 <= j1 + j2


@lru_cache(maxsize=200_000)
def _three_j_exact(j1: int, j2: int, j3: int, m1: int, m2: int, m3: int) -> tuple[int, Fraction]:
    """Return ``(sign, square)`` of the 3j symbol as an exact rational."""
    if m1 + m2 + m3 != 0 or not _triangle(j1, j2, j3):
        return 0, Fraction(0)
    if abs(m1) > j1 or abs(m2) > j2 or abs(m3) > j3:
        return 0, Fraction(0)
    f = math.factorial
    t_min = max(0, j2 - j3 - m1, j1 - j3 + m2)
    t_max = min(j1 + j2 - j3, j1 - m1, j2 + m2)
    total = Fraction(0)
    for t in range(t_min, t_max + 1):
        denom = (
            f(t)
            * f(j3 - j2 + t + m1)
            * f(j3 - j1 + t - m2)
            * f(j1 + j2 - j3 - t)
            * f(j1 - t - m1)
            * f(j2 - t + m2)
        )
        total += Fraction((-1) ** t, denom)
    if total == 0:
        return 0, Fraction(0)
    triangle = Fraction(
        f(j1 + j2 - j3) * f(j1 - j2 + j3) * f(-j1 + j2 + j3), f(j1 + j2 + j3 + 1)
    )
    moments = (
        f(j1 + m1) * f(j1 - m1) * f(j2 + m2) * f(j2 - m2) * f(j3 + m3) * f(j3 - m3)
    )
    sign = (-1) ** ((j1 - j2 - m3) % 2) * (1 if total > 0 else -1)
    return sign, triangle * moments * total * total


def wigner_3j(j1: int, j2: int, j3: int, m1: int, m2: int, m3: int) -> float:
    """Wigner 3j symbol for integer arguments."""
    sign, square = _three_j_exact(j1, j2, j3, m1, m2, m3)
    return sign * math.sqrt(square) if sign else 0.0


def gaunt(l1: int, m1: int, l2: int, m2: int, l3: int, m3: int) -> float:
    """``∫ Y_l1m1 Y_l2m2 conj(Y_l3m3)`` over the unit sphere."""
    if m1 + m2 != m3 or (l1 + l2 + l3) % 2 or not _triangle(l1, l2, l3):
        return 0.0
    if abs(m1) > l1 or abs(m2) > l2 or abs(m3) > l3:
        return 0.0
    s0, sq0 = _three_j_exact(l1, l2, l3, 0, 0, 0)
    sm, sqm = _three_j_exact(l1, l2, l3, m1, m2, -m3)
    if s0 == 0 or sm == 0:
        return 0.0
    sign = s0 * sm * (-1) ** (m3 % 2)
    prefactor = (2 * l1 + 1) * (2 * l2 + 1) * (2 * l3 + 1) / (4.0 * math.pi)
    return sign * math.sqrt(prefactor * float(sq0 * sqm))


class GauntTable:
    """Lazily filled Gaunt coefficients for couplings with ``l1 + l2 <= max_degree``."""

    def __init__(self, max_degree: int):
        if max_degree < 0:
            raise ValueError(f"max_degree must be non-negative, got {max_degree}")
        self.max_degree = int(max_degree)
        self._values: dict[tuple[int, int, int, int, int, int], float] = {}
        self._couplings: dict[tuple[int, int, int, int], tuple[tuple[int, float], ...]] = {}
        self._dirty = False

    def __len__(self) -> int:
        return len(self._values)

    def covers(self, degree_sum: int) -> bool:
        return degree_sum <= self.max_degree

    def _check(self, l1: int, l2: int) -> None:
        if l1 + l2 > self.max_degree:
            raise PreconditionError(
                f"Gaunt table of degree {self.max_degree} cannot couple l1={l1}, l2={l2}"
            )

    def get(self, l1: int, m1: int, l2: int, m2: int, l3: int, m3: int) -> float:
        self._check(l1, l2)
        key = (l1, m1, l2, m2, l3, m3)
        value = self._values.get(key)
        if value is None:
            value = gaunt(*key)
            self._values[key] = value
            self._dirty = True
        return value

    def couplings(self, l1: int, m1: int, l2: int, m2: int) -> tuple[tuple[int, float], ...]:
        """Non-zero ``(l3, G)`` pairs for the product ``Y_l1m1 Y_l2m2``."""
        key = (l1, m1, l2, m2)
        cached = self._couplings.get(key)
        if cached is not None:
            return cached
        self._check(l1, l2)
        m3 = m1 + m2
        out = []
        for l3 in range(max(abs(l1 - l2), abs(m3)), l1 + l2 + 1):
            if (l1 + l2 + l3) % 2:
                continue
            value = self.get(l1, m1, l2, m2, l3, m3)
            if value != 0.0:
                out.append((l3, value))
        result = tuple(out)
        self._couplings[key] = result
        return result

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        body = bytearray()
        for (l1, m1, l2, m2, l3, m3), value in sorted(self._values.items()):
            body += _RECORD.pack(l1, m1 + l1, l2, m2 + l2, l3, m3 + l3, value)
        header = _HEADER.pack(MAGIC, self.max_degree, len(self._values), zlib.crc32(body))
        return bytes(header) + bytes(body)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GauntTable":
        if len(blob) < _HEADER.size:
            raise ValueError("Gaunt cache truncated")
        magic, max_degree, count, checksum = _HEADER.unpack_from(blob, 0)
        body = blob[_HEADER.size :]
        if magic != MAGIC:
            raise ValueError(f"Unrecognized Gaunt cache magic {magic!r}")
        if len(body) != count * _RECORD.size or zlib.crc32(body) != checksum:
            raise ValueError("Gaunt cache checksum mismatch")
        table = cls(max_degree)
        for l1, a1, l2, a2, l3, a3, value in _RECORD.iter_unpack(body):
            table._values[(l1, a1 - l1, l2, a2 - l2, l3, a3 - l3)] = value
        return table

    def save(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        # one temp file per writer; pool workers persist the same table concurrently
        with tempfile.NamedTemporaryFile(dir=path.parent, prefix=path.name + ".", suffix=".tmp", delete=False) as fh:
            fh.write(self.to_bytes())
            tmp = Path(fh.name)
        try:
            tmp.replace(path)
        except OSError:
            tmp.unlink(missing_ok=True)
            raise
        self._dirty = False

    @classmethod
    def load(cls, path: Path) -> "GauntTable":
        return cls.from_bytes(Path(path).read_bytes())

    @staticmethod
    def cache_path(max_degree: int, directory: Path | None = None) -> Path:
        return Path(directory or CACHE_DIR) / f"gaunt_L{max_degree}.bin"

    @classmethod
    def cached(cls, max_degree: int, directory: Path | None = None) -> "GauntTable":
        """Load the table for ``max_degree`` from disk, or start an empty one."""
        path = cls.cache_path(max_degree, directory)
        if path.exists():
            try:
                return cls.load(path)
            except (ValueError, struct.error) as exc:
                logger.warning("Discarding unreadable Gaunt cache %s: %s", path, exc)
        return cls(max_degree)

    def persist(self, directory: Path | None = None) -> None:
        """Write newly computed entries back to the disk cache."""
        if not self._dirty:
            return
        path = self.cache_path(self.max_degree, directory)
        try:
            self.save(path)
        except OSError as exc:
            logger.warning("Could not write Gaunt cache %s: %s", path, exc)
