import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tests import helpers  # noqa: F401  # ensures project root on path
from dnbands.errors import PreconditionError
from dnbands.gaunt import GauntTable, gaunt, wigner_3j
from dnbands.harmonics import flat_index, quadrature_s2, sph_harm


def test_wigner_3j_known_values():
    assert wigner_3j(1, 1, 0, 0, 0, 0) == pytest.approx(-1 / math.sqrt(3))
    assert wigner_3j(1, 1, 2, 0, 0, 0) == pytest.approx(math.sqrt(2 / 15))
    assert wigner_3j(2, 2, 2, 1, -1, 0) == pytest.approx(1 / math.sqrt(70))
    # selection rules
    assert wigner_3j(1, 1, 3, 0, 0, 0) == 0.0
    assert wigner_3j(2, 1, 2, 1, 1, 0) == 0.0


def test_gaunt_with_constant_harmonic():
    for ell in range(5):
        for m in range(-ell, ell + 1):
            expected = (-1) ** m / math.sqrt(4 * math.pi)
            assert gaunt(ell, m, ell, -m, 0, 0) == pytest.approx(expected)


@settings(max_examples=25, deadline=None)
@given(
    l1=st.integers(0, 4),
    l2=st.integers(0, 4),
    l3=st.integers(0, 8),
    data=st.data(),
)
def test_gaunt_matches_quadrature(l1, l2, l3, data):
    m1 = data.draw(st.integers(-l1, l1))
    m2 = data.draw(st.integers(-l2, l2))
    m3 = m1 + m2
    if abs(m3) > l3:
        return
    quad = quadrature_s2(l1 + l2 + l3)
    Y = sph_harm(8, quad.nodes)
    integrand = Y[:, flat_index(l1, m1)] * Y[:, flat_index(l2, m2)] * np.conj(Y[:, flat_index(l3, m3)])
    assert gaunt(l1, m1, l2, m2, l3, m3) == pytest.approx(quad.integrate(integrand).real, abs=1e-12)


def test_table_couplings_and_bounds():
    table = GauntTable(4)
    pairs = table.couplings(2, 1, 1, 0)
    assert [l3 for l3, _ in pairs] == [1, 3]
    assert all(value == pytest.approx(gaunt(2, 1, 1, 0, l3, 1)) for l3, value in pairs)
    with pytest.raises(PreconditionError):
        table.get(3, 0, 2, 0, 1, 0)


def test_cache_persists_and_rejects_corruption(tmp_path):
    table = GauntTable.cached(4, tmp_path)
    table.couplings(2, 1, 2, -1)
    table.persist(tmp_path)
    path = GauntTable.cache_path(4, tmp_path)
    assert path.exists()

    loaded = GauntTable.cached(4, tmp_path)
    assert len(loaded) == len(table)
    assert loaded.get(2, 1, 2, -1, 2, 0) == table.get(2, 1, 2, -1, 2, 0)

    blob = bytearray(path.read_bytes())
    blob[-1] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError):
        GauntTable.load(path)
    # unreadable cache falls back to an empty table
    assert len(GauntTable.cached(4, tmp_path)) == 0


def test_concurrent_persists_leave_a_readable_cache(tmp_path):
    tables = []
    for _ in range(6):
        table = GauntTable.cached(4, tmp_path)
        table.couplings(2, 1, 2, -1)
        tables.append(table)
    with ThreadPoolExecutor(max_workers=6) as pool:
        list(pool.map(lambda t: t.persist(tmp_path), tables))
    loaded = GauntTable.load(GauntTable.cache_path(4, tmp_path))
    assert len(loaded) == len(tables[0])
    assert list(tmp_path.glob("*.tmp")) == []
