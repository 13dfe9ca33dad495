import numpy as np
import pytest

from tests import helpers  # noqa: F401  # ensures project root on path
from dnbands.ballsolver import DtNMatrix, Potential, assemble_dtn, dtn_constant_oracle
from dnbands.clusters import (
    asymptotic_fit,
    averaged_block,
    averaged_spectrum,
    cluster_bound_check,
    full_spectrum_clusters,
    moments,
    route_agreement,
)
from dnbands.errors import ClusterCountError, ClusterOverlapError, DataQualityError, PreconditionError
from dnbands.invariants import TestFunction


def _synthetic(L, shifts):
    """Free DtN matrix on degrees <= L with per-degree diagonal shifts."""
    diag = np.concatenate([np.full(2 * ell + 1, ell + shifts.get(ell, 0.0)) for ell in range(L + 1)])
    return DtNMatrix(L, np.diag(diag).astype(complex), 0, 0.0)


@pytest.fixture(scope="module")
def constant_dtn():
    return assemble_dtn(Potential.constant(1.0), 20, J=None, tol=1e-13)


def test_full_spectrum_of_constant_potential(constant_dtn):
    spec = full_spectrum_clusters(constant_dtn, k_min=6)
    assert spec.window == (6, 16)
    for k in spec.ks:
        assert spec.clusters[k].shape == (2 * k + 1,)
        assert np.allclose(spec.clusters[k], dtn_constant_oracle(1.0, k) - k)
    assert max(spec.scaled_widths().values()) < 0.5
    assert len(list(spec.rows())) == sum(2 * k + 1 for k in range(6, 17))


def test_k_max_is_clipped_to_trusted_window(constant_dtn):
    spec = full_spectrum_clusters(constant_dtn, k_min=6, k_max=40)
    assert spec.window == (6, 16)


def test_averaged_routes_agree_for_block_diagonal_matrix(constant_dtn):
    full = full_spectrum_clusters(constant_dtn, k_min=6)
    for order in (1, 2):
        averaged = averaged_spectrum(constant_dtn, full.window, order=order)
        assert averaged.source == f"averaged{order}"
        assert max(route_agreement(averaged, full).values()) < 1e-10


def test_second_order_averaging_tracks_coupled_clusters():
    dtn = assemble_dtn(Potential([((0, 0, 1), 1.0)]), 12, J=None, tol=1e-12)
    full = full_spectrum_clusters(dtn, alpha=2, k_min=4)
    first = route_agreement(averaged_spectrum(dtn, full.window, order=1, alpha=2), full)
    second = route_agreement(averaged_spectrum(dtn, full.window, order=2, alpha=2), full)
    assert max(second.values()) < max(first.values())


def test_averaged_block_preconditions(constant_dtn):
    with pytest.raises(ValueError):
        averaged_block(constant_dtn, 8, order=3)
    with pytest.raises(PreconditionError):
        averaged_block(constant_dtn, 18)


def test_asymmetric_matrix_is_rejected():
    dtn = _synthetic(4, {})
    dtn.matrix[1, 5] = 0.1
    with pytest.raises(DataQualityError):
        full_spectrum_clusters(dtn, k_min=1)


def test_cluster_count_mismatch_lists_offenders():
    with pytest.raises(ClusterCountError) as excinfo:
        full_spectrum_clusters(_synthetic(5, {2: 0.6}), k_min=1)
    assert excinfo.value.offenders == [(2, 0), (3, 12)]


def test_overlapping_clusters_are_rejected():
    with pytest.raises(ClusterOverlapError) as excinfo:
        full_spectrum_clusters(_synthetic(5, {2: 0.45}), k_min=1)
    assert 1 in excinfo.value.offenders


def test_moments_and_fit_for_constant_potential(constant_dtn):
    spec = full_spectrum_clusters(constant_dtn, k_min=6)
    series = moments(spec, TestFunction.identity())
    assert series.phi == "id"
    assert np.allclose(series.values, [k * (dtn_constant_oracle(1.0, k) - k) for k in spec.ks])
    fit = asymptotic_fit(series)
    assert fit.betas[0] == pytest.approx(0.5, abs=5e-3)
    assert fit.betas[1] == pytest.approx(-0.75, abs=0.1)
    assert series.fit is fit
    one = asymptotic_fit(moments(spec, TestFunction.one()))
    assert fit.condition == pytest.approx(one.condition)
    assert one.betas == pytest.approx((1.0, 0.0, 0.0), abs=1e-10)


def test_moment_scaling_must_match(constant_dtn):
    spec = full_spectrum_clusters(constant_dtn, k_min=6)
    with pytest.raises(PreconditionError):
        moments(spec, TestFunction.identity(), alpha=2)


def test_fit_needs_six_degrees(constant_dtn):
    spec = full_spectrum_clusters(constant_dtn, k_min=12, k_max=15)
    with pytest.raises(PreconditionError):
        asymptotic_fit(moments(spec, TestFunction.identity()))


def test_localization_bound(constant_dtn):
    report = cluster_bound_check(constant_dtn)
    assert report.passed
    assert report.checked == sum(2 * k + 1 for k in range(17))
    forced = cluster_bound_check(constant_dtn, slack=-report.norm_B - 1.0)
    assert not forced.passed
    assert forced.to_dict()["violations"] == forced.checked


def test_localization_for_x3_squared():
    # sup |q| = 1 on the ball; Λ_q is monotone in q, so shifts sit below the c = 1 ones
    dtn = assemble_dtn(Potential([((0, 0, 2), 1.0)]), 16, J=None, tol=1e-12)
    spec = full_spectrum_clusters(dtn, alpha=1, k_min=3)
    assert spec.window == (3, 12)
    for k in spec.ks:
        assert spec.clusters[k].shape == (2 * k + 1,)
        assert np.all(spec.clusters[k] >= -1e-12)
        assert np.max(spec.clusters[k]) <= dtn_constant_oracle(1.0, k) - k + 1e-10
        assert k * np.max(np.abs(spec.clusters[k])) < 1.0
    report = cluster_bound_check(dtn)
    assert report.passed
    assert report.checked == sum(2 * k + 1 for k in range(13))
