from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpfeedback.maslov import (AnalyticChart, BumpCover, MaslovError, QuadratureError, QuantizationError, build_charts,
                               build_regularized_field, bump, bump_derivative, canonical_apply, chart_index,
                               generating_function, lagrangian_matrix, log_maslov_real, negative_eigs,
                               oscillatory_quad, regularized_bellman, relevant_charts,
                               subcanonical_apply)


# bumps ----------------------------------------------------------------------

def test_bump_values_and_support():
    assert bump(0.0) == pytest.approx(np.exp(-1.0))
    np.testing.assert_array_equal(bump([-1.0, 1.0, 1.5, -3.0]), 0.0)
    assert bump(0.999) > 0


@settings(max_examples=50, deadline=None)
@given(st.floats(-0.99, 0.99))
def test_bump_derivative(t):
    h = 1e-6
    fd = (bump(t + h) - bump(t - h)) / (2 * h)
    assert bump_derivative(t) == pytest.approx(fd, rel=1e-6, abs=1e-9)


# quadrature -------------------------------------------------------------------

@pytest.mark.parametrize("k", [1.0, 50.0, 2000.0])
def test_quadrature_exponential(k):
    val = oscillatory_quad(lambda x: np.exp(1j * k * x), 0.0, 1.0, n_oscillations=k / (2 * np.pi))
    exact = (np.exp(1j * k) - 1) / (1j * k)
    assert abs(val - exact) <= 1e-11 * max(1.0, abs(exact)) + 1e-13


def test_quadrature_smooth_and_empty():
    assert oscillatory_quad(lambda x: np.exp(-x * x), -8.0, 8.0) == pytest.approx(np.sqrt(np.pi), rel=1e-12)
    assert oscillatory_quad(lambda x: x, 2.0, 2.0) == 0


def test_quadrature_panel_cap():
    with pytest.raises(QuadratureError):
        oscillatory_quad(lambda x: np.sign(x - 0.3) * 1.0 + 0j, 0.0, 1.0, rtol=1e-15, max_panels=20)


# analytic stationary phase ----------------------------------------------------------

def _cutoff(L, taper):
    def cut(xa, eta):
        t = (np.abs(np.asarray(eta, dtype=float)) - L) / taper
        return np.e * bump(np.maximum(t, 0.0))
    return cut


@pytest.mark.parametrize("a,x", [(1.0, 0.0), (3.0, 0.4), (-0.5, -0.2)])
def test_fresnel_stationary_phase(a, x):
    chart = AnalyticChart(phase=lambda xa, eta: 0.5 * a * np.asarray(eta) ** 2,
                          jacobian=lambda xa, eta: np.ones_like(np.asarray(eta, dtype=float)),
                          cutoff=_cutoff(8.0, 4.0), eta_range=(-12.0, 12.0))
    expected = abs(a) ** -0.5 * np.exp(1j * np.pi * (1 + np.sign(a)) / 4)
    v = subcanonical_apply(chart, None, [x], 200.0, shift=x * x / (2 * a))
    assert abs(v - expected) < 1e-8


# linear algebra of charts ---------------------------------------------------------

def test_lagrangian_matrix_rows():
    fr = np.arange(8.0).reshape(4, 2)
    np.testing.assert_array_equal(lagrangian_matrix(fr, 2, ()), fr[:2])
    np.testing.assert_array_equal(lagrangian_matrix(fr, 2, (1,)), [fr[0], -fr[3]])
    np.testing.assert_array_equal(lagrangian_matrix(fr, 2, (0, 1)), -fr[2:])
    assert negative_eigs(np.diag([-1.0, 2.0, -3.0])) == 2
    assert negative_eigs(np.zeros((0, 0))) == 0


def test_generating_function_without_momenta(field_c):
    atlas = field_c.atlas
    cs = next(c for c in field_c.charts.charts if not c.beta)
    assert generating_function(atlas, cs, (3, 40)) == -atlas.S[3, 40]


# chart system on SYS-C --------------------------------------------------------------

def test_chart_system_indices(field_c):
    system = field_c.charts
    assert system.defects == []
    usable = [j for j, cs in enumerate(system.charts) if cs.valid and cs.beta is not None]
    assert all(system.charts[j].nu in (0, 1, 2, 3) for j in usable)
    # indices of neighbouring charts are antisymmetric
    seen = 0
    usable_set = set(usable)
    for j in usable:
        if seen >= 40:
            break
        for i in system.neighbours(j):
            if i in usable_set and (system.charts[i].beta or system.charts[j].beta):
                a, b = system.charts[i], system.charts[j]
                assert (chart_index(field_c.atlas, a, b) + chart_index(field_c.atlas, b, a)) % 4 == 0
                assert (a.nu - b.nu - chart_index(field_c.atlas, a, b)) % 4 == 0
                seen += 1
    assert seen > 0
    assert any(cs.beta for cs in system.charts)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 10_000))
def test_chart_partition_of_unity(field_c, u, v, cell):
    atlas = field_c.atlas
    corners, sheet, _ = atlas.cells
    c = cell % len(corners)
    g = field_c.charts.to_grid(atlas.cell_coords(np.array([c]), np.array([[u, v]])))
    parts = field_c.charts.weights(int(sheet[c]), g)
    assert abs(sum(parts.values())[0] - 1.0) <= 1e-12
    assert all(np.all(p >= 0) for p in parts.values())


def test_tile_width_validation(atlas_c):
    with pytest.raises(ValueError):
        build_charts(atlas_c, width=3)


# bump cover --------------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_cover_partition(x):
    cover = BumpCover(np.array([[0.0, 0.0], [1.0, 0.5], [-2.0, 1.0]]), np.array([1.0, 0.7, 1.5]))
    w, v = cover.weights(np.array(x))
    assert abs(w.sum() + v.sum() - 1.0) <= 1e-12
    assert cover.active(np.array(x)) == bool(np.any(w > 0))


def test_cover_centers(field_c):
    cover = field_c.cover
    assert len(cover) > 0
    w, _ = cover.weights(cover.centers)
    assert np.all(np.diag(w) > 0)
    far = cover.centers.max(axis=0) + 10 * cover.radii.max()
    assert not cover.active(far)


# regularized Bellman function ---------------------------------------------------------

def test_no_caustics_means_no_regularization(atlas_a):
    fld = build_regularized_field(atlas_a, k=50.0)
    assert len(fld.cover) == 0
    for x in (0.5, -1.3):
        rv = regularized_bellman(fld, [x])
        assert not rv.in_bump and rv.value == rv.B == pytest.approx(x * x - 0.04, abs=1e-10)
        val, ids = log_maslov_real(fld, [x], 50.0)
        assert val == pytest.approx(-(x * x - 0.04), abs=1e-12)
        assert len(ids) >= 1


def test_regularization_bounded_by_pi_over_k(field_c):
    c, r = field_c.cover.centers[0], field_c.cover.radii[0]
    x = c + 0.2 * r * np.array([1.0, 0.0])
    field_c.prefetch(x[None])
    for k in (100.0, 300.0):
        rv = regularized_bellman(field_c, x, k, gradient=False)
        assert rv.in_bump and 0 < rv.w_sum <= 1
        assert abs(rv.value - rv.B) <= np.pi / k * rv.w_sum + 1e-12
        assert rv.value == pytest.approx(rv.B - rv.theta / k * rv.w_sum, rel=1e-12, abs=1e-12)


def test_unusable_charts_refused(field_c, monkeypatch):
    system = field_c.charts
    res = field_c.query(field_c.cover.centers[0])
    ids = relevant_charts(system, res.x, res.branches, 100.0)
    cs = system.charts[ids[0]]
    monkeypatch.setattr(cs, "consistent", False)
    with pytest.raises(QuantizationError, match="quantization"):
        canonical_apply(system, res.x, 100.0, branches=res.branches, charts=ids)
    monkeypatch.setattr(cs, "consistent", True)
    monkeypatch.setattr(cs, "valid", False)
    with pytest.raises(MaslovError, match="boundary"):
        canonical_apply(system, res.x, 100.0, branches=res.branches, charts=ids)
