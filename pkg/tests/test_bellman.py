from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpfeedback.bellman import (BellmanResult, OutsideRegion, bellman_query, bellman_query_batch,
                                critical_threshold, enumerate_branches)
from lpfeedback.diagnostics import sample_region
from lpfeedback.hamflow import hamiltonian

SQRT2 = np.sqrt(2.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.21, 1.9), st.booleans())
def test_sys_a_closed_form(atlas_a, r, neg):
    x = -r if neg else r
    res = bellman_query(atlas_a, [x])
    assert res.branch_count == 1 and res.gap == np.inf
    assert res.value == pytest.approx(x * x - 0.04, abs=1e-10)
    assert res.gradient[0] == pytest.approx(2 * x, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.27, 1.5))
def test_sys_b_closed_form(atlas_b, local_b, x):
    res = bellman_query(atlas_b, [x], refine=False)
    P = 1 + SQRT2
    assert res.value == pytest.approx(P * x * x - local_b.delta, rel=1e-6)
    assert res.gradient[0] == pytest.approx(2 * P * x, rel=1e-6)


def test_outside_region(atlas_a):
    with pytest.raises(OutsideRegion):
        bellman_query(atlas_a, [0.1])
    with pytest.raises(OutsideRegion):
        bellman_query(atlas_a, [100.0])
    out = bellman_query_batch(atlas_a, [[0.1], [0.5], [100.0]])
    assert isinstance(out[0], OutsideRegion) and isinstance(out[1], BellmanResult)
    assert isinstance(out[2], OutsideRegion)


def test_sys_c_odd_symmetry(atlas_c):
    # f is odd and eps, g, Q are even, so B(-x) = B(x)
    X = sample_region(atlas_c, 30, seed=3)
    a = bellman_query_batch(atlas_c, X)
    b = bellman_query_batch(atlas_c, -X)
    for ra, rb in zip(a, b):
        if isinstance(ra, OutsideRegion) or isinstance(rb, OutsideRegion) or ra.tie:
            continue
        assert ra.value == pytest.approx(rb.value, rel=1e-9, abs=1e-12)
        np.testing.assert_allclose(ra.gradient, -rb.gradient, rtol=1e-7, atol=1e-9)


def test_branches_are_preimages(atlas_c, cloud_c):
    # points around Cr(B) folds have several preimages
    rng = np.random.default_rng(4)
    centers = cloud_c.positions(only_crb=True)[:8]
    X = np.concatenate([sample_region(atlas_c, 20, seed=4),
                        (centers[:, None, :] + rng.normal(scale=0.05, size=(len(centers), 4, 2))).reshape(-1, 2)])
    multi = 0
    for r in bellman_query_batch(atlas_c, X):
        if isinstance(r, OutsideRegion):
            continue
        S = [b.S for b in r.branches]
        assert S == sorted(S)
        for b in r.branches:
            assert b.refined
            np.testing.assert_allclose(b.x_fit, r.x, atol=1e-9 * max(1.0, np.abs(r.x).max()))
            assert abs(b.H) < 1e-6 * max(1.0, np.dot(b.p, b.p))
        assert r.value == r.branches[0].S
        multi += r.branch_count > 1
    assert multi > 0


def test_refinement_agrees_with_interpolant(atlas_c):
    X = sample_region(atlas_c, 20, seed=8)
    fine = bellman_query_batch(atlas_c, X)
    coarse = bellman_query_batch(atlas_c, X, refine=False)
    for a, b in zip(fine, coarse):
        if isinstance(a, OutsideRegion) or a.tie:
            continue
        assert a.value == pytest.approx(b.value, rel=1e-5, abs=1e-8)
        assert abs(hamiltonian(atlas_c.system, a.x, a.gradient)) <= abs(
            hamiltonian(atlas_c.system, b.x, b.gradient)) + 1e-10


def test_batch_equals_single(atlas_c):
    X = sample_region(atlas_c, 5, seed=9)
    for x, r in zip(X, bellman_query_batch(atlas_c, X)):
        single = bellman_query(atlas_c, x)
        assert single.value == pytest.approx(r.value, rel=1e-12)
        assert single.branch_count == r.branch_count


def test_enumeration_inside_level_set(atlas_c):
    with pytest.raises(OutsideRegion):
        enumerate_branches(atlas_c, np.array([0.1, 0.0]))


def test_caustics(cloud_c, atlas_c):
    assert len(cloud_c) > 0
    thr = 1e-10 * max(1.0, float(np.nanmedian(np.abs(atlas_c.detX))))
    assert all(abs(c.detX) < thr for c in cloud_c.points if c.kind == "fold")
    assert critical_threshold(atlas_c) > 0
    crb = cloud_c.crb
    # Cr(B): the critical branch is the cheapest preimage
    for c in crb:
        assert c.S <= c.other_min_S + 1e-8 * max(1.0, abs(c.S))
    for c in cloud_c.points:
        if not c.in_crb:
            # cheaper preimage elsewhere, or a fold on the edge of the region
            assert c.other_min_S < c.S or (c.kind == "fold" and c.other_min_S == np.inf)
    assert cloud_c.positions().shape == (len(cloud_c), 2)
