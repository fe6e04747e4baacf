from __future__ import annotations

import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpfeedback.bellman import OutsideRegion
from lpfeedback.localsolve import level_points
from lpfeedback.lpmanifold import seed_momentum
from lpfeedback.control import (INNER, OUTER, FeedbackLaw, descent_residual, feedback_eval, optimality_gap,
                                simulate_closed_loop, switching_mismatch, write_trajectory_csv)


@pytest.fixture(scope="module")
def law_a(atlas_a):
    return FeedbackLaw(atlas_a.system, atlas_a.local, atlas_a)


@settings(max_examples=20, deadline=None)
@given(st.floats(-1.9, 1.9))
def test_sys_a_feedback_is_minus_x(law_a, x):
    # B = x^2 - 0.04 outside, K = -1 inside: u = -x everywhere
    if abs(x) < 1e-12:
        return
    assert feedback_eval(law_a, [x])[0] == pytest.approx(-x, rel=1e-8, abs=1e-12)


def test_origin_and_regions(law_a):
    np.testing.assert_array_equal(feedback_eval(law_a, [0.0]), [0.0])
    assert law_a.region([0.1]) == INNER and law_a.region([0.3]) == OUTER
    edge = [0.2 * (1 + 1e-11)]
    assert law_a.region(edge, previous=INNER) == INNER
    assert law_a.region(edge, previous=OUTER) == OUTER


def test_outside_synthesized_region(law_a):
    with pytest.raises(OutsideRegion):
        feedback_eval(law_a, [50.0])


def test_sys_a_closed_loop_cost(law_a):
    # x(t) = x0 e^{-t}; running cost 2 x^2 integrates to x0^2 - |x|^2
    x0 = 1.5
    r = simulate_closed_loop(law_a, [x0])
    assert r.stabilized and not r.truncated
    assert r.entry_time == pytest.approx(np.log(x0 / 0.2), rel=1e-8)
    assert r.cost_to_level == pytest.approx(x0 ** 2 - 0.04, rel=1e-8)
    assert r.total_cost == pytest.approx(x0 ** 2 - r.stop_norm ** 2, rel=1e-8)
    np.testing.assert_allclose(r.x[:, 0], x0 * np.exp(-r.t), rtol=1e-7, atol=1e-12)
    assert [p[0] for p in r.phases] == [OUTER, INNER]
    assert abs(optimality_gap(law_a, [x0], r)) < 1e-8


def test_scaled_law_is_suboptimal(atlas_a):
    law = FeedbackLaw(atlas_a.system, atlas_a.local, atlas_a, scale=1.2)
    gap = optimality_gap(law, [1.5])
    assert gap > 1e-3
    assert gap == pytest.approx(0.2 ** 2 / (2 * 1.2), rel=1e-5)


def test_inside_start_and_tiny_start(law_a):
    assert optimality_gap(law_a, [0.1]) == 0.0
    r = simulate_closed_loop(law_a, [0.1])
    assert r.entry_time == 0.0 and r.stabilized and np.all(r.region == INNER)
    r0 = simulate_closed_loop(law_a, [1e-9])
    assert r0.t[-1] == 0.0 and r0.stabilized


def test_truncation_outside_atlas(law_a):
    r = simulate_closed_loop(law_a, [50.0])
    assert r.truncated and "synthesized region" in r.message and not r.stabilized
    with pytest.raises(RuntimeError, match="never reached"):
        optimality_gap(law_a, [50.0], r)


def test_descent_and_switching(law_a, atlas_c, local_c):
    r = simulate_closed_loop(law_a, [-1.7])
    res = descent_residual(law_a, r)
    assert res.size > 3 and np.max(np.abs(res)) < 1e-8
    assert switching_mismatch(law_a, np.array([[0.2], [-0.2]])) < 1e-7
    # on the level set grad B = lambda_+ grad V, so the jump is |(lambda_+ - 1) Q^-1 g^T P x|
    law_c = FeedbackLaw(atlas_c.system, local_c, atlas_c)
    th = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    X = level_points(local_c.P, local_c.delta, np.stack([np.cos(th), np.sin(th)], axis=1))
    expected = 0.0
    for x in X:
        _, G, _, Q = atlas_c.system.arrays(x)
        u_out = -0.5 * np.linalg.solve(Q, G.T @ seed_momentum(atlas_c.system, local_c, x))
        expected = max(expected, float(np.linalg.norm(u_out - local_c.w(x))))
    assert expected > 1e-3
    assert switching_mismatch(law_c, X) == pytest.approx(expected, rel=1e-5)


def test_trajectory_csv(law_a, tmp_path):
    r = simulate_closed_loop(law_a, [1.0])
    path = tmp_path / "traj.csv"
    write_trajectory_csv(r, path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "x1", "u1", "running_cost", "V", "region"]
    assert len(rows) == len(r.t) + 1
    assert float(rows[5][1]) == r.x[4, 0]
    assert {row[-1] for row in rows[1:]} == {"inner", "outer"}
