from __future__ import annotations

import numpy as np
import pytest

from lpfeedback.sysdef import SystemSpec, SystemSpecError, validate_system


def test_arrays_shapes_and_values(spec_c):
    X = np.array([[0.5, -1.0], [1.0, 2.0], [0.0, 0.0]])
    F, G, E, Q = spec_c.arrays(X)
    assert F.shape == (3, 2) and G.shape == (3, 2, 1) and E.shape == (3,) and Q.shape == (3, 1, 1)
    np.testing.assert_allclose(F[0], [-1.0, np.sin(0.5)])
    np.testing.assert_allclose(G[:, :, 0], [[0, 1]] * 3)
    np.testing.assert_allclose(E, [1.25, 5.0, 0.0])


def test_R_matrix():
    s = SystemSpec.from_strings(2, 2, ["x2", "-x1"], [["1", "0"], ["x1", "1"]], "x1^2+x2^2", [["2", "1"], ["0", "3"]])
    x = np.array([0.3, 0.1])
    _, G, _, Q = s.arrays(x)
    np.testing.assert_allclose(Q, [[2, 1], [1, 3]])
    np.testing.assert_allclose(s.R(x), G @ np.linalg.inv(Q) @ G.T, rtol=1e-14)


def test_lower_triangle_of_Q_ignored():
    a = SystemSpec.from_strings(1, 2, ["0"], [["1", "1"]], "x1^2", [["1", "0.5"], ["99", "2"]])
    Q = a.arrays(np.array([1.0]))[3]
    np.testing.assert_array_equal(Q, [[1, 0.5], [0.5, 2]])


def test_packed_upper_triangle():
    a = SystemSpec.from_strings(1, 2, ["0"], [["1", "1"]], "x1^2", [["1", "0.5", "2"]])
    np.testing.assert_array_equal(a.arrays(np.array([1.0]))[3], [[1, 0.5], [0.5, 2]])


def test_dict_round_trip(spec_c):
    again = SystemSpec.from_dict(spec_c.to_dict())
    X = np.random.default_rng(0).normal(size=(6, 2))
    for a, b in zip(spec_c.arrays(X), again.arrays(X)):
        np.testing.assert_array_equal(a, b)


def test_jets_match_arrays(spec_c):
    x = np.array([0.4, -0.2])
    f, g, eps, Q = spec_c.jets(x)
    assert f[1].value == pytest.approx(np.sin(0.4))
    np.testing.assert_allclose(f[1].gradient, [np.cos(0.4), 0.0])
    np.testing.assert_allclose(eps.hessian, 2 * np.eye(2))


@pytest.mark.parametrize("kwargs", [
    dict(n=2, m=1, f=["x2"], g=[["0"], ["1"]], epsilon="x1^2", Q=[["1"]]),
    dict(n=2, m=1, f=["x2", "x1"], g=[["0", "1"]], epsilon="x1^2", Q=[["1"]]),
    dict(n=1, m=2, f=["x1"], g=[["1", "1"]], epsilon="x1^2", Q=[["1", "0", "0", "1", "2"]]),
    dict(n=1, m=1, f=["x2"], g=[["1"]], epsilon="x1^2", Q=[["1"]]),
    dict(n=0, m=1, f=[], g=[], epsilon="0", Q=[["1"]]),
])
def test_malformed_specs(kwargs):
    with pytest.raises((SystemSpecError, ValueError)):
        SystemSpec.from_strings(**kwargs)


def test_validation_passes_on_examples(spec_a, spec_b, spec_c):
    for s in (spec_a, spec_b, spec_c):
        report = validate_system(s)
        assert report.ok, str(report)


def test_validation_reports_witnesses():
    bad = SystemSpec.from_strings(1, 1, ["x1 + 1"], [["1"]], "x1^2 + 0.5", [["x1"]])
    report = validate_system(bad)
    names = {c.name: c for c in report.failures()}
    assert {"f(0)=0", "epsilon(0)=0", "Q positive definite"} <= set(names)
    assert names["f(0)=0"].hard and not names["Q positive definite"].hard
    assert "f(0)≠0" in names["f(0)=0"].message
    assert names["Q positive definite"].witness[0] <= 0


def test_validation_domain_error_on_samples():
    s = SystemSpec.from_strings(1, 1, ["0"], [["1"]], "x1^2", [["1/(x1 - 1) + 2"]])
    report = validate_system(s, samples=np.array([[1.0], [-1.0]]))
    assert [c.name for c in report.hard_failures] == ["evaluable on samples"]
    assert "(x1 - 1.0)" in report.hard_failures[0].message
