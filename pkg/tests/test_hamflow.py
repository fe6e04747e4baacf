from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpfeedback.hamflow import (HamiltonianError, PhasePoint, action_rate, ham_rhs, hamiltonian,
                                hamiltonian_parts, integrate_bicharacteristic, integrate_rays)
from lpfeedback.sysdef import SystemSpec


def _H_direct(s, x, p):
    F, G, E, Q = s.arrays(x)
    R = G @ np.linalg.solve(Q, G.T)
    return E + p @ F - 0.25 * p @ R @ p


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=4, max_size=4))
def test_hamiltonian_matches_direct_formula(v):
    s = SystemSpec.from_strings(2, 2, ["x2", "sin(x1)"], [["1", "x2"], ["0", "1"]], "x1^2 + x2^2",
                                [["2 + x1^2", "0.5"], ["0", "1"]])
    x, p = np.array(v[:2]), np.array(v[2:])
    assert hamiltonian(s, x, p) == pytest.approx(_H_direct(s, x, p), rel=1e-12, abs=1e-12)
    _, L = hamiltonian_parts(s, x, p)
    F, G, E, Q = s.arrays(x)
    assert L == pytest.approx(E + 0.25 * p @ G @ np.linalg.solve(Q, G.T) @ p, rel=1e-12, abs=1e-12)


def test_rhs_is_symplectic_gradient(spec_c):
    x, p = np.array([0.4, -0.3]), np.array([1.2, 0.5])
    dx, dp = ham_rhs(spec_c, x, p)
    h = 1e-6
    E = np.eye(2) * h
    dHdx = [(hamiltonian(spec_c, x + e, p) - hamiltonian(spec_c, x - e, p)) / (2 * h) for e in E]
    dHdp = [(hamiltonian(spec_c, x, p + e) - hamiltonian(spec_c, x, p - e)) / (2 * h) for e in E]
    np.testing.assert_allclose(dp, dHdx, rtol=1e-8)
    np.testing.assert_allclose(dx, -np.array(dHdp), rtol=1e-8)


def test_scalar_ray_closed_form(spec_a):
    # H = x^2 - p^2/4, seed x0 on the level x^2 = 0.04 with p = 2 x0
    x0 = 0.2
    tr = integrate_bicharacteristic(spec_a, PhasePoint(0.0, np.array([x0]), np.array([2 * x0])),
                                    tau_max=2.0, n_samples=21, rtol=1e-12, atol=1e-14)
    tau = tr.tau
    np.testing.assert_allclose(tr.x[0, :, 0], x0 * np.exp(tau), rtol=1e-11)
    np.testing.assert_allclose(tr.p[0, :, 0], 2 * x0 * np.exp(tau), rtol=1e-11)
    np.testing.assert_allclose(tr.S[0], x0 ** 2 * (np.exp(2 * tau) - 1), rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(tr.L[0], action_rate(spec_a, tr.x[0], tr.p[0]), rtol=1e-14)
    assert np.max(np.abs(tr.H)) < 1e-12


def test_variational_frame_against_finite_differences(spec_c, local_c):
    # one-parameter family of seeds on the level set
    def seed(xi):
        w = np.array([np.cos(xi), np.sin(xi)])
        vals, U = np.linalg.eigh(local_c.P)
        x = np.sqrt(local_c.delta) * U @ np.diag(vals ** -0.5) @ U.T @ w
        return x, 2 * local_c.P @ x
    xi, h = 0.7, 1e-6
    x0, p0 = seed(xi)
    xp, pp = seed(xi + h)
    xm, pm = seed(xi - h)
    dz0 = np.concatenate([(xp - xm) / (2 * h), (pp - pm) / (2 * h)])[None, :, None]
    z = lambda a, b: integrate_rays(spec_c, a[None], b[None], tau_max=1.0, n_samples=11, rtol=1e-12, atol=1e-12)
    tr = integrate_rays(spec_c, x0[None], p0[None], dz0, tau_max=1.0, n_samples=11, rtol=1e-12, atol=1e-12)
    up, dn = z(xp, pp), z(xm, pm)
    fd = np.concatenate([(up.x - dn.x), (up.p - dn.p)], axis=-1) / (2 * h)
    np.testing.assert_allclose(tr.dz_dxi[0, :, :, 0], fd[0], rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(tr.dS_dxi[0, :, 0], (up.S - dn.S)[0] / (2 * h), rtol=1e-5, atol=1e-6)


def test_escape_marks_ray(spec_a):
    tr = integrate_rays(spec_a, np.array([[0.2]]), np.array([[0.4]]), tau_max=10.0, n_samples=51, escape_radius=5.0)
    assert tr.escaped[0]
    k = tr.last_valid[0]
    assert np.isfinite(tr.x[0, k, 0]) and np.isnan(tr.x[0, -1, 0])


def test_off_shell_seed_refused(spec_a):
    with pytest.raises(HamiltonianError, match="H=0"):
        integrate_bicharacteristic(spec_a, PhasePoint(0.0, np.array([0.2]), np.array([1.0])))


def test_singular_Q():
    s = SystemSpec.from_strings(1, 1, ["0"], [["1"]], "x1^2", [["x1"]])
    with pytest.raises(HamiltonianError):
        hamiltonian(s, np.array([-1.0]), np.array([1.0]))
