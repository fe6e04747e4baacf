"""Hamiltonian of the semi-quadratic problem and its bicharacteristic flow.

    H(x, p) = eps(x) + <p, f(x)> - 1/4 <p, R(x) p>,   R = g Q^{-1} g^T

Bicharacteristics follow the reverse-time system

    dx/dtau = -dH/dp = -f(x) + 1/2 R(x) p,
    dp/dtau =  dH/dx,

and the action accumulates as dS/dtau = eps(x) + 1/4 <p, R(x) p>, which is the
running cost of the control u = -1/2 Q^{-1} g^T p.  On {H = 0} this equals
<p, dx/dtau>, so S is the optimal cost from the level set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import jet
from .jet import Jet2
from .ode import integrate_batch
from .sysdef import SystemSpec


class HamiltonianError(ArithmeticError):
    pass


def _as_jet(v, like: Jet2) -> Jet2:
    if isinstance(v, Jet2):
        return v
    return Jet2.constant(np.broadcast_to(np.asarray(v, dtype=float), like.value.shape), like.dim)


def _solve_jet(Q, r):
    """Solve Q v = r for symmetric positive definite Q (lists of jets/floats)."""
    m = len(r)
    if m == 1:
        q = Q[0][0]
        if not isinstance(q, Jet2) and np.any(np.asarray(q) <= 0):
            raise HamiltonianError("Q(x) not invertible")
        if isinstance(q, Jet2) and np.any(q.value <= 0):
            raise HamiltonianError("Q(x) not invertible")
        return [r[0] / q]
    A = [list(row) for row in Q]
    b = list(r)
    for k in range(m):
        piv = A[k][k]
        pv = piv.value if isinstance(piv, Jet2) else np.asarray(piv)
        if np.any(pv <= 0):
            raise HamiltonianError("Q(x) not invertible")
        for i in range(k + 1, m):
            factor = A[i][k] / piv
            for j in range(k, m):
                A[i][j] = A[i][j] - factor * A[k][j]
            b[i] = b[i] - factor * b[k]
    v = [None] * m
    for i in reversed(range(m)):
        acc = b[i]
        for j in range(i + 1, m):
            acc = acc - A[i][j] * v[j]
        v[i] = acc / A[i][i]
    return v


def hamiltonian_parts(s: SystemSpec, x, p, as_jets: bool = False):
    """Return (H, L) with L = eps + 1/4 <p, R p> (the action rate).

    With ``as_jets`` both are :class:`Jet2` over z = (x, p) in R^{2n}.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    n = s.n
    if as_jets:
        z = np.concatenate([x, p], axis=-1)
        zs = jet.seed(z)
        xs, ps = zs[:n], zs[n:]
    else:
        xs = [x[..., i] for i in range(n)]
        ps = [p[..., i] for i in range(n)]
    f, g, eps, Q = s.evaluate(None, xs)
    pf = sum(ps[i] * f[i] for i in range(n))
    r = [sum(ps[i] * g[i][a] for i in range(n)) for a in range(s.m)]
    v = _solve_jet(Q, r)
    pRp = sum(r[a] * v[a] for a in range(s.m))
    H = eps + pf - 0.25 * pRp
    L = eps + 0.25 * pRp
    if as_jets:
        like = zs[0]
        return _as_jet(H, like), _as_jet(L, like)
    shape = np.broadcast(x[..., 0], p[..., 0]).shape
    return np.broadcast_to(H, shape).astype(float), np.broadcast_to(L, shape).astype(float)


def hamiltonian(s: SystemSpec, x, p):
    H, _ = hamiltonian_parts(s, x, p)
    return float(H) if np.ndim(H) == 0 else H


def ham_rhs(s: SystemSpec, x, p):
    """(dx/dtau, dp/dtau) = (-dH/dp, dH/dx)."""
    H, _ = hamiltonian_parts(s, x, p, as_jets=True)
    n = s.n
    return -H.gradient[..., n:], H.gradient[..., :n]


def action_rate(s: SystemSpec, x, p):
    _, L = hamiltonian_parts(s, x, p)
    return L


@dataclass
class PhasePoint:
    tau: float
    x: np.ndarray
    p: np.ndarray
    S: float = 0.0


@dataclass
class Trajectory:
    """Bicharacteristics sampled on a common tau grid.

    Arrays have a leading ray axis: x, p (N, T, n); S (N, T);
    dz_dxi (N, T, 2n, n-1) and dS_dxi (N, T, n-1) are the variational data,
    dz_dtau (N, T, 2n) the flow vector and d2z_dtaudxi (N, T, 2n, n-1)
    its xi-derivative.  Samples after an escape are NaN.
    """

    tau: np.ndarray
    x: np.ndarray
    p: np.ndarray
    S: np.ndarray
    dz_dxi: np.ndarray
    dS_dxi: np.ndarray
    dz_dtau: np.ndarray
    d2z_dtaudxi: np.ndarray
    L: np.ndarray
    dL_dxi: np.ndarray
    H: np.ndarray
    escaped: np.ndarray
    last_valid: np.ndarray

    @property
    def frame(self) -> np.ndarray:
        """Full variational frame [dz/dtau | dz/dxi], shape (N, T, 2n, n)."""
        return np.concatenate([self.dz_dtau[..., None], self.dz_dxi], axis=-1)

    def detX(self) -> np.ndarray:
        n = self.x.shape[-1]
        M = self.frame[..., :n, :]
        return np.linalg.det(np.nan_to_num(M)) * np.where(np.isnan(M[..., 0, 0]), np.nan, 1.0)


def _flow_with_variations(s: SystemSpec, z: np.ndarray, W: np.ndarray):
    """Flow vector, its xi-derivative, action rate and its xi-derivative."""
    n = s.n
    H, L = hamiltonian_parts(s, z[..., :n], z[..., n:], as_jets=True)
    gH = H.gradient
    F = np.concatenate([-gH[..., n:], gH[..., :n]], axis=-1)
    Hh = H.hessian
    DF = np.concatenate([-Hh[..., n:, :], Hh[..., :n, :]], axis=-2)
    dF = DF @ W if W.shape[-1] else W.copy()
    dL = np.einsum("...i,...ij->...j", L.gradient, W)
    return F, dF, L.value, dL, H.value


def integrate_rays(
    s: SystemSpec,
    x0,
    p0,
    dz_dxi0=None,
    tau=None,
    tau_max: float = 1.0,
    n_samples: int = 101,
    rtol: float = 1e-10,
    atol: float = 1e-10,
    escape_radius: float | None = None,
    time_scale=None,
) -> Trajectory:
    """Integrate a batch of bicharacteristics with their variational frames.

    With ``time_scale`` (one factor per ray) the rays run on rescaled time:
    sample ``t`` of ray j sits at tau = t * time_scale[j].
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    p0 = np.atleast_2d(np.asarray(p0, dtype=float))
    N, n = x0.shape
    k = n - 1
    if dz_dxi0 is None:
        dz_dxi0 = np.zeros((N, 2 * n, k))
    dz_dxi0 = np.asarray(dz_dxi0, dtype=float).reshape(N, 2 * n, k)
    taus = np.linspace(0.0, tau_max, n_samples) if tau is None else np.asarray(tau, dtype=float)
    if escape_radius is None:
        escape_radius = 10.0 * float(np.max(np.linalg.norm(x0, axis=1))) * np.exp(abs(taus[-1]))
    d = 2 * n + 1 + 2 * n * k + k

    def unpack(y):
        z = y[:, : 2 * n]
        W = y[:, 2 * n + 1: 2 * n + 1 + 2 * n * k].reshape(len(y), 2 * n, k)
        return z, W

    scale = None if time_scale is None else np.asarray(time_scale, dtype=float).reshape(N, 1)

    def rhs(t, y):
        z, W = unpack(y)
        F, dF, L, dL, _ = _flow_with_variations(s, z, W)
        out = np.concatenate([F, L[:, None], dF.reshape(len(y), -1), dL], axis=1)
        return out if scale is None else out * scale[: len(y)]

    def stop(y):
        return ~np.all(np.isfinite(y), axis=1) | (np.linalg.norm(y[:, :n], axis=1) > escape_radius)

    y0 = np.concatenate([x0, p0, np.zeros((N, 1)), dz_dxi0.reshape(N, -1), np.zeros((N, k))], axis=1)
    sol = integrate_batch(rhs, y0, taus, rtol=rtol, atol=atol, stop=stop)
    Y = sol.y
    z = Y[..., : 2 * n]
    S = Y[..., 2 * n]
    W = Y[..., 2 * n + 1: 2 * n + 1 + 2 * n * k].reshape(N, len(taus), 2 * n, k)
    Sxi = Y[..., 2 * n + 1 + 2 * n * k:]
    ok = np.all(np.isfinite(Y), axis=-1)
    zf = np.where(ok[..., None], z, 0.0)
    Wf = np.where(ok[..., None, None], W, 0.0)
    M = N * len(taus)
    F, dF, L, dL, H = _flow_with_variations(s, zf.reshape(M, 2 * n), Wf.reshape(M, 2 * n, k))
    nan = np.where(ok, 1.0, np.nan)
    return Trajectory(
        tau=taus,
        x=z[..., :n],
        p=z[..., n:],
        S=S,
        dz_dxi=W,
        dS_dxi=Sxi,
        dz_dtau=F.reshape(N, len(taus), 2 * n) * nan[..., None],
        d2z_dtaudxi=dF.reshape(N, len(taus), 2 * n, k) * nan[..., None, None],
        L=L.reshape(N, len(taus)) * nan,
        dL_dxi=dL.reshape(N, len(taus), k) * nan[..., None],
        H=H.reshape(N, len(taus)) * nan,
        escaped=sol.stopped_at < len(taus) - 1,
        last_valid=sol.stopped_at,
    )


def integrate_rays_to(s: SystemSpec, x0, p0, dz_dxi0, tau_end, rtol: float = 1e-12,
                      atol: float = 1e-12) -> Trajectory:
    """End states of rays integrated to individual times ``tau_end``.

    The returned trajectory has two samples (start and end); ``tau`` holds
    the per-ray end times.
    """
    tau_end = np.atleast_1d(np.asarray(tau_end, dtype=float))
    tr = integrate_rays(s, x0, p0, dz_dxi0, tau=np.array([0.0, 1.0]), rtol=rtol, atol=atol,
                        escape_radius=np.inf, time_scale=tau_end)
    tr.tau = tau_end
    return tr


def integrate_bicharacteristic(s: SystemSpec, seed: PhasePoint, seed_frame=None, tau_max: float = 1.0,
                               n_samples: int = 101, rtol: float = 1e-10, atol: float = 1e-10,
                               escape_radius: float | None = None) -> Trajectory:
    """Single-ray convenience wrapper around :func:`integrate_rays`.

    Refuses seeds off the zero level of H (|H| >= 1e-10).
    """
    h0 = hamiltonian(s, seed.x, seed.p)
    if abs(h0) >= 1e-10:
        raise HamiltonianError(f"seed not on H=0 (H={h0!r})")
    tau = seed.tau + np.linspace(0.0, tau_max, n_samples)
    tr = integrate_rays(s, np.asarray(seed.x)[None], np.asarray(seed.p)[None],
                        None if seed_frame is None else np.asarray(seed_frame)[None],
                        tau=tau - seed.tau, rtol=rtol, atol=atol, escape_radius=escape_radius)
    tr.tau = tau
    tr.S = tr.S + seed.S
    return tr
