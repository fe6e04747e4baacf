"""Local optimal stabilization from the linearization at the origin.

The linear-quadratic problem gives a quadratic Lyapunov function
``V(x) = <x, P x>`` and a linear feedback ``w(x) = K x``.  A level ``delta``
is then chosen so that, on the level set ``{V = delta}``,

    <grad V, f(x) + g(x) w(x)> + <w, Q(x) w> < 0 .
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import qmc

from .sysdef import SystemSpec


class LocalSolveError(RuntimeError):
    pass


@dataclass(frozen=True)
class Linearization:
    A: np.ndarray
    Bmat: np.ndarray
    E: np.ndarray
    Q0: np.ndarray


@dataclass(frozen=True)
class LocalSolution:
    P: np.ndarray
    K: np.ndarray
    delta: float
    margin: float

    def V(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.P, x)

    def gradV(self, x) -> np.ndarray:
        return 2.0 * np.asarray(x, dtype=float) @ self.P

    def w(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.K.T


def _is_pd(M: np.ndarray) -> bool:
    return bool(np.all(np.linalg.eigvalsh(0.5 * (M + M.T)) > 0))


def linearize(s: SystemSpec) -> Linearization:
    zero = np.zeros(s.n)
    f, g, eps, Q = s.jets(zero)
    A = np.array([fi.gradient if hasattr(fi, "gradient") else np.zeros(s.n) for fi in f])
    _, G, _, Q0 = s.arrays(zero)
    E = 0.5 * eps.hessian if hasattr(eps, "hessian") else np.zeros((s.n, s.n))
    E = 0.5 * (E + E.T)
    if not _is_pd(E) or not _is_pd(Q0):
        raise LocalSolveError("linearized problem unsolvable: Hessian of epsilon or Q(0) not positive definite")
    return Linearization(A=A.reshape(s.n, s.n), Bmat=G.reshape(s.n, s.m), E=E, Q0=Q0.reshape(s.m, s.m))


def matrix_sign(Z: np.ndarray, tol: float = 1e-14, maxiter: int = 100) -> tuple[np.ndarray, bool]:
    """Newton iteration Z <- (Z + Z^{-1}) / 2 with determinantal scaling.

    Returns the sign matrix and a convergence flag.  Fails (flag False) when
    Z has eigenvalues on or very near the imaginary axis.
    """
    Z = np.array(Z, dtype=float)
    d = Z.shape[0]
    for it in range(maxiter):
        try:
            Zi = np.linalg.inv(Z)
        except np.linalg.LinAlgError:
            return Z, False
        if it < 20:
            det = abs(np.linalg.det(Z))
            c = det ** (-1.0 / d) if np.isfinite(det) and det > 0 else 1.0
        else:
            c = 1.0
        Znew = 0.5 * (c * Z + Zi / c)
        if not np.all(np.isfinite(Znew)):
            return Znew, False
        if np.linalg.norm(Znew - Z, 1) <= tol * np.linalg.norm(Znew, 1):
            return Znew, True
        Z = Znew
    return Z, bool(np.linalg.norm(Z @ Z - np.eye(d), 1) < 1e-8)


def is_hurwitz(M: np.ndarray) -> bool:
    """Certify Re(eig M) < 0 by convergence of sign(M) to -I."""
    S, ok = matrix_sign(M)
    return ok and np.allclose(S, -np.eye(M.shape[0]), atol=1e-8)


def riccati_residual(lin: Linearization, P: np.ndarray) -> np.ndarray:
    BQB = lin.Bmat @ np.linalg.solve(lin.Q0, lin.Bmat.T)
    return lin.A.T @ P + P @ lin.A - P @ BQB @ P + lin.E


def solve_riccati(lin: Linearization) -> np.ndarray:
    """Stabilizing solution of A'P + PA - P B Q0^{-1} B' P + E = 0."""
    n = lin.A.shape[0]
    BQB = lin.Bmat @ np.linalg.solve(lin.Q0, lin.Bmat.T)
    H = np.block([[lin.A, -BQB], [-lin.E, -lin.A.T]])
    W, ok = matrix_sign(H)
    if not ok:
        raise LocalSolveError("(A,B) not stabilizable or ill-conditioned")
    lhs = np.vstack([W[:n, n:], W[n:, n:] + np.eye(n)])
    rhs = -np.vstack([W[:n, :n] + np.eye(n), W[n:, :n]])
    P, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    P = 0.5 * (P + P.T)
    # Newton-Kleinman polish: the sign iteration alone leaves ~1e-12 relative residual
    for _ in range(3):
        res = riccati_residual(lin, P)
        if np.linalg.norm(res) < 1e-13 * (1 + np.linalg.norm(P)):
            break
        Acl = lin.A - BQB @ P
        # solve Acl' X + X Acl = -res via Kronrod vectorization (n is small)
        I = np.eye(n)
        L = np.kron(I, Acl.T) + np.kron(Acl.T, I)
        try:
            dP = np.linalg.solve(L, -res.reshape(-1, order="F")).reshape(n, n, order="F")
        except np.linalg.LinAlgError:
            break
        P = P + 0.5 * (dP + dP.T)
    res = np.linalg.norm(riccati_residual(lin, P))
    if not np.all(np.isfinite(P)) or res >= 1e-10 * (1 + np.linalg.norm(P)):
        raise LocalSolveError("(A,B) not stabilizable or ill-conditioned")
    if not _is_pd(P) or not is_hurwitz(lin.A - BQB @ P):
        raise LocalSolveError("(A,B) not stabilizable or ill-conditioned")
    return P


def local_gain(lin: Linearization, P: np.ndarray) -> np.ndarray:
    return -np.linalg.solve(lin.Q0, lin.Bmat.T @ P)


def unit_directions(n: int, count: int | None = None, seed: int = 0) -> np.ndarray:
    """Deterministic, well-spread unit vectors (at least 2**n * 64 for n >= 2)."""
    if n == 1:
        return np.array([[1.0], [-1.0]])
    count = max(count or 0, 2 ** n * 64)
    if n == 2:
        th = 2 * np.pi * np.arange(count) / count
        return np.stack([np.cos(th), np.sin(th)], axis=1)
    from scipy.stats import norm

    u = qmc.Sobol(n, scramble=True, seed=seed).random(count)
    z = norm.ppf(np.clip(u, 1e-12, 1 - 1e-12))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def level_points(P: np.ndarray, delta: float, omega: np.ndarray) -> np.ndarray:
    """Points sqrt(delta) P^{-1/2} omega on {V = delta}."""
    w, U = np.linalg.eigh(P)
    Pmh = U @ np.diag(w ** -0.5) @ U.T
    return np.sqrt(delta) * omega @ Pmh.T


def level_margin(s: SystemSpec, P: np.ndarray, K: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Left side of the local decrease inequality at each row of ``x``."""
    F, G, _, Qa = s.arrays(x)
    u = x @ K.T
    drift = F + np.einsum("...ij,...j->...i", G, u)
    return np.einsum("...i,...i->...", 2.0 * x @ P, drift) + np.einsum("...i,...ij,...j->...", u, Qa, u)


def default_candidates(P: np.ndarray) -> list[float]:
    scale = float(np.linalg.norm(P, 2))
    return [scale * 2.0 ** -k for k in range(21)]


def choose_delta(s: SystemSpec, P: np.ndarray, K: np.ndarray, candidates=None,
                 samples_per_level: int | None = None) -> LocalSolution:
    candidates = default_candidates(P) if candidates is None else list(candidates)
    if not candidates:
        raise LocalSolveError("no delta candidates supplied")
    omega = unit_directions(s.n, samples_per_level)
    for delta in candidates:
        if delta <= 0:
            raise LocalSolveError("delta candidates must be positive")
        x = level_points(P, delta, omega)
        margin = float(np.max(level_margin(s, P, K, x)))
        if margin < 0:
            return LocalSolution(P=P, K=K, delta=float(delta), margin=margin)
    raise LocalSolveError("no valid level found; supply smaller candidates")


def solve_local(s: SystemSpec, candidates=None, samples_per_level: int | None = None) -> LocalSolution:
    lin = linearize(s)
    P = solve_riccati(lin)
    K = local_gain(lin, P)
    return choose_delta(s, P, K, candidates, samples_per_level)
