"""The Lagrange-Pontryagin manifold: bicharacteristics emitted from the
level set {V = delta} with costates on {H = 0}, stored as a node grid over
(tau, xi) together with a C^1 Hermite interpolant and a spatial index."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from itertools import product
from pathlib import Path

import numpy as np

from . import jet
from .hamflow import _flow_with_variations, _solve_jet, integrate_rays, integrate_rays_to
from .interp import bezier_net, hermite_eval
from .jet import Jet2
from .localsolve import LocalSolution
from .spatial import BoxTree
from .sysdef import SystemSpec


class AtlasError(RuntimeError):
    pass


def _inv_sqrt(P: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(P)
    return U @ np.diag(w ** -0.5) @ U.T


@dataclass(frozen=True)
class SeedChart:
    """Parametrization xi -> x0(xi) = sqrt(delta) P^{-1/2} omega(xi) of {V = delta}.

    n = 1: two sheets (omega = +1, -1) and no xi axes.
    n = 2: one periodic angle.
    n = 3: polar angle (poles excluded, cell-centred grid) and periodic azimuth.
    """

    n: int
    P: np.ndarray
    delta: float
    xi_axes: tuple
    periodic: tuple

    @classmethod
    def build(cls, n: int, P: np.ndarray, delta: float, counts=64) -> SeedChart:
        if n == 1:
            return cls(1, P, delta, (), ())
        if n == 2:
            N = int(counts if np.isscalar(counts) else counts[0])
            return cls(2, P, delta, (2 * np.pi * np.arange(N) / N,), (True,))
        if n == 3:
            if np.isscalar(counts):
                counts = (max(4, int(counts) // 2), int(counts))
            Nt, Np = int(counts[0]), int(counts[1])
            return cls(3, P, delta, (np.pi * (np.arange(Nt) + 0.5) / Nt, 2 * np.pi * np.arange(Np) / Np),
                       (False, True))
        raise AtlasError("the grid builder supports n <= 3; pass explicit seeds for larger n")

    @property
    def k(self) -> int:
        return self.n - 1

    @property
    def sheets(self) -> int:
        return 2 if self.n == 1 else 1

    @property
    def shape(self) -> tuple:
        return (self.sheets,) + tuple(len(a) for a in self.xi_axes)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a[1] - a[0] if len(a) > 1 else 1.0 for a in self.xi_axes])

    def ray_xi(self) -> tuple[np.ndarray, np.ndarray]:
        """(sheet index (R,), xi (R, k)) for every ray in storage order."""
        grids = np.meshgrid(np.arange(self.sheets), *self.xi_axes, indexing="ij")
        sheet = grids[0].ravel().astype(int)
        xi = np.stack([g.ravel() for g in grids[1:]], axis=-1) if self.k else np.zeros((sheet.size, 0))
        return sheet, xi

    def omega(self, sheet, xi):
        """Unit directions as jets in xi (dimension k)."""
        xi = np.atleast_2d(np.asarray(xi, dtype=float))
        k = self.k
        if k == 0:
            sign = np.where(np.asarray(sheet) == 0, 1.0, -1.0)
            return [Jet2.constant(sign, 0)]
        v = jet.seed(xi)
        if self.n == 2:
            return [jet.cos(v[0]), jet.sin(v[0])]
        th, ph = v
        return [jet.sin(th) * jet.cos(ph), jet.sin(th) * jet.sin(ph), jet.cos(th)]

    def points(self, sheet, xi):
        """x0 as jets in xi."""
        om = self.omega(sheet, xi)
        M = np.sqrt(self.delta) * _inv_sqrt(self.P)
        return [sum(M[i, j] * om[j] for j in range(self.n)) for i in range(self.n)]


def _lambda_plus(qf, qRq, eps):
    """Positive root of eps + lam*qf - lam^2 qRq / 4 = 0, cancellation free."""
    D = qf * qf + eps * qRq
    if isinstance(D, Jet2):
        root = jet.sqrt(D)
        a = 2.0 * (qf + root) / qRq
        b = 2.0 * eps / (root - qf)
        use_a = (qf.value if isinstance(qf, Jet2) else np.asarray(qf)) >= 0
        return Jet2(np.where(use_a, a.value, b.value),
                    np.where(use_a[..., None], a.gradient, b.gradient),
                    np.where(use_a[..., None, None], a.hessian, b.hessian))
    root = np.sqrt(D)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(qf >= 0, 2.0 * (qf + root) / qRq, 2.0 * eps / (root - qf))


def _seed_costate(s: SystemSpec, P: np.ndarray, xs, tol: float = 1e-14):
    """Costate lambda_+ * grad V at the points ``xs`` (list of n floats/jets)."""
    n = s.n
    q = [2.0 * sum(P[i, j] * xs[j] for j in range(n)) for i in range(n)]
    f, g, eps, Q = s.evaluate(None, xs)
    qf = sum(q[i] * f[i] for i in range(n))
    r = [sum(q[i] * g[i][a] for i in range(n)) for a in range(s.m)]
    v = _solve_jet(Q, r)
    qRq = sum(r[a] * v[a] for a in range(s.m))
    qRq_val = qRq.value if isinstance(qRq, Jet2) else np.asarray(qRq)
    if np.any(qRq_val <= tol):
        raise AtlasError("level set point not actuated")
    lam = _lambda_plus(qf, qRq, eps)
    return [lam * qi for qi in q]


def seed_momentum(s: SystemSpec, local: LocalSolution, x0) -> np.ndarray:
    """Costate p0 = lambda_+(x0) grad V(x0) with H(x0, p0) = 0."""
    x0 = np.asarray(x0, dtype=float)
    V = local.V(x0)
    if np.any(np.abs(V - local.delta) > 1e-10 * max(1.0, local.delta)):
        raise AtlasError("seed point not on the level set {V = delta}")
    p = _seed_costate(s, local.P, [x0[..., i] for i in range(s.n)])
    return np.stack([np.broadcast_to(np.asarray(pi, dtype=float), x0.shape[:-1]) for pi in p], axis=-1)


@dataclass
class Atlas:
    """Node grid of the manifold.

    Ray arrays are indexed [ray, tau_index, ...] with rays in the storage
    order of :meth:`SeedChart.ray_xi`.
    """

    system: SystemSpec
    local: LocalSolution
    chart: SeedChart
    tau: np.ndarray
    x: np.ndarray
    p: np.ndarray
    S: np.ndarray
    dz_dxi: np.ndarray
    dS_dxi: np.ndarray
    detX: np.ndarray
    escaped: np.ndarray
    tolerances: dict = field(default_factory=dict)
    caustics: list = field(default_factory=list)

    # derived node data -----------------------------------------------------

    @cached_property
    def _derived(self):
        R, T, n = self.x.shape
        k = self.chart.k
        ok = self.valid
        z = np.concatenate([self.x, self.p], axis=-1)
        zf = np.where(ok[..., None], z, 0.0).reshape(R * T, 2 * n)
        Wf = np.where(ok[..., None, None], self.dz_dxi, 0.0).reshape(R * T, 2 * n, k)
        F, dF, L, dL, H = _flow_with_variations(self.system, zf, Wf)
        nan = np.where(ok, 1.0, np.nan)
        return (F.reshape(R, T, 2 * n) * nan[..., None], dF.reshape(R, T, 2 * n, k) * nan[..., None, None],
                L.reshape(R, T) * nan, dL.reshape(R, T, k) * nan[..., None], H.reshape(R, T) * nan)

    @property
    def dz_dtau(self) -> np.ndarray:
        return self._derived[0]

    @property
    def d2z_dtaudxi(self) -> np.ndarray:
        return self._derived[1]

    @property
    def L(self) -> np.ndarray:
        return self._derived[2]

    @property
    def dL_dxi(self) -> np.ndarray:
        return self._derived[3]

    @property
    def H(self) -> np.ndarray:
        return self._derived[4]

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.S) & np.all(np.isfinite(self.x), axis=-1) & np.all(np.isfinite(self.p), axis=-1)

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def n_rays(self) -> int:
        return self.x.shape[0]

    @property
    def n_nodes(self) -> int:
        return int(self.valid.sum())

    @cached_property
    def frame(self) -> np.ndarray:
        """[dz/dtau | dz/dxi] per node, shape (R, T, 2n, n)."""
        return np.concatenate([self.dz_dtau[..., None], self.dz_dxi], axis=-1)

    @cached_property
    def ray_sheet_xi(self):
        return self.chart.ray_xi()

    def ray_index(self, sheet: int, idx: tuple) -> int:
        return int(np.ravel_multi_index((sheet,) + tuple(idx), self.chart.shape))

    # interpolation ---------------------------------------------------------

    @property
    def d(self) -> int:
        return 1 + self.chart.k

    @property
    def h(self) -> np.ndarray:
        return np.concatenate([[self.tau[1] - self.tau[0]], self.chart.spacing])

    @cached_property
    def node_data(self) -> np.ndarray:
        """Hermite data (R*T, 2**d, 2n+1) in the bit-mask subset layout."""
        R, T, n = self.x.shape
        k = self.chart.k
        d = self.d
        C = 2 * n + 1
        D = np.full((R, T, 2 ** d, C), np.nan)
        D[..., 0, :] = np.concatenate([self.x, self.p, self.S[..., None]], axis=-1)
        D[..., 1, :] = np.concatenate([self.dz_dtau, self.L[..., None]], axis=-1)
        for a in range(k):
            D[..., 1 << (a + 1), :] = np.concatenate([self.dz_dxi[..., a], self.dS_dxi[..., a, None]], axis=-1)
            D[..., 1 | (1 << (a + 1)), :] = np.concatenate([self.d2z_dtaudxi[..., a], self.dL_dxi[..., a, None]], axis=-1)
        if k >= 2:
            # mixed xi derivatives are not integrated; estimate them by central
            # differences of the first xi-derivative along the second xi axis
            shape = self.chart.shape + (T, 2 ** d, C)
            Dg = D.reshape(shape)
            h2 = self.chart.spacing[1]
            for base in (1 << 1, 1 | (1 << 1)):
                src = Dg[..., base, :]
                if self.chart.periodic[1]:
                    fd = (np.roll(src, -1, axis=2) - np.roll(src, 1, axis=2)) / (2 * h2)
                else:
                    fd = np.gradient(src, h2, axis=2)
                Dg[..., base | (1 << 2), :] = fd
            D = Dg.reshape(R, T, 2 ** d, C)
        return D.reshape(R * T, 2 ** d, C)

    @cached_property
    def cells(self):
        """Cell table: (corner node ids (ncell, 2**d), sheet (ncell,), lower grid index (ncell, d))."""
        T = len(self.tau)
        k = self.chart.k
        shape = self.chart.shape
        ranges = [range(shape[0]), range(T - 1)]
        for a in range(k):
            Na = shape[a + 1]
            ranges.append(range(Na if self.chart.periodic[a] else Na - 1))
        lows = np.array(list(product(*ranges)), dtype=int)
        if lows.size == 0:
            return np.zeros((0, 2 ** self.d), dtype=int), np.zeros(0, dtype=int), np.zeros((0, self.d), dtype=int)
        corners = np.empty((len(lows), 2 ** self.d), dtype=int)
        for c in range(2 ** self.d):
            ti = lows[:, 1] + (c & 1)
            xis = []
            for a in range(k):
                j = lows[:, 2 + a] + ((c >> (a + 1)) & 1)
                if self.chart.periodic[a]:
                    j = j % shape[a + 1]
                xis.append(j)
            ray = np.ravel_multi_index((lows[:, 0], *xis), shape)
            corners[:, c] = ray * T + ti
        valid = self.valid.reshape(-1)[corners].all(axis=1)
        return corners[valid], lows[valid, 0], lows[valid, 1:]

    def cell_coords(self, cell: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Global (tau, xi) of local coordinates ``u`` in ``cell``."""
        _, _, low = self.cells
        lo = np.concatenate([[self.tau[0]], [a[0] for a in self.chart.xi_axes]])
        return lo + (low[cell] + u) * self.h

    def eval_cells(self, cell, u, order: int = 1):
        """Interpolant (x, p, S fields) and derivatives in cells at local coords."""
        corners, _, _ = self.cells
        cd = self.node_data[corners[np.asarray(cell)]]
        return hermite_eval(cd, np.atleast_2d(u), self.h, order)

    def locate(self, sheet, coords):
        """Cell ids and local coords for global (tau, xi) points (clamped to the grid)."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        sheet = np.broadcast_to(np.asarray(sheet, dtype=int), coords.shape[:1])
        shape = self.chart.shape
        T = len(self.tau)
        h = self.h
        t_rel = (coords[:, 0] - self.tau[0]) / h[0]
        i = np.clip(np.floor(t_rel).astype(int), 0, T - 2)
        u = [t_rel - i]
        lows = [sheet, i]
        for a in range(self.chart.k):
            ax = self.chart.xi_axes[a]
            rel = (coords[:, 1 + a] - ax[0]) / h[1 + a]
            Na = shape[a + 1]
            if self.chart.periodic[a]:
                j = np.floor(rel).astype(int)
                u.append(rel - j)
                j = j % Na
            else:
                j = np.clip(np.floor(rel).astype(int), 0, Na - 2)
                u.append(rel - j)
            lows.append(j)
        key = self._cell_lookup
        flat = np.ravel_multi_index(tuple(lows), self._cell_key_shape)
        cell = key[flat]
        return cell, np.stack(u, axis=-1)

    @cached_property
    def _cell_key_shape(self):
        shape = self.chart.shape
        return (shape[0], len(self.tau) - 1) + tuple(shape[1:])

    @cached_property
    def _cell_lookup(self) -> np.ndarray:
        _, sheet, low = self.cells
        key = np.full(int(np.prod(self._cell_key_shape)), -1, dtype=int)
        if len(sheet):
            key[np.ravel_multi_index((sheet,) + tuple(low.T), self._cell_key_shape)] = np.arange(len(sheet))
        return key

    def evaluate(self, sheet, coords, order: int = 1):
        """Interpolant at global (tau, xi); rows in invalid cells are NaN."""
        cell, u = self.locate(sheet, coords)
        good = cell >= 0
        C = 2 * self.n + 1
        P = len(cell)
        val = np.full((P, C), np.nan)
        grad = np.full((P, C, self.d), np.nan)
        hess = np.full((P, C, self.d, self.d), np.nan)
        if np.any(good):
            out = self.eval_cells(cell[good], u[good], order)
            val[good], grad[good] = out[0], out[1]
            if order >= 2:
                hess[good] = out[2]
        return (val, grad, hess) if order >= 2 else (val, grad)

    @cached_property
    def tree(self) -> BoxTree:
        corners, _, _ = self.cells
        n = self.n
        if len(corners) == 0:
            return BoxTree(np.zeros((0, n)), np.zeros((0, n)))
        lo = np.empty((len(corners), n))
        hi = np.empty((len(corners), n))
        step = 4096
        for s0 in range(0, len(corners), step):
            cd = self.node_data[corners[s0:s0 + step]][..., :n]
            net = bezier_net(cd, self.h)
            lo[s0:s0 + step] = net.min(axis=1)
            hi[s0:s0 + step] = net.max(axis=1)
        return BoxTree(lo, hi)

    def node_coords(self) -> np.ndarray:
        """Global (tau, xi) of every node, shape (R, T, d)."""
        _, xi = self.ray_sheet_xi
        R, T = self.S.shape
        out = np.empty((R, T, self.d))
        out[..., 0] = self.tau[None, :]
        out[..., 1:] = xi[:, None, :]
        return out


def build_atlas(
    s: SystemSpec,
    local: LocalSolution,
    n_xi=64,
    tau_max: float = 2.0,
    n_tau: int = 101,
    rtol: float = 1e-10,
    atol: float = 1e-10,
    escape_radius: float | None = None,
) -> Atlas:
    """Seed every grid ray with the H = 0 costate and integrate it to ``tau_max``."""
    if not local.margin < 0:
        raise AtlasError("local solution does not satisfy the decrease inequality (margin >= 0)")
    chart = SeedChart.build(s.n, local.P, local.delta, n_xi)
    sheet, xi = chart.ray_xi()
    xs = chart.points(sheet, xi)
    ps = _seed_costate(s, local.P, xs)
    R = len(sheet)
    x0 = np.stack([np.broadcast_to(v.value, (R,)) for v in xs], axis=-1)
    p0 = np.stack([np.broadcast_to(v.value, (R,)) for v in ps], axis=-1)
    k = chart.k
    dz0 = np.zeros((R, 2 * s.n, k))
    if k:
        dz0[:, : s.n] = np.stack([v.gradient for v in xs], axis=1)
        dz0[:, s.n:] = np.stack([v.gradient for v in ps], axis=1)
    tr = integrate_rays(s, x0, p0, dz0, tau=np.linspace(0.0, tau_max, n_tau), rtol=rtol, atol=atol,
                        escape_radius=escape_radius)
    return Atlas(
        system=s,
        local=local,
        chart=chart,
        tau=tr.tau,
        x=tr.x,
        p=tr.p,
        S=tr.S,
        dz_dxi=tr.dz_dxi,
        dS_dxi=tr.dS_dxi,
        detX=tr.detX(),
        escaped=tr.escaped,
        tolerances={"rtol": rtol, "atol": atol},
    )


@dataclass
class ShotPoint:
    """Manifold data at off-grid (tau, xi) obtained by re-integrating the ray."""

    x: np.ndarray         # (P, n)
    p: np.ndarray         # (P, n)
    S: np.ndarray         # (P,)
    frame: np.ndarray     # (P, 2n, n): [dz/dtau | dz/dxi]
    dS_dxi: np.ndarray    # (P, n-1)

    @property
    def jacobian_x(self) -> np.ndarray:
        n = self.x.shape[-1]
        return self.frame[:, :n, :]


def shoot(atlas: Atlas, sheet, coords, rtol: float = 1e-12, atol: float = 1e-12) -> ShotPoint:
    """Integrate the rays through global (tau, xi) points from their seeds."""
    s = atlas.system
    coords = np.atleast_2d(np.asarray(coords, dtype=float))
    P = len(coords)
    sheet = np.broadcast_to(np.asarray(sheet, dtype=int), (P,))
    n = s.n
    k = atlas.chart.k
    xs = atlas.chart.points(sheet, coords[:, 1:])
    ps = _seed_costate(s, atlas.local.P, xs)
    x0 = np.stack([np.broadcast_to(v.value, (P,)) for v in xs], axis=-1)
    p0 = np.stack([np.broadcast_to(v.value, (P,)) for v in ps], axis=-1)
    dz0 = np.zeros((P, 2 * n, k))
    if k:
        dz0[:, :n] = np.stack([v.gradient for v in xs], axis=1)
        dz0[:, n:] = np.stack([v.gradient for v in ps], axis=1)
    tr = integrate_rays_to(s, x0, p0, dz0, coords[:, 0], rtol=rtol, atol=atol)
    return ShotPoint(x=tr.x[:, -1], p=tr.p[:, -1], S=tr.S[:, -1], frame=tr.frame[:, -1],
                     dS_dxi=tr.dS_dxi[:, -1])


def loop_integral(atlas: Atlas, quad) -> float:
    """Trapezoidal circulation of <p, dx> around a closed polygon of nodes.

    ``quad`` is a sequence of (ray, tau_index) pairs in loop order.
    """
    pts = [(atlas.x[r, i], atlas.p[r, i]) for r, i in quad]
    total = 0.0
    for a in range(len(pts)):
        xa, pa = pts[a]
        xb, pb = pts[(a + 1) % len(pts)]
        total += 0.5 * float(np.dot(pa + pb, xb - xa))
    return total


def grid_circulations(atlas: Atlas, stride: int = 1) -> np.ndarray:
    """Circulations of all grid quads (n = 2), on a sub-grid of the given stride."""
    if atlas.n != 2:
        return np.zeros(0)
    R, T, _ = atlas.x.shape
    rays = np.arange(0, R, stride)
    taus = np.arange(0, T - stride, stride)
    x, p = atlas.x, atlas.p
    r0, r1 = rays[:, None], ((rays + stride) % R)[:, None]
    t0, t1 = taus[None, :], (taus + stride)[None, :]
    corners = [(r0, t0), (r0, t1), (r1, t1), (r1, t0)]
    total = 0.0
    for a in range(4):
        ra, ta = corners[a]
        rb, tb = corners[(a + 1) % 4]
        total = total + 0.5 * np.einsum("...i,...i->...", p[ra, ta] + p[rb, tb], x[rb, tb] - x[ra, ta])
    return total


# persistence ------------------------------------------------------------------

FORMAT = "lpfeedback-atlas/1"


def _fmt(v) -> str:
    v = float(v)
    if not np.isfinite(v):
        return json.dumps(None)
    return format(v, ".17g")


def _vec(a) -> str:
    return "[" + ",".join(_fmt(v) for v in np.ravel(a)) + "]"


def write_atlas(atlas: Atlas, path) -> None:
    """Header line plus one line per node; floats with 17 significant digits."""
    loc = atlas.local
    ch = atlas.chart
    header = {
        "format": FORMAT,
        "system": atlas.system.to_dict(),
        "n": atlas.n,
        "m": atlas.system.m,
        "P": "@P",
        "K": "@K",
        "delta": "@delta",
        "margin": "@margin",
        "grid": {"shape": list(ch.shape), "n_tau": len(atlas.tau), "tau": "@tau",
                 "xi_axes": ["@xi%d" % a for a in range(ch.k)], "periodic": list(ch.periodic)},
        "tolerances": atlas.tolerances,
    }
    text = json.dumps(header, sort_keys=True)
    subs = {'"@P"': _vec(loc.P), '"@K"': _vec(loc.K), '"@delta"': _fmt(loc.delta),
            '"@margin"': _fmt(loc.margin), '"@tau"': _vec(atlas.tau)}
    for a in range(ch.k):
        subs['"@xi%d"' % a] = _vec(ch.xi_axes[a])
    for key, val in subs.items():
        text = text.replace(key, val)
    lines = [text]
    R, T, n = atlas.x.shape
    _, xi = atlas.ray_sheet_xi
    for r in range(R):
        for i in range(T):
            lines.append(
                '{"r":%d,"i":%d,"tau":%s,"xi":%s,"x":%s,"p":%s,"S":%s,"detX":%s,"dz_dxi":%s,"dS_dxi":%s}'
                % (r, i, _fmt(atlas.tau[i]), _vec(xi[r]), _vec(atlas.x[r, i]), _vec(atlas.p[r, i]),
                   _fmt(atlas.S[r, i]), _fmt(atlas.detX[r, i]), _vec(atlas.dz_dxi[r, i]),
                   _vec(atlas.dS_dxi[r, i])))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _arr(v) -> np.ndarray:
    return np.array([np.nan if e is None else e for e in v], dtype=float)


def read_atlas(path) -> Atlas:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise AtlasError(f"{path}: malformed atlas header: {exc}") from None
        if header.get("format") != FORMAT:
            raise AtlasError(f"{path}: not an atlas file")
        system = SystemSpec.from_dict(header["system"])
        n, m = header["n"], header["m"]
        P = _arr(header["P"]).reshape(n, n)
        K = _arr(header["K"]).reshape(m, n)
        local = LocalSolution(P=P, K=K, delta=float(header["delta"]), margin=float(header["margin"]))
        grid = header["grid"]
        chart = SeedChart(n, P, local.delta, tuple(_arr(a) for a in grid["xi_axes"]), tuple(grid["periodic"]))
        shape = tuple(grid["shape"])
        R = int(np.prod(shape))
        T = int(grid["n_tau"])
        tau = _arr(grid["tau"])
        k = n - 1
        x = np.full((R, T, n), np.nan)
        p = np.full((R, T, n), np.nan)
        S = np.full((R, T), np.nan)
        detX = np.full((R, T), np.nan)
        dz = np.full((R, T, 2 * n, k), np.nan)
        dS = np.full((R, T, k), np.nan)
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                r, i = rec["r"], rec["i"]
                x[r, i] = _arr(rec["x"])
                p[r, i] = _arr(rec["p"])
                S[r, i] = np.nan if rec["S"] is None else rec["S"]
                detX[r, i] = np.nan if rec["detX"] is None else rec["detX"]
                dz[r, i] = _arr(rec["dz_dxi"]).reshape(2 * n, k)
                dS[r, i] = _arr(rec["dS_dxi"])
            except (KeyError, ValueError, IndexError, TypeError) as exc:
                raise AtlasError(f"{path}:{lineno}: malformed node record: {exc}") from None
    escaped = ~np.all(np.isfinite(S), axis=1)
    return Atlas(system, local, chart, tau, x, p, S, dz, dS, detX, escaped, header.get("tolerances", {}))
