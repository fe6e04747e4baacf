"""Canonical Maslov operator on the atlas and the regularized Bellman function.

Conventions
-----------
* The phase of the operator is the action A = -S (so the operator behaves
  like exp(-ik B) and Re{ln Mas / (ik)} = -B).  A is a generating function
  for the reflected manifold {(x, eta)}, eta = -p; every chart momentum in
  this module is eta.  In a chart with momentum block beta,

      S_j(x_alpha, eta_beta) = -<x_beta, eta_beta> + A,
      dS_j/dx_alpha = eta_alpha,   dS_j/deta_beta = -x_beta.

* Charts are square tiles of the (tau, xi) grid that overlap by half a tile.
  The partition of unity e_j is a normalized product of standard bumps.
* Chart phases c_j = exp(-i pi nu_j / 2), with nu_j accumulated from a root
  chart (beta empty, at the seed) by chart_index(child, parent) along a
  spanning tree of the tile overlap graph.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from itertools import combinations, product
from typing import Callable

import numpy as np

from .bellman import Branch, BellmanResult, OutsideRegion, bellman_query, bellman_query_batch, enumerate_branches
from .bellman import CausticCloud
from .lpmanifold import Atlas


class MaslovError(RuntimeError):
    pass


class QuantizationError(MaslovError):
    pass


class QuadratureError(MaslovError):
    pass


# smooth bumps -----------------------------------------------------------------


def bump(t) -> np.ndarray:
    """Standard bump exp(-1/(1 - t^2)) on |t| < 1, zero elsewhere."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape)
    inside = np.abs(t) < 1.0
    ti = t[inside]
    out[inside] = np.exp(-1.0 / (1.0 - ti * ti))
    return out


def bump_derivative(t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape)
    inside = np.abs(t) < 1.0
    ti = t[inside]
    q = 1.0 - ti * ti
    out[inside] = np.exp(-1.0 / q) * (-2.0 * ti / (q * q))
    return out


def _unit_bump(t) -> np.ndarray:
    return np.e * bump(t)


# Gauss-Kronrod 7/15 ---------------------------------------------------------------

_XGK = np.array([0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
                 0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
                 0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
                 0.207784955007898467600689403773245, 0.0])
_WGK = np.array([0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
                 0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
                 0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
                 0.204432940075298892414161999234649, 0.209482141084727828012999174891714])
_WG = np.array([0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
                0.381830050505118944950369775488975, 0.417959183673469387755102040816327])
GK_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
GK_WEIGHTS = np.concatenate([_WGK[:-1], _WGK[::-1]])
_G_IDX = np.array([1, 3, 5, 7, 9, 11, 13])
G_WEIGHTS = np.concatenate([_WG[:-1], _WG[::-1]])


def oscillatory_quad(f: Callable[[np.ndarray], np.ndarray], a: float, b: float, n_oscillations: float = 0.0,
                     rtol: float = 1e-11, atol: float = 0.0, max_panels: int = 1_000_000) -> complex:
    """Adaptive Gauss-Kronrod 7/15 for a vectorized complex integrand.

    The initial panels hold at least 20 nodes per oscillation period
    (``n_oscillations`` = expected number of periods over [a, b]).  The
    tolerance never drops below the rounding noise of phases of size
    2 pi n_oscillations.
    """
    if b == a:
        return 0j
    n0 = max(4, int(np.ceil(max(n_oscillations, 0.0) * 20.0 / 15.0)))
    noise = max(1e-14, 4.0 * np.finfo(float).eps * 2 * np.pi * max(n_oscillations, 0.0))
    edges = np.linspace(a, b, n0 + 1)
    lo, hi = edges[:-1], edges[1:]
    total = 0j
    done_err = 0.0
    pending_lo, pending_hi = lo, hi
    accepted = 0j
    scale = 0.0
    n_panels = len(lo)
    while pending_lo.size:
        mid = 0.5 * (pending_lo + pending_hi)
        half = 0.5 * (pending_hi - pending_lo)
        x = mid[:, None] + half[:, None] * GK_NODES[None, :]
        y = np.asarray(f(x.ravel()), dtype=complex).reshape(x.shape)
        K = half * (y @ GK_WEIGHTS)
        G = half * (y[:, _G_IDX] @ G_WEIGHTS)
        err = np.abs(K - G)
        scale = max(scale, float(np.sum(half * (np.abs(y) @ GK_WEIGHTS))))
        total_est = accepted + K.sum()
        tol = max(rtol * abs(total_est), atol, noise * scale)
        budget = tol * (2 * half) / abs(b - a)
        ok = err <= budget
        accepted += K[ok].sum()
        done_err += float(err[ok].sum())
        bad = ~ok
        if not np.any(bad):
            break
        n_panels += int(bad.sum())
        if n_panels > max_panels:
            raise QuadratureError("oscillatory quadrature did not converge: increase the atlas sample density "
                                  "or use a smaller k")
        bl, bh, bm = pending_lo[bad], pending_hi[bad], mid[bad]
        pending_lo = np.concatenate([bl, bm])
        pending_hi = np.concatenate([bm, bh])
    total = accepted
    return complex(total)


# charts -----------------------------------------------------------------------


@dataclass
class ChartSpec:
    """One Lagrangian chart: a tile of the (tau, xi) grid with coordinates (x_alpha, eta_beta)."""

    alpha: tuple
    beta: tuple
    sheet: int
    tile: tuple
    center: np.ndarray        # grid coordinates (tau index, xi indices)
    half_width: np.ndarray    # support half-width per grid axis
    nu: int | None = None     # index relative to the root chart, mod 4
    min_jacobian: float = 0.0
    valid: bool = True        # every node of the tile is finite
    consistent: bool = True   # no closed-chain index defect touches this chart

    @property
    def c(self) -> complex:
        if self.nu is None:
            raise QuantizationError("chart has no index (not connected to the root chart)")
        return complex(np.exp(-0.5j * np.pi * self.nu))


def _beta_sets(n: int, max_card: int = 2):
    for card in range(0, min(n, max_card) + 1):
        for beta in combinations(range(n), card):
            yield beta


def lagrangian_matrix(frame: np.ndarray, n: int, beta: tuple) -> np.ndarray:
    """d(x_alpha, eta_beta)/d(tau, xi) from frames (..., 2n, n), eta = -p."""
    rows = []
    for i in range(n):
        rows.append(-frame[..., n + i, :] if i in beta else frame[..., i, :])
    return np.stack(rows, axis=-2)


def dxbeta_deta(frame: np.ndarray, n: int, beta: tuple) -> np.ndarray:
    """d x_beta / d eta_beta at fixed x_alpha (block solve on the frame)."""
    if not beta:
        return np.zeros(frame.shape[:-2] + (0, 0))
    C = lagrangian_matrix(frame, n, beta)
    Xb = frame[..., list(beta), :]
    # D = Xb C^{-1}; columns of the eta block sit at the positions of beta
    D = np.linalg.solve(np.swapaxes(C, -1, -2), np.swapaxes(Xb, -1, -2))
    D = np.swapaxes(D, -1, -2)
    return D[..., :, list(beta)]


def negative_eigs(M: np.ndarray) -> np.ndarray:
    if M.shape[-1] == 0:
        return np.zeros(M.shape[:-2], dtype=int)
    sym = 0.5 * (M + np.swapaxes(M, -1, -2))
    return np.sum(np.linalg.eigvalsh(sym) < 0, axis=-1)


def choose_lagrangian_coords(atlas: Atlas, nodes, max_card: int = 2, rel_threshold: float = 1e-8) -> tuple:
    """Smallest beta with |det d(x_alpha, eta_beta)/d(tau, xi)| > threshold on every node.

    ``nodes`` is a sequence of (ray, tau_index) pairs.  The determinant
    must also keep one sign over the node set.  Among admissible sets of the
    smallest size the best conditioned one is returned.
    """
    nodes = np.asarray(nodes, dtype=int).reshape(-1, 2)
    n = atlas.n
    fr = atlas.frame[nodes[:, 0], nodes[:, 1]]
    if not np.all(np.isfinite(fr)):
        raise MaslovError("node set contains escaped nodes")
    best = None
    for beta in _beta_sets(n, max_card):
        if best is not None and len(beta) > len(best[0]):
            break
        det = np.linalg.det(lagrangian_matrix(fr, n, beta))
        scale = _jacobian_scale(atlas, beta)
        if np.all(np.abs(det) > rel_threshold * scale) and (np.all(det > 0) or np.all(det < 0)):
            q = float(np.min(np.abs(det)) / scale)
            if best is None or q > best[1]:
                best = (beta, q)
    if best is None:
        raise MaslovError("chart too folded; refine grid")
    return best[0]


def _jacobian_scale(atlas: Atlas, beta: tuple) -> float:
    cache = atlas.__dict__.setdefault("_maslov_jscale", {})
    if beta not in cache:
        ok = atlas.valid
        fr = atlas.frame[ok]
        det = np.abs(np.linalg.det(lagrangian_matrix(fr, atlas.n, beta)))
        cache[beta] = float(np.median(det)) if det.size else 1.0
    return cache[beta]


def generating_function(atlas: Atlas, chart: ChartSpec, node) -> float:
    """S_j = -<x_beta, eta_beta> + A at a node (ray, tau_index), with A = -S."""
    r, t = node
    A = -float(atlas.S[r, t])
    b = list(chart.beta)
    eta = -atlas.p[r, t]
    return float(-np.dot(atlas.x[r, t][b], eta[b]) + A)


def chart_index(atlas: Atlas, chart_a: ChartSpec, chart_b: ChartSpec, node=None) -> int:
    """(negeig_a - negeig_b) mod 4 of d x_beta / d eta_beta at a shared node.

    Without ``node`` the best conditioned node of the overlap is used; 0 for
    disjoint charts.
    """
    if node is None:
        node = _shared_node(atlas, chart_a, chart_b)
        if node is None:
            return 0
    r, t = node
    fr = atlas.frame[r, t]
    ia = int(negative_eigs(dxbeta_deta(fr, atlas.n, chart_a.beta)))
    ib = int(negative_eigs(dxbeta_deta(fr, atlas.n, chart_b.beta)))
    return (ia - ib) % 4


def _shared_node(atlas: Atlas, a: ChartSpec, b: ChartSpec):
    if a.sheet != b.sheet:
        return None
    system = _charts_of(atlas)
    na = system.tile_nodes(a, pad=0)
    nb = system.tile_nodes(b, pad=0)
    common = np.array(sorted(set(map(tuple, na)) & set(map(tuple, nb))), dtype=int).reshape(-1, 2)
    if common.size == 0:
        return None
    fr = atlas.frame[common[:, 0], common[:, 1]]
    good = np.all(np.isfinite(fr.reshape(len(common), -1)), axis=1)
    if not np.any(good):
        return None
    common, fr = common[good], fr[good]
    n = atlas.n
    qual = np.full(len(common), np.inf)
    for beta in (a.beta, b.beta):
        if beta:
            D = dxbeta_deta(fr, n, beta)
            if len(beta) == 1:
                q = np.abs(D[:, 0, 0])
            else:
                q = np.min(np.abs(np.linalg.eigvalsh(0.5 * (D + np.swapaxes(D, -1, -2)))), axis=-1)
            q = q / max(float(np.median(q)), 1e-300)
            qual = np.minimum(qual, q)
    return tuple(common[int(np.argmax(qual))])


class ChartSystem:
    """Tiling of the atlas grid into Lagrangian charts with a partition of unity."""

    def __init__(self, atlas: Atlas, width: int = 4, pad: int = 0, max_card: int = 2):
        if width < 2 or width % 2:
            raise ValueError("tile width must be an even integer >= 2")
        self.atlas = atlas
        self.width = width
        self.pad = pad
        chart = atlas.chart
        T = len(atlas.tau)
        self.T = T
        d = atlas.d
        strides = [width / 2]
        counts = [int(np.ceil((T - 1) / (width / 2))) + 1]
        for a in range(chart.k):
            N = chart.shape[a + 1]
            if chart.periodic[a]:
                M = max(2, int(round(N / (width / 2))))
                strides.append(N / M)
                counts.append(M)
            else:
                strides.append(width / 2)
                counts.append(int(np.ceil((N - 1) / (width / 2))) + 1)
        self.stride = np.array(strides, dtype=float)
        self.counts = tuple(counts)
        self.periodic = (False,) + tuple(chart.periodic)
        self.grid_shape = (T,) + tuple(chart.shape[1:])
        self.charts: list[ChartSpec] = []
        self.index: dict[tuple, int] = {}
        for sheet in range(chart.sheets):
            for m in product(*[range(c) for c in counts]):
                center = np.array(m, dtype=float) * self.stride
                cs = ChartSpec(alpha=(), beta=(), sheet=sheet, tile=m, center=center,
                               half_width=self.stride.copy())
                self.index[(sheet,) + m] = len(self.charts)
                self.charts.append(cs)
        self._assign_coordinates(max_card)
        self.defects: list[tuple[int, int]] = []
        self._assign_indices()
        del d

    # grid helpers ------------------------------------------------------------

    def node_grid(self, values: np.ndarray) -> np.ndarray:
        """Reshape per-node data (R, T, ...) to (sheets, T, N_xi..., ...)."""
        shape = self.atlas.chart.shape
        R, T = values.shape[:2]
        rest = values.shape[2:]
        v = values.reshape(shape + (T,) + rest)
        k = self.atlas.chart.k
        return np.moveaxis(v, 1 + k, 1)

    def tile_nodes(self, cs: ChartSpec, pad: int | None = None) -> np.ndarray:
        """(ray, tau_index) of the grid nodes in the closed (padded) support of a tile."""
        pad = self.pad if pad is None else pad
        ranges = []
        for a in range(len(cs.center)):
            lo = cs.center[a] - cs.half_width[a] - pad
            hi = cs.center[a] + cs.half_width[a] + pad
            idx = np.arange(int(np.ceil(lo - 1e-9)), int(np.floor(hi + 1e-9)) + 1)
            if self.periodic[a]:
                idx = np.unique(idx % self.grid_shape[a])
            else:
                idx = idx[(idx >= 0) & (idx < self.grid_shape[a])]
            ranges.append(idx)
        grids = np.meshgrid(*ranges, indexing="ij")
        t = grids[0].ravel()
        shape = self.atlas.chart.shape
        if len(ranges) == 1:
            ray = np.full(t.shape, np.ravel_multi_index((cs.sheet,), shape[:1]))
        else:
            ray = np.ravel_multi_index((np.full(t.shape, cs.sheet),) + tuple(g.ravel() for g in grids[1:]), shape)
        return np.stack([ray, t], axis=-1)

    def _assign_coordinates(self, max_card: int) -> None:
        atlas = self.atlas
        n = atlas.n
        fr_all = atlas.frame
        dets = {}
        for beta in _beta_sets(n, max_card):
            with np.errstate(invalid="ignore"):
                dets[beta] = np.linalg.det(lagrangian_matrix(np.nan_to_num(fr_all), n, beta))
            dets[beta][~atlas.valid] = np.nan
        scales = {beta: _jacobian_scale(atlas, beta) for beta in dets}
        for cs in self.charts:
            nodes = self.tile_nodes(cs)
            if nodes.size == 0:
                cs.valid = False
                continue
            best = None
            for beta, det in dets.items():
                if best is not None and len(beta) > len(best[0]):
                    break
                v = det[nodes[:, 0], nodes[:, 1]]
                if not np.all(np.isfinite(v)):
                    cs.valid = False
                    break
                if np.all(np.abs(v) > 1e-8 * scales[beta]) and (np.all(v > 0) or np.all(v < 0)):
                    q = float(np.min(np.abs(v)) / scales[beta])
                    if best is None or q > best[1]:
                        best = (beta, q)
            if not cs.valid:
                continue
            if best is None:
                cs.beta = None  # no admissible coordinates; used only if a query needs it
                continue
            cs.beta = best[0]
            cs.alpha = tuple(i for i in range(n) if i not in best[0])
            cs.min_jacobian = best[1]

    def neighbours(self, j: int):
        cs = self.charts[j]
        for off in product(*[(-1, 0, 1)] * len(cs.tile)):
            if not any(off):
                continue
            m = []
            ok = True
            for a, o in enumerate(off):
                v = cs.tile[a] + o
                if self.periodic[a]:
                    v %= self.counts[a]
                elif not 0 <= v < self.counts[a]:
                    ok = False
                    break
                m.append(v)
            if ok:
                i = self.index[(cs.sheet,) + tuple(m)]
                if i != j:
                    yield i

    def _usable(self, j: int) -> bool:
        cs = self.charts[j]
        return cs.valid and cs.beta is not None

    def _assign_indices(self) -> None:
        atlas = self.atlas
        for sheet in range(atlas.chart.sheets):
            root = self.index[(sheet,) + (0,) * len(self.counts)]
            if not self._usable(root) or self.charts[root].beta:
                raise MaslovError("no regular chart at the seed; the level set itself is folded")
            self.charts[root].nu = 0
            queue = deque([root])
            while queue:
                j = queue.popleft()
                for i in self.neighbours(j):
                    if not self._usable(i):
                        continue
                    if not self.charts[i].beta and not self.charts[j].beta:
                        nu_edge = 0  # both indices are over empty matrices
                    else:
                        node = _shared_node(atlas, self.charts[i], self.charts[j])
                        if node is None:
                            continue
                        nu_edge = chart_index(atlas, self.charts[i], self.charts[j], node)
                    want = (self.charts[j].nu + nu_edge) % 4
                    if self.charts[i].nu is None:
                        self.charts[i].nu = want
                        queue.append(i)
                    elif self.charts[i].nu != want and (i, j) not in self.defects and (j, i) not in self.defects:
                        self.defects.append((j, i))
        for a, b in self.defects:
            self.charts[a].consistent = False
            self.charts[b].consistent = False

    # partition of unity ---------------------------------------------------------

    def _candidates(self, sheet: int, g: np.ndarray) -> list[int]:
        lists = []
        for a in range(len(g)):
            base = int(np.floor(g[a] / self.stride[a]))
            opts = []
            for m in (base, base + 1):
                if self.periodic[a]:
                    opts.append(m % self.counts[a])
                elif 0 <= m < self.counts[a]:
                    opts.append(m)
            lists.append(sorted(set(opts)))
        return [self.index[(sheet,) + m] for m in product(*lists)]

    def _raw(self, j: int, g: np.ndarray) -> np.ndarray:
        """Unnormalized tile bump at grid coordinates g (P, d)."""
        cs = self.charts[j]
        out = np.ones(len(g))
        for a in range(g.shape[1]):
            diff = g[:, a] - cs.center[a]
            if self.periodic[a]:
                N = self.grid_shape[a]
                diff = (diff + N / 2) % N - N / 2
            out *= _unit_bump(diff / cs.half_width[a])
        return out

    def _total(self, g: np.ndarray) -> np.ndarray:
        """Sum of all tile bumps at grid points g (P, d); only 2^d tiles overlap a point."""
        g = np.atleast_2d(g)
        base = np.floor(g / self.stride).astype(int)
        total = np.zeros(len(g))
        for off in product((0, 1), repeat=g.shape[1]):
            term = np.ones(len(g))
            for a, o in enumerate(off):
                m = base[:, a] + o
                diff = g[:, a] - m * self.stride[a]
                if self.periodic[a]:
                    N = self.grid_shape[a]
                    diff = (diff + N / 2) % N - N / 2
                else:
                    term = np.where((m >= 0) & (m < self.counts[a]), term, 0.0)
                term = term * _unit_bump(diff / self.stride[a])
            total += term
        return total

    def partition(self, j: int, g) -> np.ndarray:
        """e_j at grid points g (P, d) of the chart's sheet."""
        g = np.atleast_2d(np.asarray(g, dtype=float))
        raw = self._raw(j, g)
        out = np.zeros(len(g))
        nz = raw > 0
        if np.any(nz):
            out[nz] = raw[nz] / self._total(g[nz])
        return out

    def weights(self, sheet: int, g) -> dict[int, np.ndarray]:
        """Partition-of-unity values e_j at grid points g (P, d) of one sheet."""
        g = np.atleast_2d(np.asarray(g, dtype=float))
        cand: set[int] = set()
        for row in g:
            cand.update(self._candidates(sheet, row))
        raw = {j: self._raw(j, g) for j in sorted(cand)}
        total = sum(raw.values())
        return {j: r / total for j, r in raw.items() if np.any(r > 0)}

    def to_grid(self, coords: np.ndarray) -> np.ndarray:
        atlas = self.atlas
        lo = np.concatenate([[atlas.tau[0]], [a[0] for a in atlas.chart.xi_axes]])
        return (np.atleast_2d(coords) - lo) / atlas.h

    def to_global(self, g: np.ndarray) -> np.ndarray:
        atlas = self.atlas
        lo = np.concatenate([[atlas.tau[0]], [a[0] for a in atlas.chart.xi_axes]])
        out = lo + np.atleast_2d(g) * atlas.h
        for a, per in enumerate(atlas.chart.periodic):
            if per:
                period = atlas.chart.shape[a + 1] * atlas.h[a + 1]
                out[:, 1 + a] = lo[1 + a] + np.mod(out[:, 1 + a] - lo[1 + a], period)
        return out

    def check(self, ids) -> None:
        for j in ids:
            cs = self.charts[j]
            if not cs.valid:
                raise MaslovError("chart touches escaped rays; the query is too close to the atlas boundary")
            if cs.beta is None:
                raise MaslovError("chart too folded; refine grid")
            if not cs.consistent:
                raise QuantizationError("manifold region fails quantization check")
            if cs.nu is None:
                raise QuantizationError("chart has no index (not connected to the root chart)")


def _charts_of(atlas: Atlas) -> ChartSystem:
    cs = atlas.__dict__.get("_maslov_charts")
    if cs is None:
        raise MaslovError("build the chart system first (build_charts)")
    return cs


def build_charts(atlas: Atlas, width: int = 4, pad: int = 0) -> ChartSystem:
    system = object.__new__(ChartSystem)
    atlas.__dict__["_maslov_charts"] = system  # _shared_node needs it during construction
    system.__init__(atlas, width=width, pad=pad)
    _attach(system)
    return system


# sub-canonical operator ------------------------------------------------------------


def _prefactor(k: float, card: int) -> complex:
    return complex((k / (-2j * np.pi)) ** (0.5 * card))


@dataclass
class AnalyticChart:
    """Chart given by closed-form data, for oracles (one momentum coordinate).

    ``phase(x_alpha, eta)`` = S_j, ``jacobian(x_alpha, eta)`` = J and
    ``cutoff(x_alpha, eta)`` a smooth compactly supported weight on
    ``eta_range``.
    """

    phase: Callable
    jacobian: Callable
    cutoff: Callable
    eta_range: tuple
    alpha: tuple = ()
    beta: tuple = (0,)
    nu: int = 0


def _analytic_apply(chart: AnalyticChart, phi, x, k, shift: float) -> complex:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xa = x[list(chart.alpha)]
    xb = float(x[chart.beta[0]])
    lo, hi = chart.eta_range
    grid = np.linspace(lo, hi, 257)
    ph = chart.phase(xa, grid) + xb * grid
    n_osc = k * float(np.sum(np.abs(np.diff(ph)))) / (2 * np.pi)

    def f(eta):
        J = chart.jacobian(xa, eta)
        w = chart.cutoff(xa, eta) * (1.0 if phi is None else phi(xa, eta))
        return np.abs(J) ** -0.5 * w * np.exp(1j * k * (chart.phase(xa, eta) + xb * eta + shift))

    return _prefactor(k, 1) * oscillatory_quad(f, lo, hi, n_osc)


def _segments_2d(system: ChartSystem, cs: ChartSpec, a_idx: int, c: float, sub: int = 4):
    """Polylines (grid coords) of {x_alpha = c} inside a tile support (n = 2)."""
    atlas = system.atlas
    lo = cs.center - cs.half_width
    hi = cs.center + cs.half_width
    lo[0] = max(lo[0], 0.0)
    hi[0] = min(hi[0], system.T - 1.0)
    n0 = max(2, int(np.ceil((hi[0] - lo[0]) * sub)) + 1)
    n1 = max(2, int(np.ceil((hi[1] - lo[1]) * sub)) + 1)
    G0 = np.linspace(lo[0], hi[0], n0)
    G1 = np.linspace(lo[1], hi[1], n1)
    GG = np.stack(np.meshgrid(G0, G1, indexing="ij"), -1).reshape(-1, 2)
    val, _ = atlas.evaluate(np.full(len(GG), cs.sheet), system.to_global(GG))
    F = (val[:, a_idx] - c).reshape(n0, n1)
    if not np.all(np.isfinite(F)):
        raise MaslovError("chart touches escaped rays; the query is too close to the atlas boundary")
    F = np.where(F == 0.0, 1e-300, F)
    verts: dict[tuple, np.ndarray] = {}

    def vid(key, p, q):
        if key not in verts:
            fa, fb = F[p], F[q]
            t = fa / (fa - fb)
            ga = np.array([G0[p[0]], G1[p[1]]])
            gb = np.array([G0[q[0]], G1[q[1]]])
            verts[key] = ga + t * (gb - ga)
        return key

    adj: dict[tuple, list] = {}

    def link(u, v):
        adj.setdefault(u, []).append(v)
        adj.setdefault(v, []).append(u)

    for i in range(n0 - 1):
        for j in range(n1 - 1):
            s = F[i:i + 2, j:j + 2] > 0
            if s.all() or not s.any():
                continue
            edges = []
            # bottom (i,j)-(i+1,j), right (i+1,j)-(i+1,j+1), top (i,j+1)-(i+1,j+1), left (i,j)-(i,j+1)
            for key, p, q in ((("h", i, j), (i, j), (i + 1, j)), (("v", i + 1, j), (i + 1, j), (i + 1, j + 1)),
                              (("h", i, j + 1), (i, j + 1), (i + 1, j + 1)), (("v", i, j), (i, j), (i, j + 1))):
                if (F[p] > 0) != (F[q] > 0):
                    edges.append(vid(key, p, q))
            if len(edges) == 2:
                link(edges[0], edges[1])
            elif len(edges) == 4:
                centre = F[i:i + 2, j:j + 2].mean()
                if (centre > 0) == (F[i, j] > 0):
                    link(edges[0], edges[1])
                    link(edges[2], edges[3])
                else:
                    link(edges[0], edges[3])
                    link(edges[1], edges[2])
    seen: set = set()
    lines = []
    ends = [v for v, nb in adj.items() if len(nb) == 1]
    for start in ends:
        if start in seen:
            continue
        path = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            nxt = [v for v in adj[cur] if v != prev and v not in seen]
            if not nxt:
                break
            prev, cur = cur, nxt[0]
            seen.add(cur)
            path.append(cur)
        lines.append(np.array([verts[v] for v in path]))
    return lines


@dataclass
class _Piece:
    """Part of {x_alpha = const} inside one chart on which eta_beta is monotone."""

    chart: int
    eta: np.ndarray     # increasing eta_beta at the polyline vertices
    g: np.ndarray       # grid coordinates of the vertices
    n_osc: float


def _chart_pieces(system: ChartSystem, j: int, x: np.ndarray, k: float) -> list[_Piece]:
    atlas = system.atlas
    n = atlas.n
    cs = system.charts[j]
    if n == 1:
        lines = [_tau_segment(system, cs)]
    elif n == 2:
        lines = _segments_2d(system, cs, cs.alpha[0], float(x[cs.alpha[0]]))
    else:
        raise MaslovError("charts with momentum coordinates are implemented for n <= 2")
    b = cs.beta[0]
    out = []
    for line in lines:
        if len(line) < 2:
            continue
        val, _ = atlas.evaluate(np.full(len(line), cs.sheet), system.to_global(line))
        eta = -val[:, n + b]
        if not np.all(np.isfinite(eta)):
            raise MaslovError("chart touches escaped rays; the query is too close to the atlas boundary")
        d = np.sign(np.diff(eta))
        cuts = np.nonzero(d[1:] * d[:-1] < 0)[0] + 1
        start = 0
        for stop in list(cuts) + [len(line) - 1]:
            sl = slice(start, stop + 1)
            start = stop
            pe, pg, pv = eta[sl], line[sl], val[sl]
            if len(pe) < 2 or pe[-1] == pe[0]:
                continue
            order = np.argsort(pe)
            pe, pg, pv = pe[order], pg[order], pv[order]
            ph = -pv[:, 2 * n] + (x[b] - pv[:, b]) * pe
            out.append(_Piece(j, pe, pg, k * float(np.sum(np.abs(np.diff(ph)))) / (2 * np.pi)))
    return out


def _solve_rows(system: ChartSystem, sheet: np.ndarray, ia: np.ndarray, ib: np.ndarray, target: np.ndarray,
                g0: np.ndarray, maxit: int = 12):
    """Grid points with (x_ia, eta_ib)(g) = target row by row (Newton from g0).

    ``ia`` (P, n-1) and ``ib`` (P,) select the position and momentum
    coordinates of each row's chart.
    """
    atlas = system.atlas
    n = atlas.n
    rows = np.arange(len(g0))[:, None]
    sel = np.concatenate([ia, n + ib[:, None]], axis=1)
    sign = np.concatenate([np.ones(ia.shape[1]), [-1.0]])
    g = g0.copy()
    scale = max(1.0, float(np.max(np.abs(target)))) if target.size else 1.0
    polish = False
    for it in range(maxit + 1):
        val, grad = atlas.evaluate(sheet, system.to_global(g))
        res = val[rows, sel] * sign - target
        if polish or it == maxit:
            break
        # one more step after convergence takes the residual to rounding level
        polish = bool(np.all(np.abs(res) <= 1e-10 * scale))
        Tg = grad[rows, sel, :] * sign[None, :, None] * atlas.h
        with np.errstate(all="ignore"):
            step = -np.linalg.solve(Tg, res[..., None])[..., 0]
        g = g + np.clip(np.nan_to_num(step), -1.0, 1.0)
        g[:, 0] = np.clip(g[:, 0], 0.0, system.T - 1.0)
    ok = np.max(np.abs(res), axis=1) <= 1e-9 * scale
    jac = np.linalg.det(grad[rows, sel, :] * sign[None, :, None])
    return g, val, jac, ok


def _integrate_pieces(system: ChartSystem, pieces: list[_Piece], x: np.ndarray, k: float, shift: float, phi,
                      atol: float) -> np.ndarray:
    """int |J|^{-1/2} e_j phi exp(ik(A + <x_b - x_b(theta), eta> + shift)) deta, one value per piece."""
    atlas = system.atlas
    n = atlas.n
    if not pieces:
        return np.zeros(0, dtype=complex)
    charts = system.charts
    sheet_of = np.array([charts[pc.chart].sheet for pc in pieces])
    ia_of = np.array([list(charts[pc.chart].alpha) for pc in pieces], dtype=int).reshape(len(pieces), n - 1)
    ib_of = np.array([charts[pc.chart].beta[0] for pc in pieces])
    chart_of = np.array([pc.chart for pc in pieces])

    def f(pid, e):
        g0 = np.empty((len(e), atlas.d))
        for i in np.unique(pid):
            m = pid == i
            pc = pieces[i]
            for a in range(atlas.d):
                g0[m, a] = np.interp(e[m], pc.eta, pc.g[:, a])
        ia, ib = ia_of[pid], ib_of[pid]
        target = np.concatenate([x[ia], e[:, None]], axis=1)
        g, v, J, ok = _solve_rows(system, sheet_of[pid], ia, ib, target, g0)
        w = np.zeros(len(e))
        for j in np.unique(chart_of[pid]):
            m = chart_of[pid] == j
            w[m] = system.partition(j, g[m])
        if phi is not None:
            w = w * np.asarray(phi(v[:, :n], v[:, n:2 * n]), dtype=float)
        if np.any(~ok & (w > 1e-14)):
            raise MaslovError("chart inversion failed inside the chart support; refine grid")
        xb = x[ib] - v[np.arange(len(e)), ib]
        phase = -v[:, 2 * n] + xb * e + shift
        with np.errstate(divide="ignore", invalid="ignore"):
            amp = np.where(ok & (w > 0), np.abs(J) ** -0.5 * w, 0.0)
        return amp * np.exp(1j * k * phase)

    lo = np.array([pc.eta[0] for pc in pieces])
    hi = np.array([pc.eta[-1] for pc in pieces])
    n_osc = np.array([pc.n_osc for pc in pieces])
    return batched_quad(f, lo, hi, n_osc, atol)


def batched_quad(f: Callable, lo: np.ndarray, hi: np.ndarray, n_oscillations: np.ndarray, atol: float,
                 rtol: float = 1e-11, max_panels: int = 200000) -> np.ndarray:
    """Adaptive Gauss-Kronrod 7/15 over several intervals at once.

    ``f(interval_ids, points)`` evaluates all intervals' integrands in one
    call.  Each interval gets initial panels with at least 20 nodes per
    oscillation period; a panel is accepted when its Kronrod-Gauss difference
    is within its length share of max(atol, rtol |I|).
    """
    m = len(lo)
    out = np.zeros(m, dtype=complex)
    if m == 0:
        return out
    length = hi - lo
    n0 = np.maximum(4, np.ceil(np.maximum(n_oscillations, 0.0) * 20.0 / 15.0)).astype(int)
    owner = np.repeat(np.arange(m), n0)
    frac = np.concatenate([np.arange(c) / c for c in n0])
    plo = lo[owner] + frac * length[owner]
    phi_ = plo + length[owner] / n0[owner]
    n_panels = len(owner)
    while owner.size:
        mid = 0.5 * (plo + phi_)
        half = 0.5 * (phi_ - plo)
        pts = mid[:, None] + half[:, None] * GK_NODES[None, :]
        y = np.asarray(f(np.repeat(owner, len(GK_NODES)), pts.ravel()), dtype=complex).reshape(pts.shape)
        K = half * (y @ GK_WEIGHTS)
        G = half * (y[:, _G_IDX] @ G_WEIGHTS)
        err = np.abs(K - G)
        est = out + np.bincount(owner, weights=K.real, minlength=m) + 1j * np.bincount(owner, weights=K.imag,
                                                                                          minlength=m)
        tol = np.maximum(rtol * np.abs(est), atol)
        with np.errstate(divide="ignore", invalid="ignore"):
            budget = tol[owner] * (2 * half) / np.where(length[owner] > 0, length[owner], 1.0)
        ok = err <= budget
        np.add.at(out, owner[ok], K[ok])
        bad = ~ok
        if not np.any(bad):
            break
        n_panels += int(bad.sum())
        if n_panels > max_panels:
            raise QuadratureError("oscillatory quadrature did not converge: increase the atlas sample density "
                                  "or use a smaller k")
        o, l_, h_, m_ = owner[bad], plo[bad], phi_[bad], mid[bad]
        owner = np.concatenate([o, o])
        plo = np.concatenate([l_, m_])
        phi_ = np.concatenate([m_, h_])
    return out


def _tile_box(system: ChartSystem, cs: ChartSpec) -> tuple[np.ndarray, np.ndarray]:
    lo = cs.center - cs.half_width
    hi = cs.center + cs.half_width
    lo[0] = max(lo[0], 0.0)
    hi[0] = min(hi[0], system.T - 1.0)
    return lo, hi


def _integrate_full(system: ChartSystem, j: int, x: np.ndarray, k: float, shift: float, phi, atol: float,
                    max_cells: int = 20000) -> complex:
    """Chart with all momenta as coordinates (n = 2): integrate over the tile in (tau, xi).

    deta = |J| dtheta turns the integrand into |J|^{1/2} e_j phi exp(ik(A + <x - x(theta), eta> + shift)).
    Adaptive tensor Gauss-Kronrod cubature on rectangles.
    """
    atlas = system.atlas
    n = atlas.n
    cs = system.charts[j]
    lo, hi = _tile_box(system, cs)
    cell_area = float(np.prod(atlas.h))

    def f(g):
        val, grad = atlas.evaluate(np.full(len(g), cs.sheet), system.to_global(g))
        eta = -val[:, n:2 * n]
        J = np.linalg.det(-grad[:, n:2 * n, :])
        w = system.partition(j, g)
        if phi is not None:
            w = w * np.asarray(phi(val[:, :n], val[:, n:2 * n]), dtype=float)
        phase = -val[:, 2 * n] + np.sum((x - val[:, :n]) * eta, axis=1) + shift
        return np.where(w > 0, np.sqrt(np.abs(J)) * w * cell_area, 0.0) * np.exp(1j * k * phase)

    nodes = system.tile_nodes(cs)
    ph = -atlas.S[nodes[:, 0], nodes[:, 1]] + np.sum((x - atlas.x[nodes[:, 0], nodes[:, 1]])
                                                     * -atlas.p[nodes[:, 0], nodes[:, 1]], axis=1)
    n_osc = k * float(np.ptp(ph)) / (2 * np.pi)
    n0 = max(1, int(np.ceil(n_osc * 20.0 / 15.0)))
    if n0 * n0 > max_cells:
        raise QuadratureError("oscillatory quadrature did not converge: increase the atlas sample density "
                              "or use a smaller k")
    e0 = np.linspace(lo[0], hi[0], n0 + 1)
    e1 = np.linspace(lo[1], hi[1], n0 + 1)
    L0, L1 = np.meshgrid(e0[:-1], e1[:-1], indexing="ij")
    H0, H1 = np.meshgrid(e0[1:], e1[1:], indexing="ij")
    rlo = np.stack([L0.ravel(), L1.ravel()], -1)
    rhi = np.stack([H0.ravel(), H1.ravel()], -1)
    area = float(np.prod(hi - lo))
    total = 0j
    count = len(rlo)
    WK = np.outer(GK_WEIGHTS, GK_WEIGHTS).ravel()
    WG = np.outer(G_WEIGHTS, G_WEIGHTS).ravel()
    ig = (_G_IDX[:, None] * len(GK_NODES) + _G_IDX[None, :]).ravel()
    U0, U1 = np.meshgrid(GK_NODES, GK_NODES, indexing="ij")
    U = np.stack([U0.ravel(), U1.ravel()], -1)
    while len(rlo):
        mid = 0.5 * (rlo + rhi)
        half = 0.5 * (rhi - rlo)
        pts = mid[:, None, :] + half[:, None, :] * U[None]
        y = f(pts.reshape(-1, 2)).reshape(len(rlo), -1)
        jac = np.prod(half, axis=1)
        K = jac * (y @ WK)
        G = jac * (y[:, ig] @ WG)
        err = np.abs(K - G)
        budget = max(atol, 1e-11 * abs(total + K.sum())) * (4 * jac) / area
        ok = err <= budget
        total += K[ok].sum()
        bad = ~ok
        if not np.any(bad):
            break
        count += 3 * int(bad.sum())
        if count > max_cells:
            raise QuadratureError("oscillatory quadrature did not converge: increase the atlas sample density "
                                  "or use a smaller k")
        bl, bh, bm = rlo[bad], rhi[bad], mid[bad]
        quads_lo, quads_hi = [], []
        for s0 in (0, 1):
            for s1 in (0, 1):
                qlo = np.stack([np.where(s0, bm[:, 0], bl[:, 0]), np.where(s1, bm[:, 1], bl[:, 1])], -1)
                qhi = np.stack([np.where(s0, bh[:, 0], bm[:, 0]), np.where(s1, bh[:, 1], bm[:, 1])], -1)
                quads_lo.append(qlo)
                quads_hi.append(qhi)
        rlo = np.concatenate(quads_lo)
        rhi = np.concatenate(quads_hi)
    return complex(total)


def _branch_term(system: ChartSystem, j: int, branches: list[Branch], k: float, shift: float, phi) -> complex:
    """beta-empty chart: sum of |detX|^{-1/2} e_j phi exp(ik(A + shift)) over preimages in the chart."""
    cs = system.charts[j]
    n = system.atlas.n
    total = 0j
    for b in branches:
        if b.sheet != cs.sheet:
            continue
        g = system.to_grid(np.concatenate([[b.tau], b.xi]))
        w = float(system.partition(j, g)[0])
        if w <= 0:
            continue
        if phi is not None:
            w *= float(np.asarray(phi(b.x_fit[None, :n], b.p[None, :n])).ravel()[0])
        total += abs(b.detX) ** -0.5 * w * np.exp(1j * k * (-b.S + shift))
    return complex(total)


def subcanonical_apply(chart, phi, x, k: float, shift: float = 0.0, branches: list[Branch] | None = None,
                       atol: float = 0.0) -> complex:
    """Sub-canonical operator of one chart applied to e_j phi.

    beta empty: sum over the preimages of x inside the chart of
    |detX|^{-1/2} exp(ik A) e_j phi.  beta nonempty: the oscillatory integral
    (k/(-2 pi i))^{|beta|/2} int |J|^{-1/2} exp(ik (S_j + <x_beta, eta_beta>)) e_j phi deta_beta
    over the chart.  ``shift`` adds k*shift to the phase, which keeps phases
    small when a reference value is known.  ``phi`` is a callable of
    manifold points (x, p) or None for 1.
    """
    if isinstance(chart, AnalyticChart):
        return _analytic_apply(chart, phi, x, k, shift)
    system = chart_system_of(chart)
    atlas = system.atlas
    n = atlas.n
    x = np.asarray(x, dtype=float).reshape(n)
    j = system.index[(chart.sheet,) + chart.tile]
    if not chart.beta:
        if branches is None:
            branches = enumerate_branches(atlas, x, check_region=False)
        return _branch_term(system, j, branches, k, shift, phi)
    if len(chart.beta) == n and n == 2:
        return _prefactor(k, 2) * _integrate_full(system, j, x, k, shift, phi, atol)
    if len(chart.beta) != 1:
        raise MaslovError("charts with two momentum coordinates are implemented for n = 2 only")
    pieces = _chart_pieces(system, j, x, k)
    return _prefactor(k, 1) * complex(np.sum(_integrate_pieces(system, pieces, x, k, shift, phi, atol)))


def _tau_segment(system: ChartSystem, cs: ChartSpec) -> np.ndarray:
    lo, hi = _tile_box(system, cs)
    return np.linspace(lo[0], hi[0], int(np.ceil((hi[0] - lo[0]) * 4)) + 2)[:, None]


def chart_system_of(chart: ChartSpec) -> ChartSystem:
    sys_ = getattr(chart, "_system", None)
    if sys_ is None:
        raise MaslovError("chart is not attached to a chart system")
    return sys_


def _attach(system: ChartSystem) -> None:
    for cs in system.charts:
        object.__setattr__(cs, "_system", system)


# canonical operator --------------------------------------------------------------


NONSTATIONARY_CUTOFF = 2000.0


def relevant_charts(system: ChartSystem, x: np.ndarray, branches: list[Branch], k: float | None = None) -> list[int]:
    """Charts that contribute at x.

    Every chart whose support holds a preimage of x (a stationary point of
    its integral).  A chart with one momentum coordinate and no preimage is
    kept only while its phase derivative bound d (distance from x to the
    projected tile, less one cell diameter) times its eta range stays below
    NONSTATIONARY_CUTOFF / k radians; beyond that the smooth cutoff makes the
    contribution smaller than rounding.  Charts with two momentum
    coordinates and no preimage are dropped (their contribution decays
    faster than any power of k and resolving them in two dimensions is too
    costly).
    """
    x = np.asarray(x, dtype=float)
    ids: set[int] = set()
    for b in branches:
        g = system.to_grid(np.concatenate([[b.tau], b.xi]))[0]
        for j in system._candidates(b.sheet, g):
            if system._raw(j, g[None])[0] > 0:
                ids.add(j)
    info = _beta_tiles(system)
    if info:
        js, xs, diam, deta = info
        d = np.maximum(np.min(np.linalg.norm(xs - x, axis=-1), axis=1) - diam, 0.0)
        keep = d == 0.0
        if k is not None:
            keep |= k * d * deta < NONSTATIONARY_CUTOFF
        # two-dimensional momentum charts are integrated only around a stationary point
        keep &= np.array([len(system.charts[j].beta) == 1 for j in js])
        ids.update(int(j) for j in js[keep])
    return sorted(ids)


def _beta_tiles(system: ChartSystem):
    """Per momentum chart: node positions, largest cell diameter and smallest eta range."""
    cache = system.__dict__.get("_beta_tiles")
    if cache is not None:
        return cache
    atlas = system.atlas
    js, xs, diam, deta = [], [], [], []
    for j, cs in enumerate(system.charts):
        if not cs.valid or not cs.beta:
            continue
        nodes = system.tile_nodes(cs, pad=1)
        X = atlas.x[nodes[:, 0], nodes[:, 1]]
        P = atlas.p[nodes[:, 0], nodes[:, 1]]
        js.append(j)
        xs.append(X)
        # a cell spans at most sum_a max|dx/dtheta_a| h_a (1.5x margin for the interpolant)
        F = atlas.frame[nodes[:, 0], nodes[:, 1]][:, :atlas.n, :]
        diam.append(1.5 * float(np.sum(np.max(np.linalg.norm(F, axis=1), axis=0) * atlas.h)))
        deta.append(float(min(np.ptp(P[:, b]) for b in cs.beta)))
    if not js:
        system.__dict__["_beta_tiles"] = ()
        return ()
    width = max(len(v) for v in xs)
    X = np.full((len(xs), width, atlas.n), np.nan)
    for i, v in enumerate(xs):
        X[i, :len(v)] = v
        X[i, len(v):] = v[0]
    out = (np.array(js), X, np.array(diam), np.array(deta))
    system.__dict__["_beta_tiles"] = out
    return out


def canonical_apply(system: ChartSystem, x, k: float, phi=None, branches: list[Branch] | None = None,
                    shift: float = 0.0, charts: list[int] | None = None, quad_rtol: float = 1e-9) -> complex:
    """Sum over charts of c_j Mas_k(Omega_j)(e_j phi) at x (times exp(ik shift))."""
    atlas = system.atlas
    n = atlas.n
    x = np.asarray(x, dtype=float).reshape(n)
    if branches is None:
        branches = enumerate_branches(atlas, x, check_region=False)
    ids = relevant_charts(system, x, branches, k) if charts is None else charts
    system.check(ids)
    # absolute quadrature target: a small fraction of the stationary-phase amplitude
    ref = max([abs(b.detX) ** -0.5 for b in branches], default=1.0)
    atol = quad_rtol * ref / abs(_prefactor(k, 1))
    total = 0j
    pieces: list[_Piece] = []
    for j in ids:
        cs = system.charts[j]
        if not cs.beta:
            total += cs.c * _branch_term(system, j, branches, k, shift, phi)
        elif len(cs.beta) == 1:
            pieces.extend(_chart_pieces(system, j, x, k))
        elif len(cs.beta) == n == 2:
            total += cs.c * _prefactor(k, 2) * _integrate_full(system, j, x, k, shift, phi, atol)
        else:
            raise MaslovError("charts with two momentum coordinates are implemented for n = 2 only")
    vals = _integrate_pieces(system, pieces, x, k, shift, phi, atol)
    for pc, v in zip(pieces, vals):
        total += system.charts[pc.chart].c * _prefactor(k, 1) * v
    return complex(total)


# bump cover -------------------------------------------------------------------


@dataclass
class BumpCover:
    """Balls b(x_mu, eps_mu) around P(Cr(B)) with the partition {w_mu, v_mu}.

    Raw functions: w~ = bump(|x - x_mu| / eps) on the ball, v~ =
    bump(eps / (2 |x - x_mu|)) outside the half ball; both are divided by
    their total so that sum(w + v) = 1.
    """

    centers: np.ndarray
    radii: np.ndarray

    def __len__(self) -> int:
        return len(self.radii)

    def raw(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not len(self):
            return np.zeros((len(x), 0)), np.zeros((len(x), 0))
        r = np.linalg.norm(x[:, None, :] - self.centers[None], axis=-1) / self.radii[None]
        w = bump(r)
        with np.errstate(divide="ignore"):
            s = np.where(r > 0.5, 0.5 / np.maximum(r, 1e-300), 2.0)
        v = np.where(r > 0.5, bump(s), 0.0)
        return w, v

    def weights(self, x) -> tuple[np.ndarray, np.ndarray]:
        w, v = self.raw(x)
        if w.shape[1] == 0:
            return w, v
        tot = w.sum(axis=1) + v.sum(axis=1)
        return w / tot[:, None], v / tot[:, None]

    def active(self, x) -> bool:
        w, _ = self.raw(x)
        return bool(np.any(w > 0))


def local_spacing(atlas: Atlas, sheet: int, coords: np.ndarray) -> float:
    """Largest projected node step at (tau, xi): max_a |dx/dtheta_a| h_a."""
    _, grad = atlas.evaluate(sheet, coords[None])
    J = grad[0, :atlas.n, :]
    return float(np.max(np.linalg.norm(J, axis=0) * atlas.h))


def build_bump_cover(atlas: Atlas, cloud: CausticCloud, radius_factor: float = 2.0,
                     system: ChartSystem | None = None, max_shrink: int = 4) -> BumpCover:
    """Greedy cover of P(Cr(B)); radius = ``radius_factor`` x local node spacing.

    A ball is shrunk (halved, at most ``max_shrink`` times) while some sampled
    point of it has no preimage or needs an unusable chart.
    """
    pts = [c for c in cloud.points if c.in_crb]
    pts.sort(key=lambda c: c.S)
    centers: list[np.ndarray] = []
    radii: list[float] = []
    for cp in pts:
        if any(np.linalg.norm(cp.x - c) < 0.5 * r for c, r in zip(centers, radii)):
            continue
        eps = radius_factor * local_spacing(atlas, cp.sheet, cp.coords)
        for _ in range(max_shrink + 1):
            if _ball_ok(atlas, system, cp.x, eps):
                break
            eps *= 0.5
        else:
            raise MaslovError("refine atlas near caustic")
        centers.append(cp.x.copy())
        radii.append(eps)
    n = atlas.n
    return BumpCover(np.array(centers).reshape(-1, n), np.array(radii, dtype=float))


def _ball_ok(atlas: Atlas, system: ChartSystem | None, c: np.ndarray, eps: float, count: int = 12) -> bool:
    n = atlas.n
    if n == 1:
        samples = [c - eps, c + eps]
    else:
        samples = [c]
        for t in np.linspace(0, 2 * np.pi, count, endpoint=False):
            v = np.zeros(n)
            v[0], v[1] = np.cos(t), np.sin(t)
            samples.append(c + 0.999 * eps * v)
    for s in samples:
        s = np.atleast_1d(s)
        try:
            br = enumerate_branches(atlas, s)
        except OutsideRegion:
            return False
        if not br:
            return False
        if system is not None:
            try:
                system.check(relevant_charts(system, s, br))
            except MaslovError:
                return False
    return True


# regularized Bellman function ----------------------------------------------------------


@dataclass
class RegularizedField:
    atlas: Atlas
    charts: ChartSystem
    cover: BumpCover
    k: float = 200.0
    p0: float = 1.0
    fd_step: float = 1e-5
    _queries: dict = field(default_factory=dict, repr=False)

    def query(self, x: np.ndarray) -> BellmanResult:
        """Refined Bellman query, cached per point (stencils reuse them across k)."""
        key = np.asarray(x, dtype=float).tobytes()
        if key not in self._queries:
            self._queries[key] = bellman_query(self.atlas, x)
        return self._queries[key]

    def prefetch(self, X) -> None:
        """Batch the refined queries at X and at their gradient stencils."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        pts = [X]
        for i in range(X.shape[1]):
            e = np.zeros(X.shape[1])
            e[i] = self.fd_step
            pts += [X + e, X - e]
        P = np.concatenate(pts)
        for x, r in zip(P, bellman_query_batch(self.atlas, P)):
            if isinstance(r, BellmanResult):
                self._queries[x.tobytes()] = r


@dataclass
class RegularizedValue:
    value: float
    gradient: np.ndarray
    B: float
    gradB: np.ndarray
    in_bump: bool
    w_sum: float
    theta: float = 0.0
    chart_ids: list = field(default_factory=list)


def build_regularized_field(atlas: Atlas, cloud: CausticCloud | None = None, k: float = 200.0,
                            radius_factor: float = 2.0, tile_width: int = 4) -> RegularizedField:
    from .bellman import detect_caustics

    charts = build_charts(atlas, width=tile_width)
    if cloud is None:
        cloud = detect_caustics(atlas)
    cover = build_bump_cover(atlas, cloud, radius_factor=radius_factor, system=charts)
    return RegularizedField(atlas=atlas, charts=charts, cover=cover, k=k)


def _value_k(fld: RegularizedField, x: np.ndarray, k: float):
    """(B(x,k), B(x), grad B(x), sum w, theta, charts) at one point."""
    res = fld.query(x)
    w, _ = fld.cover.weights(x)
    W = float(w.sum())
    if W == 0.0:
        return res.value, res, W, 0.0, []
    B = res.value
    ids = relevant_charts(fld.charts, x, res.branches, k)
    M = canonical_apply(fld.charts, x, k, branches=res.branches, shift=B, charts=ids)
    if not abs(M) > 1e-300:
        raise MaslovError("k too large for chart sampling")
    # Re{ln(Mas) / (i k p0)} with the branch continued from the known phase -kB
    theta = float(np.angle(M))
    value = B * (1.0 - W) - (-B + theta / k) / fld.p0 * W
    return value, res, W, theta, ids


def log_maslov_real(fld: RegularizedField, x, k: float, charts=None, branches=None) -> tuple[float, list[int]]:
    """Re{ln(Mas_k(x)) / (i k p0)} with the phase continued from -kB, and the charts used.

    Mas_k is evaluated with the phase factor exp(ikB) split off, so the
    logarithm's imaginary part is -kB + arg(Mas e^{ikB}) without 2 pi jumps.
    ``charts`` / ``branches`` restrict the operator (default: all relevant).
    """
    x = np.asarray(x, dtype=float).reshape(fld.atlas.n)
    res = fld.query(x)
    branches = res.branches if branches is None else branches
    ids = relevant_charts(fld.charts, x, branches, k) if charts is None else list(charts)
    M = canonical_apply(fld.charts, x, k, branches=branches, shift=res.value, charts=ids)
    if not abs(M) > 1e-300:
        raise MaslovError("k too large for chart sampling")
    return (-k * res.value + float(np.angle(M))) / (k * fld.p0), ids


def regularized_bellman(fld: RegularizedField, x, k: float | None = None, gradient: bool = True) -> RegularizedValue:
    """B(x,k) = B(x) sum(v) - Re{ln(Mas_k)/(i k p0)} sum(w), gradient by central differences."""
    k = fld.k if k is None else float(k)
    x = np.asarray(x, dtype=float).reshape(fld.atlas.n)
    value, res, W, theta, ids = _value_k(fld, x, k)
    if W == 0.0 and not (gradient and _stencil_touches(fld, x)):
        return RegularizedValue(value=res.value, gradient=res.gradient.copy(), B=res.value, gradB=res.gradient.copy(),
                                in_bump=False, w_sum=0.0)
    grad = np.full(x.shape, np.nan)
    if gradient:
        h = fld.fd_step
        for i in range(len(x)):
            e = np.zeros_like(x)
            e[i] = h
            vp = _value_k(fld, x + e, k)[0]
            vm = _value_k(fld, x - e, k)[0]
            grad[i] = (vp - vm) / (2 * h)
    return RegularizedValue(value=value, gradient=grad, B=res.value, gradB=res.gradient.copy(), in_bump=W > 0,
                            w_sum=W, theta=theta, chart_ids=ids)


def _stencil_touches(fld: RegularizedField, x: np.ndarray) -> bool:
    h = fld.fd_step
    for i in range(len(x)):
        for s in (-h, h):
            e = np.zeros_like(x)
            e[i] = s
            if fld.cover.active(x + e):
                return True
    return False
