"""Bellman value and gradient as the minimum of the action over the
preimages of a point under the projection (x, p) -> x, and caustic
detection on the atlas."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .hamflow import hamiltonian
from .lpmanifold import Atlas, shoot


class OutsideRegion(LookupError):
    pass


@dataclass
class Branch:
    sheet: int
    tau: float
    xi: np.ndarray
    x_fit: np.ndarray
    S: float
    p: np.ndarray
    detX: float
    distance_to_x: float
    H: float
    cell: int = -1
    refined: bool = False


@dataclass
class BellmanResult:
    x: np.ndarray
    value: float
    gradient: np.ndarray
    branches: list[Branch]
    minimizer_critical: bool
    gap: float
    tie: bool = False

    @property
    def branch_count(self) -> int:
        return len(self.branches)

    @property
    def minimizer(self) -> Branch:
        return self.branches[0]


def critical_threshold(atlas: Atlas) -> float:
    d = np.abs(atlas.detX[atlas.valid])
    return 1e-6 * float(np.median(d)) if d.size else 0.0


def _newton_cells(atlas: Atlas, cells: np.ndarray, u0: np.ndarray, xq: np.ndarray, tol: float,
                  maxit: int = 25, target_fields=None):
    """Solve field(cell, u) = target for every (cell, start) pair.

    ``target_fields`` selects which interpolated components are matched
    (default: the n state components).  Returns u, residual norms and the
    interpolant with its gradient at u.
    """
    n = atlas.n
    sel = np.arange(n) if target_fields is None else np.asarray(target_fields)
    u = np.array(u0, dtype=float)
    val, grad = atlas.eval_cells(cells, u)
    res = val[:, sel] - xq
    r = np.linalg.norm(res, axis=1)
    alive = np.isfinite(r)
    for _ in range(maxit):
        active = (r > tol) & alive
        if not np.any(active):
            break
        J = grad[active][:, sel, :]
        try:
            step = -np.linalg.solve(J, res[active][..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = -np.einsum("pij,pj->pi", np.linalg.pinv(J), res[active])
        step = step / atlas.h  # gradients are in global (tau, xi) units
        idx = np.nonzero(active)[0]
        lam = np.ones(len(idx))
        for _halve in range(8):
            live = lam > 0
            un = np.clip(u[idx[live]] + lam[live, None] * step[live], -0.5, 1.5)
            v2, g2 = atlas.eval_cells(cells[idx[live]], un)
            res2 = v2[:, sel] - xq
            r2 = np.linalg.norm(res2, axis=1)
            better = r2 < r[idx[live]]
            ti = idx[live][better]
            u[ti], val[ti], grad[ti], res[ti], r[ti] = un[better], v2[better], g2[better], res2[better], r2[better]
            sub = np.nonzero(live)[0]
            lam[sub[better]] = 0.0
            if not np.any(lam > 0):
                break
            lam[lam > 0] *= 0.5
        # no descent after all halvings, or pinned at the clamp: no root in this cell
        stuck = lam > 0
        pinned = np.any((u[idx] <= -0.5) | (u[idx] >= 1.5), axis=1)
        alive[idx[stuck | pinned]] = False
    return u, r, val, grad


def enumerate_branches(atlas: Atlas, x, tol: float = 1e-10, check_region: bool = True) -> list[Branch]:
    """All preimages of ``x`` on the atlas, sorted by action."""
    x = np.asarray(x, dtype=float).reshape(atlas.n)
    loc = atlas.local
    if check_region and loc.V(x) < loc.delta * (1 - 1e-9):
        raise OutsideRegion("point inside the local region {V < delta}; use the local feedback")
    cand = atlas.tree.query(x, pad=1e-12 * (1 + np.abs(x).max()))
    if cand.size == 0:
        raise OutsideRegion("outside synthesized region")
    d = atlas.d
    corners, sheet_of, low = atlas.cells
    starts = [np.full((len(cand), d), 0.5)]
    owner = [cand]
    # folded cells may hold two roots; seed Newton from the corners as well
    dX = atlas.detX.reshape(-1)[corners[cand]]
    folded = np.any(dX > 0, axis=1) & np.any(dX < 0, axis=1)
    if np.any(folded):
        fc = cand[folded]
        for c in range(2 ** d):
            starts.append(np.array([[0.15 if not (c >> a) & 1 else 0.85 for a in range(d)]] * len(fc)))
            owner.append(fc)
    cells = np.concatenate(owner)
    u0 = np.concatenate(starts)
    scale = max(1.0, float(np.abs(x).max()))
    tol_abs = tol * scale
    u, r, val, grad = _newton_cells(atlas, cells, u0, x, tol_abs)
    conv = r <= tol_abs
    # second pass from the corners for cells where the centre start went astray
    retry = np.setdiff1d(cand[~folded], cells[conv])
    if retry.size:
        extra_c, extra_u = [], []
        for c in range(2 ** d):
            extra_u.append(np.array([[0.1 if not (c >> a) & 1 else 0.9 for a in range(d)]] * len(retry)))
            extra_c.append(retry)
        out = _newton_cells(atlas, np.concatenate(extra_c), np.concatenate(extra_u), x, tol_abs)
        cells = np.concatenate([cells, np.concatenate(extra_c)])
        u, r, val, grad = (np.concatenate([A, B]) for A, B in zip((u, r, val, grad), out))
        conv = r <= tol_abs
    # roots that converged just outside their cell are handed to the neighbour
    outside = conv & ~np.all((u >= -1e-9) & (u <= 1 + 1e-9), axis=1)
    if np.any(outside):
        g = atlas.cell_coords(cells[outside], u[outside])
        nc, nu = atlas.locate(sheet_of[cells[outside]], g)
        keep = nc >= 0
        if np.any(keep):
            out = _newton_cells(atlas, nc[keep], np.clip(nu[keep], 0.0, 1.0), x, tol_abs)
            cells = np.concatenate([cells, nc[keep]])
            u, r, val, grad = (np.concatenate([A, B]) for A, B in zip((u, r, val, grad), out))
    ok = (r <= tol_abs) & np.all((u >= -1e-9) & (u <= 1 + 1e-9), axis=1)
    n = atlas.n
    found: list[Branch] = []
    keys = []
    order = np.argsort(r)
    for j in order:
        if not ok[j]:
            continue
        c = cells[j]
        g = atlas.cell_coords(np.array([c]), u[j][None])[0]
        key = np.concatenate([[sheet_of[c]], low[c] + u[j]])
        dup = False
        for kk in keys:
            if kk[0] != key[0]:
                continue
            diff = kk[1:] - key[1:]
            # periodic xi axes wrap around
            for a, per in enumerate(atlas.chart.periodic):
                if per:
                    N = atlas.chart.shape[a + 1]
                    diff[1 + a] = (diff[1 + a] + N / 2) % N - N / 2
            if np.max(np.abs(diff)) < 0.1:
                dup = True
                break
        if dup:
            continue
        keys.append(key)
        xf = val[j, :n]
        p = val[j, n:2 * n]
        Jx = grad[j, :n, :]
        found.append(Branch(
            sheet=int(sheet_of[c]), tau=float(g[0]), xi=g[1:].copy(), x_fit=xf.copy(), S=float(val[j, 2 * n]),
            p=p.copy(), detX=float(np.linalg.det(Jx)), distance_to_x=float(r[j]),
            H=float(hamiltonian(atlas.system, xf, p)), cell=int(c)))
    found.sort(key=lambda b: b.S)
    return found


def refine_branches(atlas: Atlas, xs, branch_lists: list[list[Branch]], tol: float = 1e-12,
                    maxit: int = 6) -> list[list[Branch]]:
    """Polish interpolated branches by shooting.

    Newton on (tau, xi): each iterate's ray is re-integrated from its seed and
    the variational frame serves as Jacobian.  Once the residual is small the
    last Newton step is applied to the shot data to first order instead of
    shooting again.  All branches of all points are integrated as one batch.
    Branches whose polish fails keep their interpolated data.
    """
    xs = np.asarray(xs, dtype=float).reshape(-1, atlas.n)
    flat = [(i, b) for i, bl in enumerate(branch_lists) for b in bl]
    if not flat:
        return [list(bl) for bl in branch_lists]
    n = atlas.n
    owner = np.array([i for i, _ in flat])
    target = xs[owner]
    sheet = np.array([b.sheet for _, b in flat])
    coords = np.array([np.concatenate([[b.tau], b.xi]) for _, b in flat])
    scale = np.maximum(1.0, np.abs(target).max(axis=1))
    done = np.zeros(len(flat), dtype=bool)
    X = np.full((len(flat), n), np.nan)
    Pm = np.full((len(flat), n), np.nan)
    Sv = np.full(len(flat), np.nan)
    DX = np.full(len(flat), np.nan)
    todo = np.arange(len(flat))
    for _ in range(maxit):
        if todo.size == 0:
            break
        shot = shoot(atlas, sheet[todo], coords[todo])
        res = shot.x - target[todo]
        r = np.linalg.norm(res, axis=1)
        J = shot.jacobian_x
        with np.errstate(all="ignore"):
            step = -np.linalg.solve(J, res[..., None])[..., 0]
        finite = np.all(np.isfinite(step), axis=1) & np.isfinite(r)
        # quadratic remainder of a first-order update is far below tol
        close = finite & (r <= 1e-6 * scale[todo])
        if np.any(close):
            idx = todo[close]
            st = step[close]
            fr = shot.frame[close]
            dz = np.einsum("pij,pj->pi", fr, st)
            coords[idx] += st
            X[idx] = shot.x[close] + dz[:, :n]
            Pm[idx] = shot.p[close] + dz[:, n:]
            L = np.einsum("pi,pi->p", shot.p[close], fr[:, :n, 0])  # dS/dtau = <p, dx/dtau> on H = 0
            Sv[idx] = shot.S[close] + L * st[:, 0] + np.einsum("pa,pa->p", shot.dS_dxi[close], st[:, 1:])
            DX[idx] = np.linalg.det(fr[:, :n, :])
            done[idx] = True
        keep = finite & ~close
        coords[todo[keep]] += step[keep]
        todo = todo[keep]
    out: list[list[Branch]] = [[] for _ in branch_lists]
    for j, (i, b) in enumerate(flat):
        if not done[j]:
            out[i].append(b)
            continue
        out[i].append(Branch(sheet=b.sheet, tau=float(coords[j, 0]), xi=coords[j, 1:].copy(), x_fit=X[j].copy(),
                             S=float(Sv[j]), p=Pm[j].copy(), detX=float(DX[j]),
                             distance_to_x=float(np.linalg.norm(X[j] - xs[i])),
                             H=float(hamiltonian(atlas.system, X[j], Pm[j])), cell=b.cell, refined=True))
    for bl in out:
        bl.sort(key=lambda b: b.S)
    return out


def _result(atlas: Atlas, x: np.ndarray, branches: list[Branch], tie_tol: float) -> BellmanResult:
    if not branches:
        raise OutsideRegion("outside synthesized region")
    best = branches[0]
    gap = branches[1].S - best.S if len(branches) > 1 else float("inf")
    crit = abs(best.detX) < critical_threshold(atlas)
    tie = gap <= tie_tol * max(1.0, abs(best.S))
    return BellmanResult(x=x, value=best.S, gradient=best.p.copy(), branches=branches,
                         minimizer_critical=bool(crit), gap=float(gap), tie=bool(tie))


def bellman_query(atlas: Atlas, x, tol: float = 1e-10, tie_tol: float = 1e-9, refine: bool = True) -> BellmanResult:
    """B(x) = min S over the preimages of x, gradient = p of the minimizer.

    With ``refine`` the branches are polished by shooting (accuracy of the ray
    integrator instead of the interpolant).
    """
    x = np.asarray(x, dtype=float).reshape(atlas.n)
    branches = enumerate_branches(atlas, x, tol)
    if refine:
        branches = refine_branches(atlas, x[None], [branches])[0]
    return _result(atlas, x, branches, tie_tol)


def bellman_query_batch(atlas: Atlas, X, tol: float = 1e-10, tie_tol: float = 1e-9,
                        refine: bool = True) -> list[BellmanResult | OutsideRegion]:
    """Many queries at once; failed rows hold their :class:`OutsideRegion` error."""
    X = np.asarray(X, dtype=float).reshape(-1, atlas.n)
    lists: list[list[Branch]] = []
    errors: dict[int, OutsideRegion] = {}
    for i, x in enumerate(X):
        try:
            lists.append(enumerate_branches(atlas, x, tol))
        except OutsideRegion as e:
            errors[i] = e
            lists.append([])
    if refine:
        lists = refine_branches(atlas, X, lists)
    out: list[BellmanResult | OutsideRegion] = []
    for i, x in enumerate(X):
        if i in errors:
            out.append(errors[i])
            continue
        try:
            out.append(_result(atlas, x.copy(), lists[i], tie_tol))
        except OutsideRegion as e:
            out.append(e)
    return out


# caustics ---------------------------------------------------------------------


@dataclass
class CausticPoint:
    sheet: int
    coords: np.ndarray   # (tau, xi...)
    x: np.ndarray
    p: np.ndarray
    S: float
    detX: float
    kind: str = "fold"   # "fold" or "cusp"
    in_crb: bool = False
    other_min_S: float = float("inf")


@dataclass
class CausticCloud:
    points: list[CausticPoint] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def crb(self) -> list[CausticPoint]:
        return [c for c in self.points if c.in_crb]

    @property
    def cusps(self) -> list[CausticPoint]:
        return [c for c in self.points if c.kind == "cusp"]

    def positions(self, only_crb: bool = False) -> np.ndarray:
        pts = self.crb if only_crb else self.points
        if not pts:
            return np.zeros((0, 0))
        return np.array([c.x for c in pts])


def _det_and_grad(J: np.ndarray, dJ: np.ndarray):
    """det J and its derivative along each coordinate (Jacobi's formula).

    J: (P, n, n); dJ: (P, n, n, d) with dJ[..., a] = dJ/dtheta_a.
    """
    det = np.linalg.det(J)
    n = J.shape[-1]
    if n == 1:
        return det, dJ[:, 0, 0, :]
    if n == 2:
        adj = np.empty_like(J)
        adj[:, 0, 0], adj[:, 1, 1] = J[:, 1, 1], J[:, 0, 0]
        adj[:, 0, 1], adj[:, 1, 0] = -J[:, 0, 1], -J[:, 1, 0]
    else:
        adj = np.linalg.inv(J) * det[:, None, None]
    return det, np.einsum("pij,pjia->pa", adj, dJ)


def _kernel_2d(J: np.ndarray, ref: np.ndarray | None = None) -> np.ndarray:
    """Unit null direction of a (nearly) singular 2x2 matrix, oriented along ``ref``."""
    r0, r1 = J[0], J[1]
    r = r0 if np.dot(r0, r0) >= np.dot(r1, r1) else r1
    v = np.array([-r[1], r[0]])
    v = v / max(np.linalg.norm(v), 1e-300)
    if ref is not None and np.dot(v, ref) < 0:
        v = -v
    return v


def _cusp_function(atlas: Atlas, cell: int, u: np.ndarray, ref: np.ndarray):
    """(detX, d detX along the kernel direction) at local coords ``u``."""
    n = atlas.n
    _, g, hs = atlas.eval_cells(np.array([cell]), u[None], order=2)
    J = g[:, :n, :]
    det, ddet = _det_and_grad(J, hs[:, :n, :, :])
    v = _kernel_2d(J[0], ref)
    return np.array([det[0], float(ddet[0] @ v)]), v


def _refine_cusp(atlas: Atlas, cell: int, u0: np.ndarray, ref: np.ndarray, scale: float):
    u = u0.copy()
    for _ in range(40):
        F, ref = _cusp_function(atlas, cell, u, ref)
        if abs(F[0]) < 1e-10 * scale and abs(F[1]) < 1e-9 * scale:
            return u
        Jf = np.empty((2, 2))
        for a in range(2):
            e = np.zeros(2)
            e[a] = 1e-6
            Fp, _ = _cusp_function(atlas, cell, u + e, ref)
            Fm, _ = _cusp_function(atlas, cell, u - e, ref)
            Jf[:, a] = (Fp - Fm) / 2e-6
        try:
            step = -np.linalg.solve(Jf, F)
        except np.linalg.LinAlgError:
            return None
        u = u + np.clip(step, -0.5, 0.5)
        if np.any(u < -0.25) or np.any(u > 1.25):
            return None
    return None


def detect_caustics(atlas: Atlas, tag_crb: bool = True) -> CausticCloud:
    """Zeros of det dx/d(tau, xi) on grid edges, refined to |detX| < 1e-10.

    For n = 2 the fold curve is also scanned for cusps (the kernel of dx
    becomes tangent to the fold).  With ``tag_crb`` each point is tested for
    membership in Cr(B): the critical branch must be the cheapest preimage of
    its projection.
    """
    corners, sheet_of, low = atlas.cells
    dX = atlas.detX.reshape(-1)[corners]
    d = atlas.d
    n = atlas.n
    cloud = CausticCloud()
    seen: dict[tuple, int] = {}
    cell_edges: dict[int, list[int]] = {}
    scale = float(np.nanmedian(np.abs(atlas.detX))) if atlas.detX.size else 1.0
    for axis in range(d):
        bit = 1 << axis
        for c0 in range(2 ** d):
            if c0 & bit:
                continue
            s0, s1 = dX[:, c0], dX[:, c0 | bit]
            hit = np.nonzero(np.isfinite(s0) & np.isfinite(s1) & (s0 * s1 < 0))[0]
            for c in hit:
                key = (int(corners[c, c0]), int(corners[c, c0 | bit]))
                if key in seen:
                    cell_edges.setdefault(int(c), []).append(seen[key])
                    continue
                fixed = np.array([float((c0 >> a) & 1) for a in range(d)])
                fn = _detx_along(atlas, int(c), axis, fixed)
                try:
                    t = brentq(fn, 0.0, 1.0, xtol=1e-15, rtol=1e-15, maxiter=200)
                except ValueError:
                    continue
                u = fixed.copy()
                u[axis] = t
                cloud.points.append(_point_at(atlas, int(c), u, "fold"))
                seen[key] = len(cloud.points) - 1
                cell_edges.setdefault(int(c), []).append(seen[key])
    if n == 2:
        _find_cusps(atlas, cloud, cell_edges, scale)
    if tag_crb:
        for cp in cloud.points:
            _tag(atlas, cp)
    atlas.caustics = cloud.points
    return cloud


def _point_at(atlas: Atlas, cell: int, u: np.ndarray, kind: str) -> CausticPoint:
    n = atlas.n
    _, sheet_of, _ = atlas.cells
    v, g = atlas.eval_cells(np.array([cell]), u[None])
    return CausticPoint(
        sheet=int(sheet_of[cell]), coords=atlas.cell_coords(np.array([cell]), u[None])[0],
        x=v[0, :n].copy(), p=v[0, n:2 * n].copy(), S=float(v[0, 2 * n]),
        detX=float(np.linalg.det(g[0, :n, :])), kind=kind)


def _find_cusps(atlas: Atlas, cloud: CausticCloud, cell_edges: dict, scale: float) -> None:
    _, _, low = atlas.cells
    found: list[np.ndarray] = []
    for cell, ids in cell_edges.items():
        if len(ids) < 2:
            continue
        # local coordinates of the fold crossings on this cell's edges
        us = []
        for i in ids:
            cp = cloud.points[i]
            u = (cp.coords - atlas.cell_coords(np.array([cell]), np.zeros((1, 2)))[0]) / atlas.h
            for a, per in enumerate(atlas.chart.periodic):
                if per:
                    N = atlas.chart.shape[a + 1]
                    u[1 + a] = (u[1 + a] + N / 2) % N - N / 2
            us.append(u)
        F0, ref = _cusp_function(atlas, cell, us[0], None)
        signs = [np.sign(F0[1])]
        for u in us[1:]:
            F, _ = _cusp_function(atlas, cell, u, ref)
            signs.append(np.sign(F[1]))
        if len(set(signs)) < 2:
            continue
        u0 = np.mean(us, axis=0)
        uc = _refine_cusp(atlas, cell, u0, ref, scale)
        if uc is None or np.any(uc < -1e-6) or np.any(uc > 1 + 1e-6):
            continue
        g = low[cell] + uc
        if any(np.max(np.abs(g - f)) < 0.1 for f in found):
            continue
        found.append(g)
        cloud.points.append(_point_at(atlas, cell, np.clip(uc, 0.0, 1.0), "cusp"))


def _detx_along(atlas: Atlas, cell: int, axis: int, fixed: np.ndarray):
    def fn(t):
        u = fixed.copy()
        u[axis] = t
        _, g = atlas.eval_cells(np.array([cell]), u[None])
        return float(np.linalg.det(g[0, :atlas.n, :]))
    return fn


def _tag(atlas: Atlas, cp: CausticPoint, cell_radius: float = 1.5) -> None:
    """Cr(B) membership of a caustic point.

    Preimages within ``cell_radius`` cells of the critical one are its own
    merging branches and are excluded.  A fold with no other preimage sits
    on the edge of the synthesized region (B is undefined beyond it) and is
    not tagged; a cusp with none is the cheapest by default.
    """
    try:
        branches = enumerate_branches(atlas, cp.x, tol=1e-9, check_region=False)
    except OutsideRegion:
        branches = []
    h = atlas.h
    others = []
    for b in branches:
        if b.sheet == cp.sheet:
            diff = (np.concatenate([[b.tau], b.xi]) - cp.coords) / h
            for a, per in enumerate(atlas.chart.periodic):
                if per:
                    N = atlas.chart.shape[a + 1]
                    diff[1 + a] = (diff[1 + a] + N / 2) % N - N / 2
            if np.max(np.abs(diff)) < cell_radius:
                continue
        others.append(b.S)
    cp.other_min_S = min(others) if others else float("inf")
    if not others:
        cp.in_crb = cp.kind == "cusp"
    else:
        cp.in_crb = bool(cp.S <= cp.other_min_S + 1e-9 * max(1.0, abs(cp.S)))
