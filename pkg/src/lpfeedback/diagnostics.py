"""Invariant checks on a synthesized atlas, each reporting its worst witness."""

from __future__ import annotations

import numpy as np

from .bellman import OutsideRegion, bellman_query_batch
from .hamflow import _flow_with_variations, hamiltonian
from .localsolve import linearize, riccati_residual
from .lpmanifold import Atlas, grid_circulations
from .sysdef import CheckResult, ValidationReport

# thresholds (hard invariants)
RICCATI_TOL = 1e-10
NODE_H_TOL = 1e-8
ACTION_REL_TOL = 1e-5
QUERY_H_TOL = 1e-6
GRADIENT_REL_TOL = 1e-4
LOOP_RATIO = 4.0
UNITY_TOL = 1e-12


def action_residual(atlas: Atlas) -> tuple[np.ndarray, np.ndarray]:
    """Per-interval mismatch of S along rays against the Hermite rule for dS/dtau = L.

    S(i+1) - S(i) = h/2 (L_i + L_{i+1}) + h^2/12 (L'_i - L'_{i+1}) + O(h^5), with
    L' = dL/dtau from the flow.  Returns (residual, scale) of shape (R, T-1).
    """
    R, T, n = atlas.x.shape
    ok = atlas.valid
    z = np.concatenate([atlas.x, atlas.p], axis=-1)
    zf = np.where(ok[..., None], z, 0.0).reshape(-1, 2 * n)
    Ff = np.where(ok[..., None], atlas.dz_dtau, 0.0).reshape(-1, 2 * n, 1)
    _, _, L, dL, _ = _flow_with_variations(atlas.system, zf, Ff)
    nan = np.where(ok, 1.0, np.nan)
    L = L.reshape(R, T) * nan
    Lp = dL.reshape(R, T) * nan
    h = np.diff(atlas.tau)[None, :]
    S = atlas.S
    r = (S[:, 1:] - S[:, :-1]) - h / 2 * (L[:, 1:] + L[:, :-1]) - h * h / 12 * (Lp[:, :-1] - Lp[:, 1:])
    scale = np.maximum(np.abs(S[:, 1:]), np.abs(S[:, :-1]))
    return r, scale


def sample_region(atlas: Atlas, count: int, seed: int = 0) -> np.ndarray:
    """Random points on the projected manifold (random cells, random local coordinates)."""
    corners, _, _ = atlas.cells
    rng = np.random.default_rng(seed)
    cells = rng.integers(0, len(corners), size=count)
    u = rng.uniform(0.05, 0.95, size=(count, atlas.d))
    val = atlas.eval_cells(cells, u)[0]
    return val[:, : atlas.n]


def _worst(values: np.ndarray, where: np.ndarray):
    i = int(np.nanargmax(values))
    return float(values.flat[i]), np.asarray(where[i]).tolist()


def check_local(atlas: Atlas) -> list[CheckResult]:
    loc = atlas.local
    res = float(np.max(np.abs(riccati_residual(linearize(atlas.system), loc.P))))
    return [
        CheckResult("riccati residual", res < RICCATI_TOL, True, f"max {res:.3e} (< {RICCATI_TOL:g})", None, res),
        CheckResult("level-set decrease", loc.margin < 0, True, f"margin {loc.margin:.6g} (< 0)", None,
                    float(loc.margin)),
    ]


def check_node_hamiltonian(atlas: Atlas) -> CheckResult:
    H = np.abs(atlas.H)
    if not np.any(np.isfinite(H)):
        return CheckResult("hamiltonian on nodes", False, True, "no valid nodes")
    v, w = _worst(np.where(np.isfinite(H), H, -np.inf), atlas.x.reshape(-1, atlas.n))
    return CheckResult("hamiltonian on nodes", v <= NODE_H_TOL, True, f"max |H| {v:.3e} (<= {NODE_H_TOL:g})", w, v)


def check_action(atlas: Atlas) -> CheckResult:
    r, scale = action_residual(atlas)
    q = np.abs(r) / np.maximum(scale, 1e-300)
    q = np.where(np.isfinite(q) & (scale > 0), q, -np.inf)
    if not np.any(np.isfinite(q)):
        return CheckResult("dynamic programming along rays", True, True, "no intervals")
    v, w = _worst(q, atlas.x[:, 1:].reshape(-1, atlas.n))
    return CheckResult("dynamic programming along rays", v <= ACTION_REL_TOL, True,
                       f"max relative S mismatch {v:.3e} (<= {ACTION_REL_TOL:g})", w, v)


def check_loops(atlas: Atlas) -> CheckResult:
    if atlas.n != 2:
        return CheckResult("loop integrals", True, True, "not applicable (n != 2)")
    fine = np.nanmax(np.abs(grid_circulations(atlas, 1)))
    coarse = np.nanmax(np.abs(grid_circulations(atlas, 2)))
    ratio = coarse / fine if fine > 0 else np.inf
    return CheckResult("loop integrals", bool(ratio >= LOOP_RATIO), True,
                       f"max circulation {fine:.3e}, halving ratio {ratio:.2f} (>= {LOOP_RATIO:g})", None,
                       float(fine))


def check_queries(atlas: Atlas, count: int = 50, seed: int = 0, fd_step: float = 1e-5) -> list[CheckResult]:
    """|H(x, grad B)| and grad B against central differences at random non-caustic points."""
    n = atlas.n
    X = sample_region(atlas, count, seed)
    res = bellman_query_batch(atlas, X)
    keep = [i for i, r in enumerate(res)
            if not isinstance(r, OutsideRegion) and not r.minimizer_critical and r.gap > 1e-3 * max(1, abs(r.value))]
    if not keep:
        return [CheckResult("bellman residual", False, True, "no usable query points")]
    H = np.array([abs(float(hamiltonian(atlas.system, X[i], res[i].gradient))) for i in keep])
    v, w = _worst(H, X[keep])
    out = [CheckResult("bellman residual", v <= QUERY_H_TOL, True,
                       f"max |H(x, grad B)| {v:.3e} over {len(keep)} points (<= {QUERY_H_TOL:g})", w, v)]
    stencil = np.concatenate([X[keep][:, None, :] + s * fd_step * np.eye(n)[None] for s in (1, -1)], axis=1)
    sres = bellman_query_batch(atlas, stencil.reshape(-1, n))
    errs = np.full(len(keep), -np.inf)
    for j, i in enumerate(keep):
        rows = sres[j * 2 * n:(j + 1) * 2 * n]
        if any(isinstance(r, OutsideRegion) for r in rows):
            continue
        vals = np.array([r.value for r in rows])
        fd = (vals[:n] - vals[n:]) / (2 * fd_step)
        g = res[i].gradient
        errs[j] = float(np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1e-12))
    if not np.any(np.isfinite(errs)):
        out.append(CheckResult("gradient consistency", False, True, "no usable stencils"))
        return out
    v, w = _worst(errs, X[keep])
    out.append(CheckResult("gradient consistency", v <= GRADIENT_REL_TOL, True,
                           f"max relative error {v:.3e} (<= {GRADIENT_REL_TOL:g})", w, v))
    return out


def check_partition(field, count: int = 1000, seed: int = 0) -> list[CheckResult]:
    """Sum of chart partition functions and of bump weights (w + v) at random points."""
    atlas = field.atlas
    system = field.charts
    rng = np.random.default_rng(seed)
    corners, sheet, low = atlas.cells
    cells = rng.integers(0, len(corners), size=count)
    g = system.to_grid(atlas.cell_coords(cells, rng.uniform(size=(count, atlas.d))))
    sh = sheet[cells]
    err_e = np.zeros(count)
    for s in np.unique(sh):
        idx = np.flatnonzero(sh == s)
        parts = system.weights(int(s), g[idx])
        err_e[idx] = np.abs(sum(parts.values()) - 1.0)
    v1, w1 = _worst(err_e, g)
    chart_check = CheckResult("chart partition of unity", v1 <= UNITY_TOL, True, f"max |sum e_j - 1| {v1:.3e}", w1, v1)
    if not len(field.cover):
        return [chart_check, CheckResult("bump partition of unity", True, True, "no bumps")]
    # half the points near the bumps, where the weights are nontrivial
    X = sample_region(atlas, count, seed + 1)
    c, r = field.cover.centers, field.cover.radii.max()
    X[: count // 2] = rng.uniform(c.min(axis=0) - 1.5 * r, c.max(axis=0) + 1.5 * r, size=(count // 2, atlas.n))
    w, v = field.cover.weights(X)
    err_b = np.abs(w.sum(axis=1) + v.sum(axis=1) - 1.0)
    v2, w2 = _worst(err_b, X)
    return [
        chart_check,
        CheckResult("bump partition of unity", v2 <= UNITY_TOL, True, f"max |sum (w + v) - 1| {v2:.3e}", w2, v2),
    ]


def run_checks(atlas: Atlas, field=None, query_count: int = 50, seed: int = 0) -> ValidationReport:
    report = ValidationReport()
    report.checks.extend(check_local(atlas))
    report.checks.append(check_node_hamiltonian(atlas))
    report.checks.append(check_action(atlas))
    report.checks.append(check_loops(atlas))
    report.checks.extend(check_queries(atlas, query_count, seed))
    if field is not None:
        report.checks.extend(check_partition(field, seed=seed))
    return report
