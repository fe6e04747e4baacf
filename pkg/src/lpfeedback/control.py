"""Composite feedback law and closed-loop simulation with realized-cost accounting."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .bellman import OutsideRegion, bellman_query, bellman_query_batch
from .localsolve import LocalSolution
from .lpmanifold import Atlas
from .maslov import RegularizedField, regularized_bellman
from .sysdef import SystemSpec

HYSTERESIS = 1e-9
INNER, OUTER = 1, 0


@dataclass
class FeedbackLaw:
    """u = Kx on {V <= delta}; u = -1/2 Q^{-1} g^T grad B(x, k) outside.

    ``field`` (optional) supplies the regularized gradient inside caustic
    bumps; elsewhere B(x, k) = B(x) and the plain Bellman gradient is used.
    ``refine`` polishes every Bellman query by shooting (accurate, slow);
    ``scale`` multiplies the outer control (a suboptimality witness).
    """

    system: SystemSpec
    local: LocalSolution
    atlas: Atlas
    field: RegularizedField | None = None
    k: float | None = None
    refine: bool = False
    scale: float = 1.0

    def region(self, x, previous: int | None = None) -> int:
        """INNER or OUTER with a +-1e-9 delta band around the switching surface."""
        V = float(self.local.V(x))
        d = self.local.delta
        if previous == INNER:
            return INNER if V <= d * (1 + HYSTERESIS) else OUTER
        if previous == OUTER:
            return OUTER if V > d * (1 - HYSTERESIS) else INNER
        return INNER if V <= d else OUTER

    def bellman_gradient(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.field is not None and _near_bump(self.field, x):
            return regularized_bellman(self.field, x, self.k).gradient
        return bellman_query(self.atlas, x, refine=self.refine).gradient

    def outer(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        _, G, _, Q = self.system.arrays(x)
        gB = self.bellman_gradient(x)
        return self.scale * (-0.5 * np.linalg.solve(Q, G.T @ gB))

    def inner(self, x) -> np.ndarray:
        return np.atleast_1d(self.local.w(x))

    def __call__(self, x, previous: int | None = None) -> np.ndarray:
        return self.inner(x) if self.region(x, previous) == INNER else self.outer(x)


def _near_bump(fld: RegularizedField, x: np.ndarray) -> bool:
    if not len(fld.cover):
        return False
    r = np.linalg.norm(fld.cover.centers - x, axis=1)
    return bool(np.any(r < fld.cover.radii + 2 * fld.fd_step))


def feedback_eval(law: FeedbackLaw, x) -> np.ndarray:
    """Composite control at x; raises OutsideRegion outside both regions."""
    x = np.asarray(x, dtype=float).reshape(law.system.n)
    if not np.any(x):
        return np.zeros(law.system.m)
    return law(x)


@dataclass
class SimulationResult:
    t: np.ndarray               # accepted step times
    x: np.ndarray               # (T, n)
    u: np.ndarray               # (T, m)
    running_cost: np.ndarray    # (T,) accumulated cost
    V: np.ndarray               # (T,)
    region: np.ndarray          # (T,) INNER / OUTER
    entry_time: float           # first time in {V <= delta}; nan if never
    cost_to_level: float        # realized cost up to entry_time
    terminal_norm: float
    truncated: bool = False
    message: str = ""
    phases: list = field(default_factory=list)
    stop_norm: float = 1e-6

    @property
    def stabilized(self) -> bool:
        # the stop event lands on |x| = stop_norm up to root-finding accuracy
        return (not self.truncated) and self.terminal_norm <= self.stop_norm * (1 + 1e-6)

    @property
    def total_cost(self) -> float:
        return float(self.running_cost[-1])


def simulate_closed_loop(law: FeedbackLaw, x0, horizon: float = 50.0, rtol: float = 1e-10, atol: float = 1e-12,
                         stop_norm: float = 1e-6, max_switches: int = 20) -> SimulationResult:
    """Integrate x' = f + g u(x) with the cost as an extra state.

    The law switches on {V = delta}; each side is integrated separately up
    to a terminal event on the switching surface, so the adaptive steps
    never straddle the discontinuity.  Integration stops at ``horizon`` or
    when |x| < ``stop_norm``.
    """
    s = law.system
    n = s.n
    x0 = np.asarray(x0, dtype=float).reshape(n)
    ts, xs, cs = [np.array([0.0])], [x0[None]], [np.array([0.0])]
    t0, y0 = 0.0, np.concatenate([x0, [0.0]])
    reg = law.region(x0)
    regions = [np.array([reg])]
    entry = 0.0 if reg == INNER else np.nan
    truncated, message = False, ""
    phases = []
    if np.linalg.norm(x0) < stop_norm:
        horizon = 0.0

    for _ in range(max_switches):
        if t0 >= horizon:
            break
        current = reg

        def rhs(t, y, current=current):
            x = y[:n]
            # stages of the step that crosses the surface may land inside, where B is undefined
            inner = current == INNER or law.local.V(x) < law.local.delta
            u = law.inner(x) if inner else law.outer(x)
            F, G, eps, Q = s.arrays(x)
            return np.concatenate([F + G @ u, [eps + u @ Q @ u]])

        def small(t, y):
            return np.linalg.norm(y[:n]) - stop_norm

        small.terminal = True
        small.direction = -1

        def switch(t, y, current=current):
            V = float(law.local.V(y[:n]))
            d = law.local.delta
            return V - d * (1 + HYSTERESIS) if current == INNER else V - d * (1 - HYSTERESIS)

        switch.terminal = True
        switch.direction = 1 if current == INNER else -1
        try:
            sol = solve_ivp(rhs, (t0, horizon), y0, method="RK45", rtol=rtol, atol=atol, events=(small, switch))
        except (OutsideRegion, LookupError) as exc:
            truncated, message = True, f"left the synthesized region: {exc}"
            break
        if sol.status < 0:
            truncated, message = True, sol.message
            break
        ts.append(sol.t[1:])
        xs.append(sol.y[:n, 1:].T)
        cs.append(sol.y[n, 1:])
        regions.append(np.full(len(sol.t) - 1, current))
        phases.append((current, float(t0), float(sol.t[-1])))
        t0, y0 = float(sol.t[-1]), sol.y[:, -1].copy()
        if sol.status == 1 and len(sol.t_events[0]):
            break
        if sol.status == 1 and len(sol.t_events[1]):
            reg = INNER if current == OUTER else OUTER
            if reg == INNER and np.isnan(entry):
                entry = t0
            continue
        break
    else:
        truncated, message = True, "too many switches across the level set"

    t = np.concatenate(ts)
    X = np.concatenate(xs)
    C = np.concatenate(cs)
    R = np.concatenate(regions)
    U = np.array([_safe_u(law, x, r) for x, r in zip(X, R)]).reshape(len(t), s.m)
    if np.isnan(entry):
        cost_to_level = np.nan
    else:
        cost_to_level = float(np.interp(entry, t, C))
    return SimulationResult(t=t, x=X, u=U, running_cost=C, V=law.local.V(X), region=R, entry_time=entry,
                            cost_to_level=cost_to_level, terminal_norm=float(np.linalg.norm(X[-1])),
                            truncated=truncated, message=message, phases=phases, stop_norm=stop_norm)


def _safe_u(law: FeedbackLaw, x: np.ndarray, region: int) -> np.ndarray:
    try:
        return law.inner(x) if region == INNER else law.outer(x)
    except LookupError:
        return np.full(law.system.m, np.nan)


def optimality_gap(law: FeedbackLaw, x0, result: SimulationResult | None = None) -> float:
    """(realized cost to the level set - B(x0)) / max(B(x0), 1e-12); 0 on or inside the level set."""
    x0 = np.asarray(x0, dtype=float)
    if law.region(x0) == INNER:
        return 0.0
    if result is None:
        result = simulate_closed_loop(law, x0)
    if np.isnan(result.cost_to_level):
        raise RuntimeError("trajectory never reached the level set: " + (result.message or "horizon too short"))
    B = bellman_query(law.atlas, x0).value
    if B <= 1e-12 and result.cost_to_level <= 1e-12:
        return 0.0
    return (result.cost_to_level - B) / max(B, 1e-12)


def descent_residual(law: FeedbackLaw, result: SimulationResult, refine: bool = True) -> np.ndarray:
    """d/dt B(x(t)) + eps + <u, Q u> at the accepted outer steps (refined gradients, applied controls)."""
    s = law.system
    keep = [i for i, r in enumerate(result.region)
            if r == OUTER and np.all(np.isfinite(result.u[i]))
            and (law.field is None or not _near_bump(law.field, result.x[i]))]
    if not keep:
        return np.array([])
    out = []
    for i, q in zip(keep, bellman_query_batch(law.atlas, result.x[keep], refine=refine)):
        if isinstance(q, LookupError):
            continue
        x, u = result.x[i], result.u[i]
        F, G, eps, Q = s.arrays(x)
        out.append(float(q.gradient @ (F + G @ u) + eps + u @ Q @ u))
    return np.array(out)


def switching_mismatch(law: FeedbackLaw, samples) -> float:
    """max |w(x) - u_outer(x)| over level-set samples (the law is not continuous in general)."""
    worst = 0.0
    for x in np.atleast_2d(samples):
        x = np.asarray(x, dtype=float)
        scale = np.sqrt(law.local.delta / law.local.V(x))
        xl = x * scale * (1 + 1e-7)  # just outside, where B is defined
        try:
            worst = max(worst, float(np.linalg.norm(law.inner(xl) - law.outer(xl))))
        except LookupError:
            continue
    return worst


def write_trajectory_csv(result: SimulationResult, path) -> None:
    n = result.x.shape[1]
    m = result.u.shape[1]
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)] + ["running_cost", "V",
                                                                                        "region"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(result.t)):
            row = [result.t[i], *result.x[i], *result.u[i], result.running_cost[i], result.V[i]]
            w.writerow([f"{v:.17g}" for v in row] + ["inner" if result.region[i] == INNER else "outer"])
