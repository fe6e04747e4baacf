"""Control-affine system data ``dx/dt = f(x) + g(x) u`` with running cost
``eps(x) + <u, Q(x) u>``, and checks of the standing assumptions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import jet
from .expr import Expression, ExpressionDomainError
from .jet import Jet2


class SystemSpecError(ValueError):
    pass


def _parse_all(items, n: int, what: str) -> tuple[Expression, ...]:
    out = []
    for i, src in enumerate(items):
        try:
            out.append(Expression.parse(str(src), n))
        except ValueError as exc:
            raise SystemSpecError(f"{what}[{i}]: {exc}") from None
    return tuple(out)


@dataclass(frozen=True)
class SystemSpec:
    """The quadruple (f, g, eps, Q).

    ``g`` is stored row-major (n rows of m entries).  ``Q`` is built from its
    upper triangle; entries below the diagonal in the input are ignored and
    mirrored so that Q is symmetric by construction.
    """

    n: int
    m: int
    f: tuple[Expression, ...]
    g: tuple[tuple[Expression, ...], ...]
    epsilon: Expression
    Q: tuple[tuple[Expression, ...], ...]

    @classmethod
    def from_strings(cls, n: int, m: int, f: Sequence[str], g, epsilon: str, Q) -> SystemSpec:
        if n < 1 or m < 1:
            raise SystemSpecError("n and m must be positive")
        if len(f) != n:
            raise SystemSpecError(f"f has {len(f)} components, expected n={n}")
        g = [[g]] if isinstance(g, str) else [list(row) if not isinstance(row, str) else [row] for row in g]
        if n == 1 and len(g) == m and all(len(r) == 1 for r in g) and m > 1:
            g = [[r[0] for r in g]]
        if len(g) != n or any(len(row) != m for row in g):
            raise SystemSpecError(f"g must be {n}x{m}")
        Q = [[Q]] if isinstance(Q, str) else [list(row) if not isinstance(row, str) else [row] for row in Q]
        Qfull = _mirror_upper(Q, m)
        return cls(
            n=n,
            m=m,
            f=_parse_all(f, n, "f"),
            g=tuple(_parse_all(row, n, f"g[{i}]") for i, row in enumerate(g)),
            epsilon=_parse_all([epsilon], n, "epsilon")[0],
            Q=tuple(_parse_all(row, n, f"Q[{i}]") for i, row in enumerate(Qfull)),
        )

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "f": [e.source for e in self.f],
            "g": [[e.source for e in row] for row in self.g],
            "epsilon": self.epsilon.source,
            "Q": [[self.Q[i][j].source if j >= i else "0" for j in range(self.m)] for i in range(self.m)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> SystemSpec:
        return cls.from_strings(d["n"], d["m"], d["f"], d["g"], d["epsilon"], d["Q"])

    # evaluation -----------------------------------------------------------

    def evaluate(self, x, variables=None):
        """Evaluate (f, g, eps, Q) at ``x``.

        ``variables`` replaces the state components (e.g. by jets); the
        return values are then lists of the same element type.
        """
        xs = variables if variables is not None else [np.asarray(x, dtype=float)[..., i] for i in range(self.n)]
        f = [e(xs) for e in self.f]
        g = [[e(xs) for e in row] for row in self.g]
        eps = self.epsilon(xs)
        Q = [[None] * self.m for _ in range(self.m)]
        for i in range(self.m):
            for j in range(i, self.m):
                Q[i][j] = self.Q[i][j](xs)
                Q[j][i] = Q[i][j]
        return f, g, eps, Q

    def arrays(self, x):
        """Numeric f (…,n), g (…,n,m), eps (…), Q (…,m,m) at ``x`` (…,n)."""
        x = np.asarray(x, dtype=float)
        shape = x.shape[:-1]
        f, g, eps, Q = self.evaluate(x)
        F = np.stack([np.broadcast_to(v, shape) for v in f], axis=-1)
        G = np.stack([np.stack([np.broadcast_to(v, shape) for v in row], axis=-1) for row in g], axis=-2)
        E = np.broadcast_to(np.asarray(eps, dtype=float), shape).copy()
        Qa = np.stack([np.stack([np.broadcast_to(v, shape) for v in row], axis=-1) for row in Q], axis=-2)
        return F, G, E, Qa

    def R(self, x) -> np.ndarray:
        """``g Q^{-1} g^T`` at ``x``."""
        _, G, _, Qa = self.arrays(x)
        return G @ np.linalg.solve(Qa, np.swapaxes(G, -1, -2))

    def jets(self, x):
        """(f, g, eps, Q) as jets with respect to the state."""
        x = np.asarray(x, dtype=float)
        return self.evaluate(x, jet.seed(x))


def _mirror_upper(Q, m: int):
    if len(Q) == m and all(len(r) == m for r in Q):
        return [[Q[min(i, j)][max(i, j)] for j in range(m)] for i in range(m)]
    # packed upper triangle, row by row
    flat = [e for row in Q for e in row]
    if len(flat) != m * (m + 1) // 2:
        raise SystemSpecError(f"Q must be {m}x{m} or a packed upper triangle of {m * (m + 1) // 2} entries")
    it = iter(flat)
    upper = [[None] * m for _ in range(m)]
    for i in range(m):
        for j in range(i, m):
            upper[i][j] = next(it)
    return [[upper[min(i, j)][max(i, j)] for j in range(m)] for i in range(m)]


# validation -----------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    hard: bool
    message: str = ""
    witness: list[float] | None = None
    worst: float | None = None


@dataclass
class ValidationReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def hard_failures(self) -> list[CheckResult]:
        return [c for c in self.checks if c.hard and not c.passed]

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def __str__(self) -> str:
        lines = []
        for c in self.checks:
            status = "pass" if c.passed else ("FAIL (hard)" if c.hard else "FAIL")
            lines.append(f"{c.name}: {status} {c.message}".rstrip())
        return "\n".join(lines)


def default_samples(n: int, radius: float = 2.0, per_axis: int = 9, n_random: int = 200, seed: int = 0):
    axes = [np.linspace(-radius, radius, per_axis)] * n
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n)
    rng = np.random.default_rng(seed)
    pts = np.vstack([grid, rng.uniform(-radius, radius, size=(n_random, n))])
    return pts[np.linalg.norm(pts, axis=1) > 0]


def validate_system(s: SystemSpec, samples=None) -> ValidationReport:
    """Check f(0)=0, eps(0)=0, eps>0 and Q positive definite on samples."""
    samples = default_samples(s.n) if samples is None else np.atleast_2d(np.asarray(samples, dtype=float))
    samples = samples[np.linalg.norm(samples, axis=1) > 0]
    report = ValidationReport()
    zero = np.zeros(s.n)
    try:
        F0, _, E0, _ = s.arrays(zero)
    except ExpressionDomainError as exc:
        report.checks.append(CheckResult("evaluable at origin", False, True, str(exc)))
        return report
    worst_f = float(np.max(np.abs(F0)))
    report.checks.append(CheckResult(
        "f(0)=0", worst_f == 0.0, True,
        "" if worst_f == 0.0 else f"f(0)≠0: f(0) = {F0.tolist()}", zero.tolist(), worst_f))
    report.checks.append(CheckResult(
        "epsilon(0)=0", float(E0) == 0.0, True,
        "" if float(E0) == 0.0 else f"epsilon(0)≠0: epsilon(0) = {float(E0)!r}", zero.tolist(), float(E0)))
    try:
        _, _, E, Qa = s.arrays(samples)
    except ExpressionDomainError as exc:
        report.checks.append(CheckResult("evaluable on samples", False, True, str(exc)))
        return report
    i = int(np.argmin(E))
    ok = bool(np.all(E > 0))
    report.checks.append(CheckResult(
        "epsilon(x)>0", ok, False,
        "" if ok else f"epsilon not positive, min {float(E[i])!r}", samples[i].tolist(), float(E[i])))
    eig = np.linalg.eigvalsh(Qa)[..., 0]
    i = int(np.argmin(eig))
    ok = bool(np.all(eig > 0))
    report.checks.append(CheckResult(
        "Q positive definite", ok, False,
        "" if ok else f"Q not positive definite, min eigenvalue {float(eig[i])!r}", samples[i].tolist(), float(eig[i])))
    return report


def eval_jet2(e: Expression | str, x) -> Jet2:
    from .expr import eval_jet2 as _e
    return _e(e, x)
