"""Command-line pipeline: synthesize an atlas from a JSON run configuration,
then query, simulate, export and check it.

Exit codes: 0 success, 1 file error, 2 configuration / validation error,
3 local solve failure, 4 atlas failure, 5 a hard invariant failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bellman import OutsideRegion, bellman_query_batch, detect_caustics
from .control import FeedbackLaw, INNER, optimality_gap, simulate_closed_loop, write_trajectory_csv
from .diagnostics import run_checks
from .localsolve import LocalSolveError, solve_local
from .lpmanifold import AtlasError, build_atlas, read_atlas, write_atlas
from .maslov import MaslovError, build_regularized_field, regularized_bellman
from .sysdef import SystemSpec, SystemSpecError, validate_system

THREADS_ENV = "LPFEEDBACK_THREADS"

EXIT_OK, EXIT_FILE, EXIT_CONFIG, EXIT_LOCAL, EXIT_ATLAS, EXIT_CHECK = 0, 1, 2, 3, 4, 5


class ConfigError(ValueError):
    """Malformed configuration; the message starts with the offending location."""


# configuration ----------------------------------------------------------------

def _num(block: dict, key: str, where: str, default, positive: bool = False, integer: bool = False,
         optional: bool = False):
    v = block.get(key, default)
    loc = f"{where}.{key}"
    if v is None:
        if optional:
            return None
        raise ConfigError(f"{loc}: required")
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{loc}: expected a number, got {v!r}")
    if integer and (not float(v).is_integer()):
        raise ConfigError(f"{loc}: expected an integer, got {v!r}")
    if not math.isfinite(float(v)):
        raise ConfigError(f"{loc}: must be finite")
    if positive and not v > 0:
        raise ConfigError(f"{loc}: must be positive, got {v!r}")
    return int(v) if integer else float(v)


def _block(raw: dict, name: str, required: bool = False) -> dict:
    b = raw.get(name)
    if b is None:
        if required:
            raise ConfigError(f"config.{name}: required block missing")
        return {}
    if not isinstance(b, dict):
        raise ConfigError(f"config.{name}: expected an object")
    return b


def _check_keys(block: dict, allowed: set, where: str) -> None:
    extra = sorted(set(block) - allowed)
    if extra:
        raise ConfigError(f"{where}.{extra[0]}: unknown field")


@dataclass
class LocalBlock:
    delta_candidates: list | None = None
    samples_per_level: int | None = None


@dataclass
class AtlasBlock:
    n_xi: int = 64
    tau_max: float = 2.0
    n_tau: int = 101
    rtol: float = 1e-10
    atol: float = 1e-10
    escape_radius: float | None = None


@dataclass
class MaslovBlock:
    k: float = 200.0
    radius_factor: float = 2.0
    tile_width: int = 4


@dataclass
class SimulateBlock:
    x0: list = field(default_factory=list)
    horizon: float = 50.0
    rtol: float = 1e-10
    atol: float = 1e-12


@dataclass
class RunConfig:
    system: dict
    local: LocalBlock
    atlas: AtlasBlock
    maslov: MaslovBlock | None
    simulate: SimulateBlock

    @classmethod
    def from_dict(cls, raw) -> RunConfig:
        if not isinstance(raw, dict):
            raise ConfigError("config: expected a JSON object")
        _check_keys(raw, {"system", "local", "atlas", "maslov", "simulate"}, "config")
        sysb = _block(raw, "system", required=True)
        _check_keys(sysb, {"n", "m", "f", "g", "epsilon", "Q"}, "config.system")
        for key in ("n", "m", "f", "g", "epsilon", "Q"):
            if key not in sysb:
                raise ConfigError(f"config.system.{key}: required")
        n = _num(sysb, "n", "config.system", None, positive=True, integer=True)
        _num(sysb, "m", "config.system", None, positive=True, integer=True)
        if not isinstance(sysb["f"], list) or not all(isinstance(e, str) for e in sysb["f"]):
            raise ConfigError("config.system.f: expected a list of expression strings")
        if not isinstance(sysb["epsilon"], str):
            raise ConfigError("config.system.epsilon: expected an expression string")
        for key in ("g", "Q"):
            v = sysb[key]
            ok = isinstance(v, str) or (isinstance(v, list) and all(
                isinstance(r, (str, int, float)) or (isinstance(r, list) and all(isinstance(e, (str, int, float))
                                                                             for e in r)) for r in v))
            if not ok:
                raise ConfigError(f"config.system.{key}: expected a matrix of expression strings")

        lb = _block(raw, "local")
        _check_keys(lb, {"delta_candidates", "samples_per_level"}, "config.local")
        cands = lb.get("delta_candidates")
        if cands is not None:
            if not isinstance(cands, list) or not cands:
                raise ConfigError("config.local.delta_candidates: expected a nonempty list of numbers")
            cands = [_num({"v": c}, "v", f"config.local.delta_candidates[{i}]", None, positive=True)
                     for i, c in enumerate(cands)]
        spl = _num(lb, "samples_per_level", "config.local", None, positive=True, integer=True, optional=True)
        local = LocalBlock(cands, spl)

        ab = _block(raw, "atlas")
        _check_keys(ab, set(AtlasBlock.__dataclass_fields__), "config.atlas")
        d = AtlasBlock()
        nxi = ab.get("n_xi", d.n_xi)
        if isinstance(nxi, list):
            if len(nxi) != max(n - 1, 1):
                raise ConfigError(f"config.atlas.n_xi: expected {max(n - 1, 1)} counts")
            nxi = [_num({"v": c}, "v", f"config.atlas.n_xi[{i}]", None, positive=True, integer=True)
                   for i, c in enumerate(nxi)]
        else:
            nxi = _num(ab, "n_xi", "config.atlas", d.n_xi, positive=True, integer=True)
        atlas = AtlasBlock(
            n_xi=nxi,
            tau_max=_num(ab, "tau_max", "config.atlas", d.tau_max, positive=True),
            n_tau=_num(ab, "n_tau", "config.atlas", d.n_tau, positive=True, integer=True),
            rtol=_num(ab, "rtol", "config.atlas", d.rtol, positive=True),
            atol=_num(ab, "atol", "config.atlas", d.atol, positive=True),
            escape_radius=_num(ab, "escape_radius", "config.atlas", None, positive=True, optional=True),
        )
        if atlas.n_tau < 3:
            raise ConfigError("config.atlas.n_tau: at least 3 samples needed")

        mb = raw.get("maslov")
        maslov = None
        if mb is not None:
            mb = _block(raw, "maslov")
            _check_keys(mb, set(MaslovBlock.__dataclass_fields__), "config.maslov")
            dm = MaslovBlock()
            maslov = MaslovBlock(
                k=_num(mb, "k", "config.maslov", dm.k, positive=True),
                radius_factor=_num(mb, "radius_factor", "config.maslov", dm.radius_factor, positive=True),
                tile_width=_num(mb, "tile_width", "config.maslov", dm.tile_width, positive=True, integer=True),
            )

        sb = _block(raw, "simulate")
        _check_keys(sb, set(SimulateBlock.__dataclass_fields__), "config.simulate")
        ds = SimulateBlock()
        x0 = sb.get("x0", [])
        if not isinstance(x0, list):
            raise ConfigError("config.simulate.x0: expected a list of points")
        pts = []
        for i, p in enumerate(x0):
            p = [p] if isinstance(p, (int, float)) and not isinstance(p, bool) else p
            if not isinstance(p, list) or len(p) != n:
                raise ConfigError(f"config.simulate.x0[{i}]: expected {n} coordinates")
            pts.append([_num({"v": c}, "v", f"config.simulate.x0[{i}][{j}]", None) for j, c in enumerate(p)])
        sim = SimulateBlock(
            x0=pts,
            horizon=_num(sb, "horizon", "config.simulate", ds.horizon, positive=True),
            rtol=_num(sb, "rtol", "config.simulate", ds.rtol, positive=True),
            atol=_num(sb, "atol", "config.simulate", ds.atol, positive=True),
        )
        return cls(system=dict(sysb), local=local, atlas=atlas, maslov=maslov, simulate=sim)

    def to_dict(self) -> dict:
        out = {"system": self.system, "local": asdict(self.local), "atlas": asdict(self.atlas),
               "simulate": asdict(self.simulate)}
        if self.maslov is not None:
            out["maslov"] = asdict(self.maslov)
        return out

    def system_spec(self) -> SystemSpec:
        s = self.system
        try:
            return SystemSpec.from_strings(s["n"], s["m"], s["f"], s["g"], s["epsilon"], s["Q"])
        except SystemSpecError as exc:
            raise ConfigError(f"config.system.{exc}") from None


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return RunConfig.from_dict(raw)


# I/O helpers ------------------------------------------------------------------

def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


class _Output:
    """File or standard output; CSV dialect: comma, header row, UTF-8, LF."""

    def __init__(self, path):
        self.path = path

    def __enter__(self):
        self.fh = open(self.path, "w", encoding="utf-8", newline="") if self.path else io.StringIO()
        return self.fh

    def __exit__(self, *exc):
        if not self.path:
            sys.stdout.write(self.fh.getvalue())
        else:
            self.fh.close()


def write_rows(path, header: list[str], rows) -> None:
    with _Output(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_points(path, n: int) -> np.ndarray:
    """Points CSV with a header row; uses columns x1..xn if present, else the first n."""
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise FileNotFoundError(f"{path}: {exc.strerror}") from None
    if not rows:
        return np.zeros((0, n))
    header = [h.strip() for h in rows[0]]
    names = [f"x{i + 1}" for i in range(n)]
    cols = [header.index(c) for c in names] if all(c in header for c in names) else list(range(n))
    out = []
    for lineno, r in enumerate(rows[1:], start=2):
        try:
            out.append([float(r[c]) for c in cols])
        except (IndexError, ValueError):
            raise ConfigError(f"{path}:{lineno}: expected {n} numeric coordinates") from None
    return np.array(out, dtype=float).reshape(-1, n)


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _map(fn, items, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _load_atlas(args):
    if not args.atlas:
        raise ConfigError("--atlas: required")
    try:
        return read_atlas(args.atlas)
    except OSError as exc:
        raise FileNotFoundError(f"{args.atlas}: {exc.strerror}") from None


def _maslov_block(args) -> MaslovBlock | None:
    cfg = load_config(args.config) if args.config else None
    block = cfg.maslov if cfg is not None else None
    if args.k is not None:
        if not args.k > 0:
            raise ConfigError("--k: must be positive")
        block = MaslovBlock(k=args.k) if block is None else MaslovBlock(args.k, block.radius_factor,
                                                                          block.tile_width)
    return block


def _field(atlas, block: MaslovBlock | None):
    if block is None:
        return None
    return build_regularized_field(atlas, k=block.k, radius_factor=block.radius_factor,
                                   tile_width=block.tile_width)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# commands ---------------------------------------------------------------------

def cmd_synthesize(args) -> int:
    if not args.config:
        raise ConfigError("--config: required")
    if not args.out:
        raise ConfigError("--out: required (atlas path)")
    cfg = load_config(args.config)
    s = cfg.system_spec()
    report = validate_system(s)
    hard = report.hard_failures
    if hard:
        raise ConfigError("config.system: " + "; ".join(c.message or c.name for c in hard))
    for c in report.failures():
        _log(f"warning: {c.name}: {c.message}")
    try:
        local = solve_local(s, cfg.local.delta_candidates, cfg.local.samples_per_level)
    except LocalSolveError as exc:
        _log(f"local solve failed: {exc}")
        return EXIT_LOCAL
    a = cfg.atlas
    try:
        atlas = build_atlas(s, local, n_xi=a.n_xi, tau_max=a.tau_max, n_tau=a.n_tau, rtol=a.rtol, atol=a.atol,
                            escape_radius=a.escape_radius)
        cloud = detect_caustics(atlas)
    except (AtlasError, ArithmeticError) as exc:
        _log(f"atlas construction failed: {exc}")
        return EXIT_ATLAS
    write_atlas(atlas, args.out)
    summary = {
        "delta": local.delta,
        "margin": local.margin,
        "rays": int(atlas.n_rays),
        "nodes": int(atlas.n_nodes),
        "valid_nodes": int(atlas.valid.sum()),
        "escaped_rays": int(np.sum(atlas.escaped)),
        "caustics": len(cloud),
        "caustics_in_crb": len(cloud.crb),
        "cusps": len(cloud.cusps),
    }
    text = json.dumps({k: (float(fmt(v)) if isinstance(v, float) else v) for k, v in summary.items()}, indent=1)
    Path(str(args.out) + ".report.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    atlas = _load_atlas(args)
    n = atlas.n
    if not args.points:
        raise ConfigError("--points: required")
    X = read_points(args.points, n)
    block = _maslov_block(args)
    header = [f"x{i + 1}" for i in range(n)] + ["status", "B"] + [f"dB{i + 1}" for i in range(n)] + [
        "branch_count", "gap", "critical"]
    if block is not None:
        header += ["B_k"] + [f"dB_k{i + 1}" for i in range(n)] + ["in_bump"]
    fld = _field(atlas, block) if len(X) and block is not None else None
    res = bellman_query_batch(atlas, X) if len(X) else []

    def row(i):
        r = res[i]
        if isinstance(r, OutsideRegion):
            out = [*X[i], "outside region", math.nan, *([math.nan] * n), 0, math.nan, 0]
            return out + ([math.nan] * (n + 1) + [0] if block is not None else [])
        out = [*X[i], "ok", r.value, *r.gradient, r.branch_count, r.gap, r.minimizer_critical or r.tie]
        if block is not None:
            try:
                rv = regularized_bellman(fld, X[i], block.k)
                out += [rv.value, *rv.gradient, rv.in_bump]
            except (MaslovError, LookupError) as exc:
                out[n] = f"maslov: {exc}"
                out += [math.nan] * (n + 1) + [0]
        return out

    write_rows(args.out, header, _map(row, list(range(len(X))), _threads(args)))
    return EXIT_OK


def cmd_maslov(args) -> int:
    atlas = _load_atlas(args)
    n = atlas.n
    if not args.points:
        raise ConfigError("--points: required")
    X = read_points(args.points, n)
    block = _maslov_block(args) or MaslovBlock()
    header = [f"x{i + 1}" for i in range(n)] + ["B", "B_k"] + [f"gradB_k{i + 1}" for i in range(n)] + [
        "chart_id", "in_bump", "status"]
    fld = _field(atlas, block) if len(X) else None

    def row(i):
        try:
            rv = regularized_bellman(fld, X[i], block.k)
        except (MaslovError, LookupError) as exc:
            return [*X[i], math.nan, math.nan, *([math.nan] * n), "", 0, str(exc)]
        return [*X[i], rv.B, rv.value, *rv.gradient, ";".join(str(j) for j in rv.chart_ids), rv.in_bump, "ok"]

    write_rows(args.out, header, _map(row, list(range(len(X))), _threads(args)))
    return EXIT_OK


def _law(atlas, args):
    block = _maslov_block(args)
    fld = _field(atlas, block)
    return FeedbackLaw(atlas.system, atlas.local, atlas, field=fld, k=None if block is None else block.k)


def cmd_feedback(args) -> int:
    atlas = _load_atlas(args)
    n, m = atlas.n, atlas.system.m
    if not args.points:
        raise ConfigError("--points: required")
    X = read_points(args.points, n)
    law = _law(atlas, args) if len(X) else None
    header = [f"x{i + 1}" for i in range(n)] + [f"u{i + 1}" for i in range(m)] + ["region", "status"]

    def row(i):
        x = X[i]
        region = "inner" if law.region(x) == INNER else "outer"
        try:
            u = law(x) if np.any(x) else np.zeros(m)
        except (LookupError, MaslovError) as exc:
            return [*x, *([math.nan] * m), region, "outside synthesized region" if isinstance(
                exc, LookupError) else str(exc)]
        return [*x, *u, region, "ok"]

    write_rows(args.out, header, _map(row, list(range(len(X))), _threads(args)))
    return EXIT_OK


def cmd_simulate(args) -> int:
    atlas = _load_atlas(args)
    n = atlas.n
    cfg = load_config(args.config) if args.config else None
    sim = cfg.simulate if cfg is not None else SimulateBlock()
    X0 = read_points(args.points, n) if args.points else np.array(sim.x0, dtype=float).reshape(-1, n)
    law = _law(atlas, args)
    out_dir = Path(args.out) if args.out else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    def run(i):
        x0 = X0[i]
        r = simulate_closed_loop(law, x0, horizon=sim.horizon, rtol=sim.rtol, atol=sim.atol)
        try:
            gap = optimality_gap(law, x0, r)
        except (RuntimeError, LookupError):
            gap = math.nan
        if out_dir is not None:
            write_trajectory_csv(r, out_dir / f"trajectory_{i:03d}.csv")
        return [i, *x0, r.entry_time, r.cost_to_level, gap, r.total_cost, r.terminal_norm, r.stabilized,
                r.truncated, r.message]

    rows = _map(run, list(range(len(X0))), _threads(args))
    header = ["run"] + [f"x0_{i + 1}" for i in range(n)] + ["entry_time", "cost_to_level", "gap", "total_cost",
                                                           "terminal_norm", "stabilized", "truncated", "message"]
    write_rows(None if out_dir is None else out_dir / "summary.csv", header, rows)
    return EXIT_OK


def cmd_caustics(args) -> int:
    atlas = _load_atlas(args)
    n, d = atlas.n, atlas.d
    cloud = detect_caustics(atlas)
    header = [f"x{i + 1}" for i in range(n)] + [f"p{i + 1}" for i in range(n)] + ["S", "detX", "sheet", "tau"] + [
        f"xi{i + 1}" for i in range(d - 1)] + ["kind", "in_crb"]
    rows = [[*c.x, *c.p, c.S, c.detX, c.sheet, *c.coords, c.kind, c.in_crb] for c in cloud.points]
    write_rows(args.out, header, rows)
    return EXIT_OK


def cmd_check(args) -> int:
    atlas = _load_atlas(args)
    block = _maslov_block(args)
    fld = _field(atlas, block)
    report = run_checks(atlas, fld, seed=args.seed)
    doc = {
        "ok": report.ok,
        "hard_failures": [c.name for c in report.hard_failures],
        "checks": [{"name": c.name, "passed": c.passed, "hard": c.hard, "message": c.message,
                    "worst": None if c.worst is None else float(fmt(c.worst)),
                    "witness": None if c.witness is None else [float(fmt(v)) for v in c.witness]}
                   for c in report.checks],
    }
    text = json.dumps(doc, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    for c in report.checks:
        _log(f"{c.name}: {'pass' if c.passed else 'FAIL'} {c.message}")
    return EXIT_CHECK if report.hard_failures else EXIT_OK


COMMANDS = {
    "synthesize": (cmd_synthesize, "solve locally, build the atlas and write it with a summary report"),
    "eval": (cmd_eval, "Bellman value, gradient and branch data at points (B(x,k) with --k)"),
    "feedback": (cmd_feedback, "composite feedback law at points"),
    "simulate": (cmd_simulate, "closed-loop simulations; trajectory CSVs and a summary"),
    "caustics": (cmd_caustics, "export the caustic cloud"),
    "maslov": (cmd_maslov, "regularized Bellman function B(x,k) at points"),
    "check": (cmd_check, "invariant report; exit 5 if a hard invariant fails"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--atlas", help="atlas file")
    common.add_argument("--out", help="output path (standard output if omitted)")
    common.add_argument("--points", help="points CSV (header row; columns x1..xn)")
    common.add_argument("--k", type=float, help="Maslov parameter k")
    common.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    common.add_argument("--seed", type=int, default=0, help="seed for sampled checks")
    parser = argparse.ArgumentParser(prog="lpfeedback", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fn = COMMANDS[args.command][0]
    try:
        return fn(args)
    except ConfigError as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        _log(f"error: {exc}")
        return EXIT_FILE
    except AtlasError as exc:
        _log(f"error: {exc}")
        return EXIT_ATLAS


if __name__ == "__main__":
    sys.exit(main())
