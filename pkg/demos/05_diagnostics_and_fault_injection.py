"""Invariant checks on an atlas, and what a corrupted atlas looks like.

run_checks reports the Riccati residual, the Hamiltonian on every node,
the action rule along rays, loop integrals of p dx, the Bellman identity
and gradient consistency at sampled points.  Each check carries its worst
value and where it occurred.
"""

# %%
import copy

from lpfeedback import SystemSpec, build_atlas, run_checks, solve_local

system = SystemSpec.from_strings(1, 1, ["x1"], [["1"]], "x1^2", [["1"]])
local = solve_local(system, candidates=[0.04 * (1 + 2 ** 0.5)])
atlas = build_atlas(system, local, tau_max=2.0, n_tau=201)
print(run_checks(atlas, query_count=20))

# %%
# Perturb one stored action value by 1%: the action check flags it with a witness.
bad = copy.deepcopy(atlas)
bad.S[1, 120] *= 1.01
report = run_checks(bad, query_count=20)
for c in report.hard_failures:
    print("FAILED:", c.name, c.message, "at x =", c.witness)
