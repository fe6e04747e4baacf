"""Defining a control problem and solving it near the origin.

The problem is x' = f(x) + g(x) u with running cost eps(x) + <u, Q(x) u>.
Each entry is an expression string over x1..xn.  Near the origin the
linearized problem is solved exactly (Riccati equation) and a level set
{V = <x, P x> <= delta} is chosen on which the linear law u = Kx still
decreases V for the full nonlinear system.
"""

# %%
import numpy as np

from lpfeedback import SystemSpec, solve_local, validate_system

# a pendulum-like system: x1' = x2, x2' = sin(x1) + u
pendulum = SystemSpec.from_strings(2, 1, ["x2", "sin(x1)"], [["0"], ["1"]], "x1^2 + x2^2", [["1"]])
print(validate_system(pendulum))

# %%
# Bad input is reported with a witness point and the offending value.
broken = SystemSpec.from_strings(1, 1, ["x1 + 1"], [["1"]], "x1^2", [["1"]])
report = validate_system(broken)
for check in report.hard_failures:
    print("hard failure:", check.name, check.message)

# %%
# Local solution: P solves the Riccati equation, K = -Q(0)^-1 g(0)^T P.
local = solve_local(pendulum)
print("P =\n", local.P)
print("K =", local.K)
print("delta =", local.delta, " decrease margin =", local.margin)

# P has the closed form [[2 + r, 1 + r], [1 + r, 1 + r]] with r = sqrt(2).
r = np.sqrt(2.0)
print("closed form error:", np.abs(local.P - [[2 + r, 1 + r], [1 + r, 1 + r]]).max())

# %%
# Inside the level set V decreases along x' = f + g K x.
rng = np.random.default_rng(0)
pts = rng.normal(size=(5, 2))
pts *= np.sqrt(local.delta / local.V(pts))[:, None] * 0.9
F, G, _, _ = pendulum.arrays(pts)
xdot = F + np.einsum("pij,pj->pi", G, local.w(pts))
print("dV/dt at interior points:", np.einsum("pi,pi->p", local.gradV(pts), xdot))
