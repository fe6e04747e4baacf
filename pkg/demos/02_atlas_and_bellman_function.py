"""Building the manifold of optimal rays and querying the Bellman function.

Rays start on the level set {V = delta} with the costate that makes the
Hamiltonian vanish and run backwards in time.  Their projections cover a
region around the level set; the Bellman function B(x) is the smallest
action among the rays reaching x and its gradient is the costate there.
"""

# %%
import numpy as np

from lpfeedback import SystemSpec, bellman_query, build_atlas, solve_local

# scalar oracle: x' = u, cost x^2 + u^2 gives B(x) = x^2 - delta
scalar = SystemSpec.from_strings(1, 1, ["0"], [["1"]], "x1^2", [["1"]])
local = solve_local(scalar, candidates=[0.04])
atlas = build_atlas(scalar, local, tau_max=2.6, n_tau=201)
for x in (0.5, -1.0, 1.8):
    res = bellman_query(atlas, [x])
    print(f"x={x:5.2f}  B={res.value:.12f}  exact={x * x - 0.04:.12f}  dB={res.gradient[0]:.9f}")

# %%
# Points inside the level set, or beyond the rays, are outside the synthesized region.
from lpfeedback import OutsideRegion

for x in (0.1, 50.0):
    try:
        bellman_query(atlas, [x])
    except OutsideRegion as exc:
        print(f"x={x}: {exc}")

# %%
# A two-dimensional system whose rays fold: several rays reach the same x.
pendulum = SystemSpec.from_strings(2, 1, ["x2", "sin(x1)"], [["0"], ["1"]], "x1^2 + x2^2", [["1"]])
local2 = solve_local(pendulum)
atlas2 = build_atlas(pendulum, local2, n_xi=256, tau_max=3.0, n_tau=301, escape_radius=1e3)
print("rays:", atlas2.n_rays, " nodes:", atlas2.n_nodes, " escaped rays:", int(atlas2.escaped.sum()))
print("max |H| on nodes:", np.nanmax(np.abs(atlas2.H)))

# %%
res = bellman_query(atlas2, [4.0, -2.0])
print("B =", res.value, " grad B =", res.gradient, " branches:", res.branch_count)
for b in res.branches:
    print(f"  branch S={b.S:.6f}  tau={b.tau:.4f}  xi={b.xi}  detX={b.detX:.3e}")
