"""Caustics and the regularized Bellman function B(x, k).

Where the minimizing ray is about to fold (a caustic inside the optimal
set) B loses smoothness.  Balls around those caustic points are blended
with a value computed from the phase of an oscillatory integral over the
manifold (the canonical operator at frequency k).  Outside the balls
B(x, k) = B(x) exactly; inside, the difference is at most pi / k.
"""

# %%
import numpy as np

from lpfeedback import SystemSpec, build_atlas, build_regularized_field, detect_caustics, regularized_bellman, solve_local

pendulum = SystemSpec.from_strings(2, 1, ["x2", "sin(x1)"], [["0"], ["1"]], "x1^2 + x2^2", [["1"]])
local = solve_local(pendulum)
atlas = build_atlas(pendulum, local, n_xi=256, tau_max=3.0, n_tau=301, escape_radius=1e3)

cloud = detect_caustics(atlas)
print("caustic points:", len(cloud), " on the optimal set:", len(cloud.crb), " cusps:", len(cloud.cusps))

# %%
field = build_regularized_field(atlas, cloud, k=200.0)
print("bumps:", len(field.cover))
for c, r in zip(field.cover.centers, field.cover.radii):
    print("  center", c, "radius", r)

# %%
# Away from the bumps nothing changes.
far = np.array([3.0, 1.0])
rv = regularized_bellman(field, far)
print("off bump: in_bump =", rv.in_bump, " B_k - B =", rv.value - rv.B)

# %%
# Near a bump the value moves by theta / k, with theta the phase of the operator.
x = field.cover.centers[0] + 0.3 * field.cover.radii[0] * np.array([1.0, 0.0])
field.prefetch(x[None])
for k in (100.0, 200.0, 400.0):
    rv = regularized_bellman(field, x, k)
    print(f"k={k:5.0f}  B={rv.B:.8f}  B_k={rv.value:.8f}  |B_k - B|={abs(rv.value - rv.B):.2e}"
          f"  bound pi/k={np.pi / k:.2e}")
