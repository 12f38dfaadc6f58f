"""Smooth attention still interpolates exactly: the ReLU collapse layers restore exactness.

    python3 demos/softmax_temperatures.py
"""

import numpy as np

from interp_forge import build_softmax
from interp_forge.io import random_dataset

D = random_dataset(np.random.default_rng(42), d=3, N=3, n_max=6)
T, rep, plan = build_softmax(D)

print(f"m = {D.m}, blocks {rep.L} (bound {rep.bound_L})")
print("temperature per calibrated attention layer:", [f"{t:g}" for t in plan.taus])
g = rep.extras["global_tau"]
print(f"rebuilding with tau_min = {g['tau']:g} everywhere:", "ok" if g["passed"] else f"fallback ({g['reason']})")

print(f"\nleader balls have radius delta = {plan.delta:.3g}; "
      f"closest leader projections along w differ by {plan.projection_separation():.3g}")
for k, (s, c, cn) in enumerate(plan.collapse_constants):
    print(f"  collapse layer {k}: s = {s:.3f}, c_pos = {c:.3f}, c_neg = {cn:.3f}")

# each ball lands exactly on the origin, later layers then move it along w as a single point
print("\nafter the collapse stage every sequence holds exactly m distinct tokens:")
for j, (X, m) in enumerate(zip(rep.intermediate_states["collapse"], D.m)):
    print(f"  sequence {j}: {len({tuple(x) for x in X})} distinct (bitwise) of {len(X)}, m = {m}")

print("\nfinal distances:", [f"{d:.1e}" for d in rep.extras["final_distances"]])
