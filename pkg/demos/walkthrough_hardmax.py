"""Follow one small dataset through the four construction stages.

    python3 demos/walkthrough_hardmax.py
"""

import numpy as np

from interp_forge import build_hardmax, hausdorff_distance
from interp_forge.core import Dataset
from interp_forge.construction import hardmax_bound

# The second input is the first plus one token strictly inside their common triangle,
# so separating them needs the width-4 layer.  Outputs have 1, 1 and 2 tokens.
triangle = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]])
inputs = [
    triangle,
    np.vstack([triangle, [[0.5, 0.5]]]),
    np.array([[-1.0, 2.0], [-2.0, 1.5], [-1.5, 3.0]]),
]
outputs = [np.array([[3.0, 3.0]]), np.array([[-3.0, 0.0]]), np.array([[0.0, -2.0], [1.0, -2.0]])]
D = Dataset(inputs, outputs)

T, rep = build_hardmax(D)

print(f"blocks used {rep.L}, bound {hardmax_bound(D.m)}, parameters {rep.P}")
for stage, count in rep.blocks_per_step().items():
    widths = sorted({e["ff_width"] for e in rep.ledger if e["step"] == stage})
    print(f"  {stage:17s} {count} blocks, FF widths {widths}")

print("\ndistinct tokens per sequence after each stage")
for stage, states in rep.intermediate_states.items():
    counts = [len({tuple(np.round(x, 9)) for x in X}) for X in states]
    print(f"  {stage:17s} {counts}")

print("\nfirst leader at R*1 (norm R*sqrt(d)), the others on the sphere of radius R in the negative orthant:")
for j, (R, idx) in enumerate(zip(rep.extras["radii"], rep.extras["leaders"])):
    placed = rep.intermediate_states["leader_selection"][j][idx]
    print(f"  sequence {j}: R = {R:.3f}, leader norms {np.round(np.linalg.norm(placed, axis=1), 3)}")

print("\nfinal Hausdorff distances:", [f"{hausdorff_distance(T(X), Y):.1e}" for X, Y in D.pairs()])
