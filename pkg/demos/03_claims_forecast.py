"""Forecast outstanding claims from a monthly run-off triangle.

The bundled triangle is synthetic (264 months, 1516 claims).  Counts in
the first four calendar months of each year are scaled up, the cells are
jittered into points on the unit triangle, and the components are fitted
in two stages: a narrow bandwidth finds the seasonal shape, a wide one
refits f1 and f2 with that shape frozen.  The fitted product then gives
expected counts in the unobserved cells.
"""

import numpy as np

from insample.claims import SYNTHETIC_FIXTURE, RunOffTriangle, run_claims

tri = RunOffTriangle.read_csv(SYNTHETIC_FIXTURE)
run = run_claims(tri, seed=0)
print(f"{tri.total} claims, {run.triangle.total} after augmentation, J = {run.window.J:g}")

f3 = run.result.previous.f3
print(f"stage-1 seasonal peak at phase {f3.nodes[np.argmax(f3.values)]:.3f} "
      "(the boosted months cover phases below 0.333)")

table = run.forecast
print(f"expected future claims: {table.total:.1f}")
per = table.by_period()
print("first six future calendar months:")
for p in sorted(per)[:6]:
    print(f"  +{p:3d}: {per[p]:7.2f}")
