"""Eigenvalue against nearby non-eigenvalue.

Replays the default stage-1 run at its anchor energy and at energies
detuned by multiples of the splitting.  The anchor's accumulated norm
levels off, the detuned ones keep growing linearly in x.

    python demos/discrimination.py
"""

import numpy as np

from cantor_prufer.construction import builtin_profile, run_construction
from cantor_prufer.engine import run_probe

state, _ = run_construction(builtin_profile("default"), max_stage=1)
tr = state.stages[0].traj
pair = tr.stage.pairs[0]
k = pair.k_lo.value
offsets = [0.0, -1e1, -1e2, -1e3]
res = run_probe(tr, [k + m * pair.delta_k for m in offsets])

marks = np.searchsorted(res.x, [tr.stage.drive_end, 0.5 * (tr.stage.drive_end + tr.x_end),
                                tr.x_end - 1.0])
print("detuning / dk   ||R||^2 at drive end, midway, run end")
for i, m in enumerate(offsets):
    n = res.probes[marks, i, 3]
    print(f"{m:>12g}   " + "  ".join(f"{v:.6g}" for v in n))
