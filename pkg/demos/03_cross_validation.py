"""Repeated stratified cross-validation of a fitted rule on a single trial.

Without a known truth the IPWE of held-out change scores is the yardstick.
Run with ``python demos/03_cross_validation.py``.
"""

import numpy as np

from trajitr.policy import cross_validate
from trajitr.signature import EstimationOptions
from trajitr.simulate import MissingnessSpec, SimScenario, simulate

data = simulate(SimScenario(p=2, theta_degrees=5.0, seed=31, missingness=MissingnessSpec.dropout()))
res = cross_validate(data, "mle", folds=10, repeats=5, seed=7, options=EstimationOptions(n_restarts=0))

print("fold IPWE matrix (repeats x folds):")
print(np.round(res.ipwe, 2))
s = res.summary()
print(f"MLE rule: mean {s['mean']:.3f}, median {s['median']:.3f}, sd {s['sd']:.3f} over {s['n']} folds")
for k in (1, 2):
    print(f"everyone to arm {k}: median {np.nanmedian(res.uniform[k]):.3f}")
print(f"folds that converged: {int(res.converged.sum())} / {res.converged.size}")
