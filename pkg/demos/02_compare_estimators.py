"""Compare NPATS, PATS and MLE against the true-index rule over a few replications.

The fixed-effect ATS of the two arms is identical on average, so a rule only
helps when it picks up the covariate moderation. Run with
``python demos/02_compare_estimators.py [reps]``.
"""

import sys
import time

import numpy as np

from trajitr.policy import evaluate, fit_itr, uniform_policy_value
from trajitr.simulate import MissingnessSpec, SimScenario, simulate, true_alpha

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 5
p = 4
methods = ("fixed", "npats", "pats", "mle")
values = {m: [] for m in methods}
agree = {m: [] for m in methods}
cosines = {m: [] for m in methods}
baseline = {1: [], 2: []}
elapsed = {m: 0.0 for m in methods}

for rep in range(reps):
    sc = SimScenario(p=p, theta_degrees=5.0, seed=100 + rep, missingness=MissingnessSpec.mcar(0.4))
    train = simulate(sc)
    test = simulate(sc.with_(seed=900 + rep, n_per_group=500, missingness=MissingnessSpec.none()))
    u = test.potential_change_scores()[np.arange(test.n), test.groups - 1]
    for k in (1, 2):
        baseline[k].append(uniform_policy_value(k, test.groups, u))
    for m in methods:
        start = time.perf_counter()
        itr = fit_itr(train, m, alpha=true_alpha(p)) if m == "fixed" else fit_itr(train, m)
        elapsed[m] += time.perf_counter() - start
        rep_ = evaluate(itr, test)
        values[m].append(rep_.value)
        agree[m].append(rep_.pcd)
        cosines[m].append(abs(itr.signature.alpha @ true_alpha(p)))

print(f"{reps} replications, p={p}, theta=5 degrees, 40% MCAR")
print(f"{'rule':<12}{'value':>9}{'sd':>8}{'pcd':>8}{'|cos|':>8}{'sec/fit':>9}")
for m in methods:
    label = "true alpha" if m == "fixed" else m
    print(f"{label:<12}{np.mean(values[m]):9.3f}{np.std(values[m], ddof=1) if reps > 1 else 0:8.3f}"
          f"{np.mean(agree[m]):8.3f}{np.mean(cosines[m]):8.3f}{elapsed[m] / reps:9.2f}")
for k in (1, 2):
    print(f"{'all to ' + str(k):<12}{np.mean(baseline[k]):9.3f}")
