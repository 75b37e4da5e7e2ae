"""Simulate one trial, fit a PATS signature and look at the learned rule.

Run with ``python demos/01_simulate_and_fit.py``.
"""

import numpy as np

from trajitr.policy import decide_many, evaluate, fit_itr
from trajitr.simulate import MissingnessSpec, SimScenario, simulate, true_alpha

# 100 subjects per arm, 8 weekly visits, roughly half of them dropping out early
scenario = SimScenario(p=2, theta_degrees=5.0, seed=11, missingness=MissingnessSpec.dropout())
train = simulate(scenario)
print(f"training set: {train.n} subjects, {sum(r.m for r in train.records)} observed visits")

itr = fit_itr(train, "pats")
sig = itr.signature
print("estimated alpha:", np.round(sig.alpha, 3), "| truth:", np.round(true_alpha(2), 3))
print(f"converged={sig.converged} after {sig.iterations} outer iterations")

# the rule compares the two arms' average tangent slopes at each covariate vector
X = np.array([[1.0, 1.0], [-1.0, -1.0], [2.0, -0.5]])
print("index values:", np.round(X @ sig.alpha, 3))
print("ATS per arm:\n", np.round(itr.ats(X @ sig.alpha), 3))
print("decisions:", decide_many(itr, X))

# score the rule on a large complete test trial drawn from the same model
test = simulate(scenario.with_(seed=12, n_per_group=500, missingness=MissingnessSpec.none()))
report = evaluate(itr, test)
print(f"test value {report.value:.3f}, agreement with the oracle rule {report.pcd:.3f}")
