"""
Following a minimizer while the task changes
============================================

If a task moves smoothly from t0 to t1, the optimal weights move too.
Differentiating the optimality condition gives an ODE,
``dtheta/dg = -H^-1 (d2L/dtheta dt) dt/dg``; integrating it with RK4 carries a
minimizer from one task to the other without re-training.
"""

import numpy as np

from hypergen.checks import logistic_instance, newton_minimize
from hypergen.oracles import QuadraticFamily, TaskCurve, ode_track

# a quadratic bowl whose centre is A t: the path is a straight line
A = np.random.default_rng(0).normal(size=(4, 3))
t0, t1 = np.zeros(3), np.array([1.0, -2.0, 0.5])
tracked = ode_track(TaskCurve(QuadraticFamily(A), t0, t1), A @ t0)
print("quadratic: |tracked - A t1| =", np.abs(tracked - A @ t1).max())

# Logistic regression whose class means drift apart.
family, t0, t1 = logistic_instance()
start = newton_minimize(family, t0, np.zeros(family.X.shape[1] + 1))
for steps in (5, 20, 100):
    end = ode_track(TaskCurve(family, t0, t1), start, steps=steps)
    direct = newton_minimize(family, t1, end)
    print(f"{steps:4d} RK4 steps: |tracked - re-optimized| = {np.linalg.norm(end - direct):.2e}, "
          f"gradient norm {np.linalg.norm(family.grad(end, t1)):.2e}")
