"""One closed-loop run of the self-tuning controller against the oracle.

Both controllers see the same disturbance sequence; the difference of their
stage costs accumulates into the regret.  Run with
``python3 demos/02_single_run.py [alpha] [T]``.
"""
import sys

import numpy as np

from sttmpc.config import load_config, shipped_config_path
from sttmpc.estimation import run_streams
from sttmpc.simulation import (compute_regret, draw_disturbances, run_oracle,
                               run_stt_mpc)

alpha = float(sys.argv[1]) if len(sys.argv) > 1 else 0.5
T = int(sys.argv[2]) if len(sys.argv) > 2 else 150
cfg = load_config(shipped_config_path())
loop = cfg.closed_loop(alpha)
seed = 7

dist_rng, _ = run_streams(seed, 0)
w = draw_disturbances(T, loop.sigma, dist_rng, 2)
log = run_stt_mpc(loop, T, seed, disturbances=w)
star = run_oracle(loop, T, w)
R = compute_regret(log, star, loop.mpc.Q, loop.mpc.R).regret

print(f"alpha={alpha}, T={T}, estimates trusted from t={log.t_star}")
print(" t      x1      x2       u    |theta_t-theta*|   regret")
for t in list(range(0, 10)) + list(range(10, T, max(1, T // 10))):
    print(f"{t:3d} {log.x[t, 0]:+7.3f} {log.x[t, 1]:+7.3f} {log.u[t, 0]:+7.3f}"
          f"   {log.theta_err[t]:.4f}            {R[t]:8.4f}")

# the three constraints as margins (positive = satisfied)
print("smallest margins: x1 + 0.15 =", round(log.x[:-1, 0].min() + 0.15, 4),
      " x2 + 1.1 =", round(log.x[:-1, 1].min() + 1.1, 4),
      " 0.5 - u =", round(0.5 - log.u.max(), 4))
print("steps that fell back to an older estimate:", log.n_fallback)
print(f"final regret {R[-1]:.4f}; R_T/T = {R[-1] / T:.5f}")
