"""Walk through the ingredients of the tube controller on the benchmark.

Run with ``python3 demos/01_template_and_tube.py``.
"""
import numpy as np

from sttmpc.config import load_config, shipped_config_path
from sttmpc.geometry import is_lambda_contractive
from sttmpc.tube_mpc import build_tube, solve_mpc, terminal_cost

cfg = load_config(shipped_config_path())
print("A =", cfg.A.tolist(), " B =", cfg.B.ravel().tolist())
print("initial estimate theta0 =", cfg.theta0.tolist())

# %% The uncertainty box has 2^6 corners; every one must be stabilised by K.
verts = cfg.vertices()
radii = [np.abs(np.linalg.eigvals(
    v[:4].reshape(2, 2) + v[4:].reshape(2, 1) @ cfg.K)).max() for v in verts]
print(f"{len(verts)} vertices, worst closed-loop spectral radius {max(radii):.4f}")

# %% The tube template: a polytope {x : T x <= 1} shrunk until every vertex
# dynamics maps it into lambda times itself.
tpl = cfg.template()
ok, margins = is_lambda_contractive(tpl.T, verts, cfg.K, cfg.lam)
print(f"template has {tpl.d_alpha} facets; contractive: {ok}, "
      f"smallest margin {margins.min():.3f}")

# %% Tube data for the initial box: one H matrix per vertex, plus the noise
# margins that shrink with the excitation level.
mpc = cfg.mpc_config()
sigma0 = cfg.closed_loop(0.5, mpc).sigma_t(0)
tube = build_tube(cfg.Theta0, mpc, sigma0).with_terminal(
    terminal_cost(cfg.theta0_param, mpc))
print(f"{tube.m} distinct vertices; w_bar max {tube.w_bar.max():.4f}, "
      f"zeta_bar max {tube.zeta_bar.max():.4f}")

# %% The first tube MPC problem from x0.
sol = solve_mpc(cfg.x0, cfg.theta0_param, tube, mpc)
print("feasible:", sol.feasible, " objective:", round(sol.objective, 4))
print("first correction v_0 =", sol.v0.round(4).tolist())
print("predicted states:")
for k, x in enumerate(sol.x_pred):
    print(f"  k={k:2d}  x=({x[0]:+.3f}, {x[1]:+.3f})")
