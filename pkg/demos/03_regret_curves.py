"""A reduced version of the regret experiment, written as CSV.

Averages coupled runs for the three excitation decays and prints how the
average regret per step falls with the horizon.  The full-size experiment
is ``sttmpc run``; this script uses fewer runs so it finishes in a couple
of minutes.  Run with ``python3 demos/03_regret_curves.py [n_runs] [T]``.
"""
import os
import sys

from sttmpc.cli import alpha_label, atomic_write, regret_csv
from sttmpc.config import load_config, shipped_config_path
from sttmpc.simulation import monte_carlo

n_runs = int(sys.argv[1]) if len(sys.argv) > 1 else 5
T = int(sys.argv[2]) if len(sys.argv) > 2 else 200
cfg = load_config(shipped_config_path())
summary = monte_carlo(cfg.closed_loop(), T, n_runs, cfg.alphas,
                      cfg.master_seed)

out = "demo_results"
os.makedirs(out, exist_ok=True)
for a, alpha in enumerate(summary.alphas):
    path = os.path.join(out, f"regret_alpha{alpha_label(alpha)}.csv")
    atomic_write(path, regret_csv(summary.mean[a], summary.sem[a], n_runs))
    print(f"alpha={alpha:<5g}", "  ".join(
        f"R_{t}/{t}={summary.mean[a][t - 1] / t:.4f}"
        for t in (T // 4, T // 2, T)), f"  -> {path}")

# %% Plot with, for example:
# gnuplot -p -e "set datafile separator ','; plot for [a in '0.01 0.5 0.99'] \
#   'demo_results/regret_alpha'.a.'.csv' every ::1 using 1:2 with lines title a"
