"""Estimate event probabilities on the ten-service stochastic model.

A short run count keeps this under a minute; the acceptance tests use the
full Chernoff-Hoeffding count for a 0.005 half-width.
"""

import sys

from carecheck import smc
from carecheck.cli import data_dir
from carecheck.protocol import load_params

runs = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
params = load_params(data_dir() / "paper-smc.params")
print(f"full count for alpha=0.05, eps=0.005: {smc.chernoff_runs(0.05, 0.005)} runs")

for label, p, query in [
    ("some buffer fills (q=5)", params, "Pr[<=500](<> exists i: isFull(i))"),
    ("some buffer fills (q=3)", params.with_(queue_size=3), "Pr[<=500](<> exists i: isFull(i))"),
    ("a timeout fires", params, "Pr[<=500](<> anyTimeout)"),
]:
    r = smc.run_query(p, query, epsilon=0.02, seed=1, runs=runs)
    iv = r.interval
    print(f"{label:26s} p_hat={iv.p_hat:.4f}  [{iv.lo:.4f}, {iv.hi:.4f}]  {r.duration:.1f}s")

cells = smc.run_query(params.with_(queue_size=10),
                      "E[<=500; 300](max: sum i: len(orc2services[i]))", seed=1)
print(f"expected peak of occupied cells (q=10): {cells.mean:.2f} "
      f"(95% CI {cells.ci95[0]:.2f}..{cells.ci95[1]:.2f})")
