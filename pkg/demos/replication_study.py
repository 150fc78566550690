"""A small replication study of the efficiency gain.

Runs paired replications (both estimators on the same data) at a few
signal strengths and reports mean squared error, coverage and the
empirical relative efficiency. Use more replications for stable numbers;
the command-line tool runs full grids from an INI file
(see configs/figure_sweep.ini).
"""

from dataclasses import replace

from acpshift import DgpSpec
from acpshift.simulation import SimConfig, run_replications

base = SimConfig(n=300, N=300, replications=100, seed=0, fast_mode=True, mc_n=400_000)

print(" alpha   MSE with  MSE without    ARE  cover with  cover without")
for alpha in (0.0, 2.0, 5.0):
    cfg = replace(base, spec=DgpSpec(alpha_signal=alpha))
    s = run_replications(cfg)
    print(f"{alpha:6.1f} {s.mse_with[0]:10.3f} {s.mse_without[0]:12.3f} {s.are[0]:6.2f}"
          f" {s.coverage_with[0]:11.2f} {s.coverage_without[0]:14.2f}")
