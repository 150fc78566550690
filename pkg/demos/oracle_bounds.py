"""How much can auxiliary predictions help, asymptotically?

For the simulation design the efficiency bounds of both estimators are
available by Monte Carlo with the true nuisance functions. The ratio of the
two bounds is the asymptotic relative efficiency. It grows with the
prediction signal and vanishes once the prediction is a function of the
covariates (correlation one).
"""

import numpy as np

from acpshift import DgpSpec, ScoreModel
from acpshift.oracle import cached_bounds

MC_N = 400_000

print(" alpha  zeta   bound with   bound without    ratio")
for zeta in (0.0, 0.6, 1.0):
    for alpha in (0.0, 1.0, 3.0, 5.0):
        ob, _, _ = cached_bounds(DgpSpec(alpha_signal=alpha, zeta=zeta), ScoreModel.mean(), MC_N, 0)
        bw, bwo = ob.bound_w[0, 0], ob.bound_wo[0, 0]
        print(f"{alpha:6.1f} {zeta:5.1f} {bw:12.2f} {bwo:15.2f} {bwo / bw:8.2f}")

# The gain matrix is positive semidefinite for any estimand; check the
# six-dimensional least-squares projection too.
ob, _, _ = cached_bounds(DgpSpec(zeta=0.6), ScoreModel.linear(5), MC_N, 0)
print("\nlinear projection, zeta=0.6: smallest gain eigenvalue "
      f"{np.linalg.eigvalsh(ob.gain)[0]:.3g}, routes agree: {ob.consistent()}")
