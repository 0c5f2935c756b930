"""A corrugation stage trades deficit for curvature.

For sigma = 2..16 the second derivatives of v grow like sigma^(d*/k) while the
deficit decays like 1/sigma. The top frequencies are measured in fine windows.
"""

import numpy as np

from maci.cli import stage_test_data
from maci.matdecomp import dstar
from maci.stage import stage_corrugation_zoom

sigmas = [2.0, 4.0, 8.0, 16.0]
for k in (1, 3):
    v, w, A = stage_test_data(2, k, 128, 24)
    hess, dtil = [], []
    print(f"d=2 k={k}: expected growth exponent d*/k = {dstar(2) / k:g}")
    for s in sigmas:
        _, _, rep = stage_corrugation_zoom(v, w, A, sigma=s)
        hess.append(rep.hess_v)
        dtil.append(rep.D_tilde_norm)
        print(f"  sigma={s:4g}  |D2 v~| {rep.hess_v:10.3f}  |D~| {rep.D_tilde_norm:.3e}  top lambda {rep.lambdas[-1]:.0f}")
    g = np.polyfit(np.log(sigmas), np.log(hess), 1)[0]
    print(f"  fitted growth exponent {g:.3f}")
