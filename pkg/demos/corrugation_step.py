"""One corrugation step: the metric increment a^2 eta (x) eta is added up to an O(1/lambda) error.

Prints the sup residual of the step identity under grid refinement (4th-order stencils)
and the leftover error field against lambda.
"""

import math

import numpy as np

from maci.corrugation import StepSpec, corrugation_error, corrugation_step, step_residual
from maci.fields import Domain, constant, sample, sup_norm, vector

print("grid refinement at lambda = 8 pi")
prev = None
for n in (64, 128, 256):
    dom = Domain.box(2, n, 6)
    v = sample(dom, lambda x, y: [x**2], vector(1))
    w = constant(dom, [0.0, 0.0], vector(2))
    a = sample(dom, lambda x, y: np.sin(2 * np.pi * y))
    spec = StepSpec(a, [0.6, 0.8], [1.0], 8 * np.pi)
    v2, w2 = corrugation_step(v, w, spec)
    r = sup_norm(step_residual(v, w, v2, w2, spec))
    order = "" if prev is None else f"  order {math.log(prev / r) / math.log(2):.2f}"
    print(f"  n={n:4d}  residual {r:.3e}{order}")
    prev = r

print("error field against lambda (n=512)")
dom = Domain.box(2, 512, 6)
v = sample(dom, lambda x, y: [x**2], vector(1))
a = sample(dom, lambda x, y: np.sin(2 * np.pi * y))
for lam in (16, 32, 64, 128):
    spec = StepSpec(a, [0.6, 0.8], [1.0], float(lam))
    E = corrugation_error(v, spec)
    print(f"  lambda={lam:4d}  |E| = {np.abs(E[(slice(None),) + dom.interior]).max():.3e}")
