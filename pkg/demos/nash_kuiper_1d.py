"""The outer iteration on a 1-D strip: each stage shrinks the deficit while the
second derivatives grow. On a 2^18 grid two stages reach the tolerance; a third
stage would need a mollification scale below two grid cells.
"""

from maci.corrugation import vk_form
from maci.errors import MaciError
from maci.fields import Domain, GridField, constant, sample, symmatrix, vector
from maci.iteration import NKParams, nash_kuiper

dom = Domain.box(1, 2**18, 60000)
v = sample(dom, lambda x: [0.2 * x**2], vector(1))
w = constant(dom, [0.0], vector(1))
A = vk_form(v, w) + constant(dom, [0.05], symmatrix(1))
A = GridField(dom, A.shape, A.data, 0)
params = NKParams(0.2, 1.0, 1.0, sigma=32.0, tol_deficit=2e-3)
try:
    _, _, trace = nash_kuiper(v, w, A, params)
except MaciError as exc:
    trace = exc.trace
    print(f"stopped: {exc}")
for row in trace.rows:
    print(f"stage {row['stage']:2d}  deficit {row['deficit_sup']:.3e}  |D2 v| {row['hess_v']:.3e}  "
          f"C1 increment {row['c1_incr']:.3e}")
print(f"stopped by {trace.stopped}; per-stage decay ratio {trace.decay_ratio():.3f}")
