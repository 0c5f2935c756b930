"""Curvature algebra: C2 kills symmetric gradients, C2(grad v^T grad v) = -2 Det D2 v,
and invert_c2 recovers a preimage of a compatible curvature field.
"""

from maci.cli import roundtrip_data
from maci.corrugation import vk_form
from maci.fields import Domain, constant, sample, sup_norm, vector
from maci.masystem import c2_operator, check_compatibility, det_hessian, invert_c2, kernel_certificate, sym_grad

dom = Domain.box(2, 32, 8)
w = sample(dom, lambda x, y: [x * y - y**3, x**2 + 0.5 * x * y], vector(2))
print(f"|C2(sym grad w)|         = {sup_norm(c2_operator(sym_grad(w))):.2e}")

v = sample(dom, lambda x, y: [x**3 - x * y, y**2 + x * y**2], vector(2))
gram = vk_form(v, constant(dom, [0.0, 0.0], vector(2))) * 2.0
print(f"|C2(Dv^T Dv) + 2 Det D2v| = {sup_norm(c2_operator(gram) + det_hessian(v) * 2.0):.2e}")

for n in (64, 128):
    dom = Domain.box(2, n, 12)
    F = c2_operator(roundtrip_data(dom))
    rep = check_compatibility(F)
    A = invert_c2(F)
    print(f"n={n:4d}: compatibility {rep.algebraic:.1e}/{rep.relative_differential:.1e}, "
          f"round-trip |C2(A) - F| = {sup_norm(c2_operator(A) - F):.2e}")

# the difference of two preimages is a symmetric gradient
A0 = roundtrip_data(dom)
diff = A0 - A
wd = kernel_certificate(diff.__class__(dom, diff.shape, diff.data, A.halo), tol=1e-4)
print(f"A0 - A = sym grad w up to {sup_norm(sym_grad(wd) - diff):.2e}")
