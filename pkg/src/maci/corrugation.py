"""Oscillatory steps that add a rank-one term to the stretching content.

A corrugation step with amplitude ``a``, direction ``eta``, codimension axis
``E`` and frequency ``lam`` changes ``1/2 grad(v)^T grad(v) + sym grad(w)`` by
``a^2 eta (x) eta`` plus explicit error terms of order ``1/lam``.  A spiral
step uses two orthogonal axes and adds ``1/2 a^2 eta (x) eta``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ResolutionError, ValidationError
from .fields import GridField, hessian, jacobian, pack_sym, sym_pairs, symmatrix, vector

RESOLVABILITY = 0.5


# --------------------------------------------------------------------------
# profiles


def gamma(t):
    return 2.0 * np.sin(t)


def gamma_bar(t):
    return -0.5 * np.cos(2.0 * t)


def gamma_dbar(t):
    return -0.5 * np.sin(2.0 * t)


def dgamma(t):
    return 2.0 * np.cos(t)


def dgamma_bar(t):
    return np.sin(2.0 * t)


def dgamma_dbar(t):
    return -np.cos(2.0 * t)


def g(t):
    return np.sin(t)


def g_bar(t):
    return np.cos(t)


def profile_residuals(t) -> dict:
    """Pointwise defects of the algebraic identities tying the profiles together."""
    t = np.asarray(t, dtype=float)
    return {
        "unit": 0.5 * dgamma(t) ** 2 + dgamma_dbar(t) - 1.0,
        "cancel": dgamma(t) * gamma(t) - dgamma_bar(t) + 2.0 * gamma_dbar(t),
        "square": 0.5 * gamma(t) ** 2 - gamma_bar(t) - (1.0 - 0.5 * np.cos(2.0 * t)),
        "circle": g(t) ** 2 + g_bar(t) ** 2 - 1.0,
    }


# --------------------------------------------------------------------------
# specs and helpers


@dataclass(frozen=True, eq=False)
class StepSpec:
    a: GridField
    eta: np.ndarray
    E: np.ndarray
    lam: float
    E2: np.ndarray | None = None

    def __post_init__(self):
        eta = np.asarray(self.eta, dtype=float)
        E = np.asarray(self.E, dtype=float)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "E", E)
        if abs(np.linalg.norm(eta) - 1) > 1e-12 or abs(np.linalg.norm(E) - 1) > 1e-12:
            raise ValidationError("eta and E must be unit vectors")
        if not self.lam > 0:
            raise ValidationError("frequency must be positive")
        if self.a.shape.kind != "scalar":
            raise ValidationError("amplitude must be a scalar field")
        if self.E2 is not None:
            E2 = np.asarray(self.E2, dtype=float)
            object.__setattr__(self, "E2", E2)
            if abs(np.linalg.norm(E2) - 1) > 1e-12 or abs(E2 @ E) > 1e-12:
                raise ValidationError("spiral axes must be orthonormal")


def phase(domain, eta, lam) -> np.ndarray:
    """lam * <x, eta> on the grid (global coordinates)."""
    mesh = domain.mesh()
    return lam * sum(e * x for e, x in zip(eta, mesh))


def check_resolvable(lam: float, h: float) -> None:
    if lam * h > RESOLVABILITY + 1e-12:
        raise ResolutionError(
            f"frequency {lam:.4g} not resolved on grid h={h:.4g} (lam*h = {lam * h:.3g} > {RESOLVABILITY}); "
            "use a larger n or a smaller sigma"
        )


def _check_vw(v: GridField, w: GridField) -> tuple:
    d = v.domain.d
    if v.shape.kind != "vector" or w.shape != vector(d) or w.domain != v.domain:
        raise ValidationError("v must be a vector(k) field and w a vector(d) field on the same domain")
    return d, v.shape.dim


def vk_array(v: np.ndarray, w: np.ndarray, d: int, h: float) -> np.ndarray:
    """Packed 1/2 grad(v)^T grad(v) + sym grad(w) for raw arrays."""
    Jv = jacobian(v, d, h)
    Jw = jacobian(w, d, h)
    M = 0.5 * np.einsum("ka...,kb...->ab...", Jv, Jv) + 0.5 * (Jw + np.swapaxes(Jw, 0, 1))
    return pack_sym(M)


def vk_form(v: GridField, w: GridField) -> GridField:
    d, _ = _check_vw(v, w)
    return GridField(v.domain, symmatrix(d), vk_array(v.data, w.data, d, v.domain.h), max(v.halo, w.halo) + 2)


def deficit(v: GridField, w: GridField, A: GridField) -> GridField:
    return A - vk_form(v, w)


def _dyad(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Packed sym(x (x) y) for (d, *grid) or (d,) inputs broadcast to grids."""
    d = x.shape[0]
    return np.stack([0.5 * (x[i] * y[j] + x[j] * y[i]) for i, j in sym_pairs(d)])


# --------------------------------------------------------------------------
# corrugation


def _corrugation_increments(v: GridField, spec: StepSpec):
    dom = v.domain
    d = dom.d
    h = dom.h
    lam = spec.lam
    check_resolvable(lam, h)
    t = phase(dom, spec.eta, lam)
    a = spec.a.data[0]
    vE = np.tensordot(spec.E, v.data, axes=(0, 0))
    grad_vE = jacobian(vE, d, h)
    grad_a = jacobian(a, d, h)
    dv = np.multiply.outer(spec.E, a * gamma(t) / lam)
    eta = spec.eta.reshape((d,) + (1,) * d)
    dw = (-(a * gamma(t) / lam) * grad_vE
          - (a * gamma_bar(t) / lam**2) * grad_a
          + (a * a * gamma_dbar(t) / lam) * eta)
    return dv, dw


def _check_spec(v, w, spec):
    d, k = _check_vw(v, w)
    if spec.a.domain != v.domain:
        raise ValidationError("amplitude lives on a different domain")
    if spec.eta.shape != (d,) or spec.E.shape != (k,):
        raise ValidationError(f"spec shapes {spec.eta.shape}, {spec.E.shape} do not match d={d}, k={k}")


def corrugation_step(v: GridField, w: GridField, spec: StepSpec) -> tuple:
    _check_spec(v, w, spec)
    dv, dw = _corrugation_increments(v, spec)
    halo_v = max(v.halo, spec.a.halo)
    halo_w = max(w.halo, v.halo + 2, spec.a.halo + 2)
    return (GridField(v.domain, v.shape, v.data + dv, halo_v),
            GridField(w.domain, w.shape, w.data + dw, halo_w))


def multi_corrugation_step(v: GridField, w: GridField, specs) -> tuple:
    """Simultaneous corrugations along orthonormal axes E_i, all linearised at v."""
    specs = list(specs)
    if not specs:
        return v, w
    for s in specs:
        _check_spec(v, w, s)
    k = v.shape.dim
    if len(specs) > k:
        raise ValidationError(f"at most k={k} simultaneous corrugations")
    Es = np.stack([s.E for s in specs])
    if np.abs(Es @ Es.T - np.eye(len(specs))).max() > 1e-12:
        raise ValidationError("codimension axes must be orthonormal")
    vd, wd = v.data.copy(), w.data.copy()
    halo_v, halo_w = v.halo, max(w.halo, v.halo + 2)
    for s in specs:
        dv, dw = _corrugation_increments(v, s)
        vd += dv
        wd += dw
        halo_v = max(halo_v, s.a.halo)
        halo_w = max(halo_w, s.a.halo + 2)
    return GridField(v.domain, v.shape, vd, halo_v), GridField(w.domain, w.shape, wd, halo_w)


def corrugation_error(v: GridField, spec: StepSpec) -> np.ndarray:
    """Packed right-hand side: the exact error terms of one corrugation step."""
    dom = v.domain
    d, h = dom.d, dom.h
    t = phase(dom, spec.eta, spec.lam)
    lam = spec.lam
    a = spec.a.data[0]
    vE = np.tensordot(spec.E, v.data, axes=(0, 0))
    grad_a = jacobian(a, d, h)
    out = -(a * gamma(t) / lam) * pack_sym(hessian(vE, d, h))
    out += ((1.0 - 0.5 * np.cos(2 * t)) / lam**2) * _dyad(grad_a, grad_a)
    out -= (a * gamma_bar(t) / lam**2) * pack_sym(hessian(a, d, h))
    return out


def _target(spec: StepSpec, d: int, factor: float) -> np.ndarray:
    a = spec.a.data[0]
    eta = spec.eta.reshape((d,) + (1,) * d)
    return factor * (a * a) * _dyad(eta, eta)


def step_residual(v, w, v_new, w_new, spec) -> GridField:
    """Discrete defect of the error identity of one step (corrugation or spiral).

    ``spec`` may also be a list of corrugation specs (multi-corrugation) or a
    list of spiral specs (multi-spiral); the identity is then summed.
    """
    specs = list(spec) if isinstance(spec, (list, tuple)) else [spec]
    d = v.domain.d
    h = v.domain.h
    lhs = vk_array(v_new.data, w_new.data, d, h) - vk_array(v.data, w.data, d, h)
    for s in specs:
        if s.E2 is None:
            lhs = lhs - _target(s, d, 1.0) - corrugation_error(v, s)
        else:
            lhs = lhs - _target(s, d, 0.5) - spiral_error(v, s)
    halo = max(v_new.halo, w_new.halo) + 2
    return GridField(v.domain, symmatrix(d), lhs, halo)


# --------------------------------------------------------------------------
# spirals


def _spiral_increments(v: GridField, spec: StepSpec):
    dom = v.domain
    d, h = dom.d, dom.h
    check_resolvable(spec.lam, h)
    t = phase(dom, spec.eta, spec.lam)
    a = spec.a.data[0]
    c1 = a * g(t) / spec.lam
    c2 = a * g_bar(t) / spec.lam
    dv = np.multiply.outer(spec.E, c1) + np.multiply.outer(spec.E2, c2)
    grad1 = jacobian(np.tensordot(spec.E, v.data, axes=(0, 0)), d, h)
    grad2 = jacobian(np.tensordot(spec.E2, v.data, axes=(0, 0)), d, h)
    dw = -(c1 * grad1 + c2 * grad2)
    return dv, dw


def spiral_step(v: GridField, w: GridField, spec: StepSpec) -> tuple:
    _check_spec(v, w, spec)
    if v.shape.dim < 2:
        raise ValidationError("spiral steps need k >= 2")
    if spec.E2 is None:
        raise ValidationError("spiral steps need a second axis E2")
    dv, dw = _spiral_increments(v, spec)
    return (GridField(v.domain, v.shape, v.data + dv, max(v.halo, spec.a.halo)),
            GridField(w.domain, w.shape, w.data + dw, max(w.halo, v.halo + 2, spec.a.halo)))


def spiral_error(v: GridField, spec: StepSpec) -> np.ndarray:
    dom = v.domain
    d, h = dom.d, dom.h
    t = phase(dom, spec.eta, spec.lam)
    a = spec.a.data[0]
    lam = spec.lam
    H1 = pack_sym(hessian(np.tensordot(spec.E, v.data, axes=(0, 0)), d, h))
    H2 = pack_sym(hessian(np.tensordot(spec.E2, v.data, axes=(0, 0)), d, h))
    grad_a = jacobian(a, d, h)
    return -(a / lam) * (g(t) * H1 + g_bar(t) * H2) + _dyad(grad_a, grad_a) / (2 * lam**2)


def spiral_specs(amplitudes, etas, lam: float, k: int) -> list:
    """Specs of the simultaneous spiral: pair i uses axes e_i and e_{d*+i}."""
    n = len(amplitudes)
    if k < 2 * n:
        raise ValidationError(f"simultaneous spirals need k >= 2 d* = {2 * n}, got k={k}")
    eye = np.eye(k)
    return [StepSpec(a, eta, eye[i], lam, eye[n + i]) for i, (a, eta) in enumerate(zip(amplitudes, etas))]


def multi_spiral_step(v: GridField, w: GridField, amplitudes, etas, lam: float) -> tuple:
    specs = spiral_specs(amplitudes, etas, lam, v.shape.dim)
    vd, wd = v.data.copy(), w.data.copy()
    halo_v, halo_w = v.halo, max(w.halo, v.halo + 2)
    for s in specs:
        _check_spec(v, w, s)
        dv, dw = _spiral_increments(v, s)
        vd += dv
        wd += dw
        halo_v = max(halo_v, s.a.halo)
        halo_w = max(halo_w, s.a.halo)
    return GridField(v.domain, v.shape, vd, halo_v), GridField(w.domain, w.shape, wd, halo_w)
