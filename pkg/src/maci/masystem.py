"""Monge-Ampere system algebra: the curl-curl type operator c2 on symmetric
fields, the determinant-type nonlinearity of second derivatives, the
compatibility conditions of curvature-like fields, constructive inversion of
c2 by nested Poincare integrals, and the weak-solution density construction.

Curvature-like fields F_{ij,st} are GridFields of shape ``curvature(d)``
storing the canonical quadruples i<j, s<t, (i,j) <= (s,t); the other entries
follow from antisymmetry in each pair and symmetry under pair exchange.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .corrugation import vk_form
from .errors import PreconditionError, ValidationError
from .fields import (
    Domain, GridField, constant, curvature, curvature_quads, hessian, jacobian, pack_sym, sup_norm,
    symmatrix, vector,
)
from .iteration import flexibility_solve

# second differences consume two stencil half-widths
HESS_HALO = 4


# --------------------------------------------------------------------------
# storage


def expand(F: GridField) -> np.ndarray:
    """Full (d, d, d, d, *grid) tensor from canonical storage."""
    if F.shape.kind != "curvature":
        raise ValidationError("expand needs a curvature field")
    d = F.shape.dim
    out = np.zeros((d, d, d, d) + F.data.shape[1:])
    for c, ((i, j), (s, t)) in enumerate(curvature_quads(d)):
        val = F.data[c]
        for (a, b), sg1 in (((i, j), 1.0), ((j, i), -1.0)):
            for (p, q), sg2 in (((s, t), 1.0), ((t, s), -1.0)):
                out[a, b, p, q] = sg1 * sg2 * val
                out[p, q, a, b] = sg1 * sg2 * val
    return out


def compress(T: np.ndarray, domain: Domain, halo: int = 0) -> GridField:
    """Canonical storage of a full tensor (no symmetrisation is applied)."""
    d = domain.d
    data = np.stack([T[i, j, s, t] for (i, j), (s, t) in curvature_quads(d)]) if d > 1 else np.zeros((0,) + domain.shape)
    return GridField(domain, curvature(d), data, halo)


def curvature_field(domain: Domain, values: dict, halo: int = 0) -> GridField:
    """Build F from {((i, j), (s, t)): array or scalar} on canonical quadruples."""
    quads = curvature_quads(domain.d)
    data = np.zeros((len(quads),) + domain.shape)
    for key, val in values.items():
        key = (tuple(key[0]), tuple(key[1]))
        if key not in quads:
            raise ValidationError(f"{key} is not a canonical quadruple; use i<j, s<t, (i,j) <= (s,t)")
        data[quads.index(key)] = val
    return GridField(domain, curvature(domain.d), data, halo)


# --------------------------------------------------------------------------
# operators


def _check_margin(f: GridField, extra: int) -> int:
    halo = f.halo + extra
    if halo > f.domain.margin:
        raise ValidationError(f"insufficient margin: need {halo}, have {f.domain.margin}")
    return halo


def c2_operator(A: GridField) -> GridField:
    """C2(A)_{ij,st} = d_i d_s A_jt + d_j d_t A_is - d_i d_t A_js - d_j d_s A_it."""
    if A.shape.kind != "symmatrix":
        raise ValidationError("c2_operator needs a symmatrix field")
    dom = A.domain
    halo = _check_margin(A, HESS_HALO)
    d = dom.d
    M = A.matrix()
    H = hessian(M, d, dom.h)  # (d, d, d, d, *grid): H[p, q, a, b] = d_a d_b A_pq
    vals = [H[j, t, i, s] + H[i, s, j, t] - H[j, s, i, t] - H[i, t, j, s] for (i, j), (s, t) in curvature_quads(d)]
    data = np.stack(vals) if vals else np.zeros((0,) + dom.shape)
    return GridField(dom, curvature(d), data, halo)


def det_hessian(v: GridField) -> GridField:
    """Det(D^2 v)_{ij,st} = <d_i d_s v, d_j d_t v> - <d_i d_t v, d_j d_s v>."""
    if v.shape.kind != "vector":
        raise ValidationError("det_hessian needs a vector field")
    dom = v.domain
    halo = _check_margin(v, HESS_HALO)
    d = dom.d
    H = hessian(v.data, d, dom.h)  # (k, d, d, *grid)
    vals = [np.sum(H[:, i, s] * H[:, j, t] - H[:, i, t] * H[:, j, s], axis=0) for (i, j), (s, t) in curvature_quads(d)]
    data = np.stack(vals) if vals else np.zeros((0,) + dom.shape)
    return GridField(dom, curvature(d), data, halo)


@dataclass
class CompatibilityReport:
    algebraic: float
    differential: float
    scale: float

    @property
    def relative_differential(self) -> float:
        return self.differential / self.scale if self.scale > 0 else self.differential


def check_compatibility(F: GridField) -> CompatibilityReport:
    """Sup-norms of the first and differential Bianchi residuals of F."""
    dom = F.domain
    d = dom.d
    T = expand(F)
    inner = (Ellipsis,) + dom.valid(F.halo)
    alg = 0.0
    for i in range(d):
        for j in range(d):
            for s in range(d):
                for t in range(d):
                    r = T[i, j, s, t] + T[i, s, t, j] + T[i, t, j, s]
                    alg = max(alg, float(np.abs(r[inner[1:]]).max()))
    halo = _check_margin(F, 2)
    G = jacobian(T, d, dom.h)  # (d, d, d, d, d, *grid): G[i, j, s, t, q] = d_q F_ij,st
    region = dom.valid(halo)
    diff = 0.0
    for i in range(d):
        for j in range(i + 1, d):
            for s in range(d):
                for t in range(d):
                    for q in range(d):
                        r = G[i, j, s, t, q] + G[i, j, t, q, s] + G[i, j, q, s, t]
                        diff = max(diff, float(np.abs(r[region]).max()))
    scale = float(np.abs(G[(Ellipsis,) + region]).max()) if G.size else 0.0
    return CompatibilityReport(alg, diff, scale)


# --------------------------------------------------------------------------
# Poincare integrals along rays from the box centre


def _lagrange_weights(t: np.ndarray) -> np.ndarray:
    """Cubic Lagrange weights for nodes 0..3 evaluated at t -> (..., 4)."""
    return np.stack([
        -(t - 1) * (t - 2) * (t - 3) / 6,
        t * (t - 2) * (t - 3) / 2,
        -t * (t - 1) * (t - 3) / 2,
        t * (t - 1) * (t - 2) / 6,
    ], axis=-1)


class RayQuadrature:
    """Integrals I[G](x) = int_0^1 tau^p G(x0 + tau (x - x0)) dtau for x in a region.

    All rays share one tau grid (so the quadrature error is smooth in x), at
    grid resolution along the longest ray; values off the grid come from
    local tensor-product cubic Lagrange interpolation.  The composite
    trapezoid rule is Richardson-extrapolated once unless ``richardson`` is
    False.
    """

    def __init__(self, domain: Domain, halo: int, richardson: bool = True, refine: int = 1, chunk: int = 1024):
        self.domain = domain
        self.halo = halo
        d = domain.d
        region = domain.valid(halo)
        self.region = region
        idx = np.meshgrid(*[np.arange(s.start, s.stop) for s in region], indexing="ij")
        self.points = np.stack([i.ravel() for i in idx], axis=1).astype(float)
        self.center = np.array([domain.margin + m / 2 for m in domain.n], dtype=float)
        y = self.points - self.center
        longest = float(np.sqrt((y * y).sum(axis=1)).max()) if len(y) else 0.0
        m = max(2, int(math.ceil(longest)) * refine)
        m += m % 2
        self.tau = np.linspace(0.0, 1.0, m + 1)
        w = np.full(m + 1, 1.0 / m)
        w[[0, -1]] *= 0.5
        if richardson:
            w2 = np.zeros(m + 1)
            w2[::2] = 2.0 / m
            w2[[0, -1]] *= 0.5
            w = (4 * w - w2) / 3
        self.weights = w
        self.offset_y = y * domain.h
        self.chunk = chunk
        lo = np.array([s.start for s in region])
        hi = np.array([s.stop - 1 for s in region])
        if np.any(hi - lo < 3):
            raise ValidationError("region too small for cubic interpolation")
        self.lo, self.hi = lo, hi

    def integrate(self, arrays: np.ndarray, power: int) -> np.ndarray:
        """arrays (c, *grid) -> (c, *region) ray integrals with weight tau^power."""
        dom = self.domain
        d = dom.d
        c = arrays.shape[0]
        flat = arrays.reshape(c, -1)
        strides = np.array([int(np.prod(dom.shape[a + 1:])) for a in range(d)])
        tw = self.weights * self.tau**power
        offs = np.stack(np.meshgrid(*[np.arange(4)] * d, indexing="ij"), axis=-1).reshape(-1, d)
        off_lin = offs @ strides
        out = np.empty((c, len(self.points)))
        for start in range(0, len(self.points), self.chunk):
            pts = self.points[start:start + self.chunk]
            u = self.center + (pts - self.center)[:, None, :] * self.tau[None, :, None]  # (P, T, d)
            base = np.clip(np.floor(u).astype(np.int64) - 1, self.lo, self.hi - 3)
            wts = _lagrange_weights(u - base)  # (P, T, d, 4)
            W = wts[:, :, 0]
            for a in range(1, d):
                W = (W[..., :, None] * wts[:, :, a, None, :]).reshape(W.shape[:2] + (-1,))
            W *= tw[None, :, None]
            idx = (base @ strides)[..., None] + off_lin  # (P, T, 4^d)
            for comp in range(c):
                out[comp, start:start + len(pts)] = np.einsum("ptk,ptk->p", flat[comp][idx], W)
        return out.reshape((c,) + tuple(s.stop - s.start for s in self.region))

    def y(self, a: int) -> np.ndarray:
        return self.offset_y[:, a].reshape(tuple(s.stop - s.start for s in self.region))

    def embed(self, vals: np.ndarray) -> np.ndarray:
        full = np.zeros(vals.shape[:1] + self.domain.shape)
        full[(slice(None),) + self.region] = vals
        return full


def _two_form_primitive(rq: RayQuadrature, B: np.ndarray) -> np.ndarray:
    """alpha with d_i alpha_j - d_j alpha_i = B_ij for a closed skew B (d, d, *grid) -> (d, *region)."""
    d = B.shape[0]
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    I = rq.integrate(np.stack([B[i, j] for i, j in pairs]), 1)
    y = [rq.y(a) for a in range(d)]
    out = np.zeros((d,) + y[0].shape)
    for c, (i, j) in enumerate(pairs):
        # B_ji = -B_ij contributes to alpha_i
        out[j] += I[c] * y[i]
        out[i] -= I[c] * y[j]
    return out


def _one_form_primitive(rq: RayQuadrature, G: np.ndarray) -> np.ndarray:
    """f with d_j f = G_j for a closed G (d, *grid), normalised to f(x0) = 0 -> region."""
    d = G.shape[0]
    I = rq.integrate(G, 0)
    return sum(I[j] * rq.y(j) for j in range(d))


def invert_c2(F: GridField, tol: float = 1e-4, richardson: bool = True, refine: int = 1) -> GridField:
    """Symmetric A with C2(A) = F, built from three layers of Poincare integrals."""
    if F.shape.kind != "curvature":
        raise ValidationError("invert_c2 needs a curvature field")
    dom = F.domain
    d = dom.d
    rep = check_compatibility(F)
    if rep.algebraic > 1e-8 * max(1.0, sup_norm(F)) or rep.relative_differential > tol:
        raise PreconditionError(
            f"F is not compatible: first Bianchi residual {rep.algebraic:.3e}, "
            f"differential residual {rep.differential:.3e} (relative {rep.relative_differential:.3e} > {tol:g})"
        )
    if d == 1:
        # every curvature field vanishes in one dimension
        return GridField(dom, symmatrix(1), np.zeros((1,) + dom.shape), F.halo)
    T = expand(F)
    rq = RayQuadrature(dom, F.halo, richardson, refine)
    # layer 1: F_{ij,st} = d_i phi^j_st - d_j phi^i_st, phi_ts = -phi_st
    phi = np.zeros((d, d, d) + dom.shape)  # phi[s, t, j]
    for s in range(d):
        for t in range(s + 1, d):
            p = rq.embed(_two_form_primitive(rq, T[:, :, s, t]))
            phi[s, t] = p
            phi[t, s] = -p
    # layer 2: phi^j_st - phi^s_jt = d_j eta^s_t - d_s eta^j_t
    eta = np.zeros((d, d) + dom.shape)  # eta[t, s] = eta_t^s
    for t in range(d):
        B = np.stack([np.stack([phi[s, t, j] - phi[j, t, s] for s in range(d)]) for j in range(d)])
        eta[t] = rq.embed(_two_form_primitive(rq, B))
    # layer 3: A_ij = -(eta_j^i + eta_i^j)/2
    M = -0.5 * (np.transpose(eta, (1, 0) + tuple(range(2, 2 + d))) + eta)
    return GridField(dom, symmatrix(d), pack_sym(M), F.halo)


def kernel_certificate(A: GridField, tol: float = 1e-6) -> GridField:
    """w with sym grad w = A, for A in the kernel of C2."""
    if A.shape.kind != "symmatrix":
        raise ValidationError("kernel_certificate needs a symmatrix field")
    dom = A.domain
    d = dom.d
    C = c2_operator(A)
    scale = max(1.0, sup_norm(A))
    res = sup_norm(C)
    if res > tol * scale:
        raise PreconditionError(f"A is not a symmetric gradient: |C2(A)| = {res:.3e} > {tol * scale:.3e}")
    M = A.matrix()
    h = dom.h
    halo = _check_margin(A, 2)
    rq = RayQuadrature(dom, halo)
    dM = jacobian(M, d, h)  # dM[j, t, s] = d_s A_jt
    # d_s A_jt - d_t A_js = -d_j phi_st
    phi = np.zeros((d, d) + dom.shape)
    for s in range(d):
        for t in range(s + 1, d):
            G = np.stack([-(dM[j, t, s] - dM[j, s, t]) for j in range(d)])
            p = rq.embed(_one_form_primitive(rq, G)[None])[0]
            phi[s, t] = p
            phi[t, s] = -p
    # A + phi = grad w: row i is the gradient of w^i
    w = np.zeros((d,) + dom.shape)
    for i in range(d):
        G = np.stack([M[i, j] + phi[i, j] for j in range(d)])
        w[i] = rq.embed(_one_form_primitive(rq, G)[None])[0]
    return GridField(dom, vector(d), w, halo)


def sym_grad(w: GridField) -> GridField:
    d = w.domain.d
    J = jacobian(w.data, d, w.domain.h)
    M = 0.5 * (J + np.swapaxes(J, 0, 1))
    return GridField(w.domain, symmatrix(d), pack_sym(M), _check_margin(w, 2))


# --------------------------------------------------------------------------
# weak solutions


@dataclass
class WeakMAReport:
    C: float
    min_eig_shift: float
    c2_roundtrip: float
    flex: object
    vk_residual: float
    target_dist: float


def _min_eig(M: GridField) -> float:
    d = M.domain.d
    mats = np.moveaxis(M.matrix()[(slice(None), slice(None)) + M.domain.interior], (0, 1), (-2, -1))
    return float(np.linalg.eigvalsh(mats.reshape(-1, d, d))[:, 0].min())


def shift_constant(A: GridField, v: GridField, floor: float = 0.01) -> float:
    """Smallest power of two C (>= 2^-20) with A + C Id - (grad v)^T grad v / 2 >= floor Id."""
    w0 = constant(v.domain, [0.0] * v.domain.d, vector(v.domain.d))
    mu = _min_eig(A - vk_form(v, w0))
    need = floor - mu
    if need <= 2.0**-20:
        return 2.0**-20
    return 2.0 ** math.ceil(math.log2(need))


def weak_ma_solve(F: GridField, v_target: GridField, eps: float, alpha: float, stage_kind: str = "corrugation",
                  **flex_kwargs):
    """Solution of the VK form of Det D^2 v = F within eps of v_target in C^0."""
    dom = F.domain
    d = dom.d
    if v_target.domain != dom:
        raise ValidationError("F and v_target must share a domain")
    A = invert_c2(-F)
    roundtrip = sup_norm(c2_operator(A) + F)
    C = shift_constant(A, v_target)
    A_shift = A + constant(dom, [C if i == j else 0.0 for i in range(d) for j in range(i, d)], symmatrix(d))
    w0 = constant(dom, [0.0] * d, vector(d))
    vn, wn, flex = flexibility_solve(v_target, w0, A_shift, eps, alpha, stage_kind, **flex_kwargs)
    res = sup_norm(A_shift - vk_form(vn, wn))
    rep = WeakMAReport(C, _min_eig(A_shift - vk_form(v_target, w0)), roundtrip, flex, res, sup_norm(vn - v_target))
    return vn, wn, rep
