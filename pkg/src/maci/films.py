"""Thin prestrained films: the averaged energy of a deformation of the slab
omega x B(0, h), the explicit recovery sequence built from a solution of
(1/2) grad v^T grad v + sym grad w = S_dd, and the h -> 0 scaling scan."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corrugation import vk_form
from .errors import PreconditionError, StageError, ValidationError
from .fields import Domain, GridField, constant, jacobian, mollify, pack_sym, sup_norm, symmatrix, vector
from .iteration import flexibility_solve
from .masystem import kernel_certificate, shift_constant

# x-derivatives of v_eps and w_eps reach second order, S first order
STENCIL_HALO = 4


# --------------------------------------------------------------------------
# configuration and prestrain blocks


@dataclass
class FilmConfig:
    d: int
    k: int
    gamma: float
    S: GridField
    hs: tuple = (0.2, 0.1, 0.05, 0.025)
    alpha: float = 0.1
    t: float | None = None
    t_floor: float = 0.05
    z_order: int = 4
    v_hint: GridField | None = None

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValidationError("gamma must be positive")
        if any(not 0 < h < 0.5 for h in self.hs):
            raise ValidationError("every h must lie in (0, 1/2)")
        if self.S.shape != symmatrix(self.d + self.k) or self.S.domain.d != self.d:
            raise ValidationError(f"S must be a symmatrix({self.d + self.k}) field on a {self.d}-dimensional domain")
        if self.z_order < 1:
            raise ValidationError("z_order must be positive")

    @property
    def delta(self) -> float:
        return self.gamma / 2

    def exponent_t(self) -> float:
        if self.t is not None:
            return self.t
        return regularisation_exponent(self.gamma, self.alpha, self.t_floor)


def regularisation_exponent(gamma: float, alpha: float, t_floor: float = 0.05) -> float:
    """eps = h^t balancing the mollification and curvature terms; small t once delta >= 2."""
    delta = gamma / 2
    if delta >= 2:
        return t_floor
    return max((2 - delta) / (2 * alpha + 2), t_floor)


def blocks(S: GridField, d: int) -> tuple:
    """(S_dd, S_dk, S_kk) as (d, d, *g), (d, k, *g), (k, k, *g) arrays."""
    M = S.matrix()
    return M[:d, :d], M[:d, d:], M[d:, d:]


def block_field(S: GridField, d: int) -> GridField:
    M = S.matrix()[:d, :d]
    return GridField(S.domain, symmatrix(d), pack_sym(M), S.halo)


def assemble_prestrain(S_dd: np.ndarray, S_dk: np.ndarray, S_kk: np.ndarray, domain: Domain) -> GridField:
    top = np.concatenate([S_dd, S_dk], axis=1)
    bot = np.concatenate([np.swapaxes(S_dk, 0, 1), S_kk], axis=1)
    return GridField(domain, symmatrix(S_dd.shape[0] + S_kk.shape[0]), pack_sym(np.concatenate([top, bot], axis=0)))


def compatible_prestrain(v: GridField, w: GridField, S_dk: np.ndarray, S_kk: np.ndarray) -> GridField:
    """Prestrain whose d x d block is exactly (1/2) grad v^T grad v + sym grad w."""
    dom = v.domain
    A = vk_form(v, w)
    return GridField(dom, symmatrix(dom.d + v.shape.dim),
                     assemble_prestrain(A.matrix(), S_dk, S_kk, dom).data, A.halo)


def regime(gamma: float, d: int, k: int) -> tuple:
    """(label, predicted exponent) of the energy upper bound."""
    s = 1.0 if k >= d * (d + 1) else d * (d + 1) / k
    if gamma >= 4:
        return "i", 2 + gamma / 2
    if gamma >= 4 / (3 + s):
        return "ii", (4 + gamma * (1 + s)) / (2 + s)
    return "iii", 2 * gamma


# --------------------------------------------------------------------------
# solving the prestrain VK system


@dataclass
class PrestrainSolution:
    v: GridField
    w: GridField
    route: str
    residual: float


def solve_prestrain_vk(S: GridField, alpha: float, d: int | None = None, v_hint: GridField | None = None,
                       tol: float = 1e-3, c2_tol: float = 1e-6, **flex_kwargs) -> PrestrainSolution:
    """Solve (1/2) grad v^T grad v + sym grad w = S_dd.

    If S_dd - (1/2) grad v^T grad v lies in the kernel of C2 for v = v_hint (or
    v = 0), w is recovered from the kernel certificate.  Otherwise the
    flexibility pipeline is run on S_dd + C Id and C x is subtracted from w.
    """
    dom = S.domain
    d = d if d is not None else dom.d
    k = S.shape.dim - d
    S_dd = block_field(S, d)
    v = v_hint if v_hint is not None else constant(dom, [0.0] * k, vector(k))
    w0 = constant(dom, [0.0] * d, vector(d))
    if not 0 < alpha < 1:
        raise ValidationError(f"alpha={alpha} must lie in (0, 1)")
    rest = S_dd - vk_form(v, w0)
    rest = GridField(dom, rest.shape, rest.data, rest.halo)
    if sup_norm(rest) == 0.0:
        return PrestrainSolution(v, w0, "trivial", 0.0)
    try:
        w = kernel_certificate(rest, tol=c2_tol)
        res = sup_norm(S_dd - vk_form(v, w))
        if res <= tol:
            return PrestrainSolution(v, w, "kernel", res)
    except PreconditionError:
        pass
    C = shift_constant(S_dd, v)
    shift = constant(dom, [C if i == j else 0.0 for i in range(d) for j in range(i, d)], symmatrix(d))
    vt, wt, _ = flexibility_solve(v, w0, S_dd + shift, flex_kwargs.pop("eps", 0.1), alpha, **flex_kwargs)
    wt = wt - GridField(dom, vector(d), C * np.stack(dom.mesh()))
    res = sup_norm(S_dd - vk_form(vt, wt))
    if res > tol:
        raise StageError(f"prestrain residual {res:.3e} above tolerance {tol:g}")
    return PrestrainSolution(vt, wt, "flexibility", res)


# --------------------------------------------------------------------------
# recovery sequence


@dataclass
class Deformation:
    h: float
    delta: float
    eps: float
    v_eps: GridField
    w_eps: GridField
    S: GridField
    d: int
    k: int
    B: np.ndarray
    rotation: np.ndarray | None = None
    translation: np.ndarray | None = None
    halo: int = 0

    def _grads(self):
        dom = self.v_eps.domain
        hx = dom.h
        Dv = jacobian(self.v_eps.data, self.d, hx)  # (k, d, *g)
        Dw = jacobian(self.w_eps.data, self.d, hx)  # (d, d, *g)
        return Dv, Dw

    def linear_map(self) -> np.ndarray:
        """M(x) with u = (x, z) + h^{d/2}(0, v) + h^d (w, 0) + M z: shape (d+k, k, *g)."""
        d, k, h, dl = self.d, self.k, self.h, self.delta
        Dv, _ = self._grads()
        S_dd, S_dk, S_kk = blocks(self.S, d)
        top = -h ** (dl / 2) * np.swapaxes(Dv, 0, 1) + h**dl * 2 * S_dk
        bot = h**dl * (S_kk - 0.5 * np.einsum("ai...,bi...->ab...", Dv, Dv))
        return np.concatenate([top, bot], axis=0) + h ** (1.5 * dl) * self.B

    def gradient(self, z: np.ndarray) -> np.ndarray:
        """grad u at (x, z) for a fixed z in R^k: shape (d+k, d+k, *g)."""
        d, k, h, dl = self.d, self.k, self.h, self.delta
        dom = self.v_eps.domain
        Dv, Dw = self._grads()
        M = self.linear_map()
        grid = dom.shape
        Gx = np.zeros((d + k, d) + grid)
        Gx[:d] = np.eye(d).reshape((d, d) + (1,) * d)
        Gx[d:] += h ** (dl / 2) * Dv
        Gx[:d] += h**dl * Dw
        DM = jacobian(M, d, dom.h)  # (d+k, k, d, *g)
        Gx += np.einsum("amj...,m->aj...", DM, np.asarray(z, dtype=float))
        Gz = M.copy()
        Gz[d:] += np.eye(k).reshape((k, k) + (1,) * d)
        G = np.concatenate([Gx, Gz], axis=1)
        if self.rotation is not None:
            G = np.einsum("ab,bc...->ac...", self.rotation, G)
        return G

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        """u(x, z): shape (d+k, *g)."""
        d, k, h, dl = self.d, self.k, self.h, self.delta
        dom = self.v_eps.domain
        X = np.stack(dom.mesh())
        u = np.concatenate([X + h**dl * self.w_eps.data,
                            np.asarray(z, dtype=float).reshape((k,) + (1,) * d) + h ** (dl / 2) * self.v_eps.data])
        u = u + np.einsum("am...,m->a...", self.linear_map(), np.asarray(z, dtype=float))
        if self.rotation is not None:
            u = np.einsum("ab,b...->a...", self.rotation, u)
        if self.translation is not None:
            u = u + np.asarray(self.translation).reshape((-1,) + (1,) * d)
        return u

    def rigid(self, R: np.ndarray, b: np.ndarray) -> "Deformation":
        R0 = self.rotation if self.rotation is not None else np.eye(self.d + self.k)
        b0 = self.translation if self.translation is not None else np.zeros(self.d + self.k)
        return Deformation(self.h, self.delta, self.eps, self.v_eps, self.w_eps, self.S, self.d, self.k, self.B,
                           R @ R0, R @ b0 + b, self.halo)


def correction_field(Dv: np.ndarray, Dw: np.ndarray, S: GridField, d: int) -> np.ndarray:
    """B(x) of the recovery sequence: shape (d+k, k, *g)."""
    _, S_dk, S_kk = blocks(S, d)
    DvT = np.swapaxes(Dv, 0, 1)  # (d, k)
    DwT = np.swapaxes(Dw, 0, 1)
    top = (-np.einsum("im...,mn...->in...", DvT, S_kk)
           + 0.5 * np.einsum("ia...,aj...,jn...->in...", DvT, Dv, DvT)
           + np.einsum("ij...,jn...->in...", DwT, DvT))
    P = np.einsum("mi...,in...->mn...", Dv, S_dk)
    bot = P + np.swapaxes(P, 0, 1)
    return np.concatenate([top, bot], axis=0)


def build_recovery(v: GridField, w: GridField, S: GridField, h: float, gamma: float, t: float) -> Deformation:
    dom = v.domain
    d, k = dom.d, v.shape.dim
    if S.shape != symmatrix(d + k):
        raise ValidationError(f"S must be symmatrix({d + k})")
    eps = h**t
    if eps < 2 * dom.h:
        raise ValidationError(f"eps = h^t = {eps:.3g} below two grid cells; use a larger h or a finer grid")
    try:
        v_eps, w_eps = mollify(v, eps), mollify(w, eps)
    except ValidationError as exc:
        raise ValidationError(f"{exc}; use a larger h or a wider margin") from exc
    halo = max(v_eps.halo, w_eps.halo) + STENCIL_HALO
    if halo > dom.margin:
        raise ValidationError(f"recovery sequence needs margin {halo}, have {dom.margin}")
    Dv = jacobian(v_eps.data, d, dom.h)
    Dw = jacobian(w_eps.data, d, dom.h)
    B = correction_field(Dv, Dw, S, d)
    return Deformation(h, gamma / 2, eps, v_eps, w_eps, S, d, k, B, halo=halo)


# --------------------------------------------------------------------------
# energy


def dist2_so(F: np.ndarray) -> np.ndarray:
    """Squared Frobenius distance to SO(n) for (..., n, n) matrices; inf where det <= 0."""
    s = np.linalg.svd(F, compute_uv=False)
    det = np.linalg.det(F)
    out = np.sum((s - 1.0) ** 2, axis=-1)
    return np.where(det > 0, out, np.inf)


def inverse_sqrt_metric(S: GridField, h: float, gamma: float) -> np.ndarray:
    """(Id + 2 h^{gamma/2} S)^{-1/2} pointwise: (n, n, *g)."""
    n = S.shape.dim
    M = np.moveaxis(S.matrix(), (0, 1), (-2, -1))
    g = np.eye(n) + 2 * h ** (gamma / 2) * M
    lam, Q = np.linalg.eigh(g)
    if np.any(lam <= 0):
        raise PreconditionError("metric Id + 2 h^{gamma/2} S is not positive definite")
    G = (Q / np.sqrt(lam)[..., None, :]) @ np.swapaxes(Q, -1, -2)
    return np.moveaxis(G, (-2, -1), (0, 1))


def ball_quadrature(k: int, h: float, order: int) -> tuple:
    """Nodes (m, k) and weights (m,) on B(0, h); weights sum to |B(0, h)| for k = 1."""
    x, wt = np.polynomial.legendre.leggauss(order)
    if k == 1:
        return (h * x)[:, None], h * wt
    grids = np.meshgrid(*[x] * k, indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    weights = np.prod(np.stack(np.meshgrid(*[wt] * k, indexing="ij")), axis=0).ravel()
    inside = np.sum(nodes**2, axis=1) <= 1.0
    return h * nodes[inside], h**k * weights[inside]


def ball_volume(k: int, h: float) -> float:
    return math.pi ** (k / 2) / math.gamma(k / 2 + 1) * h**k


def _trapezoid_weights(domain: Domain) -> np.ndarray:
    w = np.ones(tuple(m + 1 for m in domain.n))
    for a, m in enumerate(domain.n):
        ends = [slice(None)] * domain.d
        for i in (0, m):
            ends[a] = i
            w[tuple(ends)] *= 0.5
    return w * domain.h**domain.d


def energy(defm: Deformation, gamma: float, z_order: int = 4, return_density: bool = False):
    """Average of W(grad u g^{-1/2}) over omega x B(0, h)."""
    dom = defm.v_eps.domain
    d, k, h = defm.d, defm.k, defm.h
    Ginv = inverse_sqrt_metric(defm.S, h, gamma)
    nodes, qw = ball_quadrature(k, h, z_order)
    inner = (slice(None), slice(None)) + dom.interior
    Gi = np.moveaxis(Ginv[inner], (0, 1), (-2, -1))
    xw = _trapezoid_weights(dom)
    total = 0.0
    density = np.zeros(xw.shape)
    for z, wz in zip(nodes, qw):
        F = np.moveaxis(defm.gradient(z)[inner], (0, 1), (-2, -1)) @ Gi
        W = dist2_so(F)
        if not np.all(np.isfinite(W)):
            idx = np.unravel_index(int(np.argmax(~np.isfinite(W))), W.shape)
            x = [dom.axis(a)[dom.margin + i] for a, i in enumerate(idx)]
            raise StageError(f"deformation gradient reverses orientation at x={x}, z={z.tolist()} (h={h})")
        density += wz * W
        total += wz * float(np.sum(W * xw))
    vol = float(np.prod(dom.lengths)) * ball_volume(k, h)
    E = float(total / vol)
    if return_density:
        return E, density / ball_volume(k, h)
    return E


# --------------------------------------------------------------------------
# scaling scan


@dataclass
class ScanResult:
    gamma: float
    t: float
    hs: list
    energies: list
    slope: float
    stderr: float
    curvature: float
    regime: str
    predicted: float
    route: str
    rows: list = field(default_factory=list)

    @property
    def meets_prediction(self) -> bool:
        return self.slope >= self.predicted - 0.3


def fit_loglog(hs, energies) -> tuple:
    """(slope, standard error, quadratic coefficient) of log E against log h."""
    x, y = np.log(np.asarray(hs, float)), np.log(np.asarray(energies, float))
    (slope, icpt), cov = np.polyfit(x, y, 1, cov=True) if len(x) > 2 else (np.polyfit(x, y, 1), np.zeros((2, 2)))
    curv = np.polyfit(x, y, 2)[0] if len(x) > 2 else 0.0
    return float(slope), float(math.sqrt(max(cov[0, 0], 0.0))), float(curv)


def scaling_scan(config: FilmConfig, gammas=None, solution: PrestrainSolution | None = None) -> list:
    if len(config.hs) < 4:
        raise ValidationError("the scaling fit needs at least 4 values of h")
    hs = sorted(config.hs, reverse=True)
    if max(hs) / min(hs) < 8 * (1 - 1e-12):
        raise ValidationError("the h values must span at least a factor of 8")
    if solution is None:
        solution = solve_prestrain_vk(config.S, config.alpha, config.d, config.v_hint)
    results = []
    for gamma in (gammas if gammas is not None else [config.gamma]):
        t = config.t if config.t is not None else regularisation_exponent(gamma, config.alpha, config.t_floor)
        label, beta = regime(gamma, config.d, config.k)
        rows, Es = [], []
        for h in hs:
            defm = build_recovery(solution.v, solution.w, config.S, h, gamma, t)
            E = energy(defm, gamma, config.z_order)
            Es.append(E)
            rows.append({"gamma": gamma, "h": h, "t": t, "energy": E, "regime": label, "predicted_beta": beta})
        slope, se, curv = fit_loglog(hs, Es)
        results.append(ScanResult(gamma, t, hs, Es, slope, se, curv, label, beta, solution.route, rows))
    return results


def reference_prestrain(domain: Domain, amplitude: float = 0.5) -> tuple:
    """Prestrain on a 2-D domain with a smooth exact (v, w), k = 1.

    Returns (S, v) where S_dd = (1/2) grad v^T grad v + sym grad w.
    """
    if domain.d != 2:
        raise ValidationError("the reference prestrain is defined for d = 2")
    x, y = domain.mesh()
    v = GridField(domain, vector(1), (0.3 * np.sin(2 * x + 0.5) * np.cos(y))[None])
    w = GridField(domain, vector(2), np.stack([0.1 * x * y, 0.05 * x**2]))
    S_dk = amplitude * np.stack([np.cos(x + y), 0.5 * np.sin(x)])[:, None]
    S_kk = amplitude * (1 + 0.5 * x * y)[None, None]
    return compatible_prestrain(v, w, S_dk, S_kk), v


def write_scan(results: list, csv_path=None, json_path=None) -> None:
    import csv
    import json

    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=["gamma", "h", "t", "energy", "regime", "predicted_beta"])
            wr.writeheader()
            for r in results:
                for row in r.rows:
                    wr.writerow({key: repr(val) if isinstance(val, float) else val for key, val in row.items()})
    if json_path is not None:
        out = [{"gamma": r.gamma, "t": r.t, "slope": r.slope, "stderr": r.stderr,
                "band": [r.slope - 2 * r.stderr, r.slope + 2 * r.stderr], "curvature": r.curvature,
                "regime": r.regime, "predicted_beta": r.predicted, "meets_prediction": bool(r.meets_prediction),
                "route": r.route} for r in results]
        with open(json_path, "w") as fh:
            json.dump(out, fh, indent=2)
