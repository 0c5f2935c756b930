"""Stages: a mollification followed by a ladder of oscillatory steps.

``stage_corrugation`` runs N = lcm(d*, k) corrugation steps on a graded
frequency ladder; ``stage_kallen`` refines the amplitudes of one simultaneous
spiral step by a fixed-point iteration on its own error field.

Both run on a list of patches.  In the default mode the patch is the input
grid itself.  The ``*_zoom`` variants keep mollification and all global
scalars on the input grid but carry out the oscillatory steps on small fine
windows, which is the only way to resolve the top frequencies of the ladder at
desk scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .corrugation import (
    StepSpec, check_resolvable, corrugation_step, multi_spiral_step, spiral_error, spiral_specs, vk_form,
)
from .errors import FeasibilityError, PreconditionError, ResolutionError, StageError, ValidationError
from .fields import (
    SCALAR, Domain, GridField, c_norm, hessian, holder_norm, jacobian, mollify,
    pack_sym, pointwise_norm, resample, sup_norm, sym_pairs, symmatrix,
)
from .matdecomp import build_primitive_frame, dstar


# --------------------------------------------------------------------------
# frequency ladder


@dataclass(frozen=True)
class FrequencyLadder:
    d_star: int
    k: int
    N: int
    S: int
    J: int
    l: float
    lam: float
    lambdas: tuple
    exponents: tuple

    def block(self, i: int) -> tuple:
        """(j, gamma, s, delta) with i = j k + gamma = s d* + delta (1-based gamma, delta)."""
        j, gamma = divmod(i - 1, self.k)
        s, delta = divmod(i - 1, self.d_star)
        return j, gamma + 1, s, delta + 1


def frequency_ladder(d_star: int, k: int, sigma: float, l: float) -> FrequencyLadder:
    if sigma < 1:
        raise ValidationError(f"sigma must be >= 1, got {sigma}")
    if not 0 < l <= 1:
        raise ValidationError(f"mollification scale must lie in (0, 1], got {l}")
    N = math.lcm(d_star, k)
    S, J = N // d_star, N // k
    lam = sigma ** (1.0 / S) / l
    base = lam * l
    # exponents of (lam l) in lam_i l, kept as exact halves
    twice = [2]
    for i in range(2, N + 1):
        if (i - 1) % k == 0:
            twice.append(twice[-1] + 2)
        elif (i - 1) % d_star == 0:
            twice.append(twice[-1] + 1)
        else:
            twice.append(twice[-1])
    for i, e2 in enumerate(twice, start=1):
        j, s = (i - 1) // k, (i - 1) // d_star
        if e2 != 2 + 2 * j + s:
            raise StageError(f"frequency ladder breaks the exponent count at i={i}")
    exps = tuple(e / 2 for e in twice)
    lambdas = tuple(base**e / l for e in exps)
    return FrequencyLadder(d_star, k, N, S, J, l, lam, lambdas, exps)


# --------------------------------------------------------------------------
# reports


@dataclass
class StageReport:
    kind: str
    d: int
    k: int
    sigma: float
    M: float
    l: float
    lam: float
    lambdas: list
    D_norm: float
    D0_norm: float
    D_tilde_norm: float = 0.0
    C_tilde: list = field(default_factory=list)
    D_s_norms: list = field(default_factory=list)
    amp_sup: list = field(default_factory=list)
    amp_min: list = field(default_factory=list)
    v_incr_c1: float = 0.0
    w_incr_c1: float = 0.0
    hess_v: float = 0.0
    hess_w: float = 0.0
    grad_v: float = 0.0
    holder_A: float = 0.0
    const_bound1_v: float = 0.0
    const_bound1_w: float = 0.0
    const_bound2_v: float = 0.0
    const_bound2_w: float = 0.0
    const_bound3: float = 0.0
    identity_residual: float = 0.0
    E_norms: list = field(default_factory=list)
    E_diffs: list = field(default_factory=list)
    windows: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)


# --------------------------------------------------------------------------
# shared helpers


class _Patch:
    """Fields of one region on which a stage is executed."""

    def __init__(self, v0, w0, A0, A, v, w):
        self.v0, self.w0, self.A0, self.A, self.v, self.w = v0, w0, A0, A, v, w
        self.D0 = A0 - vk_form(v0, w0)

    @property
    def domain(self) -> Domain:
        return self.v0.domain


def _interior_sup(data: np.ndarray, domain: Domain, shape) -> float:
    return float(pointwise_norm(data[(slice(None),) + domain.interior], shape).max())


def _field_sup(f: GridField) -> float:
    if f.halo > f.domain.margin:
        raise ValidationError("field halo exceeds the grid margin")
    return sup_norm(f)


def _check_inputs(v, w, A, M):
    if A.shape != symmatrix(v.domain.d):
        raise ValidationError("A must be a symmetric-matrix field")
    D = A - vk_form(v, w)
    Dn = _field_sup(D)
    if not 0 < Dn <= 1:
        raise PreconditionError(f"deficit sup-norm {Dn:.4g} must lie in (0, 1]")
    c2 = max(c_norm(v, 2), c_norm(w, 2), 1.0)
    if M is None:
        M = c2
    elif M < c2 * (1 - 1e-9):
        raise PreconditionError(f"M={M:.4g} below max(|v|_2, |w|_2, 1) = {c2:.4g}")
    return D, Dn, float(M)


def _mollified(v, w, A, l):
    # l is fixed by the data, so a scale the grid cannot carry is a resolution failure
    try:
        return mollify(v, l), mollify(w, l), mollify(A, l)
    except ValidationError as exc:
        raise ResolutionError(f"{exc}; use a larger n or margin") from exc


def _shift(domain: Domain, C: float, d: int) -> np.ndarray:
    return C * np.stack(domain.mesh())


def _positive_coefficients(frame, packed: np.ndarray, halo: int, domain: Domain, where: str) -> np.ndarray:
    c = frame.coefficients_packed(packed)
    valid = (slice(None),) + domain.valid(halo)
    if c[valid].min() <= 0:
        raise StageError(f"amplitude positivity lost at {where}: min coefficient {c[valid].min():.3e}")
    return np.maximum(c, 0.0)


def _hess_sup(f: GridField) -> float:
    dom = f.domain
    H = hessian(f.data, dom.d, dom.h)
    H = H.reshape((-1,) + dom.shape)
    return float(np.sqrt(np.sum(H[(slice(None),) + dom.interior] ** 2, axis=0)).max())


def _c1_sup(f: GridField) -> float:
    dom = f.domain
    J = jacobian(f.data, dom.d, dom.h).reshape((-1,) + dom.shape)
    inner = (slice(None),) + dom.interior
    return float(pointwise_norm(f.data[inner], f.shape).max() + np.sqrt(np.sum(J[inner] ** 2, axis=0)).max())


def _finish_report(rep: StageReport, patches, outs, D_norm, grad_v, holder_A, M, beta, growth):
    for p, (vt, wt, Dt) in zip(patches, outs):
        rep.D_tilde_norm = max(rep.D_tilde_norm, _interior_sup(Dt.data, p.domain, Dt.shape))
        rep.v_incr_c1 = max(rep.v_incr_c1, _c1_sup(vt - p.v))
        rep.w_incr_c1 = max(rep.w_incr_c1, _c1_sup(wt - p.w))
        rep.hess_v = max(rep.hess_v, _hess_sup(vt))
        rep.hess_w = max(rep.hess_w, _hess_sup(wt))
    rep.grad_v = grad_v
    rep.holder_A = holder_A
    sq = math.sqrt(D_norm)
    rep.const_bound1_v = rep.v_incr_c1 / sq
    rep.const_bound1_w = rep.w_incr_c1 / (sq * (1 + grad_v))
    rep.const_bound2_v = rep.hess_v / (M * growth)
    rep.const_bound2_w = rep.hess_w / (M * growth * (1 + grad_v))
    rep.const_bound3 = rep.D_tilde_norm / (holder_A * M**-beta * D_norm ** (beta / 2) + D_norm / rep.sigma)


def _grad_sup(v: GridField) -> float:
    return _c1_sup(v) - _interior_sup(v.data, v.domain, v.shape)


# --------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class Zoom:
    """Fine windows: ``periods`` oscillations of the top frequency, ``lam_h`` = lam_max * h_fine."""

    periods: float = 4.0
    lam_h: float = 0.1
    centers: tuple | None = None


def _window_centers(D0: GridField, C: float, zoom: Zoom, half: float) -> list:
    dom = D0.domain
    if zoom.centers is not None:
        return [np.asarray(c, dtype=float) for c in zoom.centers]
    lo = np.array(dom.origin) + half
    hi = np.array(dom.origin) + np.array(dom.lengths) - half
    centers = [np.clip(dom.center, lo, hi)]
    tr = sum(D0.data[c] for c, (i, j) in enumerate(sym_pairs(dom.d)) if i == j) + C * dom.d
    inner = tr[dom.interior]
    idx = np.unravel_index(int(np.argmax(inner)), inner.shape)
    peak = np.array([dom.axis(a)[dom.margin + i] for a, i in enumerate(idx)])
    peak = np.clip(peak, lo, hi)
    if np.linalg.norm(peak - centers[0]) > 1e-12:
        centers.append(peak)
    return centers


def _make_windows(v, w, A, v0, w0, A0, lam_max, zoom: Zoom, margin: int, D0_coarse, C):
    dom = v.domain
    hf = zoom.lam_h / lam_max
    n = max(8, int(math.ceil(zoom.periods * 2 * math.pi / lam_max / hf)))
    L = n * hf
    half = 0.5 * L
    if L > min(dom.lengths):
        raise ValidationError("zoom window larger than the domain; use the global stage")
    patches, centers = [], _window_centers(D0_coarse, C, zoom, half + margin * hf)
    for c in centers:
        wd = Domain(dom.d, (n,) * dom.d, margin, (L,) * dom.d, tuple(c - half))
        patches.append(_Patch(resample(v0, wd), resample(w0, wd), resample(A0, wd), resample(A, wd),
                              resample(v, wd), resample(w, wd)))
    return patches, [c.tolist() for c in centers]


# --------------------------------------------------------------------------
# corrugation stage


def _corrugation_engine(patches, ladder, frame, r0, D_norm, D0_norm, rep):
    d_star, k, S = ladder.d_star, ladder.k, ladder.S
    lam_l = ladder.lam * ladder.l
    d = patches[0].domain.d
    dyads = frame.dyads_packed()
    eye_packed = pack_sym(np.eye(d))
    state = [(p.v0, p.w0, p.D0) for p in patches]
    for s in range(S):
        Ds_norm = D0_norm if s == 0 else max(_interior_sup(Ds.data, p.domain, Ds.shape)
                                             for p, (_, _, Ds) in zip(patches, state))
        C = 2.0 / r0 * (D_norm / lam_l**s + Ds_norm)
        rep.C_tilde.append(C)
        rep.D_s_norms.append(Ds_norm)
        sups, mins = np.zeros(d_star), np.full(d_star, np.inf)
        new_state = []
        for p, (v, w, Ds) in zip(patches, state):
            dom = p.domain
            packed = eye_packed.reshape((-1,) + (1,) * d) + Ds.data / C
            coeffs = _positive_coefficients(frame, packed, Ds.halo, dom, f"block s={s}")
            amps = [GridField(dom, SCALAR, np.sqrt(C * coeffs[q])[None], Ds.halo) for q in range(d_star)]
            for q, a in enumerate(amps):
                inner = a.data[0][dom.interior]
                sups[q] = max(sups[q], float(inner.max()))
                mins[q] = min(mins[q], float(inner.min()))
            vk_start = vk_form(v, w)
            for delta in range(1, d_star + 1):
                i = s * d_star + delta
                _, gamma, _, _ = ladder.block(i)
                E = np.zeros(v.shape.dim)
                E[gamma - 1] = 1.0
                spec = StepSpec(amps[delta - 1], frame.etas[delta - 1], E, ladder.lambdas[i - 1])
                v, w = corrugation_step(v, w, spec)
            vk_end = vk_form(v, w)
            added = sum(amps[q].data[0] ** 2 * dyads[q].reshape((-1,) + (1,) * d) for q in range(d_star))
            halo = max(vk_end.halo, amps[0].halo)
            Dn = GridField(dom, Ds.shape, -(vk_end.data - vk_start.data) + added, halo)
            new_state.append((v, w, Dn))
        rep.amp_sup.append(sups.tolist())
        rep.amp_min.append(mins.tolist())
        state = new_state
    outs = []
    C_total = sum(rep.C_tilde)
    for p, (v, w, DS) in zip(patches, state):
        wt = GridField(w.domain, w.shape, w.data - _shift(w.domain, C_total, d), w.halo)
        Dt = p.A - vk_form(v, wt)
        ident = Dt - (p.A - p.A0) - DS
        rep.identity_residual = max(rep.identity_residual, _interior_sup(ident.data, p.domain, ident.shape))
        outs.append((v, wt, Dt))
    rep.D_s_norms.append(max(_interior_sup(DS.data, p.domain, DS.shape) for p, (_, _, DS) in zip(patches, state)))
    return outs


def _prepare(v, w, A, M, sigma, frame_seed=0):
    D, D_norm, M = _check_inputs(v, w, A, M)
    l = math.sqrt(D_norm) / M
    v0, w0, A0 = _mollified(v, w, A, l)
    D0 = A0 - vk_form(v0, w0)
    D0_norm = _field_sup(D0)
    frame = build_primitive_frame(v.domain.d, frame_seed)
    return D_norm, M, l, v0, w0, A0, D0, D0_norm, frame


def _margin_needed(v0: GridField, extra: int) -> None:
    if v0.halo + extra > v0.domain.margin:
        raise ValidationError(
            f"insufficient margin for the stage: need {v0.halo + extra} layers, have {v0.domain.margin}"
        )


def stage_corrugation(v, w, A, M=None, sigma: float = 8.0, beta: float = 1.0, zoom: Zoom | None = None):
    """One corrugation stage.  Returns (v~, w~, report); with ``zoom`` the fields are per-window lists."""
    d, k = v.domain.d, v.shape.dim
    D_norm, M, l, v0, w0, A0, D0, D0_norm, frame = _prepare(v, w, A, M, sigma)
    ds = dstar(d)
    ladder = frequency_ladder(ds, k, sigma, l)
    rep = StageReport("corrugation" if zoom is None else "corrugation-zoom", d, k, float(sigma), M, l,
                      ladder.lam, list(ladder.lambdas), D_norm, D0_norm)
    grad_v = _grad_sup(v)
    holder_A = holder_norm(A, 0, beta).value
    if zoom is None:
        check_resolvable(ladder.lambdas[-1], v.domain.h)
        _margin_needed(v0, 4 * ladder.S + 6)
        patches = [_Patch(v0, w0, A0, A, v, w)]
    else:
        C0 = 2.0 / frame.r0 * (D_norm + D0_norm)
        patches, rep.windows = _make_windows(v, w, A, v0, w0, A0, ladder.lambdas[-1], zoom,
                                             4 * ladder.S + 10, D0, C0)
    outs = _corrugation_engine(patches, ladder, frame, frame.r0, D_norm, D0_norm, rep)
    _finish_report(rep, patches, outs, D_norm, grad_v, holder_A, M, beta, sigma ** (ds / k))
    if zoom is None:
        return outs[0][0], outs[0][1], rep
    return [o[0] for o in outs], [o[1] for o in outs], rep


def stage_corrugation_zoom(v, w, A, M=None, sigma: float = 8.0, beta: float = 1.0, zoom: Zoom = Zoom()):
    return stage_corrugation(v, w, A, M, sigma, beta, zoom=zoom)


# --------------------------------------------------------------------------
# Kallen stage


def _kallen_engine(patches, lam, n_iters, frame, r0, D_norm, D0_norm, rep):
    d = patches[0].domain.d
    ds = frame.dstar
    k = patches[0].v0.shape.dim
    C = 2.0 / r0 * (D_norm + D0_norm)
    rep.C_tilde = [C]
    eye_packed = pack_sym(np.eye(d))
    dyads = frame.dyads_packed()
    E_prev = [GridField(p.domain, p.D0.shape, np.zeros_like(p.D0.data), p.D0.halo) for p in patches]
    amps_all = [None] * len(patches)
    for r in range(1, n_iters + 1):
        E_sup = max(_interior_sup(E.data, p.domain, E.shape) for p, E in zip(patches, E_prev))
        if E_sup > r0 * C / 2:
            raise FeasibilityError(
                f"sigma below sigma_0: |E_{r - 1}| = {E_sup:.4g} exceeds r0*C/2 = {r0 * C / 2:.4g} "
                f"(ratio {E_sup / (r0 * C / 2):.3g})",
                measured=E_sup / (r0 * C / 2),
            )
        diff = 0.0
        sups, mins = np.zeros(ds), np.full(ds, np.inf)
        E_new = []
        for idx, (p, E) in enumerate(zip(patches, E_prev)):
            dom = p.domain
            packed = eye_packed.reshape((-1,) + (1,) * d) + (p.D0.data - E.data) / C
            halo = max(p.D0.halo, E.halo)
            coeffs = _positive_coefficients(frame, packed, halo, dom, f"iteration r={r}")
            amps = [GridField(dom, SCALAR, np.sqrt(2 * C * coeffs[q])[None], halo) for q in range(ds)]
            for q, a in enumerate(amps):
                inner = a.data[0][dom.interior]
                sups[q] = max(sups[q], float(inner.max()))
                mins[q] = min(mins[q], float(inner.min()))
            specs = spiral_specs(amps, frame.etas, lam, k)
            En = sum(spiral_error(p.v0, s) for s in specs)
            En = GridField(dom, E.shape, En, max(p.v0.halo + 2, halo + 2))
            diff = max(diff, _interior_sup((En - E).data, dom, E.shape))
            E_new.append(En)
            amps_all[idx] = amps
        rep.amp_sup.append(sups.tolist())
        rep.amp_min.append(mins.tolist())
        rep.E_diffs.append(diff)
        rep.E_norms.append(max(_interior_sup(E.data, p.domain, E.shape) for p, E in zip(patches, E_new)))
        E_last, E_prev = E_prev, E_new
    outs = []
    for p, amps, E_before in zip(patches, amps_all, E_last):
        dom = p.domain
        v1, w1 = multi_spiral_step(p.v0, p.w0, amps, frame.etas, lam)
        wt = GridField(dom, w1.shape, w1.data - _shift(dom, C, d), w1.halo)
        Dt = p.A - vk_form(v1, wt)
        added = 0.5 * sum(a.data[0] ** 2 * dyads[q].reshape((-1,) + (1,) * d) for q, a in enumerate(amps))
        E_measured = vk_form(v1, w1).data - vk_form(p.v0, p.w0).data - added
        ident = Dt.data - (p.A - p.A0).data + (E_measured - E_before.data)
        rep.identity_residual = max(rep.identity_residual, _interior_sup(ident, dom, Dt.shape))
        outs.append((v1, wt, Dt))
    return outs


def stage_kallen(v, w, A, M=None, sigma: float = 16.0, delta: float = 0.25, n_iters: int | None = None,
                 beta: float = 1.0, zoom: Zoom | None = None):
    d, k = v.domain.d, v.shape.dim
    ds = dstar(d)
    if k < 2 * ds:
        raise ValidationError(f"the spiral stage needs k >= 2 d* = {2 * ds}, got k={k}")
    if not delta > 0:
        raise ValidationError("delta must be positive")
    if n_iters is None:
        n_iters = int(math.ceil(1.0 / delta - 1e-12))
    if n_iters < 1:
        raise ValidationError("n_iters must be >= 1")
    D_norm, M, l, v0, w0, A0, D0, D0_norm, frame = _prepare(v, w, A, M, sigma)
    lam = sigma ** (1.0 / n_iters) / l
    rep = StageReport("kallen" if zoom is None else "kallen-zoom", d, k, float(sigma), M, l, lam, [lam],
                      D_norm, D0_norm)
    grad_v = _grad_sup(v)
    holder_A = holder_norm(A, 0, beta).value
    if zoom is None:
        check_resolvable(lam, v.domain.h)
        _margin_needed(v0, 2 * n_iters + 8)
        patches = [_Patch(v0, w0, A0, A, v, w)]
    else:
        C0 = 2.0 / frame.r0 * (D_norm + D0_norm)
        patches, rep.windows = _make_windows(v, w, A, v0, w0, A0, lam, zoom, 2 * n_iters + 12, D0, C0)
    outs = _kallen_engine(patches, lam, n_iters, frame, frame.r0, D_norm, D0_norm, rep)
    _finish_report(rep, patches, outs, D_norm, grad_v, holder_A, M, beta, sigma ** (1.0 / n_iters))
    if zoom is None:
        return outs[0][0], outs[0][1], rep
    return [o[0] for o in outs], [o[1] for o in outs], rep


def find_sigma0(v, w, A, M=None, delta: float = 0.25, sigma_start: float = 2.0, max_doublings: int = 16,
                **kwargs):
    """Smallest sigma in the doubling sequence for which the spiral stage stays feasible."""
    sigma = sigma_start
    last = None
    for _ in range(max_doublings + 1):
        try:
            out = stage_kallen(v, w, A, M, sigma, delta, **kwargs)
            return sigma, out
        except FeasibilityError as exc:
            last = exc
            sigma *= 2
    raise FeasibilityError(f"no feasible sigma up to {sigma / 2:.4g}: {last}", measured=last.measured)
