"""Outer iterations: the Nash-Kuiper loop of stages, the C^1 deficit reduction
and the three-phase flexibility pipeline built from them."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .corrugation import StepSpec, check_resolvable, corrugation_error, corrugation_step, deficit
from .errors import DivergenceError, PreconditionError, ResolutionError, StageError, ValidationError
from .fields import GridField, c_norm, holder_norm, mollify, pointwise_norm, sup_norm
from .matdecomp import decompose_positive_field, dstar
from .stage import stage_corrugation, stage_kallen


def alpha_bound(d: int, k: int, beta: float, stage_kind: str = "corrugation") -> float:
    """Upper end of the admissible Hoelder range for the final solution."""
    if stage_kind == "kallen":
        return min(beta / 2, 1.0)
    return min(beta / 2, 1.0 / (1.0 + d * (d + 1) / k))


@dataclass
class NKParams:
    alpha: float
    beta: float
    gamma: float
    delta_exp: float | None = None
    sigma: float = 8.0
    max_stages: int = 12
    tol_deficit: float = 1e-3
    stage_delta: float = 0.25

    def __post_init__(self):
        a, b, g = self.alpha, self.beta, self.gamma
        if not 0 < b <= 1:
            raise ValidationError(f"beta must lie in (0, 1], got {b}")
        if not g > 0:
            raise ValidationError("gamma must be positive")
        top = min(b / 2, 1 / (1 + 2 * g))
        if not 0 < a < top:
            raise ValidationError(f"alpha={a} outside (0, min(beta/2, 1/(1+2 gamma))) = (0, {top:.4g})")
        lo, hi = 2 * g * a / (1 - a), min(1.0, 2 * g * b / (2 - b))
        if self.delta_exp is None:
            self.delta_exp = 0.5 * (lo + hi)
        if not lo < self.delta_exp < hi:
            raise ValidationError(f"delta_exp={self.delta_exp} outside ({lo:.4g}, {hi:.4g})")
        if self.sigma < 1 or self.max_stages < 0 or not self.tol_deficit > 0:
            raise ValidationError("need sigma >= 1, max_stages >= 0 and tol_deficit > 0")


TRACE_COLUMNS = ("stage", "deficit_sup", "c1_incr", "c1alpha_incr", "hess_v", "hess_w", "M", "sigma",
                 "v_c2", "w_c2", "grad_v")


@dataclass
class NKTrace:
    rows: list = field(default_factory=list)
    stopped: str = ""

    def add(self, **row):
        self.rows.append({c: row.get(c, 0.0) for c in TRACE_COLUMNS})

    @property
    def deficits(self) -> list:
        return [r["deficit_sup"] for r in self.rows]

    def decay_ratio(self) -> float:
        """Geometric-mean per-stage deficit ratio from a log-linear fit."""
        D = np.array(self.deficits)
        if len(D) < 2:
            return float("nan")
        slope = np.polyfit(np.arange(len(D)), np.log(D), 1)[0]
        return float(np.exp(slope))

    def increment_ratios(self, key: str = "c1alpha_incr") -> list:
        vals = [r[key] for r in self.rows[1:]]
        return [b / a for a, b in zip(vals, vals[1:]) if a > 0]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(TRACE_COLUMNS))
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: repr(float(v)) if k != "stage" else int(v) for k, v in r.items()})


def _grad_sup(f: GridField) -> float:
    from .fields import derivative, multi_indices

    parts = [derivative(f, mi).interior_data for mi in multi_indices(f.domain.d, 1)]
    return float(np.sqrt(sum(np.sum(p * p, axis=0) for p in parts)).max())


def nash_kuiper(v, w, A, params: NKParams, stage_kind: str = "corrugation"):
    """Apply stages with fixed sigma and measured M_i until the deficit drops below tol_deficit."""
    if stage_kind not in ("corrugation", "kallen"):
        raise ValidationError(f"unknown stage kind {stage_kind!r}")
    D_norm = sup_norm(deficit(v, w, A))
    trace = NKTrace()
    trace.add(stage=0, deficit_sup=D_norm, sigma=params.sigma, grad_v=_grad_sup(v))
    if D_norm <= params.tol_deficit:
        trace.stopped = "tolerance"
        return v, w, trace
    if D_norm > 1:
        raise PreconditionError(f"deficit sup-norm {D_norm:.4g} exceeds 1")
    for i in range(1, params.max_stages + 1):
        vc2, wc2 = c_norm(v, 2), c_norm(w, 2)
        M = max(vc2, wc2, 1.0)
        try:
            if stage_kind == "corrugation":
                vn, wn, rep = stage_corrugation(v, w, A, M, params.sigma, params.beta)
            else:
                vn, wn, rep = stage_kallen(v, w, A, M, params.sigma, params.stage_delta, beta=params.beta)
        except (ResolutionError, StageError) as exc:
            trace.stopped = "resolution" if isinstance(exc, ResolutionError) else "stage"
            exc.args = (f"stage {i}: {exc}",)
            exc.trace = trace
            raise
        inc = vn - v
        D_new = sup_norm(deficit(vn, wn, A))
        trace.add(stage=i, deficit_sup=D_new, c1_incr=c_norm(inc, 1),
                  c1alpha_incr=holder_norm(inc, 1, params.alpha).value, hess_v=rep.hess_v, hess_w=rep.hess_w,
                  M=M, sigma=params.sigma, v_c2=vc2, w_c2=wc2, grad_v=_grad_sup(vn))
        v, w = vn, wn
        if D_new <= params.tol_deficit:
            trace.stopped = "tolerance"
            return v, w, trace
        D = trace.deficits
        if D_new > 1 or (len(D) >= 4 and all(D[j + 1] / D[j] >= 0.95 for j in range(len(D) - 4, len(D) - 1))):
            trace.stopped = "divergence"
            raise DivergenceError(f"deficit stagnates or grows: {[f'{x:.3g}' for x in D]}", trace=trace)
    trace.stopped = "max_stages"
    return v, w, trace


# --------------------------------------------------------------------------
# C^1 deficit reduction


@dataclass
class ReductionReport:
    delta: float
    c: float
    n_terms: int
    lambdas: list
    step_errors: list
    threshold: float
    deficit_sup: float
    deficit_min_eig: float
    v_dist: float
    w_dist: float


def _min_eig(D: GridField) -> float:
    d = D.domain.d
    mats = np.moveaxis(D.matrix()[(slice(None), slice(None)) + D.domain.interior], (0, 1), (-2, -1))
    return float(np.linalg.eigvalsh(mats.reshape(-1, d, d))[:, 0].min())


def c1_reduce_deficit(v, w, A, eps: float, lam_start: float | None = None, return_report: bool = False):
    """Cancel all but a fraction delta of a positive deficit with sequential corrugations."""
    if not eps > 0:
        raise ValidationError("eps must be positive")
    D = deficit(v, w, A)
    c = _min_eig(D)
    if c <= 0:
        raise PreconditionError(f"deficit is not positive definite (min eigenvalue {c:.3e})")
    D_norm = sup_norm(D)
    pairs = decompose_positive_field(D, c * (1 - 1e-9))
    delta = min(0.5, eps / (2 * D_norm))
    N = len(pairs)
    threshold = eps * delta * c / (4 * N)
    h = v.domain.h
    k = v.shape.dim
    E = np.zeros(k)
    E[0] = 1.0
    lam0 = lam_start if lam_start is not None else 8 * math.pi
    lams, errs = [], []
    v_in, w_in = v, w
    for eta, b in pairs:
        a = b * math.sqrt(1 - delta)
        lam, err = lam0, math.inf
        while True:
            try:
                check_resolvable(lam, h)
            except ResolutionError as exc:
                raise ResolutionError(
                    f"grid too coarse for requested eps={eps:g}: step {len(lams) + 1}/{N} needs lam > {lam / 2:.4g} "
                    f"(error {err:.3e} > {threshold:.3e})"
                ) from exc
            spec = StepSpec(a, eta, E, lam)
            err = float(pointwise_norm(corrugation_error(v, spec)[(slice(None),) + v.domain.interior],
                                       D.shape).max())
            if err <= threshold:
                break
            lam *= 2
        v_next, w_next = corrugation_step(v, w, spec)
        v, w = v_next, w_next
        lams.append(lam)
        errs.append(err)
    Dt = deficit(v, w, A)
    rep = ReductionReport(delta, c, N, lams, errs, threshold, sup_norm(Dt), _min_eig(Dt), sup_norm(v - v_in),
                          sup_norm(w - w_in))
    if return_report:
        return v, w, rep
    return v, w


# --------------------------------------------------------------------------
# full pipeline


@dataclass
class FlexReport:
    eps: float
    phase1_scale: float
    phase1_dist: list
    reduction: dict
    trace: list
    v_dist: float
    w_dist: float
    vk_residual: float
    stopped: str


def flexibility_solve(v, w, A, eps: float, alpha: float, stage_kind: str = "corrugation", beta: float = 1.0,
                      sigma: float = 8.0, max_stages: int = 12, tol_deficit: float = 1e-3):
    d, k = v.domain.d, v.shape.dim
    top = alpha_bound(d, k, beta, stage_kind)
    if stage_kind == "kallen" and k < d * (d + 1):
        raise ValidationError(f"the spiral pipeline needs k >= d(d+1) = {d * (d + 1)}")
    if not 0 < alpha < top:
        raise ValidationError(
            f"alpha={alpha} outside the admissible range (0, {top:.4g}); bound is min(beta/2, 1/(1+d(d+1)/k))"
        )
    if not 0 < eps < 1:
        raise ValidationError("eps must lie in (0, 1)")
    tol = eps**3
    # phase 1: smooth approximation within eps^3 in C^1
    l = 0.25
    h = v.domain.h
    v1, w1, A1, dist = v, w, A, [0.0, 0.0, 0.0]
    while l >= 2 * h:
        try:
            cand = (mollify(v, l), mollify(w, l), mollify(A, l))
        except ValidationError:
            l /= 2
            continue
        dist = [c_norm(cand[0] - v, 1), c_norm(cand[1] - w, 1), sup_norm(cand[2] - A)]
        if max(dist) <= tol:
            v1, w1, A1 = cand
            break
        l /= 2
    else:
        l = 0.0
        dist = [0.0, 0.0, 0.0]
    # phase 2: C^1 reduction of the deficit to eps^3
    v2, w2, red = c1_reduce_deficit(v1, w1, A1, tol, return_report=True)
    # phase 3: Nash-Kuiper on the residual
    if stage_kind == "corrugation":
        gamma = dstar(d) / k
        params = NKParams(alpha, beta, gamma, sigma=sigma, max_stages=max_stages, tol_deficit=tol_deficit)
    else:
        stage_delta = min(0.25, 0.45 * (1 / alpha - 1))
        params = NKParams(alpha, beta, stage_delta, sigma=sigma, max_stages=max_stages, tol_deficit=tol_deficit,
                          stage_delta=stage_delta)
    vt, wt, trace = nash_kuiper(v2, w2, A, params, stage_kind)
    residual = sup_norm(deficit(vt, wt, A))
    rep = FlexReport(eps, l, dist, asdict(red), trace.rows, sup_norm(vt - v), sup_norm(wt - w), residual,
                     trace.stopped)
    return vt, wt, rep
