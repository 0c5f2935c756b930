"""Acceptance criteria 1-12, each at its stated tolerance and runtime budget.

Every test records one PASS/FAIL line (printed in the terminal summary by
conftest.py) and then asserts it.
"""

import time

import numpy as np
import pytest
from conftest import ACCEPTANCE

from maci.cli import ExperimentConfig, roundtrip_data, run, stage_test_data
from maci.corrugation import StepSpec, corrugation_step, profile_residuals, step_residual, vk_form
from maci.errors import MaciError
from maci.fields import Domain, GridField, constant, sample, sup_norm, symmatrix, vector
from maci.films import FilmConfig, reference_prestrain, scaling_scan, solve_prestrain_vk
from maci.iteration import NKParams, nash_kuiper
from maci.masystem import c2_operator, curvature_field, det_hessian, invert_c2, sym_grad, weak_ma_solve
from maci.matdecomp import dstar
from maci.stage import find_sigma0, stage_corrugation, stage_corrugation_zoom, stage_kallen

SIGMAS = (2.0, 4.0, 8.0, 16.0)
# identity residuals (relative to |D|) of every stage run in this module
STAGE_RESIDUALS: list = []


def record(num, ok, detail):
    ACCEPTANCE[num] = (bool(ok), detail)
    assert ok, f"criterion {num}: {detail}"


def slope(xs, ys):
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def _log_stage(rep):
    STAGE_RESIDUALS.append(rep.identity_residual / rep.D_norm)
    return rep


# ---------------------------------------------------------------- 1


def test_c01_profile_identities():
    t0 = time.perf_counter()
    t = np.random.default_rng(0).uniform(-50, 50, 10_000)
    worst = max(np.abs(r).max() for r in profile_residuals(t).values())
    dt = time.perf_counter() - t0
    record(1, worst <= 1e-13 and dt < 1, f"max residual {worst:.2e} over 1e4 samples, {dt:.3f}s")


# ---------------------------------------------------------------- 2


def _step_residual(n):
    dom = Domain.box(2, n, 6)
    v = sample(dom, lambda x, y: [x**2], vector(1))
    w = constant(dom, [0.0, 0.0], vector(2))
    a = sample(dom, lambda x, y: np.sin(2 * np.pi * y))
    spec = StepSpec(a, [0.6, 0.8], [1.0], 8 * np.pi)
    assert spec.lam * dom.h <= 0.5
    v2, w2 = corrugation_step(v, w, spec)
    return sup_norm(step_residual(v, w, v2, w2, spec))


def test_c02_step_residual_order():
    t0 = time.perf_counter()
    ns = [128, 256, 512]
    res = [_step_residual(n) for n in ns]
    s = slope(ns, res)
    dt = time.perf_counter() - t0
    record(2, -4.5 <= s <= -3.5 and dt < 10, f"refinement slope {s:.3f} (residuals {res[0]:.2e} -> {res[-1]:.2e}), {dt:.1f}s")


# ---------------------------------------------------------------- 3


@pytest.fixture(scope="module")
def growth_runs():
    out, t0 = {}, time.perf_counter()
    for k in (1, 3):
        v, w, A = stage_test_data(2, k, 128, 24)
        out[k] = [_log_stage(stage_corrugation_zoom(v, w, A, sigma=s)[2]) for s in SIGMAS]
    return out, time.perf_counter() - t0


def test_c03_stage_growth_exponent(growth_runs):
    runs, dt = growth_runs
    parts, ok = [], dt < 300
    for k, reps in runs.items():
        s = slope(SIGMAS, [r.hess_v for r in reps])
        target = dstar(2) / k
        ok &= abs(s - target) <= 0.15 * target
        parts.append(f"(2,{k}) slope {s:.3f} vs {target:g}")
    record(3, ok, "; ".join(parts) + f", {dt:.1f}s")


# ---------------------------------------------------------------- 4


@pytest.fixture(scope="module")
def decay_runs():
    t0 = time.perf_counter()
    dom = Domain.box(2, 320, int(0.26 * 320) + 16)
    v = sample(dom, lambda x, y: [0.15 * (x**2 + y**2), 0 * x, 0 * x], vector(3))
    w = constant(dom, [0.0, 0.0], vector(2))
    A = constant(dom, [0.1, 0.0, 0.1], symmatrix(2))
    reps = [_log_stage(stage_corrugation(v, w, A, sigma=s)[2]) for s in SIGMAS]
    return reps, time.perf_counter() - t0


def test_c04_stage_deficit_decay(decay_runs):
    reps, dt = decay_runs
    s = slope(SIGMAS, [r.D_tilde_norm for r in reps])
    record(4, -1.25 <= s <= -0.75 and dt < 300, f"deficit slope {s:.3f} (n=320, d=2, k=3), {dt:.1f}s")


# ---------------------------------------------------------------- 6 (runs before 5 collects residuals)


@pytest.fixture(scope="module")
def kallen_runs():
    t0 = time.perf_counter()
    dom = Domain.box(1, 4096, 260)
    v = sample(dom, lambda x: [0.1 * np.sin(2 * np.pi * x), 0.1 * np.cos(2 * np.pi * x)], vector(2))
    w = constant(dom, [0.0], vector(1))
    base = vk_form(v, w)
    A = GridField(dom, base.shape, base.data + 0.05)
    s0, _ = find_sigma0(v, w, A, delta=0.25)
    sig = [s0 * 2**i for i in range(4)]
    rk = [_log_stage(stage_kallen(v, w, A, sigma=s, delta=0.25)[2]) for s in sig]
    rc = [_log_stage(stage_corrugation(v, w, A, sigma=s)[2]) for s in sig]
    return sig, rk, rc, time.perf_counter() - t0


def test_c06_kallen_stage(kallen_runs):
    sig, rk, rc, dt = kallen_runs
    sk = slope(sig, [r.hess_v for r in rk])
    sc = slope(sig, [r.hess_v for r in rc])
    worst = max(b / a / (2 / (r.lam * r.l)) for r in rk for a, b in zip(r.E_diffs, r.E_diffs[1:]))
    ok = sk <= 0.35 and sk < sc and worst <= 1 and dt < 300
    record(6, ok, f"sigma0 {sig[0]:g}; kallen slope {sk:.3f}, corrugation slope {sc:.3f}; "
                  f"max E-difference ratio / (2/(lam l)) = {worst:.3f}, {dt:.1f}s")


# ---------------------------------------------------------------- 5


def test_c05_telescoping_identity(growth_runs, decay_runs, kallen_runs):
    worst = max(STAGE_RESIDUALS)
    record(5, worst <= 1e-6, f"max identity residual / |D| = {worst:.2e} over {len(STAGE_RESIDUALS)} stage runs")


# ---------------------------------------------------------------- 7, 8


@pytest.fixture(scope="module")
def nk_run():
    t0 = time.perf_counter()
    v, w, A = stage_test_data(2, 1, 128, 24)
    g = dstar(2) / 1
    params = NKParams(0.8 / (1 + 2 * g), 1.0, g, sigma=8.0, max_stages=12, tol_deficit=1e-3)
    try:
        vn, wn, trace = nash_kuiper(v, w, A, params)
        return params, trace, None, time.perf_counter() - t0
    except MaciError as exc:
        return params, getattr(exc, "trace", None), exc, time.perf_counter() - t0


def test_c07_nash_kuiper_convergence(nk_run):
    params, trace, exc, dt = nk_run
    if exc is not None:
        record(7, False, f"{type(exc).__name__}: {exc} ({dt:.1f}s)")
    D = trace.deficits
    ratio = trace.decay_ratio()
    target = params.sigma ** (-params.delta_exp / 2)
    ok = D[-1] <= 1e-3 and len(D) - 1 <= 12 and ratio <= target and dt < 900
    record(7, ok, f"final deficit {D[-1]:.2e} after {len(D) - 1} stages, decay ratio {ratio:.3f} vs {target:.3f}")


def test_c08_holder_control(nk_run):
    params, trace, exc, dt = nk_run
    if exc is not None:
        record(8, False, f"needs the multi-stage run of criterion 7, which stopped: {type(exc).__name__}")
    inc = [r["c1alpha_incr"] for r in trace.rows[1:]]
    ratios = [b / a for a, b in zip(inc, inc[1:])]
    record(8, len(ratios) >= 2 and all(r < 1 for r in ratios[1:]),
           f"C^(1,{params.alpha:.3f}) increment ratios {np.round(ratios, 3).tolist()}")


# ---------------------------------------------------------------- 9


def test_c09_c2_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    dom = Domain.box(2, 64, 8)
    c = rng.normal(size=(2, 10))

    def cubic(x, y):
        mons = [1 + 0 * x, x, y, x * x, x * y, y * y, x**3, x * x * y, x * y * y, y**3]
        return [sum(c[r, m] * mons[m] for m in range(10)) for r in range(2)]

    # exact in exact arithmetic; the third-order stencil chain amplifies roundoff like h^-3, so the
    # absolute 1e-10 bound is checked on a coarse grid
    kernel = sup_norm(c2_operator(sym_grad(sample(Domain.box(2, 16, 8), cubic, vector(2)))))
    v = sample(dom, cubic, vector(2))
    gram = vk_form(v, constant(dom, [0.0, 0.0], vector(2))) * 2.0
    ident = sup_norm(c2_operator(gram) + det_hessian(v) * 2.0) / max(1.0, sup_norm(det_hessian(v)))
    errs = []
    for n in (128, 256):
        F = c2_operator(roundtrip_data(Domain.box(2, n, 12)))
        errs.append(sup_norm(c2_operator(invert_c2(F)) - F))
    dt = time.perf_counter() - t0
    ok = kernel <= 1e-10 and ident <= 1e-6 and errs[0] <= 1e-6 and errs[0] >= 4 * errs[1] and dt < 60
    record(9, ok, f"kernel {kernel:.1e}; identity {ident:.1e}; round-trip {errs[0]:.2e} -> {errs[1]:.2e} "
                  f"({errs[0] / errs[1]:.1f}x), {dt:.1f}s")


# ---------------------------------------------------------------- 10


def test_c10_density_demo():
    t0 = time.perf_counter()
    dom = Domain.box(2, 128, 24)
    F = curvature_field(dom, {((0, 1), (0, 1)): -1.0})
    vt = constant(dom, [0.0], vector(1))
    try:
        vn, wn, rep = weak_ma_solve(F, vt, 0.05, 0.1)
    except MaciError as exc:
        record(10, False, f"{type(exc).__name__}: {exc} ({time.perf_counter() - t0:.1f}s)")
    record(10, rep.target_dist <= 0.05 and rep.vk_residual <= 1e-3,
           f"|v_n - v_target| = {rep.target_dist:.2e}, VK residual {rep.vk_residual:.2e}")


# ---------------------------------------------------------------- 11


def test_c11_energy_scaling():
    t0 = time.perf_counter()
    dom = Domain.box(2, 48, 64)
    S, v = reference_prestrain(dom)
    sol = solve_prestrain_vk(S, 0.1, 2, v)
    cfg = FilmConfig(2, 1, 0.4, S, alpha=0.1, v_hint=v)
    results = scaling_scan(cfg, gammas=[0.4, 2.0, 5.0], solution=sol)
    dt = time.perf_counter() - t0
    ok = all(r.slope >= r.predicted - 0.3 for r in results) and dt < 1200
    record(11, ok, "; ".join(f"gamma {r.gamma:g}: slope {r.slope:.3f} vs {r.predicted:.3f} ({r.regime})"
                             for r in results) + f", {dt:.1f}s")


# ---------------------------------------------------------------- 12


def test_c12_determinism(tmp_path):
    cases = [
        (ExperimentConfig(kind="energy-scan", d=2, k=1, n=32, gamma=(2.0, 5.0), seed=3), ["energies.csv", "fit.json"]),
        (ExperimentConfig(kind="ma-roundtrip", d=2, n=32, seed=3), ["roundtrip.csv", "A.fld"]),
        (ExperimentConfig(kind="stage-slope", d=2, k=1, sigma=(2.0, 4.0), seed=3), ["stage.csv", "result.json"]),
    ]
    same = True
    for cfg, files in cases:
        blobs = []
        for rep in range(2):
            cfg.out = str(tmp_path / f"{cfg.kind}-{rep}")
            status, _ = run(cfg)
            assert status == 0
            blobs.append([(tmp_path / f"{cfg.kind}-{rep}" / f).read_bytes() for f in files])
        same &= blobs[0] == blobs[1]
    record(12, same, "bit-identical CSV/JSON/field outputs across two runs of energy-scan, ma-roundtrip, stage-slope")
