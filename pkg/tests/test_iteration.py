import csv
import math
from types import SimpleNamespace

import numpy as np
import pytest

import maci.iteration as it
from maci.corrugation import deficit, vk_form
from maci.errors import DivergenceError, PreconditionError, ResolutionError, ValidationError
from maci.fields import Domain, GridField, constant, sample, sup_norm, symmatrix, vector
from maci.iteration import NKParams, c1_reduce_deficit, flexibility_solve, nash_kuiper


def _frozen(f):
    return GridField(f.domain, f.shape, f.data, 0)


def _parabola_1d(n, margin, A_extra=0.1):
    dom = Domain.box(1, n, margin)
    v = sample(dom, lambda x: [0.2 * x**2], vector(1))
    w = constant(dom, [0.0], vector(1))
    A = _frozen(vk_form(v, w) + constant(dom, [A_extra], symmatrix(1)))
    return v, w, A


def test_params_ranges():
    p = NKParams(0.1, 1.0, 3.0)
    lo, hi = 2 * 3.0 * 0.1 / 0.9, min(1.0, 2 * 3.0 / 1.0)
    assert lo < p.delta_exp < hi
    with pytest.raises(ValidationError):
        NKParams(1 / 7, 1.0, 3.0)
    with pytest.raises(ValidationError):
        NKParams(0.1, 1.0, 3.0, delta_exp=0.5)
    with pytest.raises(ValidationError):
        NKParams(0.1, 1.5, 3.0)


def test_alpha_bound():
    assert it.alpha_bound(2, 1, 1.0) == pytest.approx(1 / 7)
    assert it.alpha_bound(2, 3, 1.0) == pytest.approx(1 / 3)
    assert it.alpha_bound(2, 6, 0.6, "kallen") == pytest.approx(0.3)


def test_nk_returns_immediately_when_solved():
    v, w, A = _parabola_1d(256, 20, A_extra=1e-10)
    vt, wt, tr = nash_kuiper(v, w, A, NKParams(0.2, 1.0, 1.0))
    assert vt is v and wt is w
    assert len(tr.rows) == 1 and tr.stopped == "tolerance"


def test_nk_converges_1d(tmp_path):
    v, w, A = _parabola_1d(2**18, 60000, A_extra=0.05)
    params = NKParams(0.2, 1.0, 1.0, sigma=32.0, tol_deficit=2e-3)
    vt, wt, tr = nash_kuiper(v, w, A, params)
    D = tr.deficits
    assert tr.stopped == "tolerance" and len(D) - 1 <= params.max_stages
    assert D[-1] <= 2e-3
    assert all(b < a for a, b in zip(D, D[1:]))
    assert tr.decay_ratio() <= params.sigma ** (-params.delta_exp / 2)
    c1 = [r["c1_incr"] for r in tr.rows[1:]]
    assert all(b < a for a, b in zip(c1, c1[1:]))
    # gradient stays bounded by the initial one plus a multiple of sum |D_j|^(1/2)
    g0 = tr.rows[0]["grad_v"]
    assert max(r["grad_v"] for r in tr.rows) <= g0 + 10 * sum(math.sqrt(x) for x in D)
    assert sup_norm(deficit(vt, wt, A)) == pytest.approx(D[-1])
    path = tmp_path / "trace.csv"
    tr.to_csv(path)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0])[:8] == ["stage", "deficit_sup", "c1_incr", "c1alpha_incr", "hess_v", "hess_w", "M", "sigma"]
    assert len(rows) == len(D)


def test_nk_divergence_when_deficit_grows():
    dom = Domain.box(2, 320, 60)
    v = sample(dom, lambda x, y: [0.1 * np.sin(2 * np.pi * x)], vector(1))
    w = constant(dom, [0.0, 0.0], vector(2))
    A = _frozen(vk_form(v, w) + constant(dom, [0.05, 0.0, 0.05], symmatrix(2)))
    with pytest.raises(DivergenceError) as exc:
        nash_kuiper(v, w, A, NKParams(0.1, 1.0, 3.0, sigma=2.0))
    tr = exc.value.trace
    assert tr.stopped == "divergence" and tr.deficits[-1] > 1


def test_nk_stagnation(monkeypatch):
    v, w, A = _parabola_1d(128, 20)
    fake = SimpleNamespace(hess_v=1.0, hess_w=1.0)
    monkeypatch.setattr(it, "stage_corrugation", lambda v, w, A, M, sigma, beta: (v, w, fake))
    with pytest.raises(DivergenceError) as exc:
        nash_kuiper(v, w, A, NKParams(0.2, 1.0, 1.0))
    assert len(exc.value.trace.rows) == 4


def test_nk_resolution_guard_bubbles_up():
    dom = Domain.box(2, 128, 40)
    v = constant(dom, [0.0], vector(1))
    w = constant(dom, [0.0, 0.0], vector(2))
    A = constant(dom, [0.1, 0.0, 0.1], symmatrix(2))
    with pytest.raises(ResolutionError) as exc:
        nash_kuiper(v, w, A, NKParams(0.1, 1.0, 3.0, sigma=8.0))
    assert exc.value.trace.stopped == "resolution"


def test_nk_rejects_unknown_kind():
    v, w, A = _parabola_1d(128, 20)
    with pytest.raises(ValidationError):
        nash_kuiper(v, w, A, NKParams(0.2, 1.0, 1.0), "wrinkle")


@pytest.mark.parametrize("wiggle", [0.0, 0.02])
def test_c1_reduce_guarantees_1d(wiggle):
    dom = Domain.box(1, 2**15, 64)
    v = sample(dom, lambda x: [0.2 * x**2], vector(1))
    w = constant(dom, [0.0], vector(1))
    A = _frozen(sample(dom, lambda x: [0.1 + wiggle * np.sin(2 * np.pi * x)], symmatrix(1)) + vk_form(v, w))
    eps = 0.05
    vt, wt, rep = c1_reduce_deficit(v, w, A, eps, return_report=True)
    assert rep.delta == pytest.approx(eps / (2 * (0.1 + wiggle)))
    assert rep.deficit_sup <= eps
    assert rep.deficit_min_eig >= rep.delta * rep.c / 2
    assert sup_norm(vt - v) <= eps
    assert all(e <= rep.threshold for e in rep.step_errors)


def test_c1_reduce_cap_branch():
    v, w, A = _parabola_1d(2**14, 64)
    vt, wt, rep = c1_reduce_deficit(v, w, A, 0.5, return_report=True)
    assert rep.delta == 0.5
    D = deficit(vt, wt, A)
    # half of the deficit survives, up to the per-step error terms
    assert abs(sup_norm(D) - 0.05) <= rep.threshold * rep.n_terms + 1e-12
    assert rep.deficit_min_eig >= 0.5 * 0.1 / 2


def test_c1_reduce_degenerate_input():
    v, w, A = _parabola_1d(128, 20, A_extra=0.0)
    with pytest.raises(PreconditionError):
        c1_reduce_deficit(v, w, A, 0.01)


def test_c1_reduce_2d_grid_too_coarse():
    dom = Domain.box(2, 128, 24)
    v = constant(dom, [0.0], vector(1))
    w = constant(dom, [0.0, 0.0], vector(2))
    A = constant(dom, [0.1, 0.0, 0.1], symmatrix(2))
    with pytest.raises(ResolutionError, match="grid too coarse"):
        c1_reduce_deficit(v, w, A, 0.01)


def test_flexibility_alpha_validation():
    dom = Domain.box(2, 32, 8)
    v = constant(dom, [0.0], vector(1))
    w = constant(dom, [0.0, 0.0], vector(2))
    A = constant(dom, [0.05, 0.0, 0.05], symmatrix(2))
    with pytest.raises(ValidationError, match=r"1/\(1\+d\(d\+1\)/k\)"):
        flexibility_solve(v, w, A, 0.05, 0.2)
    with pytest.raises(ValidationError):
        flexibility_solve(v, w, A, 0.05, 0.1, stage_kind="kallen")


def test_flexibility_pipeline_1d():
    v, w, A = _parabola_1d(2**14, 1000)
    eps = 0.6
    vt, wt, rep = flexibility_solve(v, w, A, eps, 0.3, sigma=32.0, tol_deficit=2e-2)
    assert rep.stopped == "tolerance"
    assert rep.reduction["deficit_sup"] <= eps**3
    assert rep.vk_residual <= 2e-2
    assert rep.v_dist <= eps and rep.w_dist <= eps
