import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from maci.corrugation import vk_form
from maci.errors import StageError, ValidationError
from maci.fields import Domain, GridField, constant, jacobian, sample, sup_norm, symmatrix, vector
from maci.films import (
    FilmConfig, assemble_prestrain, ball_quadrature, ball_volume, build_recovery, correction_field, dist2_so,
    energy, reference_prestrain, regime, regularisation_exponent, scaling_scan, solve_prestrain_vk, write_scan,
)


def _zero_prestrain(dom, n=3):
    return constant(dom, [0.0] * (n * (n + 1) // 2), symmatrix(n))


def _zeros(dom, k):
    return constant(dom, [0.0] * k, vector(k))


@pytest.fixture(scope="module")
def ref():
    dom = Domain.box(2, 32, 40)
    S, v = reference_prestrain(dom)
    sol = solve_prestrain_vk(S, 0.1, 2, v)
    return dom, S, sol


# ---------------------------------------------------------------- regimes


def test_regime_predictions():
    assert regime(5.0, 2, 1) == ("i", 4.5)
    assert regime(2.0, 2, 1) == ("ii", 2.25)
    label, beta = regime(0.4, 2, 1)
    assert label == "iii" and beta == pytest.approx(0.8)
    # the boundary 4/(3+s) with s = 6 belongs to regime ii
    assert regime(4 / 9, 2, 1)[0] == "ii"
    # k >= d(d+1): s = 1
    assert regime(1.0, 2, 6) == ("ii", (4 + 2) / 3)


def test_regimes_agree_at_boundaries():
    for d, k in [(2, 1), (2, 2), (3, 1)]:
        s = d * (d + 1) / k
        g = 4 / (3 + s)
        assert regime(g, d, k)[1] == pytest.approx(2 * g)
        assert regime(4.0, d, k)[1] == pytest.approx(4.0)


def test_regularisation_exponent():
    assert regularisation_exponent(2.0, 0.1) == pytest.approx(1 / 2.2)
    assert regularisation_exponent(5.0, 0.1) == 0.05
    assert regularisation_exponent(0.4, 0.1) == pytest.approx(1.8 / 2.2)


# ---------------------------------------------------------------- W


def test_w_vanishes_on_rotations_and_is_frame_invariant():
    rng = np.random.default_rng(0)
    R = Rotation.random(100, random_state=1).as_matrix()
    assert np.abs(dist2_so(R)).max() < 1e-24
    F = np.eye(3) + 0.3 * rng.normal(size=(3, 3))
    assert np.linalg.det(F) > 0
    W = dist2_so(F)
    assert W > 0
    assert np.abs(dist2_so(R @ F) - W).max() < 1e-10
    assert np.abs(dist2_so(F @ R) - W).max() < 1e-10


def test_w_reflection_branch_is_infinite():
    F = np.diag([1.0, 1.0, -1.0])
    assert dist2_so(F) == np.inf


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-0.4, 0.4), min_size=9, max_size=9))
def test_w_nonnegative_and_matches_polar(entries):
    F = np.eye(3) + np.array(entries).reshape(3, 3)
    W = dist2_so(F)
    assert W >= 0
    U, s, Vt = np.linalg.svd(F)
    R = U @ Vt
    if np.linalg.det(F) > 0:
        assert W == pytest.approx(np.sum((F - R) ** 2), abs=1e-12)


# ---------------------------------------------------------------- quadrature


def test_ball_quadrature():
    nodes, w = ball_quadrature(1, 0.1, 4)
    assert w.sum() == pytest.approx(0.2)
    assert np.sum(w * nodes[:, 0] ** 2) == pytest.approx(2 * 0.1**3 / 3)
    nodes2, w2 = ball_quadrature(2, 0.1, 40)
    assert np.all(np.sum(nodes2**2, axis=1) <= 0.01 + 1e-15)
    assert w2.sum() == pytest.approx(ball_volume(2, 0.1), rel=2e-2)


# ---------------------------------------------------------------- prestrain VK


def test_solve_trivial():
    dom = Domain.box(2, 16, 8)
    sol = solve_prestrain_vk(_zero_prestrain(dom), 0.1)
    assert sol.route == "trivial" and sup_norm(sol.v) == 0 and sup_norm(sol.w) == 0


def test_solve_isotropic_block():
    dom = Domain.box(2, 32, 8)
    S = constant(dom, [0.05, 0, 0, 0.05, 0, 0], symmatrix(3))
    sol = solve_prestrain_vk(S, 0.1)
    assert sol.residual <= 1e-3
    S_dd = constant(dom, [0.05, 0, 0.05], symmatrix(2))
    assert sup_norm(S_dd - vk_form(sol.v, sol.w)) <= 1e-3


def test_solve_rejects_alpha():
    dom = Domain.box(2, 16, 8)
    S = constant(dom, [0.05, 0, 0, 0.05, 0, 0], symmatrix(3))
    with pytest.raises(ValidationError):
        solve_prestrain_vk(S, 1.5)


def test_solve_reference_with_hint(ref):
    dom, S, sol = ref
    assert sol.route == "kernel"
    assert sol.residual <= 1e-8


# ---------------------------------------------------------------- recovery sequence


def test_identity_recovery():
    dom = Domain.box(2, 16, 12)
    defm = build_recovery(_zeros(dom, 1), _zeros(dom, 2), _zero_prestrain(dom), 0.1, 2.0, 0.5)
    for z in (-0.1, 0.0, 0.07):
        X = np.stack(dom.mesh())
        u = defm.evaluate(np.array([z]))
        assert np.abs(u[:2] - X).max() == 0 and np.abs(u[2] - z).max() == 0
        assert np.abs(defm.gradient(np.array([z])) - np.eye(3)[:, :, None, None]).max() == 0
    assert energy(defm, 2.0) == 0.0


def test_b_matches_definition(ref):
    dom, S, sol = ref
    defm = build_recovery(sol.v, sol.w, S, 0.1, 2.0, 0.45)
    Dv = jacobian(defm.v_eps.data, 2, dom.h)
    Dw = jacobian(defm.w_eps.data, 2, dom.h)
    M = S.matrix()
    rng = np.random.default_rng(2)
    for _ in range(10):
        i, j = rng.integers(dom.margin, dom.margin + 33, size=2)
        G, H = Dv[:, :, i, j], Dw[:, :, i, j]
        Sdk, Skk = M[:2, 2:, i, j], M[2:, 2:, i, j]
        top = -G.T @ Skk + 0.5 * G.T @ G @ G.T + H.T @ G.T
        bot = G @ Sdk + (G @ Sdk).T
        assert np.abs(defm.B[:, :, i, j] - np.vstack([top, bot])).max() <= 1e-10


def test_b_vanishes_for_constant_fields():
    dom = Domain.box(2, 16, 12)
    v = constant(dom, [0.4], vector(1))
    w = constant(dom, [0.1, -0.2], vector(2))
    x, y = dom.mesh()
    S = GridField(dom, symmatrix(3), assemble_prestrain(
        np.stack([np.stack([x, y]), np.stack([y, x * x])]), np.zeros((2, 1) + x.shape), (1 + y)[None, None], dom).data)
    defm = build_recovery(v, w, S, 0.1, 2.0, 0.5)
    assert np.abs(defm.B).max() <= 1e-12


def test_gradient_expansion_leading_blocks():
    # polynomial v and w: grad u(x, h z) = Id + h^{delta/2} K + h^delta P + O(h^{3 delta/2}),
    # K the skew block, P the second-order block
    dom = Domain.box(2, 24, 12)
    v = sample(dom, lambda x, y: [0.5 * x * x - x * y + 0.3 * y], vector(1))
    w = sample(dom, lambda x, y: [x * y, y * y], vector(2))
    x, y = dom.mesh()
    S = GridField(dom, symmatrix(3), assemble_prestrain(
        np.stack([np.stack([x, 0 * x]), np.stack([0 * x, y])]), np.stack([np.cos(x), np.sin(y)])[:, None],
        (1 + x * y)[None, None], dom).data)
    gamma = 2.0
    inner = (slice(None), slice(None)) + dom.interior
    for h in (1e-6, 1e-8):
        defm = build_recovery(v, w, S, h, gamma, np.log(0.2) / np.log(h))
        dl = gamma / 2
        Dv = jacobian(defm.v_eps.data, 2, dom.h)[inner]
        K = np.zeros((3, 3) + Dv.shape[2:])
        K[2, :2] = Dv[0]
        K[:2, 2] = -Dv[0]
        M = S.matrix()[inner]
        P = np.zeros_like(K)
        P[:2, :2] = jacobian(defm.w_eps.data, 2, dom.h)[inner]
        P[:2, 2] = 2 * M[:2, 2]
        P[2, 2] = M[2, 2] - 0.5 * np.sum(Dv[0] ** 2, axis=0)
        G = defm.gradient(np.array([h * 0.5]))[inner]
        lead = np.abs((G - np.eye(3)[:, :, None, None]) / h ** (dl / 2) - K).max()
        assert lead <= 2 * np.abs(P).max() * h ** (dl / 2)
        err = np.abs((G - np.eye(3)[:, :, None, None] - h**dl * P) / h ** (dl / 2) - K).max()
    assert err <= 1e-6 * max(1.0, np.abs(K).max())


def test_gradient_matches_finite_difference_of_evaluate(ref):
    dom, S, sol = ref
    defm = build_recovery(sol.v, sol.w, S, 0.1, 2.0, 0.45)
    z, dz = np.array([0.03]), 1e-6
    Gz = (defm.evaluate(z + dz) - defm.evaluate(z - dz)) / (2 * dz)
    G = defm.gradient(z)
    inner = (slice(None),) + dom.interior
    assert np.abs(Gz[inner] - G[:, 2][inner]).max() <= 1e-8
    ux = jacobian(defm.evaluate(z), 2, dom.h)
    both = (slice(None), slice(None)) + dom.interior
    # fourth-order stencils on smooth data
    assert np.abs(ux[both] - G[:, :2][both]).max() <= 1e-6


def test_recovery_rejects_unresolved_eps():
    dom = Domain.box(2, 16, 12)
    with pytest.raises(ValidationError, match="larger h"):
        build_recovery(_zeros(dom, 1), _zeros(dom, 2), _zero_prestrain(dom), 0.01, 2.0, 1.0)


# ---------------------------------------------------------------- energy


def test_energy_rotation_zero():
    dom = Domain.box(2, 16, 12)
    defm = build_recovery(_zeros(dom, 1), _zeros(dom, 2), _zero_prestrain(dom), 0.1, 2.0, 0.5)
    Q = Rotation.from_rotvec([0.3, -0.5, 1.1]).as_matrix()
    assert energy(defm.rigid(Q, np.array([1.0, 2.0, 3.0])), 2.0) <= 1e-28


def test_energy_rigid_motion_invariance(ref):
    dom, S, sol = ref
    defm = build_recovery(sol.v, sol.w, S, 0.1, 2.0, 0.45)
    E = energy(defm, 2.0)
    for seed in range(3):
        Q = Rotation.random(random_state=seed).as_matrix()
        assert abs(energy(defm.rigid(Q, np.array([seed, -1.0, 0.5])), 2.0) - E) <= 1e-10 * max(1.0, E)


def test_energy_matches_dense_quadrature():
    dom = Domain.box(2, 32, 40)
    _, v = reference_prestrain(dom)
    w = sample(dom, lambda x, y: [0.2 * x * y, -0.1 * y * y], vector(2))
    S = _zero_prestrain(dom)
    defm = build_recovery(v, w, S, 0.1, 2.0, 0.45)
    E = energy(defm, 2.0, z_order=6)
    dense = energy(defm, 2.0, z_order=40)
    assert E > 0
    assert abs(E - dense) <= 1e-8 * dense


def test_energy_reports_reflection_location():
    dom = Domain.box(2, 16, 12)
    defm = build_recovery(_zeros(dom, 1), _zeros(dom, 2), _zero_prestrain(dom), 0.1, 2.0, 0.5)
    flipped = defm.rigid(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(StageError, match="x="):
        energy(flipped, 2.0)


# ---------------------------------------------------------------- scan


def test_config_validation(ref):
    dom, S, _ = ref
    with pytest.raises(ValidationError):
        FilmConfig(2, 1, -1.0, S)
    with pytest.raises(ValidationError):
        FilmConfig(2, 1, 1.0, S, hs=(0.6, 0.1))
    with pytest.raises(ValidationError):
        FilmConfig(2, 2, 1.0, S)
    cfg = FilmConfig(2, 1, 1.0, S, hs=(0.2, 0.1, 0.05))
    with pytest.raises(ValidationError, match="at least 4"):
        scaling_scan(cfg)


def test_scan_regime_one(ref, tmp_path):
    dom, S, sol = ref
    cfg = FilmConfig(2, 1, 5.0, S)
    (res,) = scaling_scan(cfg, solution=sol)
    assert res.regime == "i" and res.predicted == 4.5
    assert res.slope >= 4.2
    assert all(a > b for a, b in zip(res.energies, res.energies[1:]))
    write_scan([res], tmp_path / "scan.csv", tmp_path / "fit.json")
    rows = list(csv.DictReader(open(tmp_path / "scan.csv")))
    assert list(rows[0]) == ["gamma", "h", "t", "energy", "regime", "predicted_beta"] and len(rows) == 4
    fit = json.load(open(tmp_path / "fit.json"))
    assert fit[0]["meets_prediction"] and fit[0]["band"][0] <= fit[0]["slope"] <= fit[0]["band"][1]
