import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maci.errors import PreconditionError
from maci.fields import Domain, constant, sample, symmatrix
from maci.matdecomp import (
    PrimitiveFrame, build_partition, build_primitive_frame, decompose_near_identity,
    decompose_positive_field,
)


@pytest.mark.parametrize("d", [1, 2, 3, 4])
def test_frame_invariants(d):
    f = build_primitive_frame(d)
    assert np.allclose(np.linalg.norm(f.etas, axis=1), 1.0)
    cid = decompose_near_identity(f, np.eye(d))
    assert cid.min() >= f.r0 > 0
    rng = np.random.default_rng(3)
    for _ in range(50):
        B = rng.normal(size=(d, d))
        B = B + B.T
        A = np.eye(d) + f.r0 * B / np.linalg.norm(B)
        c, ok = decompose_near_identity(f, A, report=True)
        assert ok and c.min() >= f.r0 / 2


def test_trigonometric_frame_identity_coefficients():
    f = build_primitive_frame(2)
    assert np.allclose(decompose_near_identity(f, np.eye(2)), [2 / 3] * 3, atol=1e-14)


def test_one_dimensional_frame():
    f = build_primitive_frame(1)
    assert f.etas.tolist() == [[1.0]]
    assert decompose_near_identity(f, np.array([[0.7]]))[0] == pytest.approx(0.7)


def test_dyad_gives_unit_coefficient():
    f = build_primitive_frame(3)
    e = f.etas[0]
    c = decompose_near_identity(f, np.outer(e, e))
    expect = np.zeros(6)
    expect[0] = 1
    assert np.abs(c - expect).max() < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 10_000))
def test_reconstruction_is_exact(d, seed):
    f = build_primitive_frame(d)
    B = np.random.default_rng(seed).normal(size=(d, d))
    A = B + B.T
    c = decompose_near_identity(f, A)
    assert np.abs(f.reconstruct(c) - A).max() < 1e-12 * (1 + np.abs(A).max())


def test_far_matrix_is_flagged():
    f = build_primitive_frame(2)
    _, ok = decompose_near_identity(f, np.diag([3.0, 0.1]), report=True)
    assert not ok


def test_frame_json_round_trip():
    f = build_primitive_frame(3)
    g = PrimitiveFrame.from_json(f.to_json())
    assert np.array_equal(f.etas, g.etas) and g.r0 == f.r0


def _recon(pairs, dom):
    return sum(np.multiply.outer(np.outer(e, e), b.data[0] ** 2) for e, b in pairs)


def test_constant_identity_field_uses_one_chart():
    dom = Domain.box(2, 8, 2)
    D = constant(dom, [1.0, 0.0, 1.0], symmatrix(2))
    pairs = decompose_positive_field(D, 0.5)
    assert len(pairs) == 3
    for _, b in pairs:
        assert np.allclose(b.data**2, 2 / 3)


def test_oscillating_multiple_of_identity():
    dom = Domain.box(2, 32, 2)
    D = sample(dom, lambda x, y: [1 + 0.1 * np.sin(2 * np.pi * x), 0 * x, 1 + 0.1 * np.sin(2 * np.pi * x)],
               symmatrix(2))
    pairs = decompose_positive_field(D, 0.5)
    rel = np.abs(_recon(pairs, dom) - D.matrix()).max() / np.abs(D.matrix()).max()
    assert rel < 1e-6
    assert all(b.data.min() >= 0 for _, b in pairs)


def test_wide_range_field_and_cauchy_schwarz_bound():
    dom = Domain.box(2, 24, 2)
    D = sample(dom, lambda x, y: [1 + 2 * x, 0.4 * y, 0.5 + y**2], symmatrix(2))
    part = build_partition(build_primitive_frame(2), np.moveaxis(D.matrix(), (0, 1), (-2, -1)).reshape(-1, 2, 2))
    pairs = decompose_positive_field(D, 0.1, partition=part)
    assert np.abs(_recon(pairs, dom) - D.matrix()).max() < 1e-8
    total_b = sum(b.data[0] for _, b in pairs)
    trace = D.data[0] + D.data[2]
    assert np.all(total_b <= np.sqrt(part.n0) * np.sqrt(trace) + 1e-12)


def test_degenerate_field_is_rejected_with_location():
    dom = Domain.box(2, 8, 0)
    D = sample(dom, lambda x, y: [x, 0 * x, 1 + 0 * x], symmatrix(2))
    with pytest.raises(PreconditionError, match="x="):
        decompose_positive_field(D, 1e-3)
