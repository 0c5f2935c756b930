"""Rank-one ("primitive") decompositions of symmetric matrices.

Near the identity, ``A = sum_i c_i(A) eta_i (x) eta_i`` with a fixed frame of
``d* = d(d+1)/2`` unit vectors and a linear coefficient map ``c``.  Over a
compact subset of the positive-definite cone, a partition of unity built from
conjugated frames gives ``A = sum_i phi_i(A)^2 eta_i (x) eta_i`` with smooth
non-negative ``phi_i``.

Symmetric matrices are handled in orthonormal coordinates: diagonal entries
and sqrt(2) times the upper off-diagonal entries, so Euclidean norms of
coordinate vectors are Frobenius norms of matrices.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError, StageError, ValidationError
from .fields import SCALAR, GridField, sym_pairs, unpack_sym


def dstar(d: int) -> int:
    return d * (d + 1) // 2


def sym_coords(M: np.ndarray) -> np.ndarray:
    """(d, d, ...) -> orthonormal coordinates (d*, ...)."""
    d = M.shape[0]
    return np.stack([M[i, i] if i == j else math.sqrt(2.0) * 0.5 * (M[i, j] + M[j, i]) for i, j in sym_pairs(d)])


def from_sym_coords(c: np.ndarray, d: int) -> np.ndarray:
    packed = np.stack([c[k] if i == j else c[k] / math.sqrt(2.0) for k, (i, j) in enumerate(sym_pairs(d))])
    return unpack_sym(packed, d)


def packed_to_coords(packed: np.ndarray, d: int) -> np.ndarray:
    """Storage layout of a symmatrix GridField -> orthonormal coordinates."""
    scale = np.array([1.0 if i == j else math.sqrt(2.0) for i, j in sym_pairs(d)])
    return packed * scale.reshape((-1,) + (1,) * (packed.ndim - 1))


def coords_to_packed(coords: np.ndarray, d: int) -> np.ndarray:
    scale = np.array([1.0 if i == j else math.sqrt(2.0) for i, j in sym_pairs(d)])
    return coords / scale.reshape((-1,) + (1,) * (coords.ndim - 1))


def dyad_coords(eta: np.ndarray) -> np.ndarray:
    return sym_coords(np.outer(eta, eta))


@dataclass(frozen=True, eq=False)
class PrimitiveFrame:
    d: int
    etas: np.ndarray
    coeff_map: np.ndarray
    r0: float

    @property
    def dstar(self) -> int:
        return dstar(self.d)

    def coefficients(self, A: np.ndarray) -> np.ndarray:
        """Coefficients for matrices given as (d, d, ...) arrays."""
        c = sym_coords(A)
        return np.tensordot(self.coeff_map, c, axes=(1, 0))

    def coefficients_packed(self, packed: np.ndarray) -> np.ndarray:
        """Coefficients for matrices in symmatrix storage layout (d*, ...)."""
        return np.tensordot(self.coeff_map, packed_to_coords(packed, self.d), axes=(1, 0))

    def dyads_packed(self) -> np.ndarray:
        """(d*, d*) array: row i is eta_i (x) eta_i in storage layout."""
        return np.stack([np.array([e[i] * e[j] for i, j in sym_pairs(self.d)]) for e in self.etas])

    def reconstruct(self, coeffs: np.ndarray) -> np.ndarray:
        """sum_i coeffs_i eta_i (x) eta_i as a (d, d, ...) array."""
        out = 0.0
        for c, e in zip(coeffs, self.etas):
            out = out + np.multiply.outer(np.outer(e, e), c)
        return np.asarray(out)

    def to_json(self) -> str:
        return json.dumps(
            {"d": self.d, "etas": self.etas.tolist(), "coeff_map": self.coeff_map.tolist(), "r0": self.r0},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "PrimitiveFrame":
        obj = json.loads(text)
        return cls(int(obj["d"]), np.array(obj["etas"]), np.array(obj["coeff_map"]), float(obj["r0"]))


def _frame_from_etas(d: int, etas: np.ndarray):
    G = np.stack([dyad_coords(e) for e in etas], axis=1)
    if np.linalg.cond(G) > 1e8:
        return None
    L = np.linalg.inv(G)
    return L, L @ sym_coords(np.eye(d))


def _random_frame(d: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ds = dstar(d)
    best, best_score = None, -np.inf
    for _ in range(400):
        etas = rng.normal(size=(ds, d))
        etas /= np.linalg.norm(etas, axis=1, keepdims=True)
        res = _frame_from_etas(d, etas)
        if res is not None and res[1].min() > best_score:
            best, best_score = etas, res[1].min()
    # deterministic hill climb on the worst coefficient
    step = 0.3
    for _ in range(4000):
        cand = best + step * rng.normal(size=best.shape)
        cand /= np.linalg.norm(cand, axis=1, keepdims=True)
        res = _frame_from_etas(d, cand)
        if res is not None and res[1].min() > best_score:
            best, best_score = cand, res[1].min()
        else:
            step = max(step * 0.999, 0.01)
    return best


@functools.lru_cache(maxsize=None)
def build_primitive_frame(d: int, seed: int = 0) -> PrimitiveFrame:
    if d < 1:
        raise ValidationError("dimension must be positive")
    if d == 1:
        etas = np.ones((1, 1))
    elif d == 2:
        th = np.arange(3) * np.pi / 3
        etas = np.stack([np.cos(th), np.sin(th)], axis=1)
    else:
        etas = _random_frame(d, seed)
    res = _frame_from_etas(d, etas)
    if res is None or res[1].min() <= (0.0 if d <= 2 else 0.1):
        raise StageError(f"no primitive frame with positive identity coefficients found for d={d}")
    L, cid = res
    r0 = float(cid.min() / (1.0 + np.linalg.norm(L, 2)))
    frame = PrimitiveFrame(d, etas, L, r0)
    _verify_radius(frame, seed)
    return frame


def _verify_radius(frame: PrimitiveFrame, seed: int, samples: int = 2000) -> None:
    rng = np.random.default_rng(seed + 1)
    dirs = rng.normal(size=(frame.dstar, samples))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    c = frame.coeff_map @ (sym_coords(np.eye(frame.d))[:, None] + frame.r0 * dirs)
    if c.min() < frame.r0 / 2:
        raise StageError("primitive frame fails its positivity check on the r0 sphere")


def decompose_near_identity(frame: PrimitiveFrame, A: np.ndarray, report: bool = False):
    """Coefficients c with sum_i c_i eta_i (x) eta_i = A; A is (d, d) or (d, d, ...)."""
    A = np.asarray(A, dtype=float)
    coeffs = frame.coefficients(A)
    if report:
        dist = np.sqrt(np.sum(sym_coords(A - np.multiply.outer(np.eye(frame.d), np.ones(A.shape[2:]))) ** 2, axis=0))
        return coeffs, bool(np.all(dist <= frame.r0 + 1e-15))
    return coeffs


# --------------------------------------------------------------------------
# partition of unity over the positive cone


def _bump(r: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


@dataclass(frozen=True, eq=False)
class Chart:
    center: np.ndarray
    inv_sqrt: np.ndarray
    etas: np.ndarray
    scale: np.ndarray
    radius: float


@dataclass(frozen=True, eq=False)
class PartitionFrame:
    frame: PrimitiveFrame
    charts: list
    n0: int

    def weights(self, mats: np.ndarray) -> np.ndarray:
        """Normalised partition weights psi_m for (P, d, d) matrices -> (M, P)."""
        chi = np.stack([_bump(np.linalg.norm((mats - ch.center).reshape(len(mats), -1), axis=1) / ch.radius)
                        for ch in self.charts])
        total = chi.sum(axis=0)
        if np.any(total <= 0):
            bad = int(np.argmin(total))
            raise PreconditionError(f"matrix {mats[bad].tolist()} is outside the covered set")
        return chi / total

    def coefficient_roots(self, mats: np.ndarray) -> np.ndarray:
        """phi_{m,i}(A) for all charts m and frame indices i -> (M, d*, P)."""
        psi = self.weights(mats)
        out = np.zeros((len(self.charts), self.frame.dstar, len(mats)))
        for m, ch in enumerate(self.charts):
            active = psi[m] > 0
            if not np.any(active):
                continue
            pulled = np.einsum("ab,pbc,cd->adp", ch.inv_sqrt, mats[active], ch.inv_sqrt)
            c = self.frame.coefficients(pulled) * ch.scale[:, None]
            out[m][:, active] = np.sqrt(np.maximum(psi[m][active] * c, 0.0))
        return out


def _chart(frame: PrimitiveFrame, P: np.ndarray) -> Chart:
    evals, evecs = np.linalg.eigh(P)
    sqrtP = (evecs * np.sqrt(evals)) @ evecs.T
    inv_sqrt = (evecs / np.sqrt(evals)) @ evecs.T
    vecs = frame.etas @ sqrtP
    norms = np.linalg.norm(vecs, axis=1)
    return Chart(P.copy(), inv_sqrt, vecs / norms[:, None], norms**2, frame.r0 * float(evals.min()))


def build_partition(frame: PrimitiveFrame, mats: np.ndarray) -> PartitionFrame:
    """Greedy net over sampled matrices (scanned in the given order) plus bump weights."""
    centers, radii = [], []
    for A in mats:
        if centers:
            dist = np.linalg.norm((np.array(centers) - A).reshape(len(centers), -1), axis=1)
            if np.any(dist <= 0.5 * np.array(radii)):
                continue
        lam_min = np.linalg.eigvalsh(A)[0]
        if lam_min <= 0:
            raise PreconditionError(f"matrix {A.tolist()} is not positive definite")
        centers.append(A.copy())
        radii.append(frame.r0 * lam_min)
    charts = [_chart(frame, P) for P in centers]
    part = PartitionFrame(frame, charts, 0)
    phis = part.coefficient_roots(mats)
    n0 = int((phis > 0).sum(axis=(0, 1)).max())
    return PartitionFrame(frame, charts, n0)


def decompose_positive_field(D: GridField, c_min: float, frame: PrimitiveFrame | None = None,
                             partition: PartitionFrame | None = None) -> list:
    """Return pairs (eta, b) with sum b^2 eta (x) eta = D; b are scalar GridFields."""
    if D.shape.kind != "symmatrix":
        raise ValidationError("decompose_positive_field needs a symmatrix field")
    if not c_min > 0:
        raise ValidationError("c_min must be positive")
    d = D.shape.dim
    frame = frame or build_primitive_frame(d)
    dom = D.domain
    mats_all = np.moveaxis(D.matrix(), (0, 1), (-2, -1))
    interior = mats_all[dom.interior].reshape(-1, d, d)
    lam = np.linalg.eigvalsh(interior)[:, 0]
    if lam.min() < c_min:
        idx = np.unravel_index(int(np.argmin(lam)), tuple(s.stop - s.start for s in dom.interior))
        x = [dom.axis(a)[dom.margin + i] for a, i in enumerate(idx)]
        raise PreconditionError(
            f"deficit not uniformly positive: min eigenvalue {lam.min():.3e} < {c_min:.3e} at x={x}"
        )
    valid = mats_all[dom.valid(D.halo)]
    flat = valid.reshape(-1, d, d)
    if partition is None:
        partition = build_partition(frame, flat)
    phis = partition.coefficient_roots(flat)
    out = []
    for m, ch in enumerate(partition.charts):
        for i in range(frame.dstar):
            if not np.any(phis[m, i] > 0):
                continue
            b = np.zeros(dom.shape)
            b[dom.valid(D.halo)] = phis[m, i].reshape(valid.shape[:-2])
            out.append((ch.etas[i].copy(), GridField(dom, SCALAR, b[None], D.halo)))
    return out
