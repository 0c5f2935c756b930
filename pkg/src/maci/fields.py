"""Grid fields on a padded box: derivatives, mollification, norms and I/O.

A :class:`Domain` is the box ``origin + [0, L]^d`` sampled with ``n`` cells per
axis plus ``margin`` extra cells on every side.  A :class:`GridField` stores
component-major data of shape ``(ncomp, *domain.shape)``.  Operations that
read neighbouring points (derivatives, mollification) shrink the layer of
trusted values; this is tracked by ``GridField.halo``, the number of outer
layers that no longer carry accurate values.  Norms are always measured on
the interior points, i.e. on the closed box itself.
"""

from __future__ import annotations

import csv
import itertools
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage, signal

from .errors import ValidationError

MAGIC = b"MAFLD1"

# 4th-order centred stencils, listed for offsets -2..2 (correlation order).
D1_WEIGHTS = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
D2_WEIGHTS = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0
STENCIL_HALF = 2
MAX_DERIVATIVE_ORDER = 4


@dataclass(frozen=True)
class Domain:
    d: int
    n: tuple
    margin: int
    lengths: tuple
    origin: tuple

    def __post_init__(self):
        if self.d < 1:
            raise ValidationError("dimension must be positive")
        if len(self.n) != self.d or len(self.lengths) != self.d or len(self.origin) != self.d:
            raise ValidationError("per-axis tuples must have length d")
        if min(self.n) < 1:
            raise ValidationError("every axis needs at least one cell")
        if self.margin < 0:
            raise ValidationError("margin must be non-negative")
        hs = [L / m for L, m in zip(self.lengths, self.n)]
        if max(hs) - min(hs) > 1e-12 * max(hs):
            raise ValidationError(f"grid spacing must be isotropic, got {hs}")

    @classmethod
    def box(cls, d: int, n: int, margin: int, length: float = 1.0, origin=None) -> "Domain":
        origin = (0.0,) * d if origin is None else tuple(float(o) for o in origin)
        return cls(d, (int(n),) * d, int(margin), (float(length),) * d, origin)

    @property
    def h(self) -> float:
        return self.lengths[0] / self.n[0]

    @property
    def shape(self) -> tuple:
        return tuple(m + 1 + 2 * self.margin for m in self.n)

    @property
    def interior(self) -> tuple:
        return tuple(slice(self.margin, self.margin + m + 1) for m in self.n)

    def valid(self, halo: int) -> tuple:
        return tuple(slice(halo, s - halo) for s in self.shape)

    def axis(self, a: int) -> np.ndarray:
        idx = np.arange(self.shape[a]) - self.margin
        return self.origin[a] + idx * self.h

    def mesh(self) -> list:
        return np.meshgrid(*[self.axis(a) for a in range(self.d)], indexing="ij")

    @property
    def center(self) -> np.ndarray:
        return np.array([o + L / 2 for o, L in zip(self.origin, self.lengths)])

    @property
    def diameter(self) -> float:
        return float(np.sqrt(sum(L * L for L in self.lengths)))


def sym_pairs(d: int) -> list:
    """Index pairs (i, j), i <= j, in the storage order of symmetric matrices."""
    return [(i, j) for i in range(d) for j in range(i, d)]


def curvature_quads(d: int) -> list:
    """Canonical quadruples ((i, j), (s, t)) with i<j, s<t, (i, j) <= (s, t)."""
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    return [(p, q) for a, p in enumerate(pairs) for q in pairs[a:]]


@dataclass(frozen=True)
class Shape:
    kind: str
    dim: int = 1

    def __post_init__(self):
        if self.kind not in ("scalar", "vector", "symmatrix", "curvature"):
            raise ValidationError(f"unknown component kind {self.kind!r}")
        if self.dim < 1:
            raise ValidationError("component dimension must be positive")

    @property
    def ncomp(self) -> int:
        if self.kind == "scalar":
            return 1
        if self.kind == "vector":
            return self.dim
        if self.kind == "symmatrix":
            return self.dim * (self.dim + 1) // 2
        return len(curvature_quads(self.dim))

    @property
    def weights(self) -> np.ndarray:
        """Multiplicity of each stored component in the full tensor (for Frobenius norms)."""
        if self.kind == "symmatrix":
            return np.array([1.0 if i == j else 2.0 for i, j in sym_pairs(self.dim)])
        if self.kind == "curvature":
            return np.array([4.0 if p == q else 8.0 for p, q in curvature_quads(self.dim)])
        return np.ones(self.ncomp)


SCALAR = Shape("scalar")


def vector(k: int) -> Shape:
    return Shape("vector", k)


def symmatrix(d: int) -> Shape:
    return Shape("symmatrix", d)


def curvature(d: int) -> Shape:
    return Shape("curvature", d)


@dataclass(frozen=True, eq=False)
class GridField:
    domain: Domain
    shape: Shape
    data: np.ndarray
    halo: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        expected = (self.shape.ncomp,) + self.domain.shape
        if data.shape != expected:
            raise ValidationError(f"data shape {data.shape} does not match {expected}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("field data must be finite")
        if self.halo > self.domain.margin:
            raise ValidationError(
                f"insufficient margin: {self.halo} layers consumed, margin is {self.domain.margin}"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def interior_data(self) -> np.ndarray:
        return self.data[(slice(None),) + self.domain.interior]

    def matrix(self) -> np.ndarray:
        if self.shape.kind != "symmatrix":
            raise ValidationError("matrix() needs a symmatrix field")
        return unpack_sym(self.data, self.shape.dim)

    def _combine(self, other, op):
        if isinstance(other, GridField):
            if other.domain != self.domain or other.shape != self.shape:
                raise ValidationError("fields live on different domains or shapes")
            return GridField(self.domain, self.shape, op(self.data, other.data), max(self.halo, other.halo))
        return GridField(self.domain, self.shape, op(self.data, other), self.halo)

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, scalar):
        return GridField(self.domain, self.shape, self.data * float(scalar), self.halo)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


def pack_sym(M: np.ndarray) -> np.ndarray:
    """(d, d, ...) -> (d*, ...) using the symmetric part of M."""
    d = M.shape[0]
    return np.stack([0.5 * (M[i, j] + M[j, i]) for i, j in sym_pairs(d)])


def unpack_sym(data: np.ndarray, d: int) -> np.ndarray:
    out = np.empty((d, d) + data.shape[1:])
    for c, (i, j) in enumerate(sym_pairs(d)):
        out[i, j] = data[c]
        out[j, i] = data[c]
    return out


def sample(domain: Domain, func: Callable, shape: Shape = SCALAR) -> GridField:
    """Evaluate ``func(*mesh)`` on every grid point (padding included)."""
    out = func(*domain.mesh())
    if isinstance(out, (list, tuple)):
        comps = [np.broadcast_to(np.asarray(c, dtype=float), domain.shape) for c in out]
    else:
        arr = np.asarray(out, dtype=float)
        if arr.ndim == domain.d + 1:
            comps = list(arr)
        else:
            comps = [np.broadcast_to(arr, domain.shape)]
    return GridField(domain, shape, np.array(np.stack(comps)))


def constant(domain: Domain, value, shape: Shape = SCALAR) -> GridField:
    value = np.atleast_1d(np.asarray(value, dtype=float))
    data = np.broadcast_to(value.reshape((-1,) + (1,) * domain.d), (shape.ncomp,) + domain.shape)
    return GridField(domain, shape, np.array(data))


# --------------------------------------------------------------------------
# derivatives


def d1(arr: np.ndarray, axis: int, h: float) -> np.ndarray:
    """4th-order first difference along ``axis`` of a raw array."""
    return ndimage.correlate1d(arr, D1_WEIGHTS / h, axis=axis, mode="nearest")


def d2(arr: np.ndarray, axis: int, h: float) -> np.ndarray:
    return ndimage.correlate1d(arr, D2_WEIGHTS / (h * h), axis=axis, mode="nearest")


def jacobian(arr: np.ndarray, d: int, h: float) -> np.ndarray:
    """(..., *grid) -> (..., d, *grid); the new axis indexes the derivative direction."""
    lead = arr.ndim - d
    return np.stack([d1(arr, lead + a, h) for a in range(d)], axis=lead)


def hessian(arr: np.ndarray, d: int, h: float, composed: bool = False) -> np.ndarray:
    """(..., *grid) -> (..., d, d, *grid).

    Diagonal entries use the 5-point second difference unless ``composed``,
    in which case every entry is a product of first differences (so that
    discrete mixed partials commute exactly with first differences).
    """
    lead = arr.ndim - d
    first = [d1(arr, lead + a, h) for a in range(d)]
    out = np.empty(arr.shape[:lead] + (d, d) + arr.shape[lead:])
    for a in range(d):
        for b in range(a, d):
            if a == b and not composed:
                val = d2(arr, lead + a, h)
            else:
                val = d1(first[a], lead + b, h)
            out[(Ellipsis, a, b) + (slice(None),) * d] = val
            out[(Ellipsis, b, a) + (slice(None),) * d] = val
    return out


def derivative(f: GridField, multi_index: Sequence[int]) -> GridField:
    """Partial derivative with per-axis orders ``multi_index`` (total order <= 4)."""
    mi = tuple(int(m) for m in multi_index)
    if len(mi) != f.domain.d or min(mi) < 0:
        raise ValidationError(f"multi-index {mi} does not match dimension {f.domain.d}")
    order = sum(mi)
    if order > MAX_DERIVATIVE_ORDER:
        raise ValidationError(f"derivative order {order} exceeds {MAX_DERIVATIVE_ORDER}")
    halo = f.halo + STENCIL_HALF * order
    if halo > f.domain.margin:
        raise ValidationError(
            f"insufficient margin for order-{order} derivative: need {halo}, have {f.domain.margin}"
        )
    h = f.domain.h
    arr = f.data
    for a, m in enumerate(mi):
        for _ in range(m // 2):
            arr = d2(arr, 1 + a, h)
        if m % 2:
            arr = d1(arr, 1 + a, h)
    return GridField(f.domain, f.shape, arr, halo)


# --------------------------------------------------------------------------
# mollification


def mollifier_kernel(l: float, h: float, d: int) -> np.ndarray:
    """Grid weights of phi_l(x) = l^-d phi(x/l), renormalised to unit sum."""
    R = int(math.floor(l / h))
    r = np.arange(-R, R + 1) * h
    mesh = np.meshgrid(*([r] * d), indexing="ij")
    rho2 = sum(m * m for m in mesh) / (l * l)
    w = np.zeros_like(rho2)
    inside = rho2 < 1.0
    w[inside] = np.exp(-1.0 / (1.0 - rho2[inside]))
    return w / w.sum()


def mollify_array(arr: np.ndarray, kernel: np.ndarray, d: int) -> np.ndarray:
    """Correlate each leading component of ``arr`` with a symmetric kernel."""
    lead = arr.shape[: arr.ndim - d]
    flat = arr.reshape((-1,) + arr.shape[arr.ndim - d :])
    out = np.empty_like(flat)
    big = kernel.shape[0] > 25
    for c in range(flat.shape[0]):
        if big:
            out[c] = signal.oaconvolve(flat[c], kernel, mode="same")
        else:
            out[c] = ndimage.correlate(flat[c], kernel, mode="nearest")
    return out.reshape(lead + arr.shape[arr.ndim - d :])


def mollify(f: GridField, l: float) -> GridField:
    h = f.domain.h
    if not (l >= 2 * h):
        raise ValidationError(f"mollification radius {l:.3g} below two grid cells ({2 * h:.3g})")
    kernel = mollifier_kernel(l, h, f.domain.d)
    halo = f.halo + kernel.shape[0] // 2
    if halo > f.domain.margin:
        raise ValidationError(
            f"mollification radius {l:.3g} needs margin {halo}, have {f.domain.margin}"
        )
    return GridField(f.domain, f.shape, mollify_array(f.data, kernel, f.domain.d), halo)


# --------------------------------------------------------------------------
# norms


def pointwise_norm(data: np.ndarray, shape: Shape) -> np.ndarray:
    w = shape.weights.reshape((-1,) + (1,) * (data.ndim - 1))
    return np.sqrt(np.sum(w * data * data, axis=0))


def sup_norm(f) -> float:
    """Max over interior points of the pointwise Euclidean/Frobenius norm."""
    if isinstance(f, GridField):
        return float(pointwise_norm(f.interior_data, f.shape).max())
    return float(np.max(np.abs(f)))


def c_norm(f: GridField, m: int) -> float:
    """sum_{|g| <= m} sup |d^g f| over the interior."""
    return sum(sup_norm(derivative(f, g)) for order in range(m + 1) for g in multi_indices(f.domain.d, order))


def multi_indices(d: int, order: int) -> list:
    return [mi for mi in itertools.product(range(order + 1), repeat=d) if sum(mi) == order]


@dataclass(frozen=True)
class HolderEstimate:
    m: int
    alpha: float
    value: float
    sup_part: float = 0.0
    seminorm: float = 0.0


def _pair_offsets(domain: Domain) -> list:
    dirs = [tuple(int(a == b) for b in range(domain.d)) for a in range(domain.d)]
    for signs in itertools.product((1, -1), repeat=domain.d - 1):
        if domain.d > 1:
            dirs.append((1,) + signs)
    limit = domain.diameter / 4
    offsets = []
    for direction in dirs:
        norm = math.sqrt(sum(c * c for c in direction))
        s = 1
        while s * norm * domain.h <= limit:
            offsets.append(tuple(s * c for c in direction))
            s *= 2
    return offsets


def holder_quotient(data: np.ndarray, shape: Shape, domain: Domain, alpha: float) -> float:
    """Max of |g(x) - g(y)| / |x - y|^alpha over axis/diagonal dyadic pairs of interior points."""
    inner = data[(slice(None),) + domain.interior]
    best = 0.0
    for off in _pair_offsets(domain):
        src, dst = [], []
        for o, size in zip(off, inner.shape[1:]):
            if abs(o) >= size:
                break
            src.append(slice(max(0, -o), size - max(0, o)))
            dst.append(slice(max(0, o), size + min(0, o)))
        else:
            diff = inner[(slice(None),) + tuple(dst)] - inner[(slice(None),) + tuple(src)]
            dist = domain.h * math.sqrt(sum(o * o for o in off))
            best = max(best, float(pointwise_norm(diff, shape).max()) / dist**alpha)
    return best


def holder_norm(f: GridField, m: int, alpha: float) -> HolderEstimate:
    if m not in (0, 1, 2):
        raise ValidationError("Hoelder norms are estimated for m <= 2")
    if not (0 < alpha <= 1):
        raise ValidationError("alpha must lie in (0, 1]")
    sup_part = 0.0
    semi = 0.0
    for order in range(m + 1):
        for mi in multi_indices(f.domain.d, order):
            g = derivative(f, mi)
            sup_part += sup_norm(g)
            if order == m:
                semi = max(semi, holder_quotient(g.data, f.shape, f.domain, alpha))
    return HolderEstimate(m, alpha, sup_part + semi, sup_part, semi)


# --------------------------------------------------------------------------
# extension and resampling


def _smooth_step(u: np.ndarray) -> np.ndarray:
    """C-infinity step: 0 for u <= 0, 1 for u >= 1."""
    def e(t):
        out = np.zeros_like(t)
        pos = t > 0
        out[pos] = np.exp(-1.0 / t[pos])
        return out

    u = np.clip(u, 0.0, 1.0)
    return e(u) / (e(u) + e(1.0 - u))


def cutoff(domain: Domain) -> np.ndarray:
    """Smooth function equal to 1 on the closed box and 0 on the outer grid layer."""
    pad = domain.margin * domain.h
    chi = np.ones(domain.shape)
    if pad == 0:
        return chi
    for a, x in enumerate(domain.mesh()):
        lo, hi = domain.origin[a], domain.origin[a] + domain.lengths[a]
        outside = np.maximum(lo - x, 0.0) + np.maximum(x - hi, 0.0)
        chi = chi * _smooth_step(1.0 - outside / pad)
    return chi


def extend_smooth(f: GridField) -> GridField:
    return GridField(f.domain, f.shape, f.data * cutoff(f.domain)[None], f.halo)


def resample(f: GridField, target: Domain, order: int = 5) -> GridField:
    """Spline interpolation of ``f`` onto the grid of ``target`` (padding included)."""
    if target.d != f.domain.d:
        raise ValidationError("dimension mismatch in resample")
    src = f.domain
    coords = np.stack([(x - src.axis(a)[0]) / src.h for a, x in enumerate(target.mesh())])
    lo = f.halo
    for a in range(src.d):
        hi = src.shape[a] - 1 - f.halo
        if coords[a].min() < lo - 1e-9 or coords[a].max() > hi + 1e-9:
            raise ValidationError("resample target reaches outside the trusted part of the source grid")
    out = np.empty((f.shape.ncomp,) + target.shape)
    for c in range(f.shape.ncomp):
        coeffs = ndimage.spline_filter(f.data[c], order=order, mode="mirror")
        out[c] = ndimage.map_coordinates(coeffs, coords, order=order, mode="mirror", prefilter=False)
    return GridField(target, f.shape, out)


# --------------------------------------------------------------------------
# I/O


def dump_field(f: GridField, path) -> None:
    """Binary dump: MAFLD1, <u32 d, u32 ncomp, u32 counts[d]>, float64 data (row-major per component)."""
    counts = f.domain.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", f.domain.d, f.shape.ncomp))
        fh.write(struct.pack("<%dI" % f.domain.d, *counts))
        fh.write(np.ascontiguousarray(f.data, dtype="<f8").tobytes())


def load_field(path) -> tuple:
    """Read a binary dump; returns (counts, data) with data shaped (ncomp, *counts)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:6] != MAGIC:
        raise ValidationError("not a field dump (bad magic)")
    d, ncomp = struct.unpack_from("<II", raw, 6)
    counts = struct.unpack_from("<%dI" % d, raw, 14)
    offset = 14 + 4 * d
    data = np.frombuffer(raw, dtype="<f8", offset=offset)
    expected = ncomp * int(np.prod(counts))
    if data.size != expected:
        raise ValidationError(f"field dump holds {data.size} values, header says {expected}")
    return tuple(counts), data.reshape((ncomp,) + tuple(counts)).astype(float)


def write_norms_csv(path, rows: Iterable[dict], fieldnames: Sequence[str] | None = None) -> None:
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in fieldnames})


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value
