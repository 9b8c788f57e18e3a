"""Euclidean machinery: hemiballs, affine hulls and convex-hull distances.

Affine hulls keep two views of the same subspace.  The Gram determinants of
the spanning differences give distances through the ratio
``d(x, V)^2 = G(g_1, ..., g_k, x - a) / G(g_1, ..., g_k)``, while an
orthonormal basis gives the same distance by orthogonal projection.  The
projection value is the numerical referee; the Gram value is what the
perturbation analysis speaks about, and the two are cross-checked.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._accel import njit
from .rng import as_stream, fill_normal

__all__ = [
    "GeometryError",
    "as_point",
    "Hemiball",
    "AffineHull",
    "gram_determinant",
    "dist_to_affine_hull",
    "extend_hull",
    "dist_origin_to_convex_hull",
    "hemiball_contains",
    "PerturbationReport",
    "check_perturbation_bound",
    "HullClaimsReport",
    "check_hull_claims",
    "uniform_sphere_point",
    "uniform_sphere_points",
]

AGREEMENT_RTOL = 1e-9
HULL_GAP_TOL = 1e-10


class GeometryError(ValueError):
    """Invalid geometric input."""


def as_point(x, d: int | None = None) -> np.ndarray:
    """Return ``x`` as a finite float64 vector, optionally checking its length."""
    p = np.asarray(x, dtype=np.float64)
    if p.ndim != 1:
        raise GeometryError(f"a point must be a 1-d vector, got shape {p.shape}")
    if d is not None and p.shape[0] != d:
        raise GeometryError(f"expected a point in R^{d}, got length {p.shape[0]}")
    if not np.all(np.isfinite(p)):
        raise GeometryError("point has non-finite coordinates")
    return p


def _as_points(points, d: int | None = None) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise GeometryError(f"expected a list of points, got shape {arr.shape}")
    if d is not None and arr.shape[1] != d:
        raise GeometryError(f"expected points in R^{d}, got R^{arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("points have non-finite coordinates")
    return arr


# ---------------------------------------------------------------------------
# hemiballs

@dataclass(frozen=True)
class Hemiball:
    """``A_{e,delta}(r) = {x in B(r) : <x, e> >= -delta}``."""

    e: np.ndarray
    delta: float
    r: float

    def __post_init__(self):
        e = as_point(self.e)
        if abs(np.linalg.norm(e) - 1.0) > 1e-12:
            raise GeometryError("hemiball direction must be a unit vector")
        if not (self.r > 0):
            raise GeometryError("hemiball radius must be positive")
        if not (0 <= self.delta <= self.r):
            raise GeometryError("need 0 <= delta <= r")
        object.__setattr__(self, "e", e)
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "r", float(self.r))

    @property
    def d(self) -> int:
        return self.e.shape[0]


def hemiball_contains(h: Hemiball, x) -> bool:
    p = as_point(x, h.d)
    return bool(np.linalg.norm(p) <= h.r and float(p @ h.e) >= -h.delta)


# ---------------------------------------------------------------------------
# Gram determinants and affine hulls

def gram_determinant(vectors) -> float:
    """Determinant of the matrix of pairwise inner products.

    Clipped at zero: the exact value is nonnegative, and rounding can only
    push it slightly below.
    """
    try:
        v = np.asarray(vectors, dtype=np.float64)
    except ValueError as exc:  # ragged input
        raise GeometryError("vectors must share one dimension") from exc
    if v.ndim == 1:
        v = v[None, :]
    if v.ndim != 2 or v.shape[0] == 0:
        raise GeometryError("need at least one vector")
    if v.shape[0] > v.shape[1]:
        raise GeometryError(f"{v.shape[0]} vectors in R^{v.shape[1]}: count must be <= d")
    g = v @ v.T
    return max(float(np.linalg.det(g)), 0.0)


def _orthonormal_basis(gens: np.ndarray, d: int) -> np.ndarray:
    if gens.shape[0] == 0:
        return np.zeros((d, 0))
    q, _ = np.linalg.qr(gens.T)
    return q


@dataclass(frozen=True)
class AffineHull:
    """Affine span of ``anchor`` and ``anchor + generators[i]``.

    ``gram_chain[k-1]`` is ``G(g_1, ..., g_k)``.  Construct with
    :meth:`from_points`; extend with :func:`extend_hull`.
    """

    anchor: np.ndarray
    generators: tuple = ()
    gram_chain: tuple = ()
    basis: np.ndarray = field(default=None, repr=False, compare=False)
    full: bool = False

    def __post_init__(self):
        a = as_point(self.anchor)
        object.__setattr__(self, "anchor", a)
        gens = tuple(as_point(g, a.shape[0]) for g in self.generators)
        object.__setattr__(self, "generators", gens)
        if self.basis is None:
            object.__setattr__(self, "basis", _orthonormal_basis(self._gen_matrix(), a.shape[0]))

    @property
    def d(self) -> int:
        return self.anchor.shape[0]

    @property
    def dim(self) -> int:
        return len(self.generators)

    @property
    def points(self) -> np.ndarray:
        """The affinely independent points spanning the hull."""
        return np.vstack([self.anchor] + [self.anchor + g for g in self.generators])

    def _gen_matrix(self) -> np.ndarray:
        if not self.generators:
            return np.zeros((0, self.anchor.shape[0]))
        return np.vstack(self.generators)

    def scale(self) -> float:
        s = float(np.linalg.norm(self.anchor))
        for g in self.generators:
            s = max(s, float(np.linalg.norm(g)))
        return max(s, 1e-300)

    @classmethod
    def from_points(cls, points, tol: float | None = None) -> "AffineHull":
        pts = _as_points(points)
        hull = cls(pts[0])
        for p in pts[1:]:
            hull = extend_hull(hull, p, tol)
        return hull

    def distance(self, x, method: str = "checked") -> float:
        return dist_to_affine_hull(x, self, method)


def _projection_distance(v: np.ndarray, q: np.ndarray) -> float:
    if q.shape[1] == 0:
        return float(np.linalg.norm(v))
    r = v - q @ (q.T @ v)
    r = r - q @ (q.T @ r)  # second pass removes rounding leftovers
    return float(np.linalg.norm(r))


def _gram_distance(v: np.ndarray, hull: AffineHull) -> float:
    if hull.dim == 0:
        return float(np.linalg.norm(v))
    g = np.vstack(hull.generators + (v,))
    return math.sqrt(gram_determinant(g) / hull.gram_chain[-1])


class GeometryMismatch(ArithmeticError):
    """Gram-ratio and projection distances disagree beyond tolerance."""


def dist_to_affine_hull(x, hull: AffineHull, method: str = "checked") -> float:
    """Euclidean distance from ``x`` to ``hull``.

    ``method`` is ``"projection"``, ``"gram"`` or ``"checked"``; the last
    computes both and raises :class:`GeometryMismatch` if they differ by more
    than ``1e-9`` relative.  Rounding in the Gram determinant is of order
    ``1e-16 * scale^2``, so distances below about ``1e-7 * scale`` are
    compared on an absolute floor of that size instead.  The projection
    value is returned.
    """
    p = as_point(x, hull.d)
    if hull.full or hull.dim == hull.d:
        return 0.0
    v = p - hull.anchor
    if method == "projection":
        return _projection_distance(v, hull.basis)
    if method == "gram":
        return _gram_distance(v, hull)
    if method != "checked":
        raise ValueError(f"unknown method {method!r}")
    dp = _projection_distance(v, hull.basis)
    dg = _gram_distance(v, hull)
    scale = max(hull.scale(), float(np.linalg.norm(v)))
    floor = 1e-8 * scale * (hull.dim + 1)
    if abs(dp - dg) > AGREEMENT_RTOL * max(dp, dg) + floor:
        raise GeometryMismatch(f"gram distance {dg!r} vs projection {dp!r}")
    return dp


def extend_hull(hull: AffineHull, x, tol: float | None = None) -> AffineHull:
    """Return ``aff(hull, x)``.

    The dimension grows only if ``x`` is farther than ``tol`` from the hull
    (default ``1e-9`` times the generator scale).  A hull that already spans
    ``R^d`` is returned as a full-space hull, whose distances are all 0.
    """
    p = as_point(x, hull.d)
    if hull.full:
        return hull
    v = p - hull.anchor
    if tol is None:
        tol = 1e-9 * max(hull.scale(), float(np.linalg.norm(v)), 1.0)
    dist = _projection_distance(v, hull.basis)
    if dist <= tol:
        return hull
    if hull.dim == hull.d:  # unreachable for exact arithmetic; guard anyway
        return AffineHull(hull.anchor, hull.generators, hull.gram_chain, hull.basis, full=True)
    gens = hull.generators + (v,)
    g = gram_determinant(np.vstack(gens))
    if g <= 0.0:
        # numerically flat: derive the determinant from the chain instead
        prev = hull.gram_chain[-1] if hull.gram_chain else 1.0
        g = prev * dist * dist
    return AffineHull(hull.anchor, gens, hull.gram_chain + (g,))


# ---------------------------------------------------------------------------
# distance from the origin to a convex hull (GJK-style support descent)

@njit
def _min_norm_affine(pts, idx, m, d, lam):
    """Minimum-norm point of aff{pts[idx[0..m-1]]}; barycentric coords in lam.

    Returns False if the subset is affinely degenerate.
    """
    if m == 1:
        lam[0] = 1.0
        return True
    k = m - 1
    a = np.empty((k, k))
    b = np.empty(k)
    p0 = pts[idx[0]]
    for i in range(k):
        pi = pts[idx[i + 1]]
        bi = 0.0
        for c in range(d):
            bi -= (pi[c] - p0[c]) * p0[c]
        b[i] = bi
        for j in range(i, k):
            pj = pts[idx[j + 1]]
            s = 0.0
            for c in range(d):
                s += (pi[c] - p0[c]) * (pj[c] - p0[c])
            a[i, j] = s
            a[j, i] = s
    # Gaussian elimination with partial pivoting
    scale = 0.0
    for i in range(k):
        scale = max(scale, abs(a[i, i]))
    if scale == 0.0:
        return False
    for col in range(k):
        piv = col
        for r in range(col + 1, k):
            if abs(a[r, col]) > abs(a[piv, col]):
                piv = r
        if abs(a[piv, col]) <= 1e-13 * scale:
            return False
        if piv != col:
            for c in range(k):
                a[col, c], a[piv, c] = a[piv, c], a[col, c]
            b[col], b[piv] = b[piv], b[col]
        for r in range(col + 1, k):
            f = a[r, col] / a[col, col]
            for c in range(col, k):
                a[r, c] -= f * a[col, c]
            b[r] -= f * b[col]
    mu = np.empty(k)
    for i in range(k - 1, -1, -1):
        s = b[i]
        for c in range(i + 1, k):
            s -= a[i, c] * mu[c]
        mu[i] = s / a[i, i]
    tot = 0.0
    for i in range(k):
        lam[i + 1] = mu[i]
        tot += mu[i]
    lam[0] = 1.0 - tot
    return True


@njit
def _min_norm_simplex(simplex, m, d, out_v, keep):
    """Minimum-norm point of conv(simplex[:m]) by enumeration of faces.

    Writes the point to ``out_v`` and the indices of the supporting face to
    ``keep``; returns the face size.
    """
    best = np.inf
    best_mask = 0
    idx = np.empty(m, dtype=np.int64)
    lam = np.empty(m)
    best_lam = np.empty(m)
    for mask in range(1, 1 << m):
        cnt = 0
        for i in range(m):
            if mask & (1 << i):
                idx[cnt] = i
                cnt += 1
        if not _min_norm_affine(simplex, idx, cnt, d, lam):
            continue
        ok = True
        for i in range(cnt):
            if lam[i] < -1e-12:
                ok = False
                break
        if not ok:
            continue
        n2 = 0.0
        for c in range(d):
            s = 0.0
            for i in range(cnt):
                s += lam[i] * simplex[idx[i], c]
            n2 += s * s
        if n2 < best:
            best = n2
            best_mask = mask
            for i in range(cnt):
                best_lam[i] = lam[i]
    cnt = 0
    for c in range(d):
        out_v[c] = 0.0
    for i in range(m):
        if best_mask & (1 << i):
            keep[cnt] = i
            for c in range(d):
                out_v[c] += best_lam[cnt] * simplex[i, c]
            cnt += 1
    return cnt


@njit
def _hull_distance_kernel(points, tol):
    n, d = points.shape
    simplex = np.empty((d + 2, d))
    tmp = np.empty((d + 2, d))
    keep = np.empty(d + 2, dtype=np.int64)
    v = np.empty(d)
    # start from the point nearest the origin
    best = 0
    bn = np.inf
    for i in range(n):
        s = 0.0
        for c in range(d):
            s += points[i, c] * points[i, c]
        if s < bn:
            bn = s
            best = i
    for c in range(d):
        simplex[0, c] = points[best, c]
        v[c] = points[best, c]
    m = 1
    vn = math.sqrt(bn)
    for _ in range(200 + 10 * n):
        if vn <= tol:
            return 0.0
        # support point in direction -v
        w = 0
        wv = np.inf
        for i in range(n):
            s = 0.0
            for c in range(d):
                s += points[i, c] * v[c]
            if s < wv:
                wv = s
                w = i
        gap = vn - wv / vn
        if gap <= tol:
            return vn
        for c in range(d):
            simplex[m, c] = points[w, c]
        m += 1
        cnt = _min_norm_simplex(simplex, m, d, v, keep)
        for i in range(cnt):
            for c in range(d):
                tmp[i, c] = simplex[keep[i], c]
        for i in range(cnt):
            for c in range(d):
                simplex[i, c] = tmp[i, c]
        m = cnt
        s = 0.0
        for c in range(d):
            s += v[c] * v[c]
        new_vn = math.sqrt(s)
        if m == d + 1 or new_vn >= vn:
            # a full simplex contains the origin; no progress means converged
            if m == d + 1:
                return 0.0
            return min(vn, new_vn)
        vn = new_vn
    return vn


def dist_origin_to_convex_hull(points, tol: float = HULL_GAP_TOL) -> float:
    """Distance from the origin to the convex hull of ``points``.

    Support-point descent: the current iterate ``v`` is the nearest point of
    a sub-simplex, and the support point ``w`` minimising ``<w, v>`` certifies
    ``<w, v>/|v| <= dist <= |v|``.  Stops when that gap is below ``tol``.
    """
    pts = _as_points(points)
    if pts.shape[0] == 0:
        raise GeometryError("convex hull of an empty set")
    return float(_hull_distance_kernel(np.ascontiguousarray(pts), float(tol)))


# ---------------------------------------------------------------------------
# perturbation of affine hulls

def _prefix_distances(pts: np.ndarray) -> np.ndarray:
    """``d(p_i, aff{p_0..p_{i-1}})`` for ``i = 1..n`` by projection."""
    out = np.empty(pts.shape[0] - 1)
    for i in range(1, pts.shape[0]):
        diffs = pts[1:i] - pts[0]
        q = _orthonormal_basis(diffs, pts.shape[1]) if i > 1 else np.zeros((pts.shape[1], 0))
        out[i - 1] = _projection_distance(pts[i] - pts[0], q)
    return out


def _origin_prefix_distances(pts: np.ndarray) -> np.ndarray:
    """``d(0, aff{p_0..p_{i-1}})`` for ``i = 1..n``."""
    out = np.empty(pts.shape[0] - 1)
    for i in range(1, pts.shape[0]):
        diffs = pts[1:i] - pts[0]
        q = _orthonormal_basis(diffs, pts.shape[1]) if i > 1 else np.zeros((pts.shape[1], 0))
        out[i - 1] = _projection_distance(-pts[0], q)
    return out


@dataclass
class PerturbationReport:
    max_diff: float
    delta_p: float
    diffs: np.ndarray
    violations: list

    @property
    def ratio(self) -> float:
        return self.max_diff / self.delta_p if self.delta_p > 0 else math.inf

    @property
    def admissible(self) -> bool:
        return not self.violations


def check_perturbation_bound(xs, ys, delta: float, p: float, R: float) -> PerturbationReport:
    """Compare prefix hull distances of ``xs`` and a perturbation ``ys``.

    Preconditions (a) ``|x_i| <= R``, (b) ``d(x_i, aff{x_0..x_{i-1}}) > delta``
    and (c) ``|x_i - y_i| < R delta^(2d+p)`` are checked and any failure is
    listed in ``violations``; the distances are compared regardless.
    """
    x = _as_points(xs)
    y = _as_points(ys, x.shape[1])
    if x.shape != y.shape:
        raise GeometryError("xs and ys must have the same shape")
    n1, d = x.shape
    if not (1 <= n1 - 1 <= d):
        raise GeometryError("need between 2 and d+1 points")
    viol = []
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms > R):
        viol.append(f"(a) max |x_i| = {norms.max():.6g} > R = {R}")
    dx = _prefix_distances(x)
    if np.any(dx <= delta):
        viol.append(f"(b) min prefix distance {dx.min():.6g} <= delta = {delta}")
    pert = np.linalg.norm(x - y, axis=1)
    bound = R * delta ** (2 * d + p)
    if np.any(pert >= bound):
        viol.append(f"(c) max |x_i - y_i| = {pert.max():.6g} >= R delta^(2d+p) = {bound:.6g}")
    dy = _prefix_distances(y)
    diffs = np.abs(dx - dy)
    return PerturbationReport(float(diffs.max()), float(delta ** p), diffs, viol)


@dataclass
class HullClaimsReport:
    """Outcome of the three perturbation claims; ``None`` means vacuous."""

    claim1: list
    claim2: list
    claim3: bool | None

    @property
    def ok(self) -> bool:
        flat = [c for c in self.claim1 + self.claim2 if c is not None]
        if self.claim3 is not None:
            flat.append(self.claim3)
        return all(flat)


def check_hull_claims(xs, ys, delta1: float, x=None, y=None) -> HullClaimsReport:
    """Evaluate the three perturbation claims for every prefix.

    1. ``d(x_i, aff x_{<i}) > delta1`` implies ``d(y_i, aff y_{<i}) > delta1/2``.
    2. ``delta1 < d(0, aff x_{<i}) <= 2 delta1`` implies
       ``delta1/2 < d(0, aff y_{<i}) < 4 delta1``.
    3. For the extra pair ``(x, y)``: ``d(x, aff xs) < delta1`` implies
       ``d(y, aff ys) < 2 delta1``.
    """
    xa = _as_points(xs)
    ya = _as_points(ys, xa.shape[1])
    dx, dy = _prefix_distances(xa), _prefix_distances(ya)
    ox, oy = _origin_prefix_distances(xa), _origin_prefix_distances(ya)
    c1 = [bool(b > delta1 / 2) if a > delta1 else None for a, b in zip(dx, dy)]
    c2 = [bool(delta1 / 2 < b < 4 * delta1) if delta1 < a <= 2 * delta1 else None for a, b in zip(ox, oy)]
    c3 = None
    if x is not None and y is not None:
        hx = AffineHull.from_points(xa)
        hy = AffineHull.from_points(ya)
        if dist_to_affine_hull(x, hx, "projection") < delta1:
            c3 = bool(dist_to_affine_hull(y, hy, "projection") < 2 * delta1)
    return HullClaimsReport(c1, c2, c3)


# ---------------------------------------------------------------------------
# uniform points on spheres

@njit
def unit_vector(s, out):
    """Fill ``out`` with a uniform unit vector drawn from stream state ``s``."""
    while True:
        fill_normal(s, out)
        n2 = 0.0
        for c in range(out.shape[0]):
            n2 += out[c] * out[c]
        if n2 > 1e-300:
            break
    inv = 1.0 / math.sqrt(n2)
    for c in range(out.shape[0]):
        out[c] *= inv


@njit
def _sphere_points_kernel(s, n, d):
    out = np.empty((n, d))
    buf = np.empty(d)
    for i in range(n):
        unit_vector(s, buf)
        for c in range(d):
            out[i, c] = buf[c]
    return out


def uniform_sphere_points(rng, n: int, d: int, center=None, radius: float = 1.0) -> np.ndarray:
    """``n`` independent uniform points on the sphere ``center + radius S^{d-1}``."""
    if radius <= 0:
        raise GeometryError("radius must be positive")
    st = as_stream(rng)
    u = _sphere_points_kernel(st.state, int(n), int(d))
    c = np.zeros(d) if center is None else as_point(center, d)
    return c + radius * u


def uniform_sphere_point(rng, center, radius: float) -> np.ndarray:
    """One uniform point at distance ``radius`` from ``center`` (to rounding)."""
    c = as_point(center)
    return uniform_sphere_points(rng, 1, c.shape[0], c, radius)[0]
