"""Wiener sausages as unions of balls, vacant components, and events E, F.

A sausage is stored as the finite set of path samples (plus bridge
midpoints inserted where consecutive samples are far apart) together with a
uniform hash grid of cell size ``radius``.  Vacancy inside a small ball is
read off a cubic grid of cell centres and its face-adjacency components.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._accel import njit
from .brownian import INWARD, RETURN, PathSample
from .geometry import _as_points, as_point, dist_origin_to_convex_hull, unit_vector
from .rng import Stream, as_stream, fill_normal

__all__ = [
    "SausageSet", "VacancyReport", "build_sausage", "is_vacant", "count_vacant_components",
    "visited_points", "detect_event_F", "detect_event_E", "detect_event_E_bruteforce",
    "ImplicationReport", "check_hemiball_implication", "BUNDLE_SCHEMA",
    "bundle_line", "parse_bundle_line", "default_refine_gap",
]

BUNDLE_SCHEMA = "vacantlab.bundle/1"

_P = np.array([73856093, 19349663, 83492791, 2654435761, 97531, 1000003, 2147483647, 805306457],
              dtype=np.int64)


def default_refine_gap(radius: float, eps: float | None = None) -> float:
    g = radius / 10.0
    return g if eps is None else min(eps / 10.0, g)


# ---------------------------------------------------------------------------
# hash grid

@njit(inline="always")
def _cell_key(x, i, inv, d, P):
    key = np.int64(0)
    for j in range(d):
        key += np.int64(math.floor(x[i, j] * inv)) * P[j]
    return key


@njit
def _build_keys(centers, inv, P):
    n, d = centers.shape
    keys = np.empty(n, dtype=np.int64)
    for i in range(n):
        keys[i] = _cell_key(centers, i, inv, d, P)
    order = np.argsort(keys, kind="mergesort")
    return keys[order], order


@njit
def _nearest_within(q, centers, skeys, order, inv, P, radius):
    """True if some centre is within ``radius`` of ``q`` (closed ball)."""
    d = q.shape[0]
    base = np.empty(d, dtype=np.int64)
    for j in range(d):
        base[j] = np.int64(math.floor(q[j] * inv))
    r2 = radius * radius
    off = np.full(d, -1, dtype=np.int64)
    n_nb = 3 ** d
    for _ in range(n_nb):
        key = np.int64(0)
        for j in range(d):
            key += (base[j] + off[j]) * P[j]
        lo = np.searchsorted(skeys, key)
        while lo < skeys.shape[0] and skeys[lo] == key:
            c = order[lo]
            s = 0.0
            for j in range(d):
                t = q[j] - centers[c, j]
                s += t * t
            if s <= r2:
                return True
            lo += 1
        # odometer over {-1, 0, 1}^d
        for j in range(d):
            off[j] += 1
            if off[j] <= 1:
                break
            off[j] = -1
    return False


@dataclass
class SausageSet:
    """Union of closed balls ``B(c, radius)`` over the stored centres."""

    centers: np.ndarray
    radius: float = 1.0
    refine_gap: float | None = None
    _keys: np.ndarray = field(init=False, repr=False)
    _order: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("sausage radius must be positive")
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim != 2:
            raise ValueError("centers must be an (n, d) array")
        self.centers = np.ascontiguousarray(c)
        if self.centers.shape[1] > len(_P):
            raise ValueError(f"dimension above {len(_P)} not supported by the hash grid")
        self._keys, self._order = _build_keys(self.centers, 1.0 / self.radius, _P)

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def n(self) -> int:
        return self.centers.shape[0]

    def contains(self, x) -> bool:
        """True if ``x`` is occupied."""
        q = as_point(x, self.d)
        return bool(_nearest_within(q, self.centers, self._keys, self._order,
                                    1.0 / self.radius, _P, self.radius))

    def points_in_ball(self, center, r: float) -> np.ndarray:
        c = as_point(center, self.d)
        m = np.linalg.norm(self.centers - c, axis=1) <= r
        return self.centers[m]


def is_vacant(x, s: SausageSet) -> bool:
    """``min_c |x - c| > radius``, exact with respect to the stored centres."""
    return not s.contains(x)


# ---------------------------------------------------------------------------
# construction

@njit
def _refine_segment(st, a, ta, b, tb, gap, out, n_out):
    """Append bridge midpoints between ``a`` and ``b`` (then ``b`` itself) to
    ``out`` until consecutive points are at most ``gap`` apart.  Returns the
    new length, or -1 if ``out`` is too small."""
    d = a.shape[0]
    # depth-first stack of (left point, left time, right point, right time)
    stack_p = np.empty((64, 2, d))
    stack_t = np.empty((64, 2))
    z = np.empty(d)
    for j in range(d):
        stack_p[0, 0, j] = a[j]
        stack_p[0, 1, j] = b[j]
    stack_t[0, 0] = ta
    stack_t[0, 1] = tb
    sp = 1
    while sp > 0:
        sp -= 1
        t0 = stack_t[sp, 0]
        t1 = stack_t[sp, 1]
        dd = 0.0
        for j in range(d):
            dd += (stack_p[sp, 1, j] - stack_p[sp, 0, j]) ** 2
        if dd <= gap * gap or sp >= 62:
            if n_out >= out.shape[0]:
                return -1
            for j in range(d):
                out[n_out, j] = stack_p[sp, 1, j]
            n_out += 1
            continue
        sd = math.sqrt(max(t1 - t0, 0.0) / 4.0)
        fill_normal(st, z)
        tm = 0.5 * (t0 + t1)
        # push the right half first so the left half is emitted first
        for j in range(d):
            mid = 0.5 * (stack_p[sp, 0, j] + stack_p[sp, 1, j]) + sd * z[j]
            stack_p[sp + 1, 0, j] = stack_p[sp, 0, j]
            stack_p[sp + 1, 1, j] = mid
            stack_p[sp, 0, j] = mid
        stack_t[sp + 1, 0] = t0
        stack_t[sp + 1, 1] = tm
        stack_t[sp, 0] = tm
        sp += 2
    return n_out


@njit
def _refine_path(st, pos, times, jump, gap):
    """Positions with bridge midpoints inserted on every continuous segment
    longer than ``gap``; ``jump[i]`` marks ``i-1 -> i`` as a teleport."""
    n, d = pos.shape
    out = np.empty((2 * n + 16, d))
    out[0] = pos[0]
    m = 1
    saved = st.copy()
    for i in range(1, n):
        while True:
            if m >= out.shape[0]:
                bigger = np.empty((2 * out.shape[0], d))
                bigger[:m] = out[:m]
                out = bigger
            if jump[i]:
                out[m] = pos[i]
                m += 1
                break
            saved[:] = st
            r = _refine_segment(st, pos[i - 1], times[i - 1], pos[i], times[i], gap, out, m)
            if r >= 0:
                m = r
                break
            # out of room: replay the same draws into a larger buffer
            st[:] = saved
            bigger = np.empty((2 * out.shape[0], d))
            bigger[:m] = out[:m]
            out = bigger
    return out[:m]


def _refine_stream(path: PathSample, rng):
    if rng is not None:
        return as_stream(rng)
    tag = tuple(path.seed_tag) if path.seed_tag else (0, 0, 0)
    return Stream(*tag[:3]).spawn(7919)


def build_sausage(paths, radius: float = 1.0, refine_gap: float | None = None,
                  eps: float | None = None, rng=None, include_crossings: bool = True) -> SausageSet:
    """Sausage of ``radius`` around every sample of every path.

    Consecutive samples of a continuous piece further apart than
    ``refine_gap`` (default ``min(eps, radius) / 10``) are joined by
    Brownian-bridge midpoints until every gap is at most ``refine_gap``.
    Jumps placed by the exterior law are never bridged.  Interpolated
    sphere-crossing points are added as centres too.
    """
    if isinstance(paths, PathSample):
        paths = [paths]
    paths = list(paths)
    if not paths:
        raise ValueError("build_sausage needs at least one path")
    gap = float(refine_gap) if refine_gap is not None else default_refine_gap(radius, eps)
    if not gap > 0:
        raise ValueError("refine_gap must be positive")
    chunks = []
    for p in paths:
        jump = np.zeros(p.n, dtype=np.bool_)
        jump[p.teleports] = True
        st = _refine_stream(p, rng)
        chunks.append(_refine_path(st.state, np.ascontiguousarray(p.positions),
                                   np.ascontiguousarray(p.times), jump, gap))
        if include_crossings and len(p.crossing_points):
            chunks.append(p.crossing_points)
    return SausageSet(np.concatenate(chunks, axis=0), float(radius), gap)


# ---------------------------------------------------------------------------
# vacancy inside a small ball

@dataclass(frozen=True)
class VacancyReport:
    """Grid count of vacant components in ``B(ball_center, eps)``.

    Let ``delta`` be half a cell diagonal.  A cell centre in ``B(eps)``
    farther than ``radius`` from every sausage centre is truly vacant.  The
    "loose" cells (centre in ``B(eps + delta)``, farther than ``radius -
    delta``) cover the true vacant set, so every true component lies in a
    single full-adjacency loose component.  Hence

    * ``component_count``: loose components holding a vacant cell centre,
      a certified lower bound on the true count;
    * ``counts``: ``(component_count, nominal, split)`` where ``nominal``
      is the plain face-adjacency count of vacant cell centres and
      ``split`` adds up, over occupied loose components, how many nominal
      components hold "tight" cells (whole cube vacant, inside ``B(eps)``),
      at least one each;
    * ``borderline_flag``: some loose component has tight cells in two
      nominal components, so a wall thinner than a cell may or may not
      separate them.

    Vacant pieces thinner than a cell inside one loose component are below
    the grid resolution and are not counted separately.
    """

    component_count: int
    grid_spacing: float
    borderline_flag: bool
    counts: tuple = ()
    vacant_cells: int = 0
    margin: float = 0.0


@njit
def _nearest_field(grid, centers, cut):
    """min distance from each grid point to the centres, stopping early once
    it is known to be <= cut (the value returned is then <= cut)."""
    g = grid.shape[0]
    n, d = centers.shape
    out = np.empty(g)
    c2 = cut * cut
    for a in range(g):
        best = np.inf
        for i in range(n):
            s = 0.0
            for j in range(d):
                t = grid[a, j] - centers[i, j]
                s += t * t
            if s < best:
                best = s
                if best <= c2:
                    break
        out[a] = math.sqrt(best)
    return out


def _offsets(d, full):
    if not full:
        out = np.zeros((2 * d, d), dtype=np.int64)
        for j in range(d):
            out[2 * j, j] = -1
            out[2 * j + 1, j] = 1
        return out
    g = np.stack(np.meshgrid(*([np.array([-1, 0, 1])] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return np.ascontiguousarray(g[np.any(g != 0, axis=1)].astype(np.int64))


@njit
def _components(vac, shape, offs):
    """Label the True cells of a flattened C-order grid; neighbours are the
    cells at the integer offsets ``offs``.  Returns (count, labels)."""
    d = shape.shape[0]
    n = vac.shape[0]
    stride = np.ones(d, dtype=np.int64)
    for j in range(d - 2, -1, -1):
        stride[j] = stride[j + 1] * shape[j + 1]
    lab = np.full(n, -1, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    idx = np.empty(d, dtype=np.int64)
    comps = 0
    for s0 in range(n):
        if not vac[s0] or lab[s0] >= 0:
            continue
        lab[s0] = comps
        stack[0] = s0
        top = 1
        while top > 0:
            top -= 1
            c = stack[top]
            for j in range(d):
                idx[j] = (c // stride[j]) % shape[j]
            for o in range(offs.shape[0]):
                nb = 0
                ok = True
                for j in range(d):
                    q = idx[j] + offs[o, j]
                    if q < 0 or q >= shape[j]:
                        ok = False
                        break
                    nb += q * stride[j]
                if ok and vac[nb] and lab[nb] < 0:
                    lab[nb] = comps
                    stack[top] = nb
                    top += 1
        comps += 1
    return comps, lab


def _ball_grid(center, rad, h):
    d = center.shape[0]
    m = int(math.floor(rad / h + 1e-9))
    ax = np.arange(-m, m + 1) * h
    mesh = np.stack(np.meshgrid(*([ax] * d), indexing="ij"), axis=-1).reshape(-1, d)
    r2 = np.einsum("ij,ij->i", mesh, mesh)
    return center + mesh, r2, np.full(d, 2 * m + 1, dtype=np.int64)


def _count_once(x0, eps, centers, r, h):
    d = x0.shape[0]
    delta = 0.5 * h * math.sqrt(d)
    pts, r2, shape = _ball_grid(x0, eps + delta, h)
    tol = 1 + 1e-12
    dist = np.full(pts.shape[0], np.inf)
    sel = np.nonzero(r2 <= (eps + delta) ** 2 * tol)[0]
    if centers.shape[0]:
        dist[sel] = _nearest_field(np.ascontiguousarray(pts[sel]), centers, r - delta)
    vac = (r2 <= eps * eps * tol) & (dist > r)
    nominal, nlab = _components(vac, shape, _offsets(d, False))
    loose = (r2 <= (eps + delta) ** 2 * tol) & (dist > r - delta)
    _, lab = _components(loose, shape, _offsets(d, True))
    occupied = np.unique(lab[vac])
    tight = (r2 <= max(eps - delta, 0.0) ** 2 * tol) & (dist > r + delta)
    # distinct (loose, nominal) label pairs among tight cells
    pairs = np.unique(np.stack([lab[tight], nlab[tight]], axis=1), axis=0)
    pieces = np.bincount(pairs[:, 0], minlength=int(lab.max()) + 1) if pairs.size else np.zeros(0, np.int64)
    split = int(sum(max(1, pieces[k] if k < pieces.size else 0) for k in occupied))
    border = bool(pieces.size and pieces.max() >= 2)
    return VacancyReport(int(occupied.size), h, border, (int(occupied.size), int(nominal), split),
                         int(vac.sum()), delta)


def count_vacant_components(ball_center, eps: float, s: SausageSet, grid_spacing: float,
                            refinements: int = 1) -> VacancyReport:
    """Count vacant components of ``B(ball_center, eps)`` on a cubic grid.

    Cell centres ``ball_center + h * i`` inside the closed ball are
    classified by distance to the sausage centres (see
    :class:`VacancyReport`).  A borderline scene is recounted with ``h / 2``
    up to ``refinements`` times.
    """
    x0 = as_point(ball_center, s.d)
    if not eps > 0:
        raise ValueError("eps must be positive")
    h = float(grid_spacing)
    if not (0 < h <= eps / 10.0 * (1 + 1e-12)):
        raise ValueError("grid_spacing must be in (0, eps/10]")
    r = s.radius
    delta = 0.5 * h * math.sqrt(s.d)
    dist_c = np.linalg.norm(s.centers - x0, axis=1) if s.n else np.zeros(0)
    if s.n and dist_c.min() + eps + delta < r - delta:
        # one ball swallows the whole loose region
        return VacancyReport(0, h, False, (0, 0, 0), 0, delta)
    rel = s.centers[dist_c <= r + 2 * delta + eps + h] if s.n else s.centers
    # nearest first, so covered cells stop scanning early
    rel = np.ascontiguousarray(rel[np.argsort(np.linalg.norm(rel - x0, axis=1), kind="stable")])
    rep = _count_once(x0, eps, rel, r, h)
    for _ in range(refinements):
        if not rep.borderline_flag:
            break
        h /= 2.0
        rep = _count_once(x0, eps, rel, r, h)
    return rep


# ---------------------------------------------------------------------------
# events

def visited_points(paths, radius: float, center=None) -> np.ndarray:
    """Samples and interpolated crossing points within the closed ball
    ``B(center, radius)``.  ``paths`` may be PathSamples or a point array."""
    if isinstance(paths, PathSample):
        paths = [paths]
    if isinstance(paths, np.ndarray):
        pts = _as_points(paths)
    else:
        chunks = []
        for p in paths:
            if isinstance(p, PathSample):
                chunks.append(p.positions)
                if len(p.crossing_points):
                    chunks.append(p.crossing_points)
            else:
                chunks.append(_as_points(p))
        if not chunks:
            return np.zeros((0, 0))
        pts = np.concatenate(chunks, axis=0)
    c = np.zeros(pts.shape[1]) if center is None else as_point(center, pts.shape[1])
    keep = np.linalg.norm(pts - c, axis=1) <= radius * (1 + 1e-12)
    return pts[keep]


def detect_event_F(paths, eps: float) -> bool:
    """True iff no path enters ``B(1 - eps)``.

    Uses the inward crossing annotations of the sphere ``1 - eps`` when the
    path carries them, and in every case also checks the samples.
    """
    if isinstance(paths, PathSample):
        paths = [paths]
    inner = 1.0 - eps
    for p in paths:
        k = p.sphere_index(inner)
        if k >= 0:
            cr = p.crossings
            if np.any((cr["sphere"] == k) & ((cr["direction"] == INWARD) | (cr["direction"] == RETURN))):
                return False
        if np.any(np.linalg.norm(p.positions, axis=1) < inner):
            return False
    return True


def detect_event_E(paths, eps: float, radius: float | None = None) -> bool:
    """Every hemiball ``A_{e,eps}(radius)`` is visited.

    Equivalent to ``dist(0, conv(visited points in B(radius))) <= eps``: the
    event fails exactly when all those points lie in an open half-space
    ``{<x, e> < -eps}``.  ``radius`` defaults to ``1 + eps``.
    """
    rad = 1.0 + eps if radius is None else float(radius)
    pts = visited_points(paths, rad)
    if pts.shape[0] == 0:
        return False
    return dist_origin_to_convex_hull(pts) <= eps


@njit
def _bruteforce_kernel(st, pts, eps, n_dirs):
    n, d = pts.shape
    e = np.empty(d)
    for _ in range(n_dirs):
        unit_vector(st, e)
        ok = True
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += pts[i, j] * e[j]
            if s >= -eps:
                ok = False
                break
        if ok:
            return False
    return True


def detect_event_E_bruteforce(paths, eps: float, n_dirs: int = 10_000, rng=None,
                              radius: float | None = None) -> bool:
    """Direction-sampling referee for :func:`detect_event_E`.

    Returns False as soon as one of ``n_dirs`` uniform directions ``e`` has
    every visited point strictly below ``-eps``.  It can only err towards
    True (a thin set of witness directions may be missed).
    """
    if n_dirs < 1:
        raise ValueError("n_dirs must be positive")
    rad = 1.0 + eps if radius is None else float(radius)
    pts = visited_points(paths, rad)
    if pts.shape[0] == 0:
        return False
    st = as_stream(rng)
    return bool(_bruteforce_kernel(st.state, np.ascontiguousarray(pts), float(eps), int(n_dirs)))


# ---------------------------------------------------------------------------
# nonuniqueness implies hemiball hits

def bundle_line(kind: str, params: dict, points=None, **extra) -> str:
    """One self-contained JSON record (a single line)."""
    rec = {"schema": BUNDLE_SCHEMA, "kind": kind, "params": params}
    rec.update(extra)
    if points is not None:
        rec["points"] = np.asarray(points, dtype=float).tolist()
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def parse_bundle_line(line: str) -> dict:
    rec = json.loads(line)
    if rec.get("schema") != BUNDLE_SCHEMA:
        raise ValueError(f"not a {BUNDLE_SCHEMA} record")
    if "points" in rec:
        rec["points"] = np.asarray(rec["points"], dtype=float)
    return rec


@dataclass
class ImplicationReport:
    checked: bool
    hull_distance: float
    event_F: bool
    violations: list = field(default_factory=list)
    bundles: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def check_hemiball_implication(sample: dict) -> ImplicationReport:
    """Assert the conclusions of "two vacant components => all hemiballs hit".

    ``sample`` is a trial record with keys ``report`` (VacancyReport for
    ``B(0, eps)``), ``eps``, ``sausage`` (SausageSet) and optionally
    ``paths`` and ``seed`` (a dict merged into any bundle).  When the report
    has at least two components and is not borderline, checks that the
    sausage centres in ``B(1+eps)`` have hull distance <= eps and that no
    path entered ``B(1-eps)``.  The centre set is the one the count was made
    from, so the check is exact for that scene.
    """
    rep: VacancyReport = sample["report"]
    eps = float(sample["eps"])
    s: SausageSet = sample["sausage"]
    if rep.component_count < 2 or rep.borderline_flag:
        return ImplicationReport(False, math.nan, True)
    pts = s.points_in_ball(np.zeros(s.d), (1.0 + eps) * (1 + 1e-12))
    hd = dist_origin_to_convex_hull(pts) if pts.shape[0] else math.inf
    paths = sample.get("paths")
    f_ok = detect_event_F(paths, eps) if paths else True
    f_ok = f_ok and not np.any(np.linalg.norm(s.centers, axis=1) < 1.0 - eps)
    out = ImplicationReport(True, hd, f_ok)
    if not hd <= eps:
        out.violations.append(f"hemiball: hull distance {hd!r} > eps {eps!r}")
    if not f_ok:
        out.violations.append("inner ball B(1-eps) visited")
    if out.violations:
        params = {"eps": eps, "d": s.d, "radius": s.radius, "grid_spacing": rep.grid_spacing,
                  "components": rep.component_count}
        out.bundles.append(bundle_line("hemiball-implication", params, s.centers,
                                       violations=out.violations, **sample.get("seed", {})))
    return out
