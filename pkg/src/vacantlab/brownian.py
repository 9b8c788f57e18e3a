"""Brownian paths in R^d (generator 1/2 Laplacian) and exact sphere laws.

The workhorse is :func:`simulate_path_segment`, an Euler walker with a
distance-adaptive time step that annotates every crossing of a set of watched
spheres.  Infinite-horizon questions are never settled by a kill radius:
when the walker leaves a designated outer ball it either escapes for good or
re-enters an inner sphere, both decided with the exact exterior laws.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._accel import njit
from .geometry import GeometryError, as_point, unit_vector
from .rng import as_stream, fill_normal, new_state, normal, uniform, uniform_open

__all__ = [
    "HIT", "EXIT", "ESCAPED", "TIMEOUT", "MAXSTEPS", "OUTCOME_NAMES",
    "INWARD", "OUTWARD", "RETURN",
    "hit_prob_annulus", "escape_prob", "poisson_kernel_density", "green_function",
    "sample_entrance_point", "sample_bridge_duration", "sample_bridge",
    "DtPolicy", "Sphere", "StopRule", "Exterior", "PathSample",
    "simulate_path_segment", "simulate_conditioned_escape", "conditioned_drift", "run_outcomes",
]

# outcomes
RUNNING, HIT, EXIT, ESCAPED, TIMEOUT, MAXSTEPS = 0, 1, 2, 3, 4, 5
OUTCOME_NAMES = {HIT: "hit", EXIT: "exit", ESCAPED: "escaped", TIMEOUT: "timeout", MAXSTEPS: "max-steps"}
# crossing directions; RETURN marks a re-entry placed by the exterior law
INWARD, OUTWARD, RETURN = -1, 1, 2


def _norm(x) -> float:
    return float(np.linalg.norm(x))


# ---------------------------------------------------------------------------
# closed forms

def hit_prob_annulus(x, r: float, R: float) -> float:
    """``P_x[T_R < T_r]`` for ``r < |x| < R``."""
    p = as_point(x)
    d = p.shape[0]
    n = _norm(p)
    if not (0 < r < n < R):
        raise GeometryError(f"need r < |x| < R, got r={r}, |x|={n}, R={R}")
    a = r ** (2 - d)
    if math.isinf(R):
        return 1.0 - (n / r) ** (2 - d)
    return (a - n ** (2 - d)) / (a - R ** (2 - d))


def escape_prob(x, r: float) -> float:
    """``P_x[T_r = inf] = 1 - (|x|/r)^(2-d)``."""
    p = as_point(x)
    n = _norm(p)
    if n < r:
        raise GeometryError(f"|x| = {n} is inside B({r})")
    return 1.0 - (n / r) ** (2 - p.shape[0])


def sphere_area(d: int, r: float = 1.0) -> float:
    return 2.0 * math.pi ** (d / 2) / math.gamma(d / 2) * r ** (d - 1)


def poisson_kernel_density(x, r: float, y) -> float:
    """Surface density of ``W_{T_r}`` at ``y`` on the sphere of radius ``r``.

    For exterior ``x`` the total mass is the hitting probability; for interior
    ``x`` it is 1.
    """
    p = as_point(x)
    q = as_point(y, p.shape[0])
    d = p.shape[0]
    if abs(_norm(q) - r) > 1e-9 * max(r, 1.0):
        raise GeometryError("y must lie on the sphere of radius r")
    nx = _norm(p)
    if nx == r:
        raise GeometryError("x on the sphere: kernel is singular")
    return r ** (d - 2) / sphere_area(d, r) * abs(r * r - nx * nx) / _norm(p - q) ** d


def green_function(x, y) -> float:
    """``G(x, y) = Gamma(d/2 - 1) / (2 pi^(d/2)) |x - y|^(2-d)``."""
    p = as_point(x)
    q = as_point(y, p.shape[0])
    d = p.shape[0]
    dist = _norm(p - q)
    if dist == 0.0:
        raise GeometryError("Green function is singular at x = y")
    return math.gamma(d / 2 - 1) / (2 * math.pi ** (d / 2)) * dist ** (2 - d)


# ---------------------------------------------------------------------------
# exact samplers (jitted cores)

_CDF_INTERVALS = 512


@njit
def _entrance_cos_general(s, sr, d):
    """Cosine of the entrance polar angle from distance ratio ``sr > 1``.

    The chord length q = |x - y| / r is parametrised by
    q^2 = a^2 + 4 sr sin^2(phi), a = sr - 1, which turns the density into
    q^-d (sin phi cos phi)^(d-2) dphi, smooth on [0, pi/2].  A log-stretched
    grid in phi resolves the peak of width ~a; the CDF is accumulated by
    Simpson's rule per interval and inverted by interpolation.
    """
    a = sr - 1.0
    c = a / (2.0 * math.sqrt(sr))
    kappa = math.log1p(0.5 * math.pi / c)
    n = _CDF_INTERVALS
    cdf = np.empty(n + 1)
    cdf[0] = 0.0
    h = 1.0 / n

    def dens(z):
        phi = c * math.expm1(kappa * z)
        if phi > 0.5 * math.pi:
            phi = 0.5 * math.pi
        sp = math.sin(phi)
        cp = math.cos(phi)
        q2 = a * a + 4.0 * sr * sp * sp
        return (sp * cp) ** (d - 2) * q2 ** (-0.5 * d) * c * kappa * math.exp(kappa * z)

    f0 = dens(0.0)
    for i in range(n):
        z0 = i * h
        fm = dens(z0 + 0.5 * h)
        f1 = dens(z0 + h)
        cdf[i + 1] = cdf[i] + h * (f0 + 4.0 * fm + f1) / 6.0
        f0 = f1
    target = uniform(s) * cdf[n]
    lo = 0
    hi = n
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cdf[mid] <= target:
            lo = mid
        else:
            hi = mid
    w = cdf[lo + 1] - cdf[lo]
    frac = (target - cdf[lo]) / w if w > 0 else 0.5
    z = (lo + frac) * h
    phi = min(c * math.expm1(kappa * z), 0.5 * math.pi)
    sp = math.sin(phi)
    q2 = a * a + 4.0 * sr * sp * sp
    return (sr * sr + 1.0 - q2) / (2.0 * sr)


@njit
def _entrance_cos(s, sr, d):
    if d == 3:
        # chord length q has density ~ q^-2 on [sr - 1, sr + 1]
        u = uniform(s)
        q = (sr * sr - 1.0) / (sr + 1.0 - 2.0 * u)
        ct = (sr * sr + 1.0 - q * q) / (2.0 * sr)
    else:
        ct = _entrance_cos_general(s, sr, d)
    return min(1.0, max(-1.0, ct))


@njit
def _place_at_angle(s, axis, ct, radius, out):
    """``out = radius (ct * axis + sqrt(1 - ct^2) * w)`` with ``w`` uniform on
    the unit sphere orthogonal to the unit vector ``axis``."""
    d = axis.shape[0]
    w = np.empty(d)
    while True:
        fill_normal(s, w)
        dot = 0.0
        for c in range(d):
            dot += w[c] * axis[c]
        n2 = 0.0
        for c in range(d):
            w[c] -= dot * axis[c]
            n2 += w[c] * w[c]
        if n2 > 1e-20:
            break
    inv = 1.0 / math.sqrt(n2)
    st = math.sqrt(max(0.0, 1.0 - ct * ct))
    for c in range(d):
        out[c] = radius * (ct * axis[c] + st * w[c] * inv)


@njit
def entrance_point(s, y, rho, out):
    """Entrance point on the sphere of radius ``rho`` (centred at 0) of a
    Brownian motion from exterior ``y``, conditioned on hitting it."""
    d = y.shape[0]
    ny = 0.0
    for c in range(d):
        ny += y[c] * y[c]
    ny = math.sqrt(ny)
    axis = np.empty(d)
    for c in range(d):
        axis[c] = y[c] / ny
    ct = _entrance_cos(s, ny / rho, d)
    _place_at_angle(s, axis, ct, rho, out)


@njit
def gamma_variate(s, k):
    """Gamma(k, 1) by Marsaglia-Tsang (with the boost for k < 1)."""
    if k < 1.0:
        u = uniform_open(s)
        return gamma_variate(s, k + 1.0) * u ** (1.0 / k)
    dd = k - 1.0 / 3.0
    cc = 1.0 / math.sqrt(9.0 * dd)
    while True:
        x = normal(s)
        v = 1.0 + cc * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = uniform_open(s)
        if math.log(u) < 0.5 * x * x + dd - dd * v + dd * math.log(v):
            return dd * v


@njit
def bridge_duration(s, dist, d):
    """Draw from the density ``p_t(x, y) / G(x, y)`` with ``|x - y| = dist``.

    With u = dist^2 / (2t) the density becomes Gamma(d/2 - 1); in d = 3 that
    is Z^2 / 2, i.e. t = dist^2 / Z^2.
    """
    if d == 3:
        z = normal(s)
        while z == 0.0:
            z = normal(s)
        return dist * dist / (z * z)
    return dist * dist / (2.0 * gamma_variate(s, 0.5 * d - 1.0))


# ---------------------------------------------------------------------------
# public samplers

def sample_entrance_point(rng, x, r: float) -> np.ndarray:
    """``W_{T_r}`` given ``T_r < inf`` for Brownian motion from exterior ``x``."""
    p = as_point(x)
    if _norm(p) <= r:
        raise GeometryError("x must lie outside B(r)")
    st = as_stream(rng)
    out = np.empty_like(p)
    entrance_point(st.state, p, float(r), out)
    return out


def sample_entrance_points(rng, x, r: float, n: int) -> np.ndarray:
    p = as_point(x)
    if _norm(p) <= r:
        raise GeometryError("x must lie outside B(r)")
    st = as_stream(rng)
    return _entrance_many(st.state, p, float(r), int(n))


@njit
def _entrance_many(s, p, r, n):
    out = np.empty((n, p.shape[0]))
    buf = np.empty(p.shape[0])
    for i in range(n):
        entrance_point(s, p, r, buf)
        out[i] = buf
    return out


def sample_bridge_duration(rng, x, y, size=None):
    """Bridge duration with density ``p_t(x, y) / G(x, y)``."""
    p = as_point(x)
    q = as_point(y, p.shape[0])
    dist = _norm(p - q)
    if dist == 0.0:
        raise GeometryError("need x != y")
    st = as_stream(rng)
    if size is None:
        return float(bridge_duration(st.state, dist, p.shape[0]))
    return _durations(st.state, dist, p.shape[0], int(size))


@njit
def _durations(s, dist, d, n):
    out = np.empty(n)
    for i in range(n):
        out[i] = bridge_duration(s, dist, d)
    return out


# ---------------------------------------------------------------------------
# configuration objects

@dataclass(frozen=True)
class DtPolicy:
    """Time-step rule ``dt = clip((dist / factor)^2, dt_min, base_dt)``.

    ``dist`` is the distance to the nearest resolved watched sphere, so the
    step shrinks quadratically near spheres where crossings matter.  The
    spatial step is capped only through the time step (``sqrt(base_dt)``
    per coordinate); Gaussian increments are never clipped.
    """

    base_dt: float = 1e-3
    dt_min: float = 1e-8
    factor: float = 5.0

    def __post_init__(self):
        if not (0 < self.dt_min <= self.base_dt):
            raise ValueError("need 0 < dt_min <= base_dt")
        if self.factor <= 0:
            raise ValueError("factor must be positive")

    def dt(self, dist: float) -> float:
        return min(self.base_dt, max(self.dt_min, (dist / self.factor) ** 2))

    @property
    def step_cap(self) -> float:
        """Typical per-coordinate increment at the largest step."""
        return math.sqrt(self.base_dt)


@dataclass(frozen=True)
class Sphere:
    radius: float
    center: tuple | None = None
    resolve: bool = True


@dataclass(frozen=True)
class StopRule:
    """Stop on entering any ball in ``hit``, leaving any ball in ``exit``
    (indices into the watched spheres) or after ``max_time``."""

    hit: tuple = ()
    exit: tuple = ()
    max_time: float = math.inf


@dataclass(frozen=True)
class Exterior:
    """Exact resolution outside ``B(r_out)``.

    On leaving ``B(r_out)`` at ``y`` the walker returns to the sphere of
    radius ``rho`` with probability ``(rho/|y|)^(d-2)``, entering at a point
    drawn from the exterior Poisson kernel; otherwise it has escaped.
    """

    r_out: float
    rho: float

    def __post_init__(self):
        if not (0 < self.rho <= self.r_out):
            raise ValueError("need 0 < rho <= r_out")


def _normalize_spheres(watched, d):
    centers = np.zeros((len(watched), d))
    radii = np.empty(len(watched))
    resolve = np.ones(len(watched), dtype=np.bool_)
    for k, sp in enumerate(watched):
        if not isinstance(sp, Sphere):
            sp = Sphere(float(sp))
        if not sp.radius > 0:
            raise ValueError("sphere radius must be positive")
        radii[k] = sp.radius
        resolve[k] = sp.resolve
        if sp.center is not None:
            centers[k] = as_point(sp.center, d)
    return centers, radii, resolve


# ---------------------------------------------------------------------------
# path container

CROSSING_DTYPE = np.dtype([
    ("index", np.int64),    # crossing lies between positions[index] and positions[index + 1]
    ("sphere", np.int64),
    ("direction", np.int64),
    ("time", np.float64),
])


@dataclass
class PathSample:
    """A discretised path with crossing annotations.

    ``crossings`` is a structured array (see ``CROSSING_DTYPE``) sorted by
    time; ``crossing_points[j]`` is where crossing ``j`` happens.  A
    ``RETURN`` crossing has ``index`` pointing at the re-entry position
    itself; the segment leading into it is not a continuous path piece.
    """

    times: np.ndarray
    positions: np.ndarray
    crossings: np.ndarray
    crossing_points: np.ndarray
    radii: np.ndarray
    centers: np.ndarray
    seed_tag: tuple = ()
    outcome: int = RUNNING
    stop_sphere: int = -1

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def start(self) -> np.ndarray:
        return self.positions[0]

    @property
    def end(self) -> np.ndarray:
        return self.positions[-1]

    @property
    def teleports(self) -> np.ndarray:
        """Indices ``j`` such that positions ``j-1 -> j`` is a jump."""
        c = self.crossings
        return np.unique(c["index"][c["direction"] == RETURN])

    def sphere_index(self, radius: float, tol: float = 1e-12) -> int:
        for k, r in enumerate(self.radii):
            if abs(r - radius) <= tol * max(1.0, radius) and not np.any(self.centers[k]):
                return k
        return -1

    @classmethod
    def from_positions(cls, positions, times=None, spheres=(), seed_tag=()) -> "PathSample":
        """Build a path from given positions, annotating straddles of the
        (origin-centred) ``spheres`` with exact chord intersections."""
        pos = np.asarray(positions, dtype=np.float64)
        n, d = pos.shape
        if times is None:
            times = np.arange(n, dtype=np.float64)
        times = np.asarray(times, dtype=np.float64)
        centers, radii, _ = _normalize_spheres(spheres, d)
        rows, pts = [], []
        for i in range(n - 1):
            evs = []
            for k in range(len(radii)):
                f0 = _norm(pos[i] - centers[k]) - radii[k]
                f1 = _norm(pos[i + 1] - centers[k]) - radii[k]
                if (f0 > 0 >= f1) or (f0 < 0 <= f1):
                    lam = _chord_fraction(pos[i], pos[i + 1], centers[k], radii[k], f0 > 0)
                    evs.append((lam, k, INWARD if f0 > 0 else OUTWARD))
            for lam, k, direc in sorted(evs):
                rows.append((i, k, direc, times[i] + lam * (times[i + 1] - times[i])))
                pts.append(pos[i] + lam * (pos[i + 1] - pos[i]))
        cr = np.array(rows, dtype=CROSSING_DTYPE)
        cp = np.array(pts, dtype=np.float64).reshape(-1, d)
        return cls(times, pos, cr, cp, radii, centers, tuple(seed_tag))

    def crossings_of(self, sphere: int) -> np.ndarray:
        return np.nonzero(self.crossings["sphere"] == sphere)[0]


def _chord_fraction(p0, p1, c, r, from_outside):
    a = p0 - c
    b = p1 - p0
    A = float(b @ b)
    B = 2.0 * float(a @ b)
    C = float(a @ a) - r * r
    disc = max(B * B - 4 * A * C, 0.0)
    sq = math.sqrt(disc)
    if from_outside:
        lam = (-B - sq) / (2 * A)
    else:
        lam = (-B + sq) / (2 * A)
    return min(1.0, max(0.0, lam))


# ---------------------------------------------------------------------------
# the walker kernel

@njit(inline="always")
def _chord_root(A, B, C, from_outside):
    if A == 0.0:
        return 0.0
    disc = B * B - 4.0 * A * C
    if disc < 0.0:
        disc = 0.0
    sq = math.sqrt(disc)
    # numerically stable roots
    qq = -0.5 * (B + sq) if B >= 0 else -0.5 * (B - sq)
    r1 = qq / A
    r2 = C / qq if qq != 0.0 else r1
    lam = min(r1, r2) if from_outside else max(r1, r2)
    return min(1.0, max(0.0, lam))


@njit(inline="always")
def chord_fraction(p0, p1, cs, k, r, from_outside):
    """Fraction along p0 -> p1 where the chord meets the sphere (cs[k], r):
    the entry root if ``from_outside``, else the exit root."""
    A = 0.0
    B = 0.0
    C = 0.0
    for j in range(p0.shape[0]):
        a = p0[j] - cs[k, j]
        b = p1[j] - p0[j]
        A += b * b
        B += 2.0 * a * b
        C += a * a
    return _chord_root(A, B, C - r * r, from_outside)


@njit(inline="always")
def chord_fraction_origin(p0, p1, r, from_outside):
    A = 0.0
    B = 0.0
    C = 0.0
    for j in range(p0.shape[0]):
        b = p1[j] - p0[j]
        A += b * b
        B += 2.0 * p0[j] * b
        C += p0[j] * p0[j]
    return _chord_root(A, B, C - r * r, from_outside)


@njit(inline="always")
def _dist_to(p, cs, k):
    s = 0.0
    for j in range(p.shape[0]):
        t = p[j] - cs[k, j]
        s += t * t
    return math.sqrt(s)


@njit(inline="always")
def _vnorm(p):
    s = 0.0
    for j in range(p.shape[0]):
        s += p[j] * p[j]
    return math.sqrt(s)


@njit(inline="always")
def _set_row(dst, i, src):
    for j in range(src.shape[0]):
        dst[i, j] = src[j]


@njit(inline="always")
def _set_row2(dst, i, src, k):
    for j in range(src.shape[1]):
        dst[i, j] = src[k, j]


@njit
def _grow2(a, n):
    b = np.empty((max(2 * a.shape[0], n + 1), a.shape[1]))
    b[: a.shape[0]] = a
    return b


@njit
def _grow1(a, n):
    b = np.empty(max(2 * a.shape[0], n + 1), dtype=a.dtype)
    b[: a.shape[0]] = a
    return b


_NEED_ROOM = -1


@njit
def _walk_core(s, pos, tv, cnt, centers, radii, resolve, stop_hit, stop_exit, max_time,
               base_dt, dt_min, factor, bridge, r_out, rho, ret_sphere, record, max_steps,
               pos_buf, t_buf, c_idx, c_sph, c_dir, c_t, c_pt,
               new, inc, ent, ev_lam, ev_k, ev_dir, ev_pt):
    """Advance the walker in place.  ``tv[0]`` is the time; ``cnt`` holds
    (positions, crossings, steps, stop sphere).  Returns an outcome, or
    ``_NEED_ROOM`` when the record buffers must grow first."""
    d = pos.shape[0]
    m = radii.shape[0]
    t = tv[0]
    np_ = cnt[0]
    nc = cnt[1]
    steps = cnt[2]
    outcome = RUNNING
    while outcome == RUNNING:
        if record and (np_ + 2 > pos_buf.shape[0] or nc + 2 * m + 2 > c_idx.shape[0]):
            outcome = _NEED_ROOM
            break
        if t >= max_time:
            outcome = TIMEOUT
            break
        if steps >= max_steps:
            outcome = MAXSTEPS
            break
        steps += 1
        dist = np.inf
        for k in range(m):
            if resolve[k]:
                f = abs(_dist_to(pos, centers, k) - radii[k])
                if f < dist:
                    dist = f
        dt = (dist / factor) ** 2
        if dt > base_dt:
            dt = base_dt
        if dt < dt_min:
            dt = dt_min
        if t + dt > max_time:
            dt = max_time - t
        sq = math.sqrt(dt)
        fill_normal(s, inc)
        for j in range(d):
            new[j] = pos[j] + sq * inc[j]
        # crossing events on the segment pos -> new
        ne = 0
        for k in range(m):
            f0 = _dist_to(pos, centers, k) - radii[k]
            f1 = _dist_to(new, centers, k) - radii[k]
            if (f0 > 0.0 and f1 <= 0.0) or (f0 < 0.0 and f1 >= 0.0):
                inward = f0 > 0.0
                lam = chord_fraction(pos, new, centers, k, radii[k], inward)
                ev_lam[ne] = lam
                ev_k[ne] = k
                ev_dir[ne] = INWARD if inward else OUTWARD
                for j in range(d):
                    ev_pt[ne, j] = pos[j] + lam * (new[j] - pos[j])
                ne += 1
            elif bridge and f0 != 0.0:
                # both ends on one side: the bridge may still have touched
                ex = 2.0 * abs(f0) * abs(f1) / dt
                if ex < 40.0 and uniform(s) < math.exp(-ex):
                    lam = abs(f0) / (abs(f0) + abs(f1))
                    # touch point: the chord point at that fraction, pushed onto the sphere
                    nrm = 0.0
                    for j in range(d):
                        ent[j] = pos[j] + lam * (new[j] - pos[j]) - centers[k, j]
                        nrm += ent[j] * ent[j]
                    nrm = math.sqrt(nrm)
                    first = INWARD if f0 > 0.0 else OUTWARD
                    for rep in range(2):
                        ev_lam[ne] = lam
                        ev_k[ne] = k
                        ev_dir[ne] = first if rep == 0 else -first
                        for j in range(d):
                            if nrm > 0.0:
                                ev_pt[ne, j] = centers[k, j] + ent[j] * radii[k] / nrm
                            else:
                                ev_pt[ne, j] = pos[j]
                        ne += 1
        # order events along the segment (stable insertion sort)
        for a in range(1, ne):
            b = a
            while b > 0 and ev_lam[b - 1] > ev_lam[b]:
                ev_lam[b - 1], ev_lam[b] = ev_lam[b], ev_lam[b - 1]
                ev_k[b - 1], ev_k[b] = ev_k[b], ev_k[b - 1]
                ev_dir[b - 1], ev_dir[b] = ev_dir[b], ev_dir[b - 1]
                for j in range(d):
                    tmp = ev_pt[b - 1, j]
                    ev_pt[b - 1, j] = ev_pt[b, j]
                    ev_pt[b, j] = tmp
                b -= 1
        for e in range(ne):
            k = ev_k[e]
            te = t + ev_lam[e] * dt
            if record:
                c_idx[nc] = np_ - 1
                c_sph[nc] = k
                c_dir[nc] = ev_dir[e]
                c_t[nc] = te
                _set_row2(c_pt, nc, ev_pt, e)
            nc += 1
            if (ev_dir[e] == INWARD and stop_hit[k]) or (ev_dir[e] == OUTWARD and stop_exit[k]):
                for j in range(d):
                    pos[j] = ev_pt[e, j]
                t = max(te, np.nextafter(t, np.inf))
                outcome = HIT if ev_dir[e] == INWARD else EXIT
                cnt[3] = k
                break
        if outcome != RUNNING:
            if record:
                _set_row(pos_buf, np_, pos)
                t_buf[np_] = t
                np_ += 1
            break
        t = t + dt
        for j in range(d):
            pos[j] = new[j]
        if record:
            _set_row(pos_buf, np_, pos)
            t_buf[np_] = t
            np_ += 1
        if r_out > 0.0:
            npos = _vnorm(pos)
            if npos >= r_out:
                if uniform(s) >= (rho / npos) ** (d - 2):
                    outcome = ESCAPED
                    break
                entrance_point(s, pos, rho, ent)
                for j in range(d):
                    pos[j] = ent[j]
                # the excursion outside takes an unknown time; advance nominally
                t = np.nextafter(t, np.inf)
                if record:
                    _set_row(pos_buf, np_, pos)
                    t_buf[np_] = t
                    np_ += 1
                    c_idx[nc] = np_ - 1
                    c_sph[nc] = ret_sphere
                    c_dir[nc] = RETURN
                    c_t[nc] = t
                    _set_row(c_pt, nc, pos)
                nc += 1
                if ret_sphere >= 0 and stop_hit[ret_sphere]:
                    outcome = HIT
                    cnt[3] = ret_sphere
                    break
                # re-entry also passes inward through any origin-centred
                # watched sphere with rho < radius < |y|
                for k in range(m):
                    if k == ret_sphere or not stop_hit[k]:
                        continue
                    ck = 0.0
                    for j in range(d):
                        ck += centers[k, j] * centers[k, j]
                    if ck == 0.0 and rho < radii[k] < npos:
                        outcome = HIT
                        cnt[3] = k
                        break
    tv[0] = t
    cnt[0] = np_
    cnt[1] = nc
    cnt[2] = steps
    return outcome


@njit
def walk(s, x0, t0, centers, radii, resolve, stop_hit, stop_exit, max_time,
         base_dt, dt_min, factor, bridge, r_out, rho, ret_sphere, record, max_steps):
    """Run one path.  Returns (outcome, stop_sphere, n_pos, positions, times,
    n_cross, cross_index, cross_sphere, cross_dir, cross_time, cross_point).

    With ``record`` false only the final position is kept (``n_pos`` = 1)
    and crossings are counted but not stored.  ``r_out <= 0`` disables
    exterior resolution.  ``bridge`` enables the Brownian-bridge correction
    for crossings missed between two samples.
    """
    d = x0.shape[0]
    m = radii.shape[0]
    cap = 256 if record else 1
    ccap = 16 + 2 * m if record else 1
    pos_buf = np.empty((cap, d))
    t_buf = np.empty(cap)
    c_idx = np.empty(ccap, dtype=np.int64)
    c_sph = np.empty(ccap, dtype=np.int64)
    c_dir = np.empty(ccap, dtype=np.int64)
    c_t = np.empty(ccap)
    c_pt = np.empty((ccap, d))
    pos = x0.copy()
    tv = np.array([t0])
    cnt = np.array([1, 0, 0, -1], dtype=np.int64)
    _set_row(pos_buf, 0, pos)
    t_buf[0] = t0
    for k in range(m):
        dk = _dist_to(pos, centers, k)
        if stop_hit[k] and dk <= radii[k]:
            return HIT, k, 1, pos_buf, t_buf, 0, c_idx, c_sph, c_dir, c_t, c_pt
        if stop_exit[k] and dk >= radii[k]:
            return EXIT, k, 1, pos_buf, t_buf, 0, c_idx, c_sph, c_dir, c_t, c_pt
    new = np.empty(d)
    inc = np.empty(d)
    ent = np.empty(d)
    ev_lam = np.empty(2 * m + 1)
    ev_k = np.empty(2 * m + 1, dtype=np.int64)
    ev_dir = np.empty(2 * m + 1, dtype=np.int64)
    ev_pt = np.empty((2 * m + 1, d))
    while True:
        out = _walk_core(s, pos, tv, cnt, centers, radii, resolve, stop_hit, stop_exit, max_time,
                         base_dt, dt_min, factor, bridge, r_out, rho, ret_sphere, record, max_steps,
                         pos_buf, t_buf, c_idx, c_sph, c_dir, c_t, c_pt,
                         new, inc, ent, ev_lam, ev_k, ev_dir, ev_pt)
        if out != _NEED_ROOM:
            break
        if cnt[0] + 2 > pos_buf.shape[0]:
            pos_buf = _grow2(pos_buf, cnt[0] + 2)
            t_buf = _grow1(t_buf, cnt[0] + 2)
        if cnt[1] + 2 * m + 2 > c_idx.shape[0]:
            need = cnt[1] + 2 * m + 2
            c_idx = _grow1(c_idx, need)
            c_sph = _grow1(c_sph, need)
            c_dir = _grow1(c_dir, need)
            c_t = _grow1(c_t, need)
            c_pt = _grow2(c_pt, need)
    if not record:
        _set_row(pos_buf, 0, pos)
        t_buf[0] = tv[0]
    return out, cnt[3], cnt[0] if record else 1, pos_buf, t_buf, cnt[1] if record else 0, \
        c_idx, c_sph, c_dir, c_t, c_pt


def simulate_path_segment(rng, start, dt_policy: DtPolicy | None = None, watched_spheres=(),
                          stop_rule: StopRule | None = None, exterior: Exterior | None = None,
                          bridge_correction: bool = True, max_steps: int = 50_000_000,
                          t0: float = 0.0) -> PathSample:
    """Simulate a Brownian path until ``stop_rule`` fires.

    Parameters
    ----------
    rng : Stream, int or None
        Random stream; its state advances.
    start : point
    dt_policy : DtPolicy
    watched_spheres : sequence of Sphere or radius
        Spheres whose crossings are annotated.
    stop_rule : StopRule
        Indices refer to ``watched_spheres``.
    exterior : Exterior, optional
        Exact resolution outside a ball centred at the origin.
    bridge_correction : bool
        Also detect crossings between two samples on the same side, with
        the flat-boundary bridge probability ``exp(-2ab/dt)``.

    Returns
    -------
    PathSample
        ``outcome`` is one of HIT, EXIT, ESCAPED, TIMEOUT, MAXSTEPS.
    """
    st = as_stream(rng)
    x0 = as_point(start)
    d = x0.shape[0]
    pol = dt_policy or DtPolicy()
    rule = stop_rule or StopRule()
    centers, radii, resolve = _normalize_spheres(watched_spheres, d)
    m = len(radii)
    hit = np.zeros(m, dtype=np.bool_)
    ext = np.zeros(m, dtype=np.bool_)
    for k in rule.hit:
        hit[k] = True
    for k in rule.exit:
        ext[k] = True
    if not (rule.hit or rule.exit or math.isfinite(rule.max_time) or exterior):
        raise ValueError("stop rule never fires")
    r_out, rho, ret = 0.0, 1.0, -1
    if exterior is not None:
        r_out, rho = float(exterior.r_out), float(exterior.rho)
        for k in range(m):
            if abs(radii[k] - rho) <= 1e-12 * rho and not np.any(centers[k]):
                ret = k
    res = walk(st.state, x0, float(t0), centers, radii, resolve, hit, ext, float(rule.max_time),
               pol.base_dt, pol.dt_min, pol.factor, bool(bridge_correction), r_out, rho, ret,
               True, int(max_steps))
    return _to_path(res, radii, centers, st.tag)


def _to_path(res, radii, centers, tag):
    outcome, ks, npos, pos, tb, nc, ci, cs, cd, ct, cp = res
    cr = np.empty(nc, dtype=CROSSING_DTYPE)
    cr["index"] = ci[:nc]
    cr["sphere"] = cs[:nc]
    cr["direction"] = cd[:nc]
    cr["time"] = ct[:nc]
    return PathSample(tb[:npos].copy(), pos[:npos].copy(), cr, cp[:nc].copy(),
                      radii, centers, tag, int(outcome), int(ks))


# ---------------------------------------------------------------------------
# bridges

@njit
def _bridge_kernel(s, x, y, T, base_dt, dt_min, factor, centers, radii, max_steps):
    d = x.shape[0]
    m = radii.shape[0]
    pos = np.empty((256, d))
    tim = np.empty(256)
    pos[0] = x
    tim[0] = 0.0
    n = 1
    cur = x.copy()
    t = 0.0
    z = np.empty(d)
    done = False
    while not done:
        rem = T - t
        dist = np.inf
        for k in range(m):
            f = abs(_dist_to(cur, centers, k) - radii[k])
            if f < dist:
                dist = f
        dt = min(base_dt, max(dt_min, (dist / factor) ** 2))
        if n >= pos.shape[0]:
            pos = _grow2(pos, n)
            tim = _grow1(tim, n)
        if dt >= rem or n + 1 >= max_steps:
            for j in range(d):
                pos[n, j] = y[j]
            tim[n] = T
            done = True
        else:
            # exact conditional law of the bridge at t + dt given cur at t
            fill_normal(s, z)
            sd = math.sqrt(dt * (rem - dt) / rem)
            w = dt / rem
            for j in range(d):
                cur[j] = cur[j] + w * (y[j] - cur[j]) + sd * z[j]
            t += dt
            for j in range(d):
                pos[n, j] = cur[j]
            tim[n] = t
        n += 1
    return pos[:n].copy(), tim[:n].copy()


def sample_bridge(rng, x, y, t: float, dt_policy: DtPolicy | None = None,
                  watched_spheres=(), max_steps: int = 10_000_000) -> PathSample:
    """Brownian bridge from ``x`` at time 0 to ``y`` at time ``t``.

    Grid points are drawn sequentially from the exact Gaussian conditional
    law, so the discretisation introduces no bias at the sampled times.  The
    grid follows ``dt_policy`` relative to ``watched_spheres``; the final
    point is ``y`` bit for bit.
    """
    if not t > 0:
        raise ValueError("bridge duration must be positive")
    st = as_stream(rng)
    p = as_point(x)
    q = as_point(y, p.shape[0])
    pol = dt_policy or DtPolicy()
    centers, radii, _ = _normalize_spheres(watched_spheres, p.shape[0])
    pos, tim = _bridge_kernel(st.state, p, q, float(t), pol.base_dt, pol.dt_min, pol.factor,
                              centers, radii, int(max_steps))
    pos[0] = p
    pos[-1] = q
    cr = np.zeros(0, dtype=CROSSING_DTYPE)
    return PathSample(tim, pos, cr, np.zeros((0, p.shape[0])), radii, centers, st.tag, EXIT)


# ---------------------------------------------------------------------------
# paths conditioned to avoid a ball (Doob h-transform)

def conditioned_drift(y, K: float) -> np.ndarray:
    """``grad h / h`` for ``h(y) = 1 - (K/|y|)^(d-2)``."""
    p = as_point(y)
    d = p.shape[0]
    n = _norm(p)
    h = 1.0 - (K / n) ** (d - 2)
    return (d - 2) * K ** (d - 2) * n ** (1 - d) / h * (p / n)


@njit(inline="always")
def _chord_meets_ball(p0, p1, K):
    """True if the segment p0 -> p1 comes within K of the origin."""
    num = 0.0
    den = 0.0
    for j in range(p0.shape[0]):
        num -= p0[j] * (p1[j] - p0[j])
        den += (p1[j] - p0[j]) ** 2
    lam = num / den if den > 0.0 else 0.0
    lam = min(1.0, max(0.0, lam))
    q2 = 0.0
    for j in range(p0.shape[0]):
        c = p0[j] + lam * (p1[j] - p0[j])
        q2 += c * c
    return q2 <= K * K


@njit
def _conditioned_kernel(s, x, K, outer, base_dt, dt_min, factor, max_steps):
    d = x.shape[0]
    cap = 256
    pos = np.empty((cap, d))
    tim = np.empty(cap)
    pos[0] = x
    tim[0] = 0.0
    n = 1
    cur = x.copy()
    new = np.empty(d)
    z = np.empty(d)
    t = 0.0
    rejected = 0
    while n < max_steps:
        r = _vnorm(cur)
        dist = min(r - K, outer - r)
        dt = (dist / factor) ** 2
        if dt > base_dt:
            dt = base_dt
        if dt < dt_min:
            dt = dt_min
        h = 1.0 - (K / r) ** (d - 2)
        coef = (d - 2) * K ** (d - 2) * r ** (-d) / h  # times y gives the drift
        sq = math.sqrt(dt)
        while True:
            fill_normal(s, z)
            for j in range(d):
                new[j] = cur[j] + coef * cur[j] * dt + sq * z[j]
            rn = _vnorm(new)
            if rn > K and not _chord_meets_ball(cur, new, K):
                break
            rejected += 1
        t += dt
        if n >= pos.shape[0]:
            pos = _grow2(pos, n)
            tim = _grow1(tim, n)
        if rn >= outer:
            lam = chord_fraction_origin(cur, new, outer, False)
            for j in range(d):
                pos[n, j] = cur[j] + lam * (new[j] - cur[j])
            tim[n] = t - dt + lam * dt
            if tim[n] <= tim[n - 1]:
                tim[n] = np.nextafter(tim[n - 1], np.inf)
            n += 1
            return pos[:n].copy(), tim[:n].copy(), rejected, True
        for j in range(d):
            cur[j] = new[j]
        pos[n] = cur
        tim[n] = t
        n += 1
    return pos[:n].copy(), tim[:n].copy(), rejected, False


def simulate_conditioned_escape(rng, x, K: float, dt_policy: DtPolicy | None = None,
                                outer_cutoff: float | None = None, offset: float = 1e-3,
                                max_steps: int = 50_000_000) -> PathSample:
    """Brownian motion from ``x`` conditioned never to hit ``B(K)``.

    Euler scheme for the h-transform with drift ``grad h / h``.  Starts on the
    sphere are pushed out radially by ``offset * K`` (``h`` vanishes there).
    Proposed steps whose chord meets ``B(K)`` are redrawn, which keeps every
    sample and every chord outside the ball.  Stops on leaving
    ``B(outer_cutoff)`` (default ``4K``), at the exact chord crossing.
    """
    p = as_point(x)
    n = _norm(p)
    if n < K * (1 - 1e-12):
        raise GeometryError("start lies inside B(K)")
    outer = 4.0 * K if outer_cutoff is None else float(outer_cutoff)
    if outer <= K:
        raise ValueError("outer_cutoff must exceed K")
    if n < K * (1 + offset):
        p = p * (K * (1 + offset) / n)
    pol = dt_policy or DtPolicy()
    st = as_stream(rng)
    pos, tim, rej, done = _conditioned_kernel(st.state, p, float(K), outer, pol.base_dt, pol.dt_min,
                                              pol.factor, int(max_steps))
    d = p.shape[0]
    radii = np.array([float(K), outer])
    centers = np.zeros((2, d))
    cr = np.zeros(1 if done else 0, dtype=CROSSING_DTYPE)
    cp = np.zeros((len(cr), d))
    if done:
        cr[0] = (len(pos) - 2, 1, OUTWARD, tim[-1])
        cp[0] = pos[-1]
    path = PathSample(tim, pos, cr, cp, radii, centers, st.tag, EXIT if done else MAXSTEPS, 1 if done else -1)
    path.rejected_steps = int(rej)
    return path


# ---------------------------------------------------------------------------
# batched outcome-only runs

@njit
def batch_outcomes(master, sub, i0, n, start, start_radius, centers, radii, resolve, stop_hit,
                   stop_exit, max_time, base_dt, dt_min, factor, bridge, r_out, rho, ret_sphere,
                   max_steps):
    """Run trials ``i0 .. i0+n-1`` (stream ``(master, i, sub)`` each) without
    recording paths.  Starts at ``start`` or, if ``start_radius > 0``,
    uniformly on the sphere of that radius.  Returns outcome and stop-sphere
    arrays."""
    d = start.shape[0]
    outc = np.empty(n, dtype=np.int64)
    sph = np.empty(n, dtype=np.int64)
    x0 = np.empty(d)
    for i in range(n):
        s = new_state(master, i0 + i, sub)
        if start_radius > 0.0:
            unit_vector(s, x0)
            for j in range(d):
                x0[j] *= start_radius
        else:
            for j in range(d):
                x0[j] = start[j]
        res = walk(s, x0, 0.0, centers, radii, resolve, stop_hit, stop_exit, max_time, base_dt,
                   dt_min, factor, bridge, r_out, rho, ret_sphere, False, max_steps)
        outc[i] = res[0]
        sph[i] = res[1]
    return outc, sph


def run_outcomes(master_seed: int, n: int, start, dt_policy: DtPolicy, watched_spheres,
                 stop_rule: StopRule, exterior: Exterior | None = None, start_radius: float = 0.0,
                 sub: int = 0, first_index: int = 0, bridge_correction: bool = True,
                 max_steps: int = 50_000_000):
    """Outcome codes and stop spheres of ``n`` independent walks."""
    x0 = as_point(start)
    d = x0.shape[0]
    centers, radii, resolve = _normalize_spheres(watched_spheres, d)
    m = len(radii)
    hit = np.zeros(m, dtype=np.bool_)
    ext = np.zeros(m, dtype=np.bool_)
    for k in stop_rule.hit:
        hit[k] = True
    for k in stop_rule.exit:
        ext[k] = True
    r_out, rho, ret = 0.0, 1.0, -1
    if exterior is not None:
        r_out, rho = float(exterior.r_out), float(exterior.rho)
        for k in range(m):
            if abs(radii[k] - rho) <= 1e-12 * rho and not np.any(centers[k]):
                ret = k
    return batch_outcomes(np.uint64(master_seed), np.uint64(sub), np.uint64(first_index), int(n), x0,
                          float(start_radius), centers, radii, resolve, hit, ext,
                          float(stop_rule.max_time), dt_policy.base_dt, dt_policy.dt_min,
                          dt_policy.factor, bool(bridge_correction), r_out, rho, ret, int(max_steps))
