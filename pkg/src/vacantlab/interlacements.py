"""Local samplers for Brownian interlacements and the annulus statistic.

Two routes to the trajectories of the interlacement at level ``alpha`` that
meet a ball ``B(R')``:

* ``intro-recipe``: a Poisson(``alpha cap B(R')``) number of Brownian
  motions started from uniform points on the sphere of radius ``R'``.
* ``QB-exact``: the same number of trajectories, each assembled from an
  entrance/exit pair with density proportional to ``G(x, x')``, a bridge
  between them with duration law ``p_t / G``, and two legs conditioned
  never to return to ``B(R')``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._accel import njit
from .brownian import (HIT, DtPolicy, Exterior, PathSample, Sphere, StopRule, _place_at_angle,
                       bridge_duration, gamma_variate, sample_bridge, sample_bridge_duration,
                       simulate_conditioned_escape, simulate_path_segment, walk)
from .geometry import unit_vector
from .rng import Stream, as_stream, fill_normal, new_state, uniform

__all__ = [
    "INTRO", "QB", "capacity_ball", "rescale_vacant_law", "TrajectorySample",
    "InterlacementLocalSample", "sample_entrance_exit_pair", "sample_QB_trajectory",
    "sample_local_interlacements", "vacant_components_annulus", "poisson_variate",
    "probe_vacancy_batch",
]

INTRO = "intro-recipe"
QB = "QB-exact"
_MODES = (INTRO, QB)


def capacity_ball(d: int, s: float) -> float:
    """Wiener capacity ``2 pi^(d/2) / Gamma((d-2)/2) * s^(d-2)`` of ``B(0, s)``."""
    if int(d) != d or d < 3:
        raise ValueError("capacity of a ball needs an integer d >= 3")
    if not s > 0:
        raise ValueError("radius must be positive")
    return 2.0 * math.pi ** (d / 2) / math.gamma((d - 2) / 2) * s ** (d - 2)


def rescale_vacant_law(alpha: float, r: float, lam: float, d: int = 3) -> tuple:
    """``lam * V^alpha_r`` has the law of ``V^{alpha'}_{r'}`` with
    ``(alpha', r') = (lam^(2-d) alpha, lam r)``."""
    if not (alpha > 0 and r > 0 and lam > 0):
        raise ValueError("alpha, r and lambda must be positive")
    return lam ** (2 - d) * alpha, lam * r


# ---------------------------------------------------------------------------
# scalar samplers

@njit
def poisson_variate(s, lam):
    """Poisson(lam) by sequential inversion, split into chunks of mean <= 500."""
    total = 0
    rest = lam
    while rest > 0.0:
        mu = min(rest, 500.0)
        rest -= mu
        u = uniform(s)
        p = math.exp(-mu)
        c = p
        k = 0
        while u > c:
            k += 1
            p *= mu / k
            c += p
            if p < 1e-300 and k > mu:
                break
        total += k
    return total


@njit
def _pair_angle(s, d):
    """Angle between entrance and exit points: ``sin^2(theta/2)`` is
    Beta(1/2, (d-1)/2); in d = 3 this is ``theta = 2 arcsin U``."""
    if d == 3:
        return 2.0 * math.asin(uniform(s))
    g1 = gamma_variate(s, 0.5)
    g2 = gamma_variate(s, 0.5 * (d - 1))
    v = g1 / (g1 + g2)
    return 2.0 * math.asin(math.sqrt(v))


@njit
def _pair(s, K, d, x, xp):
    unit_vector(s, x)
    theta = _pair_angle(s, d)
    _place_at_angle(s, x, math.cos(theta), K, xp)
    for j in range(d):
        x[j] *= K


def sample_entrance_exit_pair(rng, K: float, d: int = 3) -> tuple:
    """First-entrance and last-exit points on ``dB(K)`` of a trajectory that
    hits ``B(K)``: joint density proportional to ``G(x, x')`` against the
    product of uniform surface measures."""
    if not K > 0:
        raise ValueError("K must be positive")
    st = as_stream(rng)
    x = np.empty(d)
    xp = np.empty(d)
    _pair(st.state, float(K), int(d), x, xp)
    return x, xp


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class TrajectorySample:
    """One trajectory meeting ``B(K)``, in three pieces.

    The full path is ``leg_backward`` run backwards, then ``leg_bridge``,
    then ``leg_forward``.  Legs may be ``None`` when not simulated.
    """

    entrance: np.ndarray
    exit: np.ndarray
    leg_backward: PathSample | None
    leg_forward: PathSample | None
    leg_bridge: PathSample
    label: float
    K: float = 1.0

    def paths(self) -> list:
        return [p for p in (self.leg_backward, self.leg_bridge, self.leg_forward) if p is not None]

    def concatenated(self) -> np.ndarray:
        """Positions of the whole trajectory in time order."""
        parts = []
        if self.leg_backward is not None:
            parts.append(self.leg_backward.positions[::-1])
        parts.append(self.leg_bridge.positions)
        if self.leg_forward is not None:
            parts.append(self.leg_forward.positions)
        return np.concatenate(parts, axis=0)


def _bridge_policy(K: float) -> DtPolicy:
    # the bridge grid is exact at any spacing; small steps are only needed
    # near the sphere, where crossings are detected
    return DtPolicy(base_dt=1e12, dt_min=1e-8 * K * K, factor=5.0)


def sample_QB_trajectory(rng, K: float, alpha: float, d: int = 3, dt_policy: DtPolicy | None = None,
                         with_legs: bool = True, leg_policy: DtPolicy | None = None,
                         watched_spheres=()) -> TrajectorySample:
    """A trajectory hitting ``B(K)`` from its exact decomposition.

    Entrance and exit points from :func:`sample_entrance_exit_pair`; bridge
    duration from the ``p_t / G`` law and bridge path from
    :func:`sample_bridge` (no constraint relative to the ball); two legs
    conditioned never to hit ``B(K)`` again; label uniform on ``[0, alpha]``.
    """
    st = as_stream(rng)
    x, xp = sample_entrance_exit_pair(st, K, d)
    t = sample_bridge_duration(st, x, xp)
    pol = dt_policy or _bridge_policy(K)
    spheres = tuple(watched_spheres) or (Sphere(K),)
    bridge = sample_bridge(st, x, xp, t, pol, spheres)
    back = fwd = None
    if with_legs:
        lp = leg_policy or DtPolicy(base_dt=1e-3 * K * K, dt_min=1e-9 * K * K)
        back = simulate_conditioned_escape(st, x, K, lp)
        fwd = simulate_conditioned_escape(st, xp, K, lp)
    label = alpha * st.uniform()
    return TrajectorySample(x, xp, back, fwd, bridge, label, float(K))


@dataclass
class InterlacementLocalSample:
    alpha: float
    R: float
    R_prime: float
    trajectories: list
    mode: str
    d: int = 3
    radius: float = 1.0

    @property
    def count(self) -> int:
        return len(self.trajectories)

    def paths(self) -> list:
        out = []
        for tr in self.trajectories:
            out.extend(tr.paths() if isinstance(tr, TrajectorySample) else [tr])
        return out


def sample_local_interlacements(rng, alpha: float, R: float, R_prime: float, mode: str = INTRO,
                                d: int = 3, radius: float = 1.0, dt_policy: DtPolicy | None = None,
                                with_legs: bool = True) -> InterlacementLocalSample:
    """Trajectories of the interlacement at level ``alpha`` that meet ``B(R')``.

    Their ``radius``-sausages restricted to ``B(R)`` give the occupied set
    there.  In intro-recipe mode every path is run until it escapes, with
    returns to ``B(R')`` placed by the exact exterior law, so all visits to
    ``B(R + radius)`` are kept.
    """
    if mode not in _MODES:
        raise ValueError(f"mode must be one of {_MODES}")
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    if mode == INTRO and R_prime < R + radius:
        raise ValueError("intro-recipe mode needs R' >= R + radius")
    if not R_prime >= R > 0:
        raise ValueError("need 0 < R <= R'")
    st = as_stream(rng)
    n = int(poisson_variate(st.state, alpha * capacity_ball(d, R_prime))) if alpha > 0 else 0
    trs = []
    pol = dt_policy or DtPolicy(base_dt=1e-2, dt_min=1e-6, factor=5.0)
    for _ in range(n):
        if mode == INTRO:
            x = np.empty(d)
            unit_vector(st.state, x)
            x *= R_prime
            p = simulate_path_segment(st, x, pol, (Sphere(R_prime, resolve=False),),
                                      StopRule(), Exterior(R_prime, R_prime), bridge_correction=False)
            trs.append(p)
        else:
            trs.append(sample_QB_trajectory(st, R_prime, alpha, d, with_legs=with_legs))
    return InterlacementLocalSample(float(alpha), float(R), float(R_prime), trs, mode, d, float(radius))


# ---------------------------------------------------------------------------
# probe-ball vacancy, batched

@njit(inline="always")
def _touch(s, a, b, dt):
    """Flat-boundary probability that a Brownian bridge over ``dt`` between
    points at distances ``a, b > 0`` from a sphere touches it."""
    ex = 2.0 * a * b / dt
    return ex < 40.0 and uniform(s) < math.exp(-ex)


@njit
def _bridge_hits(s, x, y, T, r, dt_min, factor, max_steps):
    """Sample a Brownian bridge ``x -> y`` over ``[0, T]`` sequentially and
    report whether it enters the closed ball ``B(r)``.  Stops at the first
    entrance; the grid is exact, and each grid segment is tested with the
    bridge touch probability."""
    d = x.shape[0]
    cur = x.copy()
    z = np.empty(d)
    t = 0.0
    prev = _radius(cur) - r
    if prev <= 0.0 or _radius(y) - r <= 0.0:
        return True
    for _ in range(max_steps):
        rem = T - t
        dt = max(dt_min, (prev / factor) ** 2)
        if dt >= rem:
            return _touch(s, prev, _radius(y) - r, rem)
        fill_normal(s, z)
        sd = math.sqrt(dt * (rem - dt) / rem)
        w = dt / rem
        for j in range(d):
            cur[j] = cur[j] + w * (y[j] - cur[j]) + sd * z[j]
        t += dt
        now = _radius(cur) - r
        if now <= 0.0 or _touch(s, prev, now, dt):
            return True
        prev = now
    return False


@njit(inline="always")
def _radius(p):
    s = 0.0
    for j in range(p.shape[0]):
        s += p[j] * p[j]
    return math.sqrt(s)


@njit
def probe_vacancy_batch(master, sub, i0, n, alpha, R_prime, probe, d, qb,
                        base_dt, dt_min, factor, max_steps):
    """For trials ``i0 .. i0+n-1``: the trajectory count and whether the
    closed ball ``B(probe)`` misses every path (i.e. ``B(probe - 1)`` stays
    vacant for unit sausages).  ``qb`` selects the exact decomposition."""
    counts = np.empty(n, dtype=np.int64)
    vacant = np.empty(n, dtype=np.bool_)
    cap = 2.0 * math.pi ** (0.5 * d) / math.gamma(0.5 * (d - 2)) * R_prime ** (d - 2)
    centers = np.zeros((2, d))
    radii = np.array([probe, R_prime])
    resolve = np.array([True, False])
    stop_hit = np.array([True, False])
    stop_exit = np.array([False, False])
    x = np.empty(d)
    xp = np.empty(d)
    for i in range(n):
        s = new_state(master, i0 + i, sub)
        m = poisson_variate(s, alpha * cap)
        counts[i] = m
        vac = True
        for _ in range(m):
            if not vac:
                break
            if qb:
                _pair(s, R_prime, d, x, xp)
                dist = 0.0
                for j in range(d):
                    dist += (x[j] - xp[j]) ** 2
                dist = math.sqrt(dist)
                if dist == 0.0:
                    continue
                T = bridge_duration(s, dist, d)
                if _bridge_hits(s, x, xp, T, probe, dt_min, factor, max_steps):
                    vac = False
            else:
                unit_vector(s, x)
                for j in range(d):
                    x[j] *= R_prime
                res = walk(s, x, 0.0, centers, radii, resolve, stop_hit, stop_exit, np.inf,
                           base_dt, dt_min, factor, True, R_prime, R_prime, 1, False, max_steps)
                if res[0] == HIT:
                    vac = False
        vacant[i] = vac
    return counts, vacant


# ---------------------------------------------------------------------------
# annulus components

@njit
def _mark_balls(occ, lo, h, shape, centers, radius):
    """Mark grid points ``lo + h * idx`` within ``radius`` of some centre,
    one column (last axis) at a time."""
    d = centers.shape[1]
    r2 = radius * radius
    nz = shape[2]
    for c in range(centers.shape[0]):
        cx = (centers[c, 0] - lo[0]) / h
        cy = (centers[c, 1] - lo[1]) / h
        cz = (centers[c, 2] - lo[2]) / h
        rr = radius / h
        i0 = max(0, int(math.ceil(cx - rr)))
        i1 = min(shape[0] - 1, int(math.floor(cx + rr)))
        j0 = max(0, int(math.ceil(cy - rr)))
        j1 = min(shape[1] - 1, int(math.floor(cy + rr)))
        for i in range(i0, i1 + 1):
            dx = (i - cx) * h
            for j in range(j0, j1 + 1):
                dy = (j - cy) * h
                rem = r2 - dx * dx - dy * dy
                if rem < 0.0:
                    continue
                hz = math.sqrt(rem) / h
                k0 = max(0, int(math.ceil(cz - hz)))
                k1 = min(nz - 1, int(math.floor(cz + hz)))
                base = (i * shape[1] + j) * nz
                for k in range(k0, k1 + 1):
                    occ[base + k] = True


@njit
def _annulus_components(occ, lo, h, shape, r, R, touch):
    """Label vacant grid points of the annulus and count components that
    have points within ``touch`` of both boundary spheres."""
    n = occ.shape[0]
    ny, nz = shape[1], shape[2]
    label = np.full(n, -1, dtype=np.int64)
    stack = np.empty(n, dtype=np.int64)
    radius_of = np.empty(n)
    for a in range(n):
        i = a // (ny * nz)
        j = (a // nz) % ny
        k = a % nz
        x = lo[0] + i * h
        y = lo[1] + j * h
        z = lo[2] + k * h
        radius_of[a] = math.sqrt(x * x + y * y + z * z)
    inside = np.empty(n, dtype=np.bool_)
    for a in range(n):
        inside[a] = (not occ[a]) and r <= radius_of[a] <= R
    comps = 0
    both = 0
    for a0 in range(n):
        if not inside[a0] or label[a0] >= 0:
            continue
        label[a0] = comps
        stack[0] = a0
        top = 1
        near_in = False
        near_out = False
        while top > 0:
            top -= 1
            a = stack[top]
            if radius_of[a] - r <= touch:
                near_in = True
            if R - radius_of[a] <= touch:
                near_out = True
            i = a // (ny * nz)
            j = (a // nz) % ny
            k = a % nz
            for t in range(6):
                ii, jj, kk = i, j, k
                if t == 0:
                    ii -= 1
                elif t == 1:
                    ii += 1
                elif t == 2:
                    jj -= 1
                elif t == 3:
                    jj += 1
                elif t == 4:
                    kk -= 1
                else:
                    kk += 1
                if ii < 0 or jj < 0 or kk < 0 or ii >= shape[0] or jj >= ny or kk >= nz:
                    continue
                b = (ii * ny + jj) * nz + kk
                if inside[b] and label[b] < 0:
                    label[b] = comps
                    stack[top] = b
                    top += 1
        comps += 1
        if near_in and near_out:
            both += 1
    return both


def _sausage_centers(sample: InterlacementLocalSample, reach: float, gap: float) -> np.ndarray:
    from .sausage import _refine_path
    chunks = [np.zeros((0, sample.d))]
    for k, p in enumerate(sample.paths()):
        jump = np.zeros(p.n, dtype=np.bool_)
        jump[p.teleports] = True
        st = Stream(*(tuple(p.seed_tag)[:3] or (0, 0, 0))).spawn(104729 + k)
        pts = _refine_path(st.state, np.ascontiguousarray(p.positions), np.ascontiguousarray(p.times),
                           jump, gap)
        keep = np.linalg.norm(pts, axis=1) <= reach
        chunks.append(pts[keep])
    return np.concatenate(chunks, axis=0)


def vacant_components_annulus(sample: InterlacementLocalSample, r: float, R: float,
                              grid_spacing: float) -> int:
    """``N^alpha(r, R)``: grid components of the vacant set in the annulus
    ``r <= |x| <= R`` that reach within ``grid_spacing`` of both spheres."""
    if not 0 < r < R:
        raise ValueError("need 0 < r < R")
    if sample.d != 3:
        raise ValueError("the annulus statistic is implemented for d = 3")
    if sample.R_prime < R + sample.radius:
        raise ValueError("sample must be sourced with R' >= R + radius")
    h = float(grid_spacing)
    m = int(math.ceil(R / h))
    lo = np.full(3, -m * h)
    shape = np.array([2 * m + 1] * 3, dtype=np.int64)
    occ = np.zeros(int(np.prod(shape)), dtype=np.bool_)
    cen = _sausage_centers(sample, R + sample.radius + h, min(h, sample.radius) / 2.0)
    if cen.shape[0]:
        _mark_balls(occ, lo, h, shape, np.ascontiguousarray(cen), sample.radius)
    return int(_annulus_components(occ, lo, h, shape, float(r), float(R), h))
