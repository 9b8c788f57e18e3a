"""r-excursions, the event G and the cascade of excursions.

For a path started on the unit sphere, the r-excursions are the pieces
running from a (re)visit of the unit sphere to the next exit through the
sphere of radius ``1 + r``.  The cascade picks ranges ``r_l`` from a dyadic
set according to the distance ``d_{l-1}`` between the origin and the affine
hull of the current excursion starting points, and stops once that hull is
close to the origin or spanned by ``d + 1`` points.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._accel import njit

from .brownian import INWARD, OUTWARD, RETURN, PathSample
from .geometry import AffineHull, GeometryMismatch, extend_hull
from .sausage import BUNDLE_SCHEMA

__all__ = [
    "ExcursionRecord", "LevelRecord", "CascadeState", "CascadeReport",
    "gamma_of", "dyadic_set", "extract_r_excursions", "detect_event_G",
    "run_cascade", "compute_tau", "verify_cascade_lemmas", "INFINITE",
]

INFINITE = math.inf
SPHERE_TOL = 1e-9


def gamma_of(eps: float) -> float:
    """``(log eps)^2 + 1`` with the natural logarithm."""
    return math.log(eps) ** 2 + 1.0


def dyadic_set(eps: float) -> list:
    """``{2^-k : 0 <= k <= log2(1/eps)}``, largest first."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    kmax = int(math.floor(math.log2(1.0 / eps) + 1e-12))
    return [2.0 ** -k for k in range(kmax + 1)]


def _check_eps(eps: float):
    if not 0 < eps < 1 or math.log(1.0 / eps) < 1.0:
        raise ValueError("need eps in (0, 1) with log(1/eps) >= 1")


# ---------------------------------------------------------------------------
# excursions

@dataclass(frozen=True)
class ExcursionRecord:
    motion_index: int
    start_time: float
    end_time: float
    start_point: np.ndarray
    end_point: np.ndarray
    r: float
    radius: float
    complete: bool = True


def _sphere(path: PathSample, radius: float) -> int:
    k = path.sphere_index(radius, SPHERE_TOL)
    if k < 0:
        raise ValueError(f"path has no crossing annotations for the sphere of radius {radius!r}")
    return k


@njit(cache=True)
def _piece_marks(sph, direc, k_in, k_out):
    """Crossing indices where a piece ends (exit) or starts (re-entry),
    alternating, beginning with an exit."""
    marks = np.empty(sph.shape[0], dtype=np.int64)
    n = 0
    inside = True
    for j in range(sph.shape[0]):
        if inside:
            if sph[j] == k_out and direc[j] == OUTWARD:
                marks[n] = j
                n += 1
                inside = False
        elif sph[j] == k_in and (direc[j] == INWARD or direc[j] == RETURN):
            marks[n] = j
            n += 1
            inside = True
    return marks[:n]


def _radius(pos, cp, p0, a, b, ca, cb) -> float:
    rad = 0.0
    if b > a:
        rad = float(np.sqrt(np.max(np.sum((pos[a:b] - p0) ** 2, axis=1))))
    if cb > ca:
        rad = max(rad, float(np.sqrt(np.max(np.sum((cp[ca:cb] - p0) ** 2, axis=1)))))
    return rad


def extract_r_excursions(path: PathSample, r: float, motion_index: int = 0) -> list:
    """The r-excursions of ``path``, in time order.

    The first starts at time 0; each ends at the first exit through
    ``B(1 + r)``, and the next starts at the following visit of the unit
    sphere (an inward crossing or a placed re-entry).  The radius is the
    largest distance from the start over the samples and crossing points of
    the piece.  A final piece that never exits is returned with
    ``complete=False``.
    """
    if not r > 0:
        raise ValueError("r must be positive")
    k_in = _sphere(path, 1.0)
    k_out = _sphere(path, 1.0 + r)
    pos = path.positions
    cr = path.crossings
    cp = path.crossing_points
    idx = cr["index"].astype(np.int64)
    times = cr["time"]
    marks = _piece_marks(cr["sphere"].astype(np.int64), cr["direction"].astype(np.int64), k_in, k_out)
    out = []
    start_t, start_p = float(path.times[0]), pos[0]
    first_pos, first_cr = 0, 0
    for m in range(0, len(marks), 2):
        j = int(marks[m])
        rad = _radius(pos, cp, start_p, first_pos, idx[j] + 1, first_cr, j + 1)
        out.append(ExcursionRecord(motion_index, start_t, float(times[j]), start_p.copy(),
                                   cp[j].copy(), float(r), rad))
        if m + 1 < len(marks):
            j = int(marks[m + 1])
            start_t, start_p = float(times[j]), cp[j]
            first_pos = idx[j] if cr["direction"][j] == RETURN else idx[j] + 1
            first_cr = j
    if len(marks) % 2 == 0:
        rad = _radius(pos, cp, start_p, first_pos, len(pos), first_cr, len(cp))
        out.append(ExcursionRecord(motion_index, start_t, math.inf, start_p.copy(),
                                   np.full(pos.shape[1], np.nan), float(r), rad, False))
    return out


def detect_event_G(paths, eps: float, refine_gap: float | None = None, detail: bool = False):
    """Every r-excursion of every path has radius ``< (log eps)^2 r`` for all
    dyadic ``r``.

    With ``detail`` returns ``(G, borderline, worst_ratio)`` where
    ``borderline`` marks a radius within a factor ``1 +- refine_gap / r`` of
    its threshold and ``worst_ratio`` is the largest radius/threshold.
    """
    if isinstance(paths, PathSample):
        paths = [paths]
    _check_eps(eps)
    gap = eps / 10.0 if refine_gap is None else refine_gap
    L2 = math.log(eps) ** 2
    ok, border, worst = True, False, 0.0
    for r in dyadic_set(eps):
        thr = L2 * r
        for k, p in enumerate(paths):
            for ex in extract_r_excursions(p, r, k):
                ratio = ex.radius / thr
                worst = max(worst, ratio)
                if ex.radius >= thr:
                    ok = False
                if abs(ratio - 1.0) <= gap / r:
                    border = True
    return (ok, border, worst) if detail else ok


# ---------------------------------------------------------------------------
# the cascade

@dataclass
class LevelRecord:
    level: int
    r: float                    # r_l (nan at level 0)
    starts: list                # (motion, start time, point) of all r_l-excursions
    new: list                   # the subset that is new with respect to level l - 1
    hull: AffineHull
    dist: float                 # d_l
    count: int                  # N-bar_l


@dataclass
class CascadeState:
    eps: float
    gamma: float
    dyadic_set: list
    levels: list
    L: float                    # int, or INFINITE
    d: int
    K: int
    tau: float = INFINITE
    tau_trigger: int = 0        # 1, 2 or 3; 0 if tau is infinite
    tau_index: tuple = ()       # (l, k, i) with 1-based k and i
    borderline: bool = False
    notes: list = field(default_factory=list)

    @property
    def loop(self) -> bool:
        return self.L == INFINITE

    @property
    def out_of_regime(self) -> bool:
        """A single motion stopped at step 0: only one starting point
        exists, so the stopping index is never defined."""
        return self.K == 1 and self.L == 0 and self.levels[0].dist < 2 * self.gamma * self.eps

    def counts(self) -> list:
        return [lv.count for lv in self.levels]

    def to_record(self, **extra) -> str:
        """One JSON line describing the state (seed fields go in ``extra``)."""
        lv = [{"level": x.level, "r": None if math.isnan(x.r) else x.r, "count": x.count, "dist": x.dist, "hull_dim": x.hull.dim,
               "new": len(x.new)} for x in self.levels]
        rec = {"schema": BUNDLE_SCHEMA, "kind": "cascade-state", "eps": self.eps, "gamma": self.gamma,
               "d": self.d, "K": self.K, "L": _num(self.L), "tau": _num(self.tau),
               "tau_trigger": self.tau_trigger, "tau_index": list(self.tau_index),
               "borderline": self.borderline, "levels": lv, "notes": self.notes}
        rec.update(extra)
        return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def _num(x):
    return "inf" if x == INFINITE else int(x)


def _hull_dist(hull: AffineHull, notes: list) -> float:
    origin = np.zeros(hull.d)
    try:
        return hull.distance(origin)
    except GeometryMismatch as exc:
        notes.append(f"hull distance mismatch: {exc}")
        return hull.distance(origin, method="projection")


def _near(a: float, b: float, band: float) -> bool:
    return abs(a - b) <= band


def run_cascade(paths, eps: float, tol: float | None = None) -> CascadeState:
    """Run Steps 0, 1, 2, ... of the cascade and compute the stopping index.

    ``paths`` must start on the unit sphere and carry crossing annotations
    for the unit sphere and for ``1 + r`` with every dyadic ``r``.  ``L`` is
    set to ``INFINITE`` as soon as a level adds no excursion (the ranges
    then repeat forever).  ``tol`` is the hull-dimension tolerance passed to
    :func:`extend_hull`.
    """
    if isinstance(paths, PathSample):
        paths = [paths]
    paths = list(paths)
    _check_eps(eps)
    if not paths:
        raise ValueError("run_cascade needs at least one path")
    d = paths[0].d
    K = len(paths)
    gam = gamma_of(eps)
    R = dyadic_set(eps)
    thr = 2.0 * gam * eps
    band = 10.0 * 1e-12 * max(1.0, thr)
    notes: list = []
    border = False
    for p in paths:
        if abs(np.linalg.norm(p.start) - 1.0) > 1e-9:
            raise ValueError("paths must start on the unit sphere")

    starts0 = [(k, 0.0, p.start.copy()) for k, p in enumerate(paths)]
    h = AffineHull.from_points(np.array([s[2] for s in starts0]), tol)
    d0 = _hull_dist(h, notes)
    levels = [LevelRecord(0, math.nan, starts0, list(starts0), h, d0, K)]
    border |= _near(d0, thr, band)
    L = INFINITE
    if K >= d + 1 or d0 < thr:
        L = 0
    l = 0
    while L == INFINITE:
        l += 1
        prev = levels[-1]
        cap = prev.dist / gam
        r_l = max(r for r in R if r <= cap)
        if any(_near(r, cap, band) for r in R):
            border = True
        starts = []
        for k, p in enumerate(paths):
            for ex in extract_r_excursions(p, r_l, k):
                starts.append((k, ex.start_time, ex.start_point))
        if l == 1:
            seen = {(k, float(p.times[0])) for k, p in enumerate(paths)}
        else:
            seen = {(k, t) for k, t, _ in prev.starts}
        new = [s for s in starts if (s[0], s[1]) not in seen]
        have = {(k, t) for k, t, _ in starts}
        if not seen <= have:
            notes.append(f"level {l}: earlier starting points missing (nesting broken)")
            border = True
        hull = prev.hull
        for s in new:
            hull = extend_hull(hull, s[2], tol)
        dl = _hull_dist(hull, notes)
        border |= _near(dl, thr, band)
        levels.append(LevelRecord(l, r_l, starts, new, hull, dl, len(starts)))
        if len(starts) >= d + 1 or dl < thr:
            L = l
        elif len(starts) == prev.count:
            break  # no new excursion: the same range repeats forever
        if l > 64:
            notes.append("level limit reached")
            break
    state = CascadeState(eps, gam, R, levels, L, d, K, borderline=border, notes=notes)
    _fill_tau(state, tol)
    return state


def _fill_tau(state: CascadeState, tol):
    eps, d = state.eps, state.d
    thr = 2.0 * state.gamma * eps
    band = 10.0 * 1e-12 * max(1.0, thr)
    hull = None
    n = 0
    for lv in state.levels:
        per_motion: dict = {}
        for k, t, p in lv.new:
            per_motion.setdefault(k, []).append((t, p))
        for k in sorted(per_motion):
            for i, (t, p) in enumerate(sorted(per_motion[k], key=lambda a: a[0]), start=1):
                n += 1
                if hull is None:
                    hull = AffineHull(p)
                    continue
                dprev = _hull_dist_to(hull, p, state.notes)
                hull = extend_hull(hull, p, tol)
                dcur = _hull_dist(hull, state.notes)
                if _near(dprev, eps, 10.0 * 1e-12) or _near(dcur, thr, band):
                    state.borderline = True
                trig = 1 if dprev < eps else 2 if dcur < thr else 3 if n == d + 1 else 0
                if trig:
                    state.tau, state.tau_trigger, state.tau_index = n, trig, (lv.level, k + 1, i)
                    return


def _hull_dist_to(hull: AffineHull, p, notes) -> float:
    try:
        return hull.distance(p)
    except GeometryMismatch as exc:
        notes.append(f"hull distance mismatch: {exc}")
        return hull.distance(p, method="projection")


def compute_tau(paths_or_state, eps: float | None = None, tol: float | None = None):
    """``(tau, trigger)``: the first lexicographic index ``>= 2`` at which a
    new starting point is within ``eps`` of the previous hull (1), the hull
    comes within ``2 gamma eps`` of the origin (2), or the index reaches
    ``d + 1`` (3).  ``(INFINITE, 0)`` if none happens."""
    if isinstance(paths_or_state, CascadeState):
        st = paths_or_state
    else:
        st = run_cascade(paths_or_state, eps, tol)
    return st.tau, st.tau_trigger


@dataclass
class CascadeReport:
    state: CascadeState
    event_E: bool
    event_G: bool
    borderline: bool
    out_of_regime: bool
    violations: list = field(default_factory=list)
    bundles: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def verify_cascade_lemmas(state: CascadeState, eventE: bool, eventG: bool,
                          borderline: bool = False, seed: dict | None = None) -> CascadeReport:
    """Check the deterministic consequences of the cascade construction.

    (i) ``L`` finite implies ``N-bar_l`` strictly increasing up to ``L`` and
    ``L <= d``; (ii) ``E`` and ``G`` imply ``L <= d``; (iii) ``L <= d``
    implies ``tau <= d + 1``.  A single motion stopped at step 0 has no
    index ``>= 2`` and is reported as out of regime for (iii).  Violations
    on borderline states are not counted but still bundled.
    """
    d = state.d
    counts = state.counts()
    v = []
    if state.L != INFINITE:
        L = int(state.L)
        if L >= len(counts):
            v.append(f"L = {L} beyond the {len(counts)} recorded levels")
        if any(counts[l] <= counts[l - 1] for l in range(1, min(L, len(counts) - 1) + 1)):
            v.append(f"counts not strictly increasing up to L: {counts}")
        if L > d:
            v.append(f"L = {L} > d = {d}")
    if eventE and eventG and not state.L <= d:
        v.append(f"E and G hold but L = {_num(state.L)}")
    oor = state.out_of_regime
    if state.L <= d and not oor and not state.tau <= d + 1:
        v.append(f"L = {_num(state.L)} <= d but tau = {_num(state.tau)}")
    border = borderline or state.borderline
    rep = CascadeReport(state, bool(eventE), bool(eventG), border, oor)
    if v:
        line = state.to_record(violations=v, E=bool(eventE), G=bool(eventG), **(seed or {}))
        rep.bundles.append(line)
        if not border:
            rep.violations.extend(v)
    return rep
