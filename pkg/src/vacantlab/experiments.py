"""Monte Carlo harness: trials, estimates over eps-grids, slope fits, campaigns.

Every trial ``i`` of an experiment draws from the stream
``(master_seed, i, sub)`` where ``sub`` depends only on the event family and
on ``eps``.  Trials are grouped into fixed-size chunks; chunks may run in
worker processes but are reduced in index order, so the CSV does not depend
on the worker count.  Events sharing a family (``e-and-f``, ``e-only`` and
``f-only``; ``nonuniqueness-one-ball`` and ``hemiball-implication``) share
streams, which couples them trial by trial.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import struct
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._accel import njit
from .brownian import (EXIT, ESCAPED, HIT, DtPolicy, Exterior, PathSample, Sphere, StopRule,
                       escape_prob, hit_prob_annulus, run_outcomes, simulate_path_segment, walk)
from .cascade import (INFINITE, _check_eps, detect_event_G, dyadic_set, run_cascade,
                      verify_cascade_lemmas)
from .geometry import _hull_distance_kernel, dist_origin_to_convex_hull, unit_vector
from .interlacements import INTRO, sample_local_interlacements, vacant_components_annulus
from .rng import MASK64, Stream, new_state
from .sausage import (build_sausage, check_hemiball_implication, count_vacant_components,
                      parse_bundle_line, visited_points)

__all__ = [
    "EVENTS", "ExperimentConfig", "EstimateRow", "SlopeFit", "EstimateResult", "FormulaCheck",
    "run_trials", "estimate_event_probability", "fit_loglog_slope", "verify_formulas",
    "write_csv", "csv_text", "trial_bundle", "replay_bundle", "f_only_exact", "normalize_event",
]

EVENTS = (
    "e-and-f", "f-only", "e-only",
    "nonuniqueness-one-ball", "nonuniqueness-several-balls", "excursion-local",
    "hemiball-implication", "cascade-lemmas", "annulus-count", "formula-suite",
)
_ALIASES = {
    "E∩F": "e-and-f", "e-and-f": "e-and-f", "ef": "e-and-f", "E": "e-only", "F": "f-only",
    "f-only": "f-only", "e-only": "e-only", "several-balls": "nonuniqueness-several-balls",
    "one-ball": "nonuniqueness-one-ball",
}
PROBABILITY_EVENTS = EVENTS[:6]
CAMPAIGNS = ("hemiball-implication", "cascade-lemmas")
_FAMILY = {
    "e-and-f": "ef", "f-only": "ef", "e-only": "ef",
    "nonuniqueness-one-ball": "one-ball", "hemiball-implication": "one-ball",
    "nonuniqueness-several-balls": "several-balls", "excursion-local": "excursion-local",
    "cascade-lemmas": "cascade", "annulus-count": "annulus",
}
_EF_MODE = {"e-and-f": 0, "f-only": 1, "e-only": 2}
MIN_SUCCESSES = 25
SLOPE_NOTE = ("bounds carry log(1/eps) factors and finite-eps corrections, "
              "so the fitted slope sits below the exponent d+1")
CSV_COLUMNS = ["eps", "k_motions", "event", "trials", "successes", "p_hat", "stderr",
               "borderline", "seed", "violations", "slope", "slope_stderr", "n_points", "note"]


def normalize_event(event: str) -> str:
    ev = _ALIASES.get(event, event)
    if ev not in EVENTS:
        raise ValueError(f"unknown event {event!r}; expected one of {', '.join(EVENTS)}")
    return ev


def _sub(family: str, eps: float) -> int:
    bits = struct.unpack("<Q", struct.pack("<d", float(eps)))[0]
    return (bits ^ (zlib.crc32(family.encode()) * 0x9E3779B97F4A7C15)) & MASK64


# ---------------------------------------------------------------------------
# configuration and results

@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment.  ``k_motions`` and ``eps_grid`` are swept as a grid."""

    event: str
    d: int = 3
    eps_grid: tuple = (0.1,)
    k_motions: tuple = (1,)
    n_trials: int = 1000
    master_seed: int = 0
    grid_spacing: float | None = None   # default eps/10 (annulus: 0.5)
    centers: tuple | None = None        # several-balls only
    dt: DtPolicy | None = None          # default depends on the event
    chunk: int | None = None
    alpha: float = 0.05                 # annulus only
    r: float = 1.0
    R: float = 23.0
    max_steps: int = 50_000_000
    out: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "event", normalize_event(self.event))
        object.__setattr__(self, "eps_grid", tuple(float(e) for e in self.eps_grid))
        object.__setattr__(self, "k_motions", tuple(int(k) for k in self.k_motions))
        if self.centers is not None:
            object.__setattr__(self, "centers", tuple(tuple(float(c) for c in x) for x in self.centers))
        self.validate()

    def validate(self):
        if self.d < 3:
            raise ValueError("dimension must be at least 3")
        if self.n_trials < 0:
            raise ValueError("n_trials must be nonnegative")
        if self.event == "annulus-count":
            if not 0 < self.r < self.R:
                raise ValueError("need 0 < r < R")
            if self.alpha < 0:
                raise ValueError("alpha must be nonnegative")
            return
        if self.event == "formula-suite":
            return
        if not self.eps_grid:
            raise ValueError("eps grid is empty")
        for e in self.eps_grid:
            if not 0 < e < 1:
                raise ValueError(f"eps {e} not in (0, 1)")
            if self.event == "cascade-lemmas":
                _check_eps(e)
        if not self.k_motions or min(self.k_motions) < 1:
            raise ValueError("k_motions must be positive")
        if self.grid_spacing is not None:
            for e in self.eps_grid:
                if not 0 < self.grid_spacing <= e / 10 * (1 + 1e-12):
                    raise ValueError("grid spacing must be in (0, eps/10]")
        if self.event == "nonuniqueness-several-balls":
            if not self.centers:
                raise ValueError("several-balls needs --centers")
            X = np.asarray(self.centers, dtype=float)
            if X.ndim != 2 or X.shape[1] != self.d:
                raise ValueError("centers must be points of dimension d")
            for a in range(len(X)):
                for b in range(a):
                    if not np.linalg.norm(X[a] - X[b]) > 6:
                        raise ValueError("centers must be pairwise more than 6 apart")


@dataclass
class EstimateRow:
    eps: float | None
    k_motions: int | None
    event: str
    trials: int
    successes: float
    p_hat: float
    stderr: float
    borderline: int
    seed: int
    violations: int = 0
    note: str = ""


@dataclass
class SlopeFit:
    event: str
    slope: float
    slope_stderr: float
    n_points: int
    status: str = "ok"                  # or "insufficient-data"
    k_motions: int | None = None
    note: str = SLOPE_NOTE

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class EstimateResult:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    slopes: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    bundles: list = field(default_factory=list)
    seconds: float = 0.0

    def row(self, eps=None, k=None) -> EstimateRow:
        for r in self.rows:
            if (eps is None or r.eps == eps) and (k is None or r.k_motions == k):
                return r
        raise KeyError((eps, k))

    @property
    def borderline(self) -> int:
        return sum(r.borderline for r in self.rows)



# ---------------------------------------------------------------------------
# E, F and E-and-F: one jitted batch

@njit
def _ef_batch(master, sub, i0, n, K, d, eps, mode, starts, e_radius,
              base_dt, dt_min, factor, max_steps):
    """Trials ``i0 .. i0+n-1``.  ``mode`` 0: E and F, 1: F only, 2: E only
    (the inner sphere is then only watched, not resolved).  Returns success flags and, where computed, the hull distance of the
    visited points in ``B(e_radius)`` (nan otherwise)."""
    ok = np.zeros(n, dtype=np.bool_)
    hd_out = np.full(n, np.nan)
    centers = np.zeros((2, d))
    radii = np.array([1.0 - eps, 1.0])
    resolve = np.array([mode != 2, False])
    stop_hit = np.array([mode != 2, False])
    stop_exit = np.array([False, False])
    lim = e_radius * e_radius * (1.0 + 1e-12)
    x0 = np.empty(d)
    buf = np.empty((4096, d))
    mean = np.empty(d)
    for i in range(n):
        s = new_state(master, i0 + i, sub)
        nb = 0
        f_ok = True
        for k in range(K):
            if starts.shape[0] > 0:
                for q in range(d):
                    x0[q] = starts[k, q]
            else:
                unit_vector(s, x0)
            res = walk(s, x0, 0.0, centers, radii, resolve, stop_hit, stop_exit, np.inf,
                       base_dt, dt_min, factor, True, 1.0, 1.0, 1, mode != 1, max_steps)
            if res[0] == HIT:
                f_ok = False
                if mode != 2:
                    break
            if mode == 1:
                continue
            npos, pos, nc, cpt = res[2], res[3], res[5], res[10]
            for src in range(2):
                m = npos if src == 0 else nc
                P = pos if src == 0 else cpt
                for j in range(m):
                    r2 = 0.0
                    for q in range(d):
                        r2 += P[j, q] * P[j, q]
                    if r2 <= lim:
                        if nb >= buf.shape[0]:
                            nbuf = np.empty((2 * buf.shape[0], d))
                            nbuf[:nb] = buf[:nb]
                            buf = nbuf
                        for q in range(d):
                            buf[nb, q] = P[j, q]
                        nb += 1
        if mode == 1:
            ok[i] = f_ok
            continue
        if (mode == 0 and not f_ok) or nb == 0:
            continue
        # cheap certificate: every point far below the plane orthogonal to the mean
        mean[:] = 0.0
        for j in range(nb):
            for q in range(d):
                mean[q] += buf[j, q]
        mn = 0.0
        for q in range(d):
            mn += mean[q] * mean[q]
        mn = math.sqrt(mn)
        if mn > 0.0:
            top = -np.inf
            for j in range(nb):
                v = 0.0
                for q in range(d):
                    v -= buf[j, q] * mean[q]
                top = max(top, v / mn)
            if top < -eps * (1.0 + 1e-9):
                hd_out[i] = -top
                continue
        hd = _hull_distance_kernel(buf[:nb].copy(), 1e-10)
        hd_out[i] = hd
        ok[i] = hd <= eps
    return ok, hd_out


def default_dt(event: str, eps: float) -> DtPolicy:
    """Time-step policy used when the config does not fix one."""
    if event == "e-only":
        # no kill, so the inner sphere is not resolved: a flat step
        return DtPolicy(base_dt=(eps / 5.0) ** 2, dt_min=(eps / 5.0) ** 2, factor=5.0)
    if event == "cascade-lemmas":
        return DtPolicy(base_dt=1e-2, dt_min=(eps / 200.0) ** 2, factor=5.0)
    if event in ("e-and-f", "f-only", "nonuniqueness-one-ball", "hemiball-implication"):
        return DtPolicy(base_dt=(eps / 5.0) ** 2, dt_min=(eps / 1000.0) ** 2, factor=5.0)
    if event in ("excursion-local", "nonuniqueness-several-balls"):
        return DtPolicy(base_dt=1e-2, dt_min=(eps / 1000.0) ** 2, factor=5.0)
    if event == "annulus-count":
        return DtPolicy(base_dt=0.05, dt_min=1e-6, factor=5.0)
    return DtPolicy(base_dt=0.05, dt_min=1e-6, factor=5.0)


def f_only_exact(eps: float, K: int = 1, d: int = 3) -> float:
    """``P[F]`` for ``K`` motions started on the unit sphere."""
    return (1.0 - (1.0 - eps) ** (d - 2)) ** K


def _ef_chunk(cfg: ExperimentConfig, K: int, eps: float, i0: int, n: int, starts=None):
    pol = cfg.dt or default_dt(cfg.event, eps)
    st = np.zeros((0, cfg.d)) if starts is None else np.ascontiguousarray(starts, dtype=float)
    return _ef_batch(np.uint64(cfg.master_seed), np.uint64(_sub("ef", eps)), np.uint64(i0), int(n),
                     int(K), cfg.d, float(eps), _EF_MODE[cfg.event], st, 1.0,
                     pol.base_dt, pol.dt_min, pol.factor, int(cfg.max_steps))


# ---------------------------------------------------------------------------
# scene trials (sausages and grid counts)

@dataclass
class TrialOutcome:
    success: bool = False
    borderline: bool = False
    value: float = 0.0
    violations: list = field(default_factory=list)
    bundles: list = field(default_factory=list)
    digest: str = ""
    summary: dict = field(default_factory=dict)


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()[:32]


def _replay_key(cfg: ExperimentConfig, K: int, eps: float, i: int) -> dict:
    return {"event": cfg.event, "d": cfg.d, "eps": eps, "k_motions": K, "master_seed": cfg.master_seed,
            "trial": i, "grid_spacing": cfg.grid_spacing, "centers": cfg.centers,
            "dt": None if cfg.dt is None else [cfg.dt.base_dt, cfg.dt.dt_min, cfg.dt.factor],
            "alpha": cfg.alpha, "r": cfg.r, "R": cfg.R}


def _start_on_sphere(st: Stream, center, radius: float, d: int) -> np.ndarray:
    x = np.empty(d)
    unit_vector(st.state, x)
    return np.asarray(center, dtype=float) + radius * x


def _one_ball_trial(cfg: ExperimentConfig, K: int, eps: float, i: int, audit: bool) -> TrialOutcome:
    """K motions from uniform points on the sphere of radius 1+eps, run
    until they escape; a motion entering ``B(1-eps)`` covers ``B(eps)``."""
    d = cfg.d
    st = Stream(cfg.master_seed, i, _sub("one-ball", eps))
    pol = cfg.dt or default_dt(cfg.event, eps)
    rho = 1.0 + eps
    spheres = (Sphere(1.0 - eps), Sphere(rho, resolve=False))
    paths = []
    for _ in range(K):
        x = _start_on_sphere(st, np.zeros(d), rho, d)
        p = simulate_path_segment(st, x, pol, spheres, StopRule(hit=(0,)), Exterior(rho, rho),
                                  max_steps=cfg.max_steps)
        if p.outcome == HIT:
            return TrialOutcome(summary={"covered": True})
        paths.append(p)
    s = build_sausage(paths, 1.0, eps=eps, rng=st.spawn(1))
    h = cfg.grid_spacing or eps / 10.0
    rep = count_vacant_components(np.zeros(d), eps, s, h)
    out = TrialOutcome(digest=_digest(s.centers),
                       summary={"covered": False, "counts": list(rep.counts)})
    relevant = max(rep.counts[:2]) >= 2
    out.borderline = rep.borderline_flag and relevant
    out.success = rep.component_count >= 2 and not rep.borderline_flag
    if audit and out.success:
        key = {"replay": _replay_key(cfg, K, eps, i), "digest": out.digest}
        imp = check_hemiball_implication({"report": rep, "eps": eps, "sausage": s, "paths": paths,
                                          "seed": key})
        out.violations = list(imp.violations)
        out.bundles = list(imp.bundles)
        out.summary["hull_distance"] = imp.hull_distance
    return out


def _local_trial(cfg: ExperimentConfig, K: int, eps: float, i: int) -> TrialOutcome:
    """Excursion-local and several-balls scenes: nonuniqueness in every
    ``B(x_j, eps)``."""
    d = cfg.d
    several = cfg.event == "nonuniqueness-several-balls"
    X = np.asarray(cfg.centers, dtype=float) if several else np.zeros((1, d))
    J = X.shape[0]
    st = Stream(cfg.master_seed, i, _sub(_FAMILY[cfg.event], eps))
    pol = cfg.dt or default_dt(cfg.event, eps)
    spheres = [Sphere(1.0 - eps, tuple(X[j])) for j in range(J)]
    if several:
        r_out = float(np.max(np.linalg.norm(X, axis=1))) + 3.0
        spheres.append(Sphere(r_out, resolve=False))
        rule, ext = StopRule(hit=tuple(range(J))), Exterior(r_out, r_out)
    else:
        spheres.append(Sphere(3.0, resolve=False))
        rule, ext = StopRule(hit=(0,), exit=(1,)), None
    paths = []
    for k in range(K):
        x = _start_on_sphere(st, X[k % J], 2.0, d)
        p = simulate_path_segment(st, x, pol, tuple(spheres), rule, ext, max_steps=cfg.max_steps)
        if p.outcome == HIT:
            return TrialOutcome(summary={"covered": True})
        paths.append(p)
    s = build_sausage(paths, 1.0, eps=eps, rng=st.spawn(1))
    h = cfg.grid_spacing or eps / 10.0
    out = TrialOutcome(digest=_digest(s.centers), success=True, summary={"counts": []})
    for j in range(J):
        rep = count_vacant_components(X[j], eps, s, h)
        out.summary["counts"].append(list(rep.counts))
        out.borderline |= rep.borderline_flag and max(rep.counts[:2]) >= 2
        out.success &= rep.component_count >= 2 and not rep.borderline_flag
    return out


def _cascade_trial(cfg: ExperimentConfig, K: int, eps: float, i: int) -> TrialOutcome:
    """Cascade on K motions from the unit sphere.  When step 0 already
    stops, nothing later can change the verdicts, so no path is simulated
    and E, G are left unevaluated."""
    d = cfg.d
    st = Stream(cfg.master_seed, i, _sub("cascade", eps))
    starts = [_start_on_sphere(st, np.zeros(d), 1.0, d) for _ in range(K)]
    R = dyadic_set(eps)
    radii = [1.0 - eps, 1.0] + [1.0 + r for r in R]
    stubs = [PathSample.from_positions(x[None, :], spheres=radii) for x in starts]
    state = run_cascade(stubs, eps)
    E = G = False
    evaluated = False
    border = False
    paths = stubs
    if state.L != 0:
        evaluated = True
        pol = cfg.dt or default_dt(cfg.event, eps)
        rho = 1.0 + max(R)
        # only the unit sphere and B(1 - eps) set the step; the dyadic spheres
        # are watched for crossings without shrinking it
        spheres = tuple(Sphere(r, resolve=r <= 1.0) for r in radii)
        # leaving B(2 rho) gives a return chance of 1/2, so a path needs few cycles
        paths = [simulate_path_segment(st, x, pol, spheres, StopRule(), Exterior(2.0 * rho, rho),
                                       bridge_correction=False, max_steps=cfg.max_steps)
                 for x in starts]
        state = run_cascade(paths, eps)
        pts = visited_points(paths, 1.0)
        hd = dist_origin_to_convex_hull(pts) if pts.shape[0] else math.inf
        E = hd <= eps
        G, g_border, _ = detect_event_G(paths, eps, detail=True)
        if not state.L <= d:
            border |= (g_border and E) or (abs(hd - eps) <= 1e-9 and G)
    digest = _digest(*[p.positions for p in paths])
    key = {"replay": _replay_key(cfg, K, eps, i), "digest": digest}
    rep = verify_cascade_lemmas(state, E, G, borderline=border, seed=key)
    out = TrialOutcome(success=state.L != INFINITE, borderline=rep.borderline, digest=digest,
                       violations=list(rep.violations), bundles=list(rep.bundles))
    out.summary = {"L": "inf" if state.L == INFINITE else int(state.L),
                   "tau": "inf" if state.tau == INFINITE else int(state.tau),
                   "E": E if evaluated else None, "G": G if evaluated else None,
                   "out_of_regime": rep.out_of_regime}
    return out


def _annulus_trial(cfg: ExperimentConfig, i: int) -> TrialOutcome:
    st = Stream(cfg.master_seed, i, _sub("annulus", cfg.alpha))
    pol = cfg.dt or default_dt("annulus-count", 0.0)
    sample = sample_local_interlacements(st, cfg.alpha, cfg.R, cfg.R + 1.0, INTRO, d=cfg.d,
                                         dt_policy=pol)
    h = cfg.grid_spacing or 0.5
    n = vacant_components_annulus(sample, cfg.r, cfg.R, h)
    return TrialOutcome(success=n > 0, value=float(n), digest=_digest(*[p.positions for p in sample.paths()]),
                        summary={"N": n, "trajectories": sample.count})


def run_one_trial(cfg: ExperimentConfig, K: int, eps: float, i: int) -> TrialOutcome:
    """Run trial ``i`` alone (used by chunks, replay and debugging)."""
    ev = cfg.event
    if ev in _EF_MODE:
        ok, hd = _ef_chunk(cfg, K, eps, i, 1)
        return TrialOutcome(success=bool(ok[0]), summary={"hull_distance": float(hd[0])})
    if ev in ("nonuniqueness-one-ball", "hemiball-implication"):
        return _one_ball_trial(cfg, K, eps, i, audit=ev == "hemiball-implication")
    if ev in ("excursion-local", "nonuniqueness-several-balls"):
        return _local_trial(cfg, K, eps, i)
    if ev == "cascade-lemmas":
        return _cascade_trial(cfg, K, eps, i)
    if ev == "annulus-count":
        return _annulus_trial(cfg, i)
    raise ValueError(f"event {ev} has no single-trial form")


# ---------------------------------------------------------------------------
# chunks and reduction

@dataclass
class _Tally:
    n: int = 0
    successes: int = 0
    borderline: int = 0
    total: float = 0.0
    total_sq: float = 0.0
    values: list = field(default_factory=list)
    violations: list = field(default_factory=list)
    bundles: list = field(default_factory=list)


def _run_chunk(task) -> _Tally:
    cfg, K, eps, i0, n = task
    t = _Tally(n=n)
    if cfg.event in _EF_MODE:
        ok, _ = _ef_chunk(cfg, K, eps, i0, n)
        t.successes = int(ok.sum())
        return t
    for i in range(i0, i0 + n):
        o = run_one_trial(cfg, K, eps, i)
        t.successes += int(o.success)
        t.borderline += int(o.borderline)
        t.total += o.value
        t.total_sq += o.value * o.value
        if cfg.event == "annulus-count":
            t.values.append(o.value)
        t.violations.extend(o.violations)
        t.bundles.extend(o.bundles)
    return t


def _default_chunk(event: str) -> int:
    if event in _EF_MODE:
        return 50_000
    if event == "annulus-count":
        return 25
    if event == "cascade-lemmas":
        return 5_000
    return 2_000


def resolve_workers(workers: int | None = None) -> int:
    """Worker processes: explicit value, else ``VACANTLAB_WORKERS``, else 1."""
    if workers is None:
        env = os.environ.get("VACANTLAB_WORKERS", "").strip()
        workers = int(env) if env else 1
    if workers < 1:
        raise ValueError("workers must be positive")
    return int(workers)


def _map(tasks: list, workers: int):
    if workers <= 1 or len(tasks) <= 1:
        return [_run_chunk(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
        return list(ex.map(_run_chunk, tasks))


def _merge(tallies: list) -> _Tally:
    out = _Tally()
    for t in tallies:
        out.n += t.n
        out.successes += t.successes
        out.borderline += t.borderline
        out.total += t.total
        out.total_sq += t.total_sq
        out.values.extend(t.values)
        out.violations.extend(t.violations)
        out.bundles.extend(t.bundles)
    return out


def _binomial_row(eps, K, event, t: _Tally, seed) -> EstimateRow:
    n = t.n
    p = t.successes / n if n else 0.0
    se = math.sqrt(p * (1.0 - p) / n) if n else 0.0
    return EstimateRow(eps, K, event, n, t.successes, p, se, t.borderline, seed, len(t.violations))


def _mean_row(event, values, seed, note) -> EstimateRow:
    v = np.asarray(values, dtype=float)
    n = v.size
    m = float(v.mean()) if n else 0.0
    se = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return EstimateRow(None, None, event, n, float(v.sum()), m, se, 0, seed, 0, note)


def run_trials(config: ExperimentConfig, workers: int | None = None) -> EstimateResult:
    """Run every (K, eps) cell of ``config`` and reduce deterministically.

    Probability events get one binomial row per cell and, per K, a slope
    fit when the grid has at least three usable points.  Campaigns collect
    violations and bundles.  ``annulus-count`` reports the mean of the
    component count over the first half and over all trials.
    """
    cfg = config
    w = resolve_workers(workers)
    t0 = time.perf_counter()
    res = EstimateResult(cfg)
    chunk = cfg.chunk or _default_chunk(cfg.event)
    if cfg.event == "formula-suite":
        raise ValueError("use verify_formulas for the formula suite")
    if cfg.event == "annulus-count":
        tasks = [(cfg, 0, 0.0, i0, min(chunk, cfg.n_trials - i0)) for i0 in range(0, cfg.n_trials, chunk)]
        t = _merge(_map(tasks, w))
        half = cfg.n_trials // 2
        if half:
            res.rows.append(_mean_row(cfg.event, t.values[:half], cfg.master_seed,
                                      f"mean N over first {half} samples"))
        if cfg.n_trials:
            res.rows.append(_mean_row(cfg.event, t.values, cfg.master_seed,
                                      f"mean N over all {cfg.n_trials} samples"))
        res.seconds = time.perf_counter() - t0
        return res
    cells = [(K, eps) for K in cfg.k_motions for eps in cfg.eps_grid]
    tasks, owner = [], []
    for c, (K, eps) in enumerate(cells):
        for i0 in range(0, cfg.n_trials, chunk):
            tasks.append((cfg, K, eps, i0, min(chunk, cfg.n_trials - i0)))
            owner.append(c)
    tallies = _map(tasks, w)
    for c, (K, eps) in enumerate(cells):
        t = _merge([tl for tl, o in zip(tallies, owner) if o == c])
        res.rows.append(_binomial_row(eps, K, cfg.event, t, cfg.master_seed))
        res.violations.extend(t.violations)
        res.bundles.extend(t.bundles)
    if cfg.event in PROBABILITY_EVENTS and len(cfg.eps_grid) >= 2:
        for K in cfg.k_motions:
            fit = fit_loglog_slope([r for r in res.rows if r.k_motions == K])
            fit.event, fit.k_motions = cfg.event, K
            res.slopes.append(fit)
    res.seconds = time.perf_counter() - t0
    return res


def estimate_event_probability(event: str, eps: float, K: int, n: int, seed: int, d: int = 3,
                               workers: int | None = None, **kw) -> tuple:
    """``(p_hat, stderr)`` of one event at one ``eps``."""
    cfg = ExperimentConfig(event, d=d, eps_grid=(eps,), k_motions=(K,), n_trials=n,
                           master_seed=seed, **kw)
    if cfg.event not in PROBABILITY_EVENTS:
        raise ValueError(f"{cfg.event} is not a probability event")
    r = run_trials(cfg, workers).rows[0]
    return r.p_hat, r.stderr


# ---------------------------------------------------------------------------
# slope fit

def fit_loglog_slope(table) -> SlopeFit:
    """OLS slope of ``log p_hat`` against ``log eps``.

    ``table`` holds EstimateRows or ``(eps, p_hat, successes)`` triples.
    Rows with fewer than 25 successes are dropped; with fewer than three
    usable rows the status is ``"insufficient-data"`` and the slope is nan.
    """
    pts = []
    for row in table:
        if isinstance(row, EstimateRow):
            e, p, s = row.eps, row.p_hat, row.successes
        else:
            e, p, s = row
        if e is not None and p > 0 and s >= MIN_SUCCESSES:
            pts.append((float(e), float(p)))
    pts.sort()
    if len(pts) < 3:
        return SlopeFit("", math.nan, math.nan, len(pts), "insufficient-data")
    x = np.log([e for e, _ in pts])
    y = np.log([p for _, p in pts])
    xm, ym = x.mean(), y.mean()
    sxx = float(((x - xm) ** 2).sum())
    slope = float(((x - xm) * (y - ym)).sum() / sxx)
    resid = y - (ym + slope * (x - xm))
    var = float((resid ** 2).sum()) / (len(pts) - 2) if len(pts) > 2 else 0.0
    return SlopeFit("", slope, math.sqrt(var / sxx), len(pts))


# ---------------------------------------------------------------------------
# closed-form checks

@dataclass
class FormulaCheck:
    name: str
    exact: float
    trials: int
    successes: int
    seconds: float

    @property
    def p_hat(self) -> float:
        return self.successes / self.trials

    @property
    def stderr(self) -> float:
        return math.sqrt(self.exact * (1.0 - self.exact) / self.trials)

    @property
    def z(self) -> float:
        return (self.p_hat - self.exact) / self.stderr

    @property
    def passed(self) -> bool:
        return abs(self.z) <= 3.0


def _formula_chunk(task):
    name, d, seed, i0, n, base_dt, dt_min = task
    x = np.zeros(d)
    x[0] = 2.0
    pol = DtPolicy(base_dt, dt_min, 5.0)
    if name == "annulus":
        outc, _ = run_outcomes(seed, n, x, pol, (Sphere(1.0), Sphere(4.0)), StopRule(hit=(0,), exit=(1,)),
                               sub=1, first_index=i0)
        return int(np.count_nonzero(outc == EXIT))
    outc, _ = run_outcomes(seed, n, x, pol, (Sphere(1.0), Sphere(2.0, resolve=False)), StopRule(hit=(0,)),
                           Exterior(2.0, 2.0), sub=2, first_index=i0)
    return int(np.count_nonzero(outc == ESCAPED))


def verify_formulas(d: int = 3, trials: int = 1_000_000, seed: int = 0, workers: int | None = None,
                    dt: DtPolicy | None = None, chunk: int = 100_000) -> list:
    """Hitting frequencies from ``|x| = 2`` against the closed forms:
    reaching ``R = 4`` before ``r = 1``, and never hitting ``B(1)``."""
    pol = dt or DtPolicy(0.05, 1e-6, 5.0)
    w = resolve_workers(workers)
    x = np.zeros(d)
    x[0] = 2.0
    out = []
    for name, exact in (("annulus", hit_prob_annulus(x, 1.0, 4.0)), ("escape", escape_prob(x, 1.0))):
        t0 = time.perf_counter()
        tasks = [(name, d, seed, i0, min(chunk, trials - i0), pol.base_dt, pol.dt_min)
                 for i0 in range(0, trials, chunk)]
        if w <= 1 or len(tasks) <= 1:
            hits = sum(_formula_chunk(t) for t in tasks)
        else:
            with ProcessPoolExecutor(max_workers=min(w, len(tasks))) as ex:
                hits = sum(ex.map(_formula_chunk, tasks))
        out.append(FormulaCheck(name, exact, trials, hits, time.perf_counter() - t0))
    return out


# ---------------------------------------------------------------------------
# CSV

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def csv_text(result: EstimateResult) -> str:
    """The CSV written for ``result`` (header row names every column)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in result.rows:
        w.writerow([_fmt(r.eps), _fmt(r.k_motions), r.event, r.trials, _fmt(r.successes), _fmt(r.p_hat),
                    _fmt(r.stderr), r.borderline, r.seed, r.violations, "", "", "", r.note])
    for s in result.slopes:
        slope = "insufficient-data" if not s.ok else _fmt(s.slope)
        se = "" if not s.ok else _fmt(s.slope_stderr)
        w.writerow(["", _fmt(s.k_motions), s.event, "", "", "", "", "", result.config.master_seed, "",
                    slope, se, s.n_points, s.note])
    return buf.getvalue()


def write_csv(result: EstimateResult, path: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(result))


# ---------------------------------------------------------------------------
# bundles and replay

def trial_bundle(cfg: ExperimentConfig, K: int, eps: float, i: int) -> str:
    """A replayable one-line record of trial ``i``."""
    o = run_one_trial(cfg, K, eps, i)
    rec = {"schema": "vacantlab.bundle/1", "kind": "trial", "replay": _replay_key(cfg, K, eps, i),
           "digest": o.digest, "success": bool(o.success), "borderline": bool(o.borderline),
           "violations": o.violations, "summary": o.summary}
    return json.dumps(rec, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(x):
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    raise TypeError(type(x).__name__)


def _config_from_replay(key: dict) -> ExperimentConfig:
    dt = key.get("dt")
    return ExperimentConfig(key["event"], d=key["d"], eps_grid=(key["eps"],) if key["eps"] else (0.1,),
                            k_motions=(key["k_motions"] or 1,), n_trials=1,
                            master_seed=key["master_seed"], grid_spacing=key.get("grid_spacing"),
                            centers=key.get("centers"), dt=DtPolicy(*dt) if dt else None,
                            alpha=key.get("alpha", 0.05), r=key.get("r", 1.0), R=key.get("R", 23.0))


def replay_bundle(line: str) -> dict:
    """Re-run the trial behind a bundle and compare it with the record.

    Returns a dict with ``reproduced`` (digest and verdicts identical) and
    the fresh trial summary.
    """
    rec = parse_bundle_line(line)
    key = rec.get("replay")
    if not key:
        raise ValueError("bundle carries no replay key")
    cfg = _config_from_replay(key)
    o = run_one_trial(cfg, key["k_motions"], key["eps"], key["trial"])
    same = o.digest == rec.get("digest")
    if rec.get("kind") == "trial":
        same = same and bool(o.success) == rec["success"] and list(o.violations) == rec["violations"]
    elif "violations" in rec:
        fresh = [json.loads(b) for b in o.bundles]
        same = same and any(b.get("violations") == rec["violations"] for b in fresh)
    return {"reproduced": bool(same), "kind": rec.get("kind"), "trial": key["trial"],
            "digest": o.digest, "summary": o.summary}
