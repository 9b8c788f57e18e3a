import math

import numpy as np
import pytest
from scipy import integrate, special, stats

from vacantlab.brownian import (ESCAPED, EXIT, HIT, MAXSTEPS, OUTWARD, TIMEOUT, DtPolicy, Exterior,
                                PathSample, Sphere, StopRule, conditioned_drift, escape_prob,
                                green_function, hit_prob_annulus, poisson_kernel_density,
                                run_outcomes, sample_bridge, sample_bridge_duration,
                                sample_entrance_point, sample_entrance_points,
                                simulate_conditioned_escape, simulate_path_segment)
from vacantlab.geometry import GeometryError
from vacantlab.rng import Stream


# closed forms

def test_hit_prob_annulus_value():
    assert hit_prob_annulus((2.0, 0, 0), 1.0, 4.0) == pytest.approx(2 / 3, rel=1e-14)


def test_hit_prob_annulus_boundary_limits():
    assert hit_prob_annulus((1 + 1e-9, 0, 0), 1.0, 4.0) == pytest.approx(0.0, abs=1e-8)
    assert hit_prob_annulus((4 - 1e-9, 0, 0), 1.0, 4.0) == pytest.approx(1.0, abs=1e-8)


def test_hit_prob_annulus_infinite_outer_radius_is_escape():
    x = (2.0, 0, 0, 0)
    assert hit_prob_annulus(x, 1.0, 1e12) == pytest.approx(escape_prob(x, 1.0), rel=1e-12)
    assert hit_prob_annulus(x, 1.0, math.inf) == pytest.approx(escape_prob(x, 1.0), rel=1e-15)


def test_hit_prob_annulus_rejects_outside_points():
    with pytest.raises(GeometryError):
        hit_prob_annulus((0.5, 0, 0), 1.0, 4.0)
    with pytest.raises(GeometryError):
        hit_prob_annulus((5.0, 0, 0), 1.0, 4.0)


@pytest.mark.parametrize("x, want", [((2.0, 0, 0), 0.5), ((1.0, 0, 0), 0.0), ((2.0, 0, 0, 0, 0), 7 / 8)])
def test_escape_prob_values(x, want):
    assert escape_prob(x, 1.0) == pytest.approx(want, abs=1e-15)


def test_escape_prob_inside_rejected():
    with pytest.raises(GeometryError):
        escape_prob((0.5, 0, 0), 1.0)


def test_poisson_kernel_values():
    assert poisson_kernel_density((2, 0, 0), 1.0, (1, 0, 0)) == pytest.approx(3 / (4 * math.pi))
    assert poisson_kernel_density((2, 0, 0), 1.0, (-1, 0, 0)) == pytest.approx(1 / (36 * math.pi))
    with pytest.raises(GeometryError):
        poisson_kernel_density((2, 0, 0), 1.0, (0.5, 0, 0))


def _kernel_mass(x_norm, r, d=3):
    # the density depends on the polar angle only; integrate in d = 3
    assert d == 3

    def f(t):
        y = (r * math.cos(t), r * math.sin(t), 0.0)
        return poisson_kernel_density((x_norm, 0, 0), r, y) * 2 * math.pi * r * r * math.sin(t)
    return integrate.quad(f, 0, math.pi, epsabs=1e-12, epsrel=1e-12, limit=200)[0]


def test_poisson_kernel_integrates_to_hit_probability():
    assert _kernel_mass(2.0, 1.0) == pytest.approx(1 - escape_prob((2.0, 0, 0), 1.0), abs=1e-6)
    assert _kernel_mass(5.0, 2.0) == pytest.approx(1 - escape_prob((5.0, 0, 0), 2.0), abs=1e-6)
    assert _kernel_mass(0.4, 1.0) == pytest.approx(1.0, abs=1e-6)


def test_green_function_values():
    assert green_function((0, 0, 0), (1, 0, 0)) == pytest.approx(1 / (2 * math.pi))
    assert green_function((0, 0, 0), (2, 0, 0)) == pytest.approx(1 / (4 * math.pi))
    x, y, lam = np.array([0.3, -1, 2]), np.array([1.0, 1, 1]), 2.5
    assert green_function(lam * x, lam * y) == pytest.approx(lam ** -1 * green_function(x, y))
    with pytest.raises(GeometryError):
        green_function((1, 1, 1), (1, 1, 1))


def test_green_function_matches_heat_kernel_quadrature():
    for d, D in ((3, 1.0), (3, 2.0), (4, 1.3), (5, 0.7)):
        def p(t):
            return (2 * math.pi * t) ** (-d / 2) * math.exp(-D * D / (2 * t))
        val = integrate.quad(p, 0, math.inf, epsabs=1e-13, epsrel=1e-10, limit=400)[0]
        x = np.zeros(d)
        y = np.zeros(d)
        y[0] = D
        assert green_function(x, y) == pytest.approx(val, abs=1e-6)


# entrance points

def _cos_bin_probs(x_norm, r, edges):
    # P[cos(angle) in bin] for the normalised exterior kernel in d = 3
    def dens(c):
        return (x_norm * x_norm - r * r) * r / (2 * (x_norm * x_norm + r * r - 2 * x_norm * r * c) ** 1.5)
    probs = np.array([integrate.quad(dens, a, b, epsabs=1e-13)[0] for a, b in zip(edges[:-1], edges[1:])])
    return probs / (r / x_norm)


def test_entrance_point_chi_square():
    n = 10 ** 6
    x = np.array([0.0, 2.0, 0.0])
    pts = sample_entrance_points(Stream(21), x, 1.0, n)
    assert np.allclose(np.linalg.norm(pts, axis=1), 1.0, atol=1e-12)
    c = pts @ (x / 2.0)
    edges = np.linspace(-1, 1, 41)
    probs = _cos_bin_probs(2.0, 1.0, edges)
    assert probs.sum() == pytest.approx(1.0, abs=1e-9)
    obs = np.histogram(c, edges)[0]
    assert stats.chisquare(obs, probs * n).pvalue > 0.001


def test_entrance_point_far_field_is_uniform():
    n = 10 ** 6
    pts = sample_entrance_points(Stream(22), (1e4, 0, 0), 1.0, n)
    edges = np.linspace(-1, 1, 21)
    freq = np.histogram(pts[:, 0], edges)[0] / n
    tv = 0.5 * np.abs(freq - 1 / 20).sum()
    assert tv < 0.01


def test_entrance_point_azimuthal_symmetry():
    n = 200_000
    pts = sample_entrance_points(Stream(23), (0, 0, 3.0), 1.0, n)
    for j in (0, 1):
        se = pts[:, j].std() / math.sqrt(n)
        assert abs(pts[:, j].mean()) <= 3 * se


def test_entrance_point_single_and_errors():
    y = sample_entrance_point(Stream(1), (3.0, 0, 0), 1.5)
    assert np.linalg.norm(y) == pytest.approx(1.5, abs=1e-12)
    with pytest.raises(GeometryError):
        sample_entrance_point(Stream(1), (1.0, 0, 0), 1.5)


# bridge durations

def test_bridge_duration_median():
    t = sample_bridge_duration(Stream(31), (0, 0, 0), (1, 0, 0), size=10 ** 6)
    z = stats.norm.ppf(0.75)
    assert np.median(t) == pytest.approx(1 / z ** 2, rel=0.02)


def _duration_cdf_quadrature(T, D, d=3):
    g = math.gamma(d / 2 - 1) / (2 * math.pi ** (d / 2)) * D ** (2 - d)
    p = lambda t: (2 * math.pi * t) ** (-d / 2) * math.exp(-D * D / (2 * t))
    return integrate.quad(p, 0, T, epsabs=1e-14, limit=200)[0] / g


def test_bridge_duration_cdf_ks():
    D = 1.0
    cdf = lambda t: special.erfc(D / np.sqrt(2 * t))
    # the closed form is the quadrature oracle
    for T in (0.1, 0.5, 1.0, 3.0, 20.0):
        assert cdf(T) == pytest.approx(_duration_cdf_quadrature(T, D), abs=1e-8)
    t = sample_bridge_duration(Stream(32), (0, 0, 0), (D, 0, 0), size=10 ** 6)
    assert stats.kstest(t, cdf).statistic < 0.002


def test_bridge_duration_higher_dimension():
    # d = 5: density p_t / G gives D^2/(2t) ~ Gamma(3/2)
    t = sample_bridge_duration(Stream(33), np.zeros(5), np.r_[1.3, np.zeros(4)], size=200_000)
    u = 1.3 ** 2 / (2 * t)
    assert stats.kstest(u, stats.gamma(1.5).cdf).pvalue > 0.001


def test_bridge_duration_diffusive_scaling():
    a = sample_bridge_duration(Stream(34), (0, 0, 0), (1, 0, 0), size=200_000)
    b = sample_bridge_duration(Stream(35), (0, 0, 0), (2, 0, 0), size=200_000)
    for q in (0.25, 0.5, 0.75):
        assert np.quantile(b, q) / np.quantile(a, q) == pytest.approx(4.0, rel=0.03)


# bridges

def test_bridge_endpoints_exact():
    x, y = np.array([0.1, 0.2, 0.3]), np.array([1.7, -0.4, 2.2])
    p = sample_bridge(Stream(41), x, y, 0.7, DtPolicy(1e-3, 1e-6))
    assert np.array_equal(p.positions[0], x)
    assert np.array_equal(p.positions[-1], y)
    assert p.times[-1] == 0.7
    assert np.all(np.diff(p.times) > 0)


def test_bridge_midpoint_marginal():
    n, t = 100_000, 2.0
    x, y = np.array([0.0, 0.0, 0.0]), np.array([1.0, 2.0, -1.0])
    pol = DtPolicy(t / 2, t / 2)
    mids = np.empty((n, 3))
    for i in range(n):
        p = sample_bridge(Stream(42, i), x, y, t, pol)
        assert p.times[1] == pytest.approx(t / 2)
        mids[i] = p.positions[1]
    se_mean = math.sqrt(t / 4 / n)
    assert np.all(np.abs(mids.mean(axis=0) - (x + y) / 2) <= 3 * se_mean)
    var = mids.var(axis=0, ddof=1)
    se_var = (t / 4) * math.sqrt(2 / (n - 1))
    assert np.all(np.abs(var - t / 4) <= 3 * se_var)


def test_short_bridge_stays_close():
    t = 1e-4
    x = np.array([0.5, 0.5, 0.5])
    inside = 0
    for i in range(1000):
        p = sample_bridge(Stream(43, i), x, x, t, DtPolicy(t / 50, t / 50))
        inside += np.max(np.linalg.norm(p.positions - x, axis=1)) <= 5 * math.sqrt(t)
    assert inside / 1000 > 0.99


def test_bridge_time_reversal():
    x, y, t = np.zeros(3), np.array([1.0, 0, 0]), 1.0
    pol = DtPolicy(t / 4, t / 4)

    def quarter(a, b, seed):
        out = np.empty(20_000)
        for i in range(out.size):
            p = sample_bridge(Stream(seed, i), a, b, t, pol)
            out[i] = np.linalg.norm(p.positions[1] - a)   # distance from start at t/4
        return out
    fwd = quarter(x, y, 44)
    # distance from x at time 3t/4 of the reversed bridge
    rev = np.empty(20_000)
    for i in range(rev.size):
        p = sample_bridge(Stream(45, i), y, x, t, pol)
        rev[i] = np.linalg.norm(p.positions[3] - x)
    assert stats.ks_2samp(fwd, rev).pvalue > 0.001


# path simulation

def test_annulus_ordering_frequency():
    n = 200_000
    outc, _ = run_outcomes(5, n, (2.0, 0, 0), DtPolicy(0.05, 1e-6), (Sphere(1.0), Sphere(4.0)),
                           StopRule(hit=(0,), exit=(1,)))
    p = np.mean(outc == EXIT)
    se = math.sqrt(2 / 3 * 1 / 3 / n)
    assert abs(p - 2 / 3) <= 3 * se


def test_exterior_return_law():
    # from |x| = 1.5 the walk reaches B(1) with probability 2/3 (d = 3)
    n = 200_000
    outc, _ = run_outcomes(6, n, (1.5, 0, 0), DtPolicy(0.05, 1e-6),
                           (Sphere(1.0), Sphere(1.5, resolve=False)), StopRule(hit=(0,)), Exterior(3.0, 1.5))
    p = np.mean(outc == HIT)
    assert set(np.unique(outc)) <= {HIT, ESCAPED}
    assert abs(p - 2 / 3) <= 3 * math.sqrt(2 / 9 / n)


def test_start_on_target_stops_at_once():
    p = simulate_path_segment(Stream(1), (1.0, 0, 0), DtPolicy(), (Sphere(1.0),), StopRule(hit=(0,)))
    assert p.outcome == HIT
    assert p.n == 1
    p = simulate_path_segment(Stream(1), (4.0, 0, 0), DtPolicy(), (Sphere(4.0),), StopRule(exit=(0,)))
    assert p.outcome == EXIT


def test_timeout_and_step_cap_are_flagged():
    p = simulate_path_segment(Stream(2), (0.0, 0, 0), DtPolicy(1e-3, 1e-6), (Sphere(10.0),),
                              StopRule(exit=(0,), max_time=0.05))
    assert p.outcome == TIMEOUT
    assert p.times[-1] == pytest.approx(0.05)
    p = simulate_path_segment(Stream(2), (0.0, 0, 0), DtPolicy(1e-3, 1e-6), (Sphere(10.0),),
                              StopRule(exit=(0,)), max_steps=10)
    assert p.outcome == MAXSTEPS


def test_path_sample_invariants():
    pol = DtPolicy(1e-2, 1e-7)
    p = simulate_path_segment(Stream(3), (1.5, 0, 0), pol, (Sphere(1.0), Sphere(2.0)),
                              StopRule(exit=(1,)))
    assert p.outcome == EXIT
    assert np.all(np.diff(p.times) > 0)
    assert np.all(np.diff(p.crossings["time"]) >= 0)
    # crossing points sit on their spheres
    for j in range(len(p.crossings)):
        k = p.crossings["sphere"][j]
        assert np.linalg.norm(p.crossing_points[j]) == pytest.approx(p.radii[k], abs=1e-9)
    # increments are consistent with the step cap (generous Gaussian bound)
    inc = np.linalg.norm(np.diff(p.positions, axis=0), axis=1)
    assert np.all(inc <= 8 * math.sqrt(pol.base_dt))


def test_from_positions_annotates_crossings():
    pos = np.array([[0.5, 0, 0], [1.5, 0, 0], [0.5, 0, 0]])
    p = PathSample.from_positions(pos, spheres=(1.0,))
    assert len(p.crossings) == 2
    assert p.crossings["direction"][0] == OUTWARD
    assert np.allclose(p.crossing_points, [[1, 0, 0], [1, 0, 0]])


def test_dt_policy():
    pol = DtPolicy(1e-2, 1e-6, 5.0)
    assert pol.dt(10.0) == 1e-2
    assert pol.dt(0.0) == 1e-6
    assert pol.dt(0.05) == pytest.approx(1e-4)
    with pytest.raises(ValueError):
        DtPolicy(1e-3, 1e-2)


# conditioned escape

def test_conditioned_drift_value():
    v = conditioned_drift((2.0, 0, 0), 1.0)
    assert np.linalg.norm(v) == pytest.approx(0.5)
    assert v[0] > 0


def test_conditioned_escape_never_enters_ball():
    for i in range(300):
        p = simulate_conditioned_escape(Stream(51, i), (1.0, 0, 0), 1.0, DtPolicy(1e-3, 1e-9), 3.0)
        assert p.outcome == EXIT
        assert np.all(np.linalg.norm(p.positions, axis=1) > 1.0)
        assert np.linalg.norm(p.end) == pytest.approx(3.0, abs=1e-9)


def test_conditioned_escape_inside_rejected():
    with pytest.raises(GeometryError):
        simulate_conditioned_escape(Stream(1), (0.5, 0, 0), 1.0)


def _annulus_exit_density(rho, r, R, c, lmax=200):
    # harmonic measure of the outer sphere for the annulus r < |x| < R, d = 3,
    # against the normalised surface measure; Legendre series
    out = np.zeros_like(c)
    for l in range(lmax):
        g = (rho ** l - r ** (2 * l + 1) * rho ** (-l - 1)) / (R ** l - r ** (2 * l + 1) * R ** (-l - 1))
        out += (2 * l + 1) * g * special.eval_legendre(l, c)
        if abs(g) < 1e-16:
            break
    return out


def test_conditioned_escape_exit_law():
    # h is constant on the outer sphere, so the exit law is the annulus
    # harmonic measure normalised to one
    n, K, rho, R = 20_000, 1.0, 1.5, 2.0
    cos = np.empty(n)
    for i in range(n):
        p = simulate_conditioned_escape(Stream(52, i), (rho, 0, 0), K, DtPolicy(1e-3, 1e-8), R)
        cos[i] = p.end[0] / np.linalg.norm(p.end)
    edges = np.linspace(-1, 1, 21)
    probs = np.array([integrate.quad(lambda c: _annulus_exit_density(rho, K, R, np.array([c]))[0] / 2, a, b)[0]
                      for a, b in zip(edges[:-1], edges[1:])])
    probs /= probs.sum()
    obs = np.histogram(cos, edges)[0]
    assert stats.chisquare(obs, probs * n).pvalue > 0.001
