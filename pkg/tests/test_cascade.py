import math

import numpy as np
import pytest

from vacantlab.brownian import INWARD, OUTWARD, RETURN, DtPolicy, Exterior, PathSample, Sphere, StopRule, \
    simulate_path_segment
from vacantlab.cascade import (INFINITE, _piece_marks, compute_tau, detect_event_G, dyadic_set,
                               extract_r_excursions, gamma_of, run_cascade, verify_cascade_lemmas)
from vacantlab.geometry import uniform_sphere_point
from vacantlab.rng import Stream


def _radii(eps):
    return [1.0 - eps, 1.0] + [1.0 + r for r in dyadic_set(eps)]


def _unit(theta, phi=0.0):
    return np.array([math.cos(theta), math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi)])


def _visits(eps, dirs):
    """A path from dirs[0] that leaves B(1.1), moves around outside and
    dips back through the unit sphere along each later direction."""
    pts = [dirs[0], 1.1 * dirs[0]]
    for u in dirs[1:]:
        pts += [1.1 * u, 0.9 * u, 1.1 * u]
    return PathSample.from_positions(np.array(pts), spheres=_radii(eps))


# constants

def test_gamma_and_dyadic_set():
    assert gamma_of(math.e ** -2) == pytest.approx(5.0)
    assert dyadic_set(0.1) == [1.0, 0.5, 0.25, 0.125]
    assert dyadic_set(0.125) == [1.0, 0.5, 0.25, 0.125]
    assert dyadic_set(0.9) == [1.0]
    with pytest.raises(ValueError):
        dyadic_set(1.0)


def test_first_level_radius_example():
    eps = math.exp(-6)
    y = math.sqrt(0.75)
    paths = [PathSample.from_positions(np.array([[0.5, s * y, 0.0]]), spheres=_radii(eps)) for s in (1, -1)]
    st = run_cascade(paths, eps)
    assert st.levels[0].dist == pytest.approx(0.5)
    assert st.levels[1].r == 2.0 ** -7
    # the stubs never leave: the ranges repeat from level 1 on
    assert st.L == INFINITE and st.loop


# excursions

def test_sawtooth_gives_three_excursions():
    x = np.array([[1.0, 0, 0], [1.3, 0, 0], [0.9, 0, 0], [1.3, 0, 0], [0.9, 0, 0], [1.3, 0, 0]])
    p = PathSample.from_positions(x, spheres=(1.0, 1.25))
    ex = extract_r_excursions(p, 0.25)
    assert len(ex) == 3
    assert all(e.complete for e in ex)
    assert ex[0].start_time == 0.0
    assert ex[0].radius == pytest.approx(0.25)
    assert [e.end_time for e in ex] == pytest.approx([0.25 / 0.3, 2 + 0.35 / 0.4, 4 + 0.35 / 0.4])
    assert ex[1].start_time == pytest.approx(1 + 0.3 / 0.4)
    np.testing.assert_allclose(ex[1].start_point, [1.0, 0, 0])


def test_single_exit_and_no_exit():
    p = PathSample.from_positions(np.array([[1.0, 0, 0], [1.5, 0, 0]]), spheres=(1.0, 1.25))
    ex = extract_r_excursions(p, 0.25)
    assert len(ex) == 1 and ex[0].complete
    q = PathSample.from_positions(np.array([[1.0, 0, 0], [1.1, 0, 0], [0.5, 0, 0]]), spheres=(1.0, 1.25))
    ex = extract_r_excursions(q, 0.25)
    assert len(ex) == 1 and not ex[0].complete
    assert ex[0].end_time == math.inf
    assert ex[0].radius == pytest.approx(0.5)


def test_unannotated_sphere_raises():
    p = PathSample.from_positions(np.array([[1.0, 0, 0], [1.5, 0, 0]]), spheres=(1.0,))
    with pytest.raises(ValueError):
        extract_r_excursions(p, 0.25)


def _naive_marks(sph, direc, k_in, k_out):
    out, inside = [], True
    for j, (s, dr) in enumerate(zip(sph, direc)):
        if inside and s == k_out and dr == OUTWARD:
            out.append(j)
            inside = False
        elif not inside and s == k_in and dr in (INWARD, RETURN):
            out.append(j)
            inside = True
    return out


def test_piece_marks_match_naive_loop():
    rng = np.random.default_rng(2)
    for _ in range(300):
        n = int(rng.integers(0, 60))
        sph = rng.integers(0, 3, size=n).astype(np.int64)
        direc = rng.choice([INWARD, OUTWARD, RETURN], size=n).astype(np.int64)
        got = list(_piece_marks(sph, direc, 0, 2))
        assert got == _naive_marks(sph, direc, 0, 2)


def _mc_path(i, eps=0.1):
    R = dyadic_set(eps)
    rho = 1.0 + max(R)
    st = Stream(31, i)
    x = uniform_sphere_point(st, np.zeros(3), 1.0)
    spheres = tuple(Sphere(r, resolve=r <= 1.0) for r in _radii(eps))
    return simulate_path_segment(st, x, DtPolicy(1e-2, 1e-6, 5.0), spheres, StopRule(), Exterior(2 * rho, rho),
                                 bridge_correction=False, max_steps=2_000_000)


def test_excursion_starts_are_nested_on_simulated_paths():
    eps = 0.1
    R = dyadic_set(eps)
    for i in range(12):
        p = _mc_path(i, eps)
        starts = {r: [e.start_time for e in extract_r_excursions(p, r)] for r in R}
        for big, small in zip(R, R[1:]):
            assert set(starts[big]) <= set(starts[small])
        for r in R:
            ex = extract_r_excursions(p, r)
            assert all(e.complete for e in ex[:-1])
            assert all(a.end_time <= b.start_time for a, b in zip(ex, ex[1:]))


# event G

def test_event_G_examples():
    eps = 0.1
    straight = PathSample.from_positions(np.array([[1.0, 0, 0], [2.2, 0, 0]]), spheres=_radii(eps))
    ok, border, worst = detect_event_G(straight, eps, detail=True)
    assert ok and not border
    # each r-excursion has radius exactly r
    assert worst == pytest.approx(1.0 / math.log(eps) ** 2)
    # a wander of chord ~1.48 at radius 1.05 stays inside B(1.125), beyond 2 (log eps)^2 / 8 ~ 1.33
    arc = [np.array([1.0, 0, 0])] + [1.05 * _unit(t) for t in np.linspace(0, math.pi / 2, 40)]
    arc.append(2.2 * _unit(math.pi / 2))
    wander = PathSample.from_positions(np.array(arc), spheres=_radii(eps))
    ok, _, worst = detect_event_G(wander, eps, detail=True)
    assert not ok and worst > 1.0


# the cascade

def test_single_motion_stops_at_step_zero_when_out_of_regime():
    for eps in (0.2, 0.1):
        assert 2 * gamma_of(eps) * eps > 1
        st = run_cascade(PathSample.from_positions(np.array([[1.0, 0, 0]]), spheres=_radii(eps)), eps)
        assert st.L == 0 and st.out_of_regime
        assert st.tau == INFINITE
        rep = verify_cascade_lemmas(st, False, False)
        assert rep.ok and rep.out_of_regime


def test_tau_trigger_near_point():
    eps = 0.02
    p = _visits(eps, [_unit(0.0), _unit(0.01)])
    st = run_cascade(p, eps)
    assert st.levels[1].r == 1 / 32
    assert st.counts()[:2] == [1, 2]
    assert st.L == INFINITE
    assert compute_tau(st) == (2, 1)
    assert st.tau_index == (1, 1, 1)


def test_tau_trigger_full_hull():
    # four spread points span R^3, so the hull reaches the origin at index d + 1
    eps = 0.02
    dirs = [_unit(0.0), _unit(0.3), _unit(0.3, math.pi / 2), _unit(0.3, math.pi)]
    st = run_cascade(_visits(eps, dirs), eps)
    assert st.L == 1
    assert st.counts() == [1, 4]
    assert st.tau == 4 and st.tau_trigger == 2
    assert st.tau_index == (1, 1, 3)
    assert verify_cascade_lemmas(st, True, True).ok


def test_lexicographic_order_over_motions():
    eps = 0.02
    a = _visits(eps, [_unit(0.0), _unit(0.3)])
    b = _visits(eps, [_unit(0.3, math.pi / 2), _unit(0.3, math.pi)])
    st = run_cascade([a, b], eps)
    order = []
    for lv in st.levels:
        for k in sorted({s[0] for s in lv.new}):
            times = sorted(t for kk, t, _ in lv.new if kk == k)
            order += [(lv.level, k + 1, i) for i in range(1, len(times) + 1)]
    assert len(order) == len(set(order))
    assert order[:4] == [(0, 1, 1), (0, 2, 1), (1, 1, 1), (1, 2, 1)]
    assert st.tau == order.index(st.tau_index) + 1


def test_verify_flags_forged_states():
    eps = 0.02
    dirs = [_unit(0.0), _unit(0.3), _unit(0.3, math.pi / 2), _unit(0.3, math.pi)]
    st = run_cascade(_visits(eps, dirs), eps)
    st.L = 5
    rep = verify_cascade_lemmas(st, True, True)
    assert not rep.ok and any("> d" in v for v in rep.violations)
    assert len(rep.bundles) == 1
    st.levels[1].count = 1
    rep = verify_cascade_lemmas(st, False, False, borderline=True)
    assert rep.ok and rep.borderline and rep.bundles


def test_e_and_g_force_finite_stop_on_simulated_paths():
    eps = 0.05
    for i in range(6):
        p = _mc_path(100 + i, eps)
        st = run_cascade(p, eps)
        assert "nesting" not in " ".join(st.notes)
        rep = verify_cascade_lemmas(st, False, detect_event_G(p, eps))
        assert rep.ok
