"""Time the hot kernels with numba and with the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--scale 1.0]

Each mode runs in its own interpreter because ``VACANTLAB_DISABLE_NUMBA``
is read at import.  Numba timings exclude compilation (one warm-up call).
The last column says whether both modes returned the same result.
"""
import argparse
import json
import os
import subprocess
import sys
import time


def _workloads(scale):
    import numpy as np

    from vacantlab.experiments import ExperimentConfig, _ef_chunk
    from vacantlab.geometry import dist_origin_to_convex_hull, uniform_sphere_points
    from vacantlab.interlacements import probe_vacancy_batch
    from vacantlab.rng import Stream
    from vacantlab.sausage import SausageSet, count_vacant_components

    n_ef = max(1, int(200 * scale))
    cfg = ExperimentConfig("e-and-f", eps_grid=(0.3,), n_trials=n_ef, master_seed=1)

    def ef(n):
        ok, _ = _ef_chunk(cfg, 1, 0.3, 0, n)
        return int(ok.sum())

    clouds = [uniform_sphere_points(Stream(2, i), 200, 3, radius=1.2) + 0.9 for i in range(max(1, int(50 * scale)))]

    def hull(n):
        return round(sum(dist_origin_to_convex_hull(c) for c in clouds[:n]), 9)

    scene = SausageSet(uniform_sphere_points(Stream(3), 60, 3, radius=1.1))

    def vacancy(n):
        return [count_vacant_components((0, 0, 0), 0.2, scene, 0.02).component_count for _ in range(n)]

    n_probe = max(1, int(100 * scale))

    def probe(n):
        counts, vac = probe_vacancy_batch(np.uint64(4), np.uint64(1), np.uint64(0), n, 0.2, 3.0, 1.5, 3, True,
                                          0.01, 1e-6, 5.0, 10 ** 7)
        return [int(counts.sum()), int(vac.sum())]

    return [("e-and-f trials", ef, n_ef), ("hull distance, 200 pts", hull, len(clouds)),
            ("vacancy count, h=eps/10", vacancy, max(1, int(3 * scale))),
            ("probe vacancy (QB) samples", probe, n_probe)]


def _worker(scale):
    from vacantlab._accel import USE_NUMBA
    out = {"numba": USE_NUMBA, "rows": []}
    for name, fn, n in _workloads(scale):
        if USE_NUMBA:
            fn(1)
        t0 = time.perf_counter()
        res = fn(n)
        out["rows"].append([name, n, time.perf_counter() - t0, res])
    print(json.dumps(out))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--scale", type=float, default=1.0, help="multiply every workload size")
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        _worker(args.scale)
        return
    runs = {}
    for mode, flag in (("numba", "0"), ("python", "1")):
        env = dict(os.environ, VACANTLAB_DISABLE_NUMBA=flag)
        proc = subprocess.run([sys.executable, __file__, "--worker", "--scale", str(args.scale)],
                              env=env, capture_output=True, text=True, check=True)
        runs[mode] = json.loads(proc.stdout.strip().splitlines()[-1])
    print(f"{'kernel':30s} {'n':>6s} {'numba s':>10s} {'python s':>10s} {'speedup':>9s}  same result")
    for a, b in zip(runs["numba"]["rows"], runs["python"]["rows"]):
        name, n, ta, ra = a
        _, _, tb, rb = b
        print(f"{name:30s} {n:6d} {ta:10.4f} {tb:10.4f} {tb / max(ta, 1e-9):8.1f}x  {ra == rb}")


if __name__ == "__main__":
    main()
