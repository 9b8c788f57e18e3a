"""Command line entry point: ``vacantlab <subcommand> [flags]``.

Exit status is 0 on success, 2 on invalid flags and 1 when a campaign
finds a non-borderline violation, a closed-form check fails or a replay
does not reproduce.
"""
from __future__ import annotations

import argparse
import csv
import io
import sys

from .experiments import (CSV_COLUMNS, ExperimentConfig, csv_text, replay_bundle, run_trials,
                          trial_bundle, verify_formulas)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")


def _ints(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of integers: {text!r}")


def _centers(text: str) -> tuple:
    try:
        return tuple(tuple(float(c) for c in p.split(",")) for p in text.split(";") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"centers must look like 'x,y,z;x,y,z', got {text!r}")


def _common(p, eps_default="0.1", k_default="1", trials_default=10_000):
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--eps", type=float, default=None, help="single eps (overrides --eps-grid)")
    p.add_argument("--eps-grid", type=_floats, default=_floats(eps_default))
    p.add_argument("--k-motions", type=_ints, default=_ints(k_default))
    p.add_argument("--trials", type=int, default=trials_default)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV path")
    p.add_argument("--grid-spacing", type=float, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--bundle-out", default=None, help="write violation bundles (JSON lines) here")
    p.add_argument("--record-trials", type=int, default=0,
                   help="also write replay bundles for the first N trials of each cell")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="vacantlab", description="Monte Carlo laboratory for vacant sets of Wiener sausages.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("verify-formulas", help="hitting frequencies against closed forms")
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--trials", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("estimate", help="event probabilities over an eps grid")
    _common(p)
    p.add_argument("--event", required=True)
    p.add_argument("--centers", type=_centers, default=None, help="'x,y,z;x,y,z' (several balls)")

    p = sub.add_parser("cascade-stats", help="cascade lemma campaign")
    _common(p, eps_default="0.2,0.1", k_default="1,2,3", trials_default=100_000)

    p = sub.add_parser("implication-audit", help="nonuniqueness implies hemiball hits, campaign")
    _common(p, eps_default="0.2,0.1", k_default="1,2,3", trials_default=100_000)

    p = sub.add_parser("annulus-count", help="vacant components crossing an annulus (interlacements)")
    p.add_argument("--dim", type=int, default=3)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--r", type=float, default=1.0)
    p.add_argument("--R", type=float, default=23.0)
    p.add_argument("--grid-spacing", type=float, default=0.5)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("replay", help="re-run the trials recorded in a bundle file")
    p.add_argument("--bundle", required=True)
    return ap


def _emit(text: str, path: str | None):
    if path is None:
        return
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        print(f"vacantlab: cannot write {path}: {exc}", file=sys.stderr)
        raise SystemExit(1)


def _formulas(args) -> int:
    checks = verify_formulas(args.dim, args.trials, args.seed, args.workers)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for c in checks:
        print(f"{c.name:8s} exact={c.exact:.6f} p_hat={c.p_hat:.6f} stderr={c.stderr:.2e} "
              f"z={c.z:+.2f} {'PASS' if c.passed else 'FAIL'} ({c.seconds:.1f}s)")
        w.writerow(["", "", f"formula-suite:{c.name}", c.trials, c.successes, repr(c.p_hat), repr(c.stderr),
                    0, args.seed, 0, "", "", "", f"exact={c.exact!r}"])
    _emit(buf.getvalue(), args.out)
    ok = all(c.passed for c in checks)
    print(f"verify-formulas: {sum(c.passed for c in checks)}/{len(checks)} checks within 3 stderr")
    return 0 if ok else 1


def _config(args, event) -> ExperimentConfig:
    grid = (args.eps,) if args.eps is not None else args.eps_grid
    return ExperimentConfig(event, d=args.dim, eps_grid=grid, k_motions=args.k_motions,
                            n_trials=args.trials, master_seed=args.seed, grid_spacing=args.grid_spacing,
                            centers=getattr(args, "centers", None), out=args.out)


def _invalid(exc) -> int:
    print(f"vacantlab: error: {exc}", file=sys.stderr)
    return 2


def _run(args, event) -> int:
    try:
        cfg = _config(args, event)
    except ValueError as exc:
        return _invalid(exc)
    res = run_trials(cfg, args.workers)
    _emit(csv_text(res), args.out)
    lines = list(res.bundles)
    if args.record_trials:
        for K in cfg.k_motions:
            for e in cfg.eps_grid:
                for i in range(min(args.record_trials, cfg.n_trials)):
                    lines.append(trial_bundle(cfg, K, e, i))
    if args.bundle_out and lines:
        _emit("".join(x + "\n" for x in lines), args.bundle_out)
    for r in res.rows:
        print(f"eps={r.eps} K={r.k_motions} trials={r.trials} successes={r.successes} "
              f"p_hat={r.p_hat:.6g} stderr={r.stderr:.2g} borderline={r.borderline} violations={r.violations}")
    for s in res.slopes:
        if s.ok:
            print(f"slope K={s.k_motions}: {s.slope:.3f} +- {s.slope_stderr:.3f} over {s.n_points} points")
        else:
            print(f"slope K={s.k_motions}: insufficient-data ({s.n_points} usable points)")
    total = sum(r.trials for r in res.rows)
    frac = res.borderline / total if total else 0.0
    status = "FAIL" if res.violations else "ok"
    print(f"{cfg.event}: {len(res.rows)} cells, {total} trials, borderline fraction {frac:.4%}, "
          f"{len(res.violations)} violations, {res.seconds:.1f}s, {status}")
    return 1 if res.violations else 0


def _annulus(args) -> int:
    try:
        cfg = ExperimentConfig("annulus-count", d=args.dim, n_trials=args.trials, master_seed=args.seed,
                               grid_spacing=args.grid_spacing, alpha=args.alpha, r=args.r, R=args.R)
    except ValueError as exc:
        return _invalid(exc)
    res = run_trials(cfg, args.workers)
    _emit(csv_text(res), args.out)
    for r in res.rows:
        print(f"{r.note}: {r.p_hat:.4f} +- {r.stderr:.4f}")
    regime = args.R > args.r + 7 * (args.dim + 1)
    msg = ""
    if len(res.rows) == 2 and res.rows[0].p_hat > 0:
        change = abs(res.rows[1].p_hat - res.rows[0].p_hat) / res.rows[0].p_hat
        msg = f", relative change on doubling {change:.2%}"
    print(f"annulus-count: alpha={args.alpha} r={args.r} R={args.R} "
          f"(R > r + 7(d+1): {'yes' if regime else 'no'}){msg}, {res.seconds:.1f}s")
    return 0


def _replay(args) -> int:
    try:
        with open(args.bundle) as fh:
            lines = [x for x in fh.read().splitlines() if x.strip()]
    except OSError as exc:
        print(f"vacantlab: cannot read {args.bundle}: {exc}", file=sys.stderr)
        return 1
    bad = 0
    for line in lines:
        try:
            r = replay_bundle(line)
        except (ValueError, KeyError) as exc:
            print(f"vacantlab: unreadable bundle: {exc}", file=sys.stderr)
            return 1
        bad += not r["reproduced"]
        print(f"trial {r['trial']} ({r['kind']}): {'reproduced' if r['reproduced'] else 'MISMATCH'} "
              f"digest={r['digest']}")
    print(f"replay: {len(lines) - bad}/{len(lines)} bundles reproduced")
    return 0 if bad == 0 else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "verify-formulas":
        if args.dim < 3 or args.trials < 1:
            return _invalid("need --dim >= 3 and --trials >= 1")
        return _formulas(args)
    if args.command == "estimate":
        return _run(args, args.event)
    if args.command == "cascade-stats":
        return _run(args, "cascade-lemmas")
    if args.command == "implication-audit":
        return _run(args, "hemiball-implication")
    if args.command == "annulus-count":
        return _annulus(args)
    return _replay(args)


if __name__ == "__main__":
    sys.exit(main())
