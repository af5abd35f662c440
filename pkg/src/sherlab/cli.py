"""Command line entry point: ``sherlab train|toybench|aggregate|plot``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import harness, toybench

log = logging.getLogger("sherlab")


def _parse_seeds(text: str) -> list:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def _parse_range(text: str) -> list:
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from exc
    if hi < lo:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return list(range(lo, hi + 1))


def _cmd_train(args) -> int:
    config = harness.load_config(args.config)
    d = config.to_dict()
    if args.mode:
        d["mode"] = args.mode
    if args.seeds:
        d["seeds"] = args.seeds
    if args.out:
        d["output_dir"] = args.out
    if args.workers:
        d["workers"] = args.workers
    config = harness.ExperimentConfig.from_dict(d)
    logs = harness.run_experiment(config)
    for seed, lg in zip(config.seeds, logs):
        last = lg.rows[-1]
        print(f"seed {seed}: {len(lg.rows)} cycles, task {last['task_index']}, "
              f"success {last['success_rate']:.3f}, nonneg {last['nonneg_reward_cum']}, "
              f"complete {lg.complete}")
    return 0


def _cmd_toybench(args) -> int:
    out = Path(args.out) if args.out else harness.default_output_root() / "toybench"
    out.mkdir(parents=True, exist_ok=True)
    report = {"p": args.p, "runs": args.runs, "seed": args.seed, "fits": {}}
    with open(out / "toybench.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("agent_kind", "n", "p", "run", "episodes"))
        for kind in ("random", "her"):
            result = toybench.sweep(kind, args.n_range, args.p, args.runs, args.seed)
            for n in args.n_range:
                for r, e in enumerate(result["samples"][n]):
                    w.writerow((kind, n, args.p, r, int(e)))
            report["fits"][kind] = {"ns": args.n_range, "means": result["means"], **result["fit"]}
        if args.sequential:
            mdp = toybench.ChainMDP.sequential(args.sequential, args.p)
            label = "+".join(str(x) for x in args.sequential)
            report["sequential"] = {"subtasks": list(args.sequential)}
            for kind in ("sher", "her_target_only"):
                samples = toybench.simulate(mdp, kind, args.runs, args.seed)
                for r, e in enumerate(samples):
                    w.writerow((kind, label, args.p, r, int(e)))
                report["sequential"][kind] = float(samples.mean())
    (out / "fit_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    for kind, fit in report["fits"].items():
        print(f"{kind}: {fit['classification']} means={[round(m, 2) for m in fit['means']]}")
    print(f"wrote {out / 'toybench.csv'}")
    return 0


def _cmd_aggregate(args) -> int:
    logs = harness.read_aggregate_dir(args.dir)
    agg = harness.aggregate_runs(logs)
    text = harness.aggregate_csv(agg, window=args.smooth or None)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_plot(args) -> int:
    d = Path(args.dir)
    agg = harness.aggregate_runs(harness.read_aggregate_dir(d))
    x = agg["samples"] if args.x == "samples" else agg["cycle"]
    for name in harness.AGGREGATE_METRICS:
        curves = {q: harness.smooth(agg[name][q], args.smooth) for q in ("median", "p33", "p67")}
        svg = harness.render_svg(x, curves["median"], curves["p33"], curves["p67"], name)
        path = d / f"{name}.svg"
        path.write_text(svg)
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sherlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--mode", choices=harness.MODES)
    t.add_argument("--seeds", type=_parse_seeds)
    t.add_argument("--out", help="output directory (overrides the config)")
    t.add_argument("--workers", type=int)
    t.set_defaults(func=_cmd_train)

    b = sub.add_parser("toybench", help="Monte Carlo episodes-to-success sweep")
    b.add_argument("--n-range", type=_parse_range, default=_parse_range("3:8"))
    b.add_argument("--p", type=float, default=0.5)
    b.add_argument("--runs", type=int, default=10_000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--sequential", type=_parse_seeds, help="subtask lengths, e.g. 3,3")
    b.add_argument("--out")
    b.set_defaults(func=_cmd_toybench)

    a = sub.add_parser("aggregate", help="percentile curves over seed_*.csv")
    a.add_argument("--dir", required=True)
    a.add_argument("--smooth", type=int, default=0, help="moving-average window (0 = raw)")
    a.add_argument("--out")
    a.set_defaults(func=_cmd_aggregate)

    g = sub.add_parser("plot", help="render SVG charts from seed_*.csv")
    g.add_argument("--dir", required=True)
    g.add_argument("--smooth", type=int, default=10)
    g.add_argument("--x", choices=("cycles", "samples"), default="cycles")
    g.set_defaults(func=_cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"sherlab: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
