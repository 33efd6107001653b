"""Command line: run, sweep, validate and report scenarios."""

from __future__ import annotations

import argparse
import csv
import sys
from collections import Counter
from pathlib import Path

from . import scenario as scn
from .runner import (EXIT_CONFIG, EXIT_OK, aggregate_rows, output_dir, run_scenario, run_sweep,
                     write_outputs)
from .topology import TopologyError


def _load(args) -> scn.Scenario:
    s = scn.load(args.scenario)
    if args.set:
        s = scn.apply_overrides(s, args.set)
    return s


def cmd_run(args) -> int:
    s = _load(args)
    res = run_scenario(s)
    paths = write_outputs(res, output_dir(s, args.out))
    agg = res.report.aggregate
    print(f"{s.name} protocol={s.protocol} seed={s.seed} digest={res.digest}")
    print(f"mean neighbor error {agg.mean_error_us:.3f} us, mean power {agg.mean_power_mW:.3f} mW, "
          f"radio on {agg.radio_on_fraction:.3f}")
    if res.clustering_done_st is not None:
        print(f"clustering completed after {res.clustering_done_st:.2f} ST")
    for p in res.problems:
        print(f"problem: {p}", file=sys.stderr)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return res.exit_status


SWEEP_COLUMNS = ["seed", "protocol", "topology", "mean_error_us", "sd_error_us", "mean_power_mW",
                 "radio_on_fraction", "exit_status", "valid", "clustering_done_st", "digest"]


def cmd_sweep(args) -> int:
    s = _load(args)
    seeds = list(range(s.seed, s.seed + args.seeds))
    rows = run_sweep(s, seeds, args.parallel)
    rows.append(aggregate_rows(rows))
    out = output_dir(s, args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{s.name}_{s.protocol}_sweep.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, SWEEP_COLUMNS, extrasaction="ignore", lineterminator="\r\n")
        w.writeheader()
        w.writerows(rows)
    agg = rows[-1]
    print(f"{len(seeds)} runs; mean error {agg['mean_error_us']:.3f} us, "
          f"mean power {agg['mean_power_mW']:.3f} mW")
    print(f"sweep: {path}")
    return max(r["exit_status"] for r in rows[:-1]) if seeds else EXIT_OK


def cmd_validate(args) -> int:
    s = _load(args)
    from .runner import build_topology
    topo = build_topology(s)
    if not topo.is_connected():
        print(f"warning: topology of {s.name} is not connected", file=sys.stderr)
    print(f"ok: {s.name} ({s.protocol}, {len(topo.nodes)} nodes, {s.duration_us / 1e6:g} s)")
    return EXIT_OK


def cmd_report(args) -> int:
    text = Path(args.trace).read_text(encoding="utf-8")
    rows = list(csv.reader(text.splitlines()))
    if not rows or rows[0] != ["t_us", "node", "event_kind", "detail"]:
        print(f"{args.trace}: not a trace file", file=sys.stderr)
        return EXIT_CONFIG
    kinds = Counter(r[2] for r in rows[1:])
    import hashlib
    print(f"trace {args.trace}: {len(rows) - 1} records, sha256 {hashlib.sha256(text.encode()).hexdigest()}")
    for k, n in sorted(kinds.items()):
        print(f"  {k}: {n}")
    roles = {}
    for r in rows[1:]:
        if r[2] == "clustered":
            roles[r[1]] = r[3]
    if roles:
        print("node,role,ch,slot,lc")
        for node in sorted(roles, key=int):
            print(f"{node},{roles[node]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csync", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("scenario", help="scenario file (.scn)")
        sp.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="override a config field, e.g. protocol_config.max_slots=12")
        sp.add_argument("--out", help="output directory (else $CSYNC_OUT_DIR, else output.dir)")

    r = sub.add_parser("run", help="run one scenario")
    common(r)
    r.set_defaults(func=cmd_run)
    sw = sub.add_parser("sweep", help="run a scenario over consecutive seeds")
    common(sw)
    sw.add_argument("--seeds", type=int, default=10)
    sw.add_argument("--parallel", type=int, default=1)
    sw.set_defaults(func=cmd_sweep)
    v = sub.add_parser("validate", help="check a scenario file")
    common(v)
    v.set_defaults(func=cmd_validate)
    rp = sub.add_parser("report", help="summarize a trace file")
    rp.add_argument("trace")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (scn.ConfigError, TopologyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
