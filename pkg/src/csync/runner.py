"""Run orchestration: build a simulation from a scenario, measure, check, report."""

from __future__ import annotations

import os
import random
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from .clock import TICK_US, HardwareClock, constant_drift
from .engine import EventKind, PowerLedger, Simulator, SimulationError, Topology, Trace
from .gtsp import GtspNode
from .metrics import (BoundParams, ErrorSample, Report, lemma1_bound, report_csv, roles_csv,
                      sample_errors, summarize, tau_slots)
from .protocol import CsyncNode, Role, State
from .resilience import FaultKind, FaultState, apply_fault, quorum
from .scenario import Scenario
from .topology import generate_topology, load_topology

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT, EXIT_ASSUMPTION = 0, 2, 3, 4
OUT_ENV = "CSYNC_OUT_DIR"


@dataclass
class RunResult:
    scenario: Scenario
    topology: Topology
    trace: Trace
    report: Report
    samples: List[ErrorSample]
    nodes: Dict[int, object]
    ledgers: Dict[int, PowerLedger]
    measure_start: Optional[float]
    exit_status: int = EXIT_OK
    problems: List[str] = field(default_factory=list)
    lemma: Dict[int, Tuple[int, float, float]] = field(default_factory=dict)  # node -> (hops, max err, bound)
    clustering_done_st: Optional[float] = None
    stats: Dict[str, int] = field(default_factory=dict)
    run_ledgers: Dict[int, PowerLedger] = field(default_factory=dict)  # whole run, not just the window

    @property
    def digest(self) -> str:
        return self.trace.digest()

    def mean_neighbor_error(self) -> float:
        return self.report.aggregate.mean_error_us

    def mean_power(self) -> float:
        return self.report.aggregate.mean_power_mW


def build_topology(s: Scenario) -> Topology:
    tc = s.topology
    if tc.kind == "file":
        return load_topology(s.topology_path())
    return generate_topology(tc.kind, tc.n, tc.seed if tc.seed is not None else 0)


def draw_clocks(topo: Topology, s: Scenario) -> Dict[int, HardwareClock]:
    """Per-node oscillator parameters; identical for both protocols under one seed."""
    rng = random.Random(f"clock:{s.seed}")
    out = {}
    for a in topo.nodes:
        ppm = rng.uniform(-s.clock.ppm_max, s.clock.ppm_max)
        dco = rng.uniform(s.clock.dco_min, s.clock.dco_max)
        out[a] = HardwareClock(crystal_ppm_error=ppm, dco_drift_fn=constant_drift(dco))
    return out


def _fault_filter(s: Scenario):
    specs = {}
    for f in s.faults:
        specs.setdefault(f.target, []).append((f.to_spec(), FaultState()))
    rng = random.Random(f"faults:{s.seed}")

    def tx_filter(addr, msg, now):
        mult = 1.0
        for spec, state in specs.get(addr, ()):
            msg, m = apply_fault(spec, msg, now, rng, state)
            mult = max(mult, m)
            if msg is None:
                return None, 1.0
        return msg, mult

    return tx_filter if specs else None


def cluster_members(nodes: Dict[int, CsyncNode]) -> Dict[int, set]:
    out: Dict[int, set] = {}
    for a, n in nodes.items():
        if n.role is Role.CH:
            out.setdefault(a, set()).add(a)
    for a, n in nodes.items():
        for c in n.clusters:
            if c in out:
                out[c].add(a)
    return out


def check_assumptions(topo: Topology, nodes: Dict[int, CsyncNode], faulty: set) -> List[str]:
    """Neighbor and bridge quorums in every cluster that holds a faulty node."""
    problems = []
    for ch, members in sorted(cluster_members(nodes).items()):
        bad = members & faulty
        if not bad:
            continue
        for v in sorted(members - faulty):
            nb = set(topo.neighbors(v)) & members
            free = len(nb - faulty)
            if free < quorum(len(nb)):
                problems.append(f"cluster {ch}: node {v} has {free} fault-free of {len(nb)} cluster neighbors")
        cbs = {v for v in members if nodes[v].role in (Role.CB, Role.CBH)}
        if cbs and len(cbs - faulty) < quorum(len(cbs)):
            problems.append(f"cluster {ch}: {len(cbs - faulty)} fault-free of {len(cbs)} bridges")
        if not cbs:
            problems.append(f"cluster {ch}: no bridge to initiate consensus")
    return problems


def check_clustering(nodes: Dict[int, CsyncNode], topo: Topology) -> List[str]:
    problems = []
    for a, n in nodes.items():
        if n.state in (State.DISCOVERY,) or n.first_idle is None:
            continue
        if n.role in (Role.CB, Role.CBH) and len(n.ch_list) < 2:
            problems.append(f"bridge {a} lists fewer than two CHs")
        if n.role is Role.CBH and not n.cbh_pairs:
            problems.append(f"CBH {a} heads no pair")
    return problems


def _valid_csync(n: CsyncNode, nodes, faulty) -> bool:
    return (n.addr not in faulty and n.lc_ref is not None and n.syncs >= 2
            and n.state in (State.IDLE, State.CONSENSUS_SYNCHRONIZATION)
            and n.lc_ref in nodes and nodes[n.lc_ref].lc_ref == n.lc_ref)


def run_scenario(s: Scenario, observer: Optional[Callable[[Simulator, Dict[int, object]], None]] = None,
                 topology: Optional[Topology] = None) -> RunResult:
    topo = build_topology(s) if topology is None else topology
    clocks = draw_clocks(topo, s)
    trace = Trace(s.output.trace_level)
    sim = Simulator(topo, s.radio, seed=s.seed, trace=trace, tx_filter=_fault_filter(s))
    pc = replace(s.protocol_config, airtime_us=s.radio.airtime_us, max_backoff_us=s.radio.max_backoff_us)
    faulty = {f.target for f in s.faults}
    boot_rng = random.Random(f"boot:{s.seed}")
    nodes: Dict[int, object] = {}
    for a in topo.nodes:
        if s.protocol == "csync":
            node = CsyncNode(a, clocks[a], pc, seed=s.seed, faulty=a in faulty)
        else:
            node = GtspNode(a, clocks[a], s.gtsp_config, seed=s.seed)
        nodes[a] = node
        sim.add_node(node, boot_rng.uniform(0, s.boot_spread_us))
    sim.blocked = lambda addr, sender: sender in nodes[addr].blacklist
    for f in s.faults:
        if f.kind == FaultKind.FAIL_STOP.value:
            sim.at(max(f.start_us, 0.0), EventKind.FAULT, f.target, ("kill",))

    samples: List[ErrorSample] = []
    state = {"start": None, "snap": {}, "assume": None}

    def snapshot_clocks() -> Dict[int, float]:
        out = {}
        for a, rt in sim.nodes.items():
            if rt.alive:
                sim._sync_clock(rt)
                out[a] = nodes[a].now()
        return out

    def sample(sim_: Simulator):
        t = sim_.now
        if state["start"] is None:
            if s.protocol == "csync":
                live = [n for a, n in nodes.items() if sim.nodes[a].alive]
                ready = all(n.first_idle is not None for n in live)
            else:
                ready = t >= s.gtsp_warmup_us
            if ready:
                state["start"] = t
                state["snap"] = {a: sim.ledger(a) for a in nodes}
                if s.protocol == "csync" and faulty:
                    state["assume"] = check_assumptions(topo, nodes, faulty)
        if state["start"] is not None:
            clocks_now = snapshot_clocks()
            if s.protocol == "csync":
                valid = {a for a, n in nodes.items() if a in clocks_now and _valid_csync(n, nodes, faulty)}
                pairs = [(a, nodes[a].sync_src) for a in sorted(valid)
                         if nodes[a].sync_src in valid]
                lc_of = {a: (nodes[a].lc_ref, nodes[a].hops) for a in sorted(valid)}
                samples.extend(sample_errors({a: clocks_now[a] for a in valid}, t, pairs, lc_of))
            else:
                live = [a for a in clocks_now if a not in faulty]
                pairs = [(a, b) for a, b in topo.edges() if a in live and b in live]
                samples.extend(sample_errors(clocks_now, t, pairs))
        nxt = t + s.sample_period_us
        if nxt <= s.duration_us:
            sim_.call_at(nxt, sample)

    sim.call_at(s.sample_period_us, sample)
    if observer is not None:
        sim.observers.append(lambda t: observer(sim, nodes))

    problems: List[str] = []
    status = EXIT_OK
    try:
        sim.run_until(s.duration_us)
    except SimulationError as exc:
        problems.append(f"simulation error: {exc}")
        status = EXIT_INVARIANT

    end = {a: sim.ledger(a) for a in nodes}
    for a, led in end.items():
        if abs(led.total_us() - s.duration_us) > 1e-6 + 1e-9 * s.duration_us:
            problems.append(f"ledger of {a} sums to {led.total_us()} != {s.duration_us}")
    window = {a: end[a].minus(state["snap"][a]) for a in nodes} if state["start"] is not None else end
    report = summarize(samples, window, s.radio, s.protocol, _topo_name(s))
    if state["start"] is None:
        report.valid = False

    result = RunResult(s, topo, trace, report, samples, nodes, window, state["start"], stats=dict(sim.stats),
                       run_ledgers=end)
    if s.protocol == "csync":
        done = [n.clustered_at[0] for n in nodes.values() if n.clustered_at and n.addr not in faulty]
        if done:
            result.clustering_done_st = max(done) / pc.st_interval
        problems += check_clustering({a: n for a, n in nodes.items() if a not in faulty}, topo)
        result.lemma = lemma_check(samples, pc.idle_slots)
        if not faulty:
            for a, (hops, err, bound) in result.lemma.items():
                if err > bound:
                    problems.append(f"node {a} at {hops} hops: |error to LC| {err:.2f} > {bound:.2f}")
    if problems and status == EXIT_OK:
        status = EXIT_INVARIANT
    if state["assume"]:
        problems += state["assume"]
        status = EXIT_ASSUMPTION if status == EXIT_OK else status
    result.problems = problems
    result.exit_status = status
    return result


def _topo_name(s: Scenario) -> str:
    return Path(s.topology.file).stem if s.topology.kind == "file" else s.topology.kind


def lemma_check(samples: List[ErrorSample], idle_slots: int, delta: float = TICK_US
                ) -> Dict[int, Tuple[int, float, float]]:
    """Per node: worst hop count seen, worst |error to LC|, and its hop bound."""
    to_lc = [x for x in samples if x.relation == "to_LC"]
    if not to_lc:
        return {}
    max_hops = max(x.hops for x in to_lc)
    tau = tau_slots(idle_slots, max_hops)
    worst: Dict[int, Tuple[int, float]] = {}
    for x in to_lc:
        h, e = worst.get(x.node_a, (0, 0.0))
        worst[x.node_a] = (max(h, x.hops), max(e, abs(x.signed_error)))
    return {a: (h, e, lemma1_bound(BoundParams(h, tau, delta)) if h > 0 else 0.0)
            for a, (h, e) in sorted(worst.items())}


def output_dir(s: Scenario, override: Optional[str] = None) -> Path:
    d = override or os.environ.get(OUT_ENV) or s.output.dir
    p = Path(d)
    if not p.is_absolute() and s.base_dir and not (override or os.environ.get(OUT_ENV)):
        p = Path(s.base_dir) / p
    return p


def write_outputs(result: RunResult, out: Path) -> Dict[str, Path]:
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{result.scenario.name}_{result.scenario.protocol}_s{result.scenario.seed}"
    paths = {"trace": out / f"{stem}_trace.csv", "report": out / f"{stem}_report.csv"}
    result.trace.write(paths["trace"])
    paths["report"].write_text(report_csv(result.report), encoding="utf-8", newline="")
    if result.scenario.protocol == "csync":
        rows = [(a, n.role.value, n.my_ch, n.slot or n.ch_slot or 0, n.is_lc)
                for a, n in sorted(result.nodes.items())]
        paths["roles"] = out / f"{stem}_roles.csv"
        paths["roles"].write_text(roles_csv(rows), encoding="utf-8", newline="")
    return paths


def summary_row(result: RunResult) -> dict:
    agg = result.report.aggregate
    return {"seed": result.scenario.seed, "protocol": result.scenario.protocol,
            "topology": _topo_name(result.scenario), "mean_error_us": agg.mean_error_us,
            "sd_error_us": agg.sd_error_us, "mean_power_mW": agg.mean_power_mW,
            "radio_on_fraction": agg.radio_on_fraction, "exit_status": result.exit_status,
            "digest": result.digest, "valid": result.report.valid,
            "clustering_done_st": result.clustering_done_st}


def _run_one(s: Scenario) -> dict:
    return summary_row(run_scenario(s))


def run_sweep(s: Scenario, seeds: List[int], parallel: int = 1) -> List[dict]:
    """Independent runs over ``seeds``; each run stays single-threaded."""
    runs = [replace(s, seed=k) for k in seeds]
    if parallel <= 1:
        return [_run_one(r) for r in runs]
    with ProcessPoolExecutor(max_workers=parallel) as pool:
        return list(pool.map(_run_one, runs))


def aggregate_rows(rows: List[dict]) -> dict:
    def mean(key):
        xs = [r[key] for r in rows if r[key] is not None and r[key] == r[key]]
        return statistics.fmean(xs) if xs else float("nan")

    return {"seed": "ALL", "protocol": rows[0]["protocol"] if rows else "", "topology":
            rows[0]["topology"] if rows else "", "mean_error_us": mean("mean_error_us"),
            "sd_error_us": mean("sd_error_us"), "mean_power_mW": mean("mean_power_mW"),
            "radio_on_fraction": mean("radio_on_fraction"),
            "exit_status": max((r["exit_status"] for r in rows), default=0), "digest": "",
            "valid": all(r["valid"] for r in rows), "clustering_done_st": mean("clustering_done_st")}
