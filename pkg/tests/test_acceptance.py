"""Acceptance suite: one PASS/FAIL line per criterion, printed past pytest's capture."""

import statistics
import time

import pytest

from conftest import load_scenario, run_topology
from csync.engine import Topology
from csync.protocol import Role, mirror_slot
from csync.resilience import check_theorem
from csync.runner import run_scenario
from oracles import adjacency, connected_atlas, election_oracle, relabel

DELTA = 1.9
TAU = 14
THRESHOLD = 500.0


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


def test_c1_hop_bound_chain13(verdict):
    worst, hop5, bad = 0.0, 0.0, []
    for seed in range(1, 21):
        r = run_scenario(load_scenario("chain13", f"seed={seed}", "output.trace_level=off"))
        for x in r.samples:
            if x.relation != "to_LC":
                continue
            err = abs(x.signed_error)
            if x.hops == 0:
                ok = err == 0.0
            else:
                ok = err <= x.hops * TAU * DELTA
                worst = max(worst, err / (x.hops * TAU * DELTA))
            if x.hops == 5:
                hop5 = max(hop5, err)
                ok = ok and err < 133.0
            if not ok:
                bad.append((seed, x.node_a, x.hops, round(err, 2)))
    verdict(1, not bad and hop5 > 0,
            f"20 chain13 seeds, worst error/bound {worst:.3f}, hop-5 max {hop5:.1f} us (< 133), "
            f"{len(bad)} violations {bad[:3]}")


def test_c2_fault_containment(verdict):
    s = load_scenario("fault_ch2", "output.trace_level=off")
    fault_t = s.faults[0].start_us
    lc, ch2, ch3 = 240, 250, 245
    seen = {"roles": None}
    peak, first, last = {}, {}, {}

    def observe(sim, nodes):
        if sim.now < fault_t or not nodes[lc].is_lc:
            return
        if seen["roles"] is None:
            cms = {a for a, n in nodes.items() if n.my_ch == ch2 and n.role is Role.CM}
            cbh = {a for a, n in nodes.items() if any(set(p) == {ch2, ch3} for p in n.cbh_pairs)}
            third = {a for a, n in nodes.items() if n.my_ch == ch3}
            seen["roles"] = (cms, cbh, third)
        sim._sync_clock(sim.nodes[lc])
        ref = nodes[lc].now()
        for a, n in nodes.items():
            if a == ch2 or n.syncs < 2:
                continue
            sim._sync_clock(sim.nodes[a])
            e = abs(n.now() - ref)
            peak[a] = max(peak.get(a, 0.0), e)
            if e > THRESHOLD:
                first.setdefault(a, sim.now)
                last[a] = sim.now

    r = run_scenario(s, observe)
    cms, cbh, third = seen["roles"]
    slot = s.protocol_config.slot_duration
    watched = cms | cbh
    spiked = all(peak.get(a, 0) > THRESHOLD for a in watched)
    recovered = all(last[a] - first[a] < slot for a in watched if a in first)
    a_ok = bool(watched) and spiked and recovered
    b_ok = bool(third) and all(peak.get(a, 0) <= THRESHOLD for a in third)
    nbrs = r.topology.neighbors(ch2)
    c_ok = all(ch2 in r.nodes[a].blacklist for a in nbrs)
    span = max((last[a] - first[a] for a in watched if a in first), default=0) / 1e3
    verdict(2, a_ok and b_ok and c_ok,
            f"(a) CB2H {sorted(cbh)} + CMs {sorted(cms)} spike to {max(peak[a] for a in watched):.0f} us, "
            f"back under {THRESHOLD:.0f} us within {span:.0f} ms < {slot / 1e3:.0f} ms slot: {a_ok}; "
            f"(b) CH3 cluster {sorted(third)} max {max(peak.get(a, 0) for a in third):.1f} us: {b_ok}; "
            f"(c) CH2 blacklisted by all {len(nbrs)} neighbors: {c_ok}")


def test_c3_theorem_enumeration(verdict):
    t0 = time.time()
    problems, runs = [], 0
    for n_i in (4, 5, 6, 7):
        stats = check_theorem(n_i)
        runs += stats["runs"]
        problems += [(n_i,) + v for v in stats["violations"]]
        for k, per in stats["by_k"].items():
            if k >= -(-n_i // 2):
                if per["assumption_violations"] != per["runs"] or per["faulty_agreements"]:
                    problems.append((n_i, k, "majority faulty not reported"))
    dt = time.time() - t0
    verdict(3, not problems and dt < 600,
            f"{runs} placements over n_i 4-7 in {dt:.1f} s, {len(problems)} violations {problems[:3]}")


@pytest.fixture(scope="module")
def paired_runs():
    out = {}
    for name in ("dense", "sparse", "full"):
        for proto in ("csync", "gtsp"):
            r = run_scenario(load_scenario(name, f"protocol={proto}", "output.trace_level=off"))
            out[name, proto] = r.report.aggregate
    return out


def test_c4_power_ratio(verdict, paired_runs):
    ratio = {n: paired_runs[n, "csync"].mean_power_mW / paired_runs[n, "gtsp"].mean_power_mW
             for n in ("dense", "sparse")}
    verdict(4, ratio["dense"] <= 0.55 and ratio["sparse"] <= 0.35,
            f"C-sync/GTSP power dense {ratio['dense']:.3f} (<= 0.55, reference 0.44), "
            f"sparse {ratio['sparse']:.3f} (<= 0.35, reference 0.24)")


def test_c5_accuracy_parity(verdict, paired_runs):
    parts, ok = [], True
    for n in ("dense", "sparse", "full"):
        c, g = paired_runs[n, "csync"].mean_error_us, paired_runs[n, "gtsp"].mean_error_us
        limit = DELTA + 0.5 * g
        ok = ok and c <= limit
        parts.append(f"{n} {c:.2f} <= {limit:.2f} (GTSP {g:.2f})")
    verdict(5, ok, "mean neighbor error " + ", ".join(parts))


def _protocol_view(g, seed):
    topo = Topology(nodes=sorted(g), links={frozenset(e) for e in g.edges()})
    n = run_topology(topo, seed=seed).nodes
    heads = [a for a in n if n[a].role is Role.CH]
    cbh = {tuple(p): a for a in n for p in n[a].cbh_pairs}
    return {"roles": {a: n[a].role.value for a in n}, "ch_of": {a: n[a].my_ch for a in n},
            "cbh": cbh, "slot": {a: n[a].slot for a in heads}, "lc": {a for a in heads if n[a].is_lc}}


def test_c6_election_oracle(verdict):
    graphs = connected_atlas(6)
    bad = []
    for i, g0 in enumerate(graphs):
        for seed in (1, 2):
            g = relabel(g0, 1000 * i + seed)
            want, got = election_oracle(adjacency(g)), _protocol_view(g, seed)
            diff = [k for k in want if want[k] != got[k]]
            if diff:
                bad.append((i, seed, diff[0]))
    verdict(6, not bad, f"{len(graphs)} connected graphs x 2 address/seed draws, {len(bad)} mismatches {bad[:3]}")


def test_c7_mirror_and_boot(verdict):
    m = mirror_slot(4, 10)
    sts = [run_scenario(load_scenario("dense", f"seed={k}", f"topology.seed={k}", "duration_us=200000000",
                                      "output.trace_level=off")).clustering_done_st for k in range(1, 6)]
    med = statistics.median(sts)
    verdict(7, m == 6 and med <= 14, f"mirror_slot(4,10) = {m}; dense clustering seed-median {med:.2f} ST "
            f"(<= 14) over {[round(x, 2) for x in sts]}")


def test_c8_determinism_and_conservation(verdict, tmp_path):
    same, leaks = True, []
    for name, proto in (("chain13", "csync"), ("dense", "csync"), ("sparse", "gtsp")):
        texts = []
        for rep in range(2):
            s = load_scenario(name, f"protocol={proto}", "duration_us=300000000",
                              "gtsp_warmup_us=100000000", "output.trace_level=full")
            r = run_scenario(s)
            path = tmp_path / f"{name}_{rep}.csv"
            r.trace.write(path)
            texts.append(path.read_bytes())
            leaks += [(name, a) for a, led in r.run_ledgers.items()
                      if abs(led.total_us() - s.duration_us) > 1e-6 * s.duration_us]
        same = same and texts[0] == texts[1] and len(texts[0]) > 100
    verdict(8, same and not leaks, f"byte-identical traces for 3 repeated scenarios: {same}; "
            f"{len(leaks)} ledgers off the run length")

