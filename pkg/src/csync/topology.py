"""Canonical topology generators and the topology file format."""

from __future__ import annotations

import math
import random
from pathlib import Path
from typing import List, Optional, Tuple

import yaml

from .engine import Topology

KINDS = ("dense", "sparse", "full", "chain13", "three_cluster")
DEFAULT_N = {"dense": 24, "sparse": 15, "full": 45, "chain13": 13, "three_cluster": 11}
TOPOLOGY_VERSION = 1


class TopologyError(ValueError):
    pass


def chain13() -> Topology:
    """13 nodes in a line; odd positions carry high addresses and become CHs."""
    addrs = [100 + p if p % 2 else p for p in range(13)]
    links = {(addrs[i], addrs[i + 1]) for i in range(12)}
    pos = {a: (10.0 * i, 0.0) for i, a in enumerate(addrs)}
    return Topology(nodes=addrs, links=links, positions=pos, comm_range=10.0)


def three_cluster() -> Topology:
    """CH1 - CB1 - CH2 - CB2 - CH3, two CMs per cluster.

    CH2's CMs also hear both bridges so the middle cluster satisfies the
    neighbor quorum needed by the byzantine consensus.
    """
    ch1, ch2, ch3 = 201, 202, 203
    cb1, cb2 = 11, 12
    m1, m2, m3, m4, m5, m6 = 21, 22, 23, 24, 25, 26
    links = {(ch1, m1), (ch1, m2), (m1, m2), (ch1, cb1),
             (cb1, ch2), (ch2, m3), (ch2, m4), (m3, m4), (m3, cb1), (m4, cb1), (m3, cb2), (m4, cb2),
             (ch2, cb2), (cb2, ch3), (ch3, m5), (ch3, m6), (m5, m6)}
    nodes = [ch1, ch2, ch3, cb1, cb2, m1, m2, m3, m4, m5, m6]
    return Topology(nodes=nodes, links=links)


def five_cluster_line() -> Topology:
    """A - B - C - D - E cluster line; C is the local center, D has full bridge sets."""
    A, B, C, D, E = 220, 230, 240, 250, 245
    d = [41, 42, 43]
    c = [31, 32]  # bridges C-D
    e = [51, 52]  # bridges D-E
    links = set()
    inner = [D] + d + c + e
    for x in [D] + d:
        links |= {(x, y) for y in inner if y != x}
    links |= {(c[0], c[1]), (e[0], e[1])}
    links |= {(x, C) for x in c} | {(x, E) for x in e}
    links |= {(C, 61), (C, 62), (61, 62), (71, B), (71, C)}
    links |= {(B, 81), (B, 82), (81, 82), (91, A), (91, B)}
    links |= {(A, 101), (A, 102), (101, 102)}
    links |= {(E, 111), (E, 112), (111, 112)}
    nodes = sorted({x for l in links for x in l})
    return Topology(nodes=nodes, links={frozenset(l) for l in links})


def _pockets(rng: random.Random, centers: List[Tuple[float, float]], sizes: List[int],
             radius: float) -> List[Tuple[float, float]]:
    pts = []
    for (cx, cy), k in zip(centers, sizes):
        for _ in range(k):
            r, a = radius * math.sqrt(rng.random()), rng.uniform(0, 2 * math.pi)
            pts.append((cx + r * math.cos(a), cy + r * math.sin(a)))
    return pts


def _split(n: int, groups: int) -> List[int]:
    base, extra = divmod(n, groups)
    return [base + (1 if i < extra else 0) for i in range(groups)]


def _layout(kind: str, n: int, rng: random.Random) -> Tuple[List[Tuple[float, float]], float]:
    if kind == "dense":
        groups = max(1, round(n / 6))
        centers = [(22.0 * (i % 3), 22.0 * (i // 3)) for i in range(groups)]
        return _pockets(rng, centers, _split(n, groups), 7.0), 24.0
    if kind == "sparse":
        groups = max(1, round(n / 3))
        centers = [(26.0 * i, 6.0 * (i % 2)) for i in range(groups)]
        return _pockets(rng, centers, _split(n, groups), 6.0), 30.0
    # full: dense pockets and sparse groups sharing one field
    nd = int(round(n * 24 / 39))
    dense, _ = _layout("dense", nd, rng)
    sparse, _ = _layout("sparse", n - nd, rng)
    shift = max(x for x, _ in dense) + 20.0
    # range 24 everywhere; sparse groups drawn closer to keep them linked
    sparse = [(shift + x * 0.8, y) for x, y in sparse]
    return dense + sparse, 24.0


def generate_topology(kind: str, n: Optional[int] = None, seed: int = 0) -> Topology:
    if kind not in KINDS:
        raise TopologyError(f"unknown topology kind {kind!r}")
    if kind == "chain13":
        if n not in (None, 13):
            raise TopologyError("chain13 has exactly 13 nodes")
        return chain13()
    if kind == "three_cluster":
        if n not in (None, 11):
            raise TopologyError("three_cluster has exactly 11 nodes")
        return three_cluster()
    n = DEFAULT_N[kind] if n is None else n
    if not 2 <= n <= 200:
        raise TopologyError(f"n={n} outside [2, 200]")
    if n == 2:
        return Topology(nodes=[1, 2], positions={1: (0.0, 0.0), 2: (1.0, 0.0)}, comm_range=10.0)
    for attempt in range(1000):
        rng = random.Random(f"topology:{kind}:{n}:{seed}:{attempt}")
        pts, rng_range = _layout(kind, n, rng)
        addrs = rng.sample(range(1, 10 * n + 1), n)
        topo = Topology(nodes=addrs, positions=dict(zip(addrs, pts)), comm_range=rng_range)
        if topo.is_connected():
            return topo
    raise TopologyError(f"could not draw a connected {kind} topology")


def topology_to_dict(topo: Topology) -> dict:
    out = {"csync_topology": TOPOLOGY_VERSION, "comm_range": topo.comm_range,
           "nodes": [{"addr": a, **({"x": topo.positions[a][0], "y": topo.positions[a][1]}
                                    if a in topo.positions else {})} for a in topo.nodes]}
    if topo.links is not None:
        out["links"] = sorted(sorted(l) for l in topo.links)
    return out


def topology_from_dict(d: dict) -> Topology:
    if d.get("csync_topology") != TOPOLOGY_VERSION:
        raise TopologyError(f"expected csync_topology: {TOPOLOGY_VERSION}")
    unknown = set(d) - {"csync_topology", "comm_range", "nodes", "links"}
    if unknown:
        raise TopologyError(f"unknown topology keys: {sorted(unknown)}")
    nodes, pos = [], {}
    for entry in d["nodes"]:
        bad = set(entry) - {"addr", "x", "y"}
        if bad:
            raise TopologyError(f"unknown node keys: {sorted(bad)}")
        nodes.append(int(entry["addr"]))
        if "x" in entry:
            pos[int(entry["addr"])] = (float(entry["x"]), float(entry["y"]))
    links = None
    if "links" in d:
        links = {frozenset(map(int, l)) for l in d["links"]}
    return Topology(nodes=nodes, comm_range=float(d.get("comm_range", 30.0)), positions=pos, links=links)


def save_topology(topo: Topology, path) -> None:
    Path(path).write_text(yaml.safe_dump(topology_to_dict(topo), sort_keys=False), encoding="utf-8")


def load_topology(path) -> Topology:
    path = Path(path)
    if not path.exists():
        raise TopologyError(f"topology file {path} not found")
    return topology_from_dict(yaml.safe_load(path.read_text(encoding="utf-8")))
