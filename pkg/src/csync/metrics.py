"""Synchronization error sampling, the hop bound, power summaries and CSV output."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .clock import TICK_US
from .engine import PowerLedger, RadioConfig


@dataclass(frozen=True)
class ErrorSample:
    t: float
    node_a: int
    node_b: int
    signed_error: float
    relation: str  # "neighbor" or "to_LC"
    hops: int = 0

    def __post_init__(self):
        if self.relation not in ("neighbor", "to_LC"):
            raise ValueError(f"unknown relation {self.relation!r}")
        if self.hops < 0:
            raise ValueError("hops must be non-negative")


@dataclass(frozen=True)
class BoundParams:
    eta: int
    tau: float
    delta: float = TICK_US

    def __post_init__(self):
        if not (self.eta > 0 and self.tau > 0 and self.delta > 0):
            raise ValueError("bound parameters must be positive")


def lemma1_bound(params: BoundParams) -> float:
    return params.eta * params.tau * params.delta


def tau_slots(idle_slots: int, max_hops: int) -> int:
    """Slots between successive synchronization messages at a node."""
    return idle_slots + max(max_hops, 1) - 1


def sample_errors(clocks: Dict[int, float], t: float, pairs: Iterable[Tuple[int, int]],
                  lc_of: Optional[Dict[int, Tuple[int, int]]] = None) -> List[ErrorSample]:
    """Errors from a snapshot ``clocks`` (node -> logical time at ``t``).

    ``pairs`` are neighbor relations; ``lc_of`` maps a node to ``(lc, hops)``.
    """
    out = []
    for a, b in pairs:
        if a in clocks and b in clocks:
            out.append(ErrorSample(t, a, b, clocks[a] - clocks[b], "neighbor"))
    for a, (lc, hops) in sorted((lc_of or {}).items()):
        if a in clocks and lc in clocks:
            err = 0.0 if a == lc else clocks[a] - clocks[lc]
            out.append(ErrorSample(t, a, lc, err, "to_LC", 0 if a == lc else hops))
    return out


@dataclass
class NodeRow:
    protocol: str
    topology: str
    node: str
    mean_error_us: float
    sd_error_us: float
    mean_power_mW: float
    radio_on_fraction: float
    samples: int = 0


@dataclass
class Report:
    rows: List[NodeRow]
    aggregate: NodeRow
    valid: bool
    sd_over_time_us: float = 0.0
    extra: Dict[str, float] = field(default_factory=dict)


COLUMNS = ["protocol", "topology", "node", "mean_error_us", "sd_error_us", "mean_power_mW",
           "radio_on_fraction"]


def _sd(xs: Sequence[float]) -> float:
    return statistics.pstdev(xs) if len(xs) > 1 else 0.0


def summarize(samples: Sequence[ErrorSample], ledgers: Dict[int, PowerLedger], radio: RadioConfig,
              protocol: str, topology: str) -> Report:
    """Per-node and aggregate rows over absolute neighbor errors and power.

    A node's errors are those of the neighbor pairs it belongs to.  The
    aggregate ``sd_error_us`` is taken over all samples; the spread of
    per-instant means is reported separately as ``sd_over_time_us``.
    """
    neigh = [s for s in samples if s.relation == "neighbor"]
    per_node: Dict[int, List[float]] = {a: [] for a in ledgers}
    by_t: Dict[float, List[float]] = {}
    for s in neigh:
        per_node.setdefault(s.node_a, []).append(abs(s.signed_error))
        per_node.setdefault(s.node_b, []).append(abs(s.signed_error))
        by_t.setdefault(s.t, []).append(abs(s.signed_error))
    rows = []
    for a in sorted(per_node):
        errs = per_node[a]
        led = ledgers.get(a)
        rows.append(NodeRow(protocol, topology, str(a),
                            statistics.fmean(errs) if errs else float("nan"), _sd(errs),
                            led.mean_power_mw(radio) if led else float("nan"),
                            led.radio_on_fraction() if led else float("nan"), len(errs)))
    all_err = [abs(s.signed_error) for s in neigh]
    powers = [r.mean_power_mW for r in rows if r.mean_power_mW == r.mean_power_mW]
    ons = [r.radio_on_fraction for r in rows if r.radio_on_fraction == r.radio_on_fraction]
    agg = NodeRow(protocol, topology, "ALL",
                  statistics.fmean(all_err) if all_err else float("nan"), _sd(all_err),
                  statistics.fmean(powers) if powers else float("nan"),
                  statistics.fmean(ons) if ons else float("nan"), len(all_err))
    over_time = _sd([statistics.fmean(v) for v in by_t.values()]) if by_t else 0.0
    return Report(rows, agg, valid=bool(all_err), sd_over_time_us=over_time)


def report_csv(report: Report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(COLUMNS)
    for r in report.rows + [report.aggregate]:
        w.writerow([r.protocol, r.topology, r.node, f"{r.mean_error_us:.4f}", f"{r.sd_error_us:.4f}",
                    f"{r.mean_power_mW:.5f}", f"{r.radio_on_fraction:.5f}"])
    return buf.getvalue()


def read_report_csv(text: str) -> List[dict]:
    return list(csv.DictReader(io.StringIO(text)))


def roles_csv(rows: Iterable[Tuple[int, str, Optional[int], int, bool]]) -> str:
    """Cluster adjacency report: node, role, CH, slot, LC flag."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["node", "role", "ch", "slot", "lc"])
    for node, role, ch, slot, lc in rows:
        w.writerow([node, role, "" if ch is None else ch, slot, int(lc)])
    return buf.getvalue()
