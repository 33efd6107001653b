"""Fault injection and byzantine detection/correction within a cluster."""

from __future__ import annotations

import enum
import hashlib
import hmac
import itertools
import random
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

from .engine import Message, MsgType


class FaultKind(str, enum.Enum):
    FAIL_STOP = "FAIL_STOP"
    SPIKE = "SPIKE"
    OUTLIER = "OUTLIER"
    INTERMITTENT = "INTERMITTENT"
    SELECTIVE_FORWARD = "SELECTIVE_FORWARD"
    DISCOVERY_FLOOD = "DISCOVERY_FLOOD"
    ALTERED_TIME = "ALTERED_TIME"


TIME_FAULTS = {FaultKind.SPIKE, FaultKind.OUTLIER, FaultKind.ALTERED_TIME}
PROB_FAULTS = {FaultKind.INTERMITTENT, FaultKind.SELECTIVE_FORWARD}

DEFAULT_BYZ_THRESHOLD_US = 500.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    target: int
    kind: FaultKind
    start_us: float = 0.0
    end_us: float = float("inf")
    magnitude: float = 0.0
    colluders: FrozenSet[int] = frozenset()

    def __post_init__(self):
        if not isinstance(self.kind, FaultKind):
            try:
                object.__setattr__(self, "kind", FaultKind(self.kind))
            except ValueError:
                raise ConfigError(f"unknown fault kind {self.kind!r}") from None
        object.__setattr__(self, "colluders", frozenset(self.colluders))
        if self.end_us < self.start_us:
            raise ConfigError("fault activation window ends before it starts")
        if self.kind in PROB_FAULTS and not 0.0 <= self.magnitude <= 1.0:
            raise ConfigError(f"{self.kind.value} magnitude is a probability in [0, 1]")
        if self.kind is FaultKind.DISCOVERY_FLOOD and self.magnitude < 1.0:
            raise ConfigError("DISCOVERY_FLOOD magnitude is a tx power multiplier >= 1")
        if self.kind is FaultKind.OUTLIER and abs(self.magnitude) <= DEFAULT_BYZ_THRESHOLD_US:
            raise ConfigError("an OUTLIER must lie beyond the acceptance range")

    def active(self, t_us: float) -> bool:
        return self.start_us <= t_us <= self.end_us


@dataclass
class FaultState:
    """Mutable per-fault bookkeeping (a spike fires once per window)."""

    spiked: bool = False


_DISCOVERY_PHASE = {MsgType.DISCOVERY, MsgType.ELECTION}


def apply_fault(spec: FaultSpec, msg: Message, now_us: float, rng: random.Random,
                state: Optional[FaultState] = None) -> Tuple[Optional[Message], float]:
    """Transform an outgoing frame of the faulty node.

    Returns ``(frame or None, tx_power_multiplier)``; ``None`` means the frame
    is never put on the air.
    """
    if not spec.active(now_us):
        return msg, 1.0
    kind = spec.kind
    if kind is FaultKind.FAIL_STOP:
        return None, 1.0
    if kind is FaultKind.INTERMITTENT:
        return (None, 1.0) if rng.random() < spec.magnitude else (msg, 1.0)
    if kind is FaultKind.SELECTIVE_FORWARD:
        if msg.msg_type is MsgType.SYNC and rng.random() < spec.magnitude:
            return None, 1.0
        return msg, 1.0
    if kind is FaultKind.DISCOVERY_FLOOD:
        return msg, (spec.magnitude if msg.msg_type in _DISCOVERY_PHASE else 1.0)
    if msg.msg_type not in (MsgType.SYNC, MsgType.DISCOVERY, MsgType.BYZ_CONSENSUS):
        return msg, 1.0
    if kind is FaultKind.SPIKE:
        state = state if state is not None else FaultState()
        if state.spiked or msg.msg_type is not MsgType.SYNC:
            return msg, 1.0
        state.spiked = True
    elif kind is FaultKind.ALTERED_TIME and msg.msg_type is not MsgType.SYNC:
        return msg, 1.0
    return replace(msg, logical_time=msg.logical_time + spec.magnitude), 1.0


# -- cluster-bridge authentication -------------------------------------------

def _pair_key(ch_pair: Tuple[int, int]) -> bytes:
    a, b = sorted(ch_pair)
    return a.to_bytes(8, "big") + b.to_bytes(8, "big")


def cb_token(ch_pair: Tuple[int, int]) -> bytes:
    """Keyed digest standing in for the AES block keyed by the two CH ids."""
    return hmac.new(_pair_key(ch_pair), b"csync-cluster-bridge", hashlib.sha256).digest()[:16]


def verify_cb_token(token: Optional[bytes], ch_pair: Tuple[int, int]) -> bool:
    if not token:
        return False
    return hmac.compare_digest(token, cb_token(ch_pair))


# -- byzantine consensus -----------------------------------------------------

@dataclass(frozen=True)
class ByzantineMsg:
    initiator: int
    reference_addr: int
    correct_time: float
    correct_rate: float
    suspect: int
    cluster: int
    sender: int

    @classmethod
    def from_frame(cls, msg: Message) -> "ByzantineMsg":
        m = msg.hop_meta
        return cls(initiator=m["initiator"], reference_addr=msg.reference_addr,
                   correct_time=msg.logical_time, correct_rate=msg.rate,
                   suspect=m["suspect"], cluster=m["cluster"], sender=msg.src)


def quorum(n_i: int) -> int:
    return n_i // 2 + 1


@dataclass
class ConsensusTally:
    """Distinct senders per consistent value, for one (cluster, suspect) incident.

    Values are stored normalized against the receiver's hardware clock so that
    readings taken at different instants compare directly.
    """

    n_i: int
    threshold: float = DEFAULT_BYZ_THRESHOLD_US
    groups: List[dict] = field(default_factory=list)
    retransmitted: set = field(default_factory=set)
    agreed: Optional[Tuple[float, float]] = None

    @property
    def quorum(self) -> int:
        return quorum(self.n_i)

    def add(self, sender: int, norm_value: float, rate: float) -> dict:
        for g in self.groups:
            if abs(norm_value - g["anchor"]) <= self.threshold:
                break
        else:
            g = {"anchor": norm_value, "senders": {}}
            self.groups.append(g)
        g["senders"].setdefault(sender, (norm_value, rate))
        return g

    def count(self, g: dict) -> int:
        return len(g["senders"])

    def reached(self) -> Optional[dict]:
        best = None
        for g in self.groups:
            if self.count(g) >= self.quorum and (best is None or self.count(g) > self.count(best)):
                best = g
        return best


@dataclass(frozen=True)
class ClusterView:
    """What a node knows about one cluster it belongs to."""

    me: int
    cluster: int
    legit_refs: FrozenSet[int]
    n_i: int
    member: bool = True


@dataclass
class ByzDecision:
    retransmit: bool = False
    adopt: Optional[Tuple[float, float]] = None  # (normalized time, rate)
    blacklist: Optional[int] = None
    reason: str = ""


def handle_byzantine(view: ClusterView, msg: ByzantineMsg, tally: ConsensusTally,
                     rx_hw: float, trusted_now: Optional[float],
                     heard_suspect_ok: bool = False) -> ByzDecision:
    """Process one consensus frame at a cluster member.

    ``trusted_now`` is the node's own clock reading before any synchronization
    adopted in the current slot (``None`` when the node has no LC-referenced
    clock yet); values farther than the threshold from it are implausible.
    """
    if not view.member or msg.cluster != view.cluster:
        return ByzDecision(reason="not-member")
    if msg.suspect == view.me:
        return ByzDecision(reason="self-suspect")
    if msg.reference_addr not in view.legit_refs:
        return ByzDecision(reason="bad-reference")
    if trusted_now is not None and abs(msg.correct_time - trusted_now) > tally.threshold:
        return ByzDecision(reason="implausible")
    norm = msg.correct_time - rx_hw
    tally.add(msg.sender, norm, msg.correct_rate)
    out = ByzDecision(reason="counted")
    if msg.reference_addr not in tally.retransmitted:
        tally.retransmitted.add(msg.reference_addr)
        out.retransmit = True
    if tally.agreed is None:
        g = tally.reached()
        if g is not None:
            vals = list(g["senders"].values())
            tally.agreed = (sum(v for v, _ in vals) / len(vals), sum(r for _, r in vals) / len(vals))
            out.adopt = tally.agreed
            out.reason = "agreed"
            if not heard_suspect_ok:
                out.blacklist = msg.suspect
    return out


@dataclass
class MonitorVerdict:
    fire: bool
    immediate: bool
    consecutive: int


def monitor(reference_time: Optional[float], observed_time: Optional[float], threshold: float,
            consecutive: int = 0, repeat: int = 1) -> MonitorVerdict:
    """Decide whether a pre-scheduled consensus message must be sent.

    ``observed_time`` is ``None`` when the expected broadcast never arrived.
    A value violation fires immediately, a missing frame fires at the
    scheduled time; either only after ``repeat`` consecutive violations.
    """
    if observed_time is None:
        n = consecutive + 1
        return MonitorVerdict(n >= repeat, False, n)
    if reference_time is None or abs(observed_time - reference_time) <= threshold:
        return MonitorVerdict(False, False, 0)
    n = consecutive + 1
    return MonitorVerdict(n >= repeat, True, n)


# -- desk-scale agreement model ----------------------------------------------

class Behavior(str, enum.Enum):
    SILENT = "silent"
    WRONG = "wrong"
    BENIGN = "benign"
    ACCUSE = "accuse"


def behavior_of(kind: FaultKind) -> Behavior:
    if kind in (FaultKind.FAIL_STOP, FaultKind.SELECTIVE_FORWARD, FaultKind.INTERMITTENT):
        return Behavior.SILENT
    if kind in TIME_FAULTS:
        return Behavior.WRONG
    return Behavior.BENIGN


MAGNITUDE = {FaultKind.SPIKE: 2000.0, FaultKind.OUTLIER: -5000.0, FaultKind.ALTERED_TIME: 10000.0}


@dataclass
class AgreementOutcome:
    assumptions_ok: bool
    final: Dict[int, float]
    agreed: Dict[int, Optional[float]]
    blacklists: Dict[int, set]
    faulty: FrozenSet[int]
    messages: int

    def correct_nodes(self) -> List[int]:
        return [n for n in self.final if n not in self.faulty]


def cluster_assumptions(n_nodes: int, cbs: Sequence[int], faulty: Iterable[int]) -> bool:
    """Fault-free neighbor and fault-free bridge quorums on a clique cluster."""
    faulty = set(faulty)
    n_i = n_nodes - 1
    for v in range(n_nodes):
        free = sum(1 for u in range(n_nodes) if u != v and u not in faulty)
        if free < quorum(n_i):
            return False
    if cbs:
        free_cbs = sum(1 for c in cbs if c not in faulty)
        if free_cbs < quorum(len(cbs)):
            return False
    return True


def simulate_cluster_agreement(n_i: int, n_cb: int, faults: Dict[int, Behavior],
                               wrong_values: Optional[Dict[int, float]] = None,
                               threshold: float = DEFAULT_BYZ_THRESHOLD_US,
                               order_seed: Optional[int] = None) -> AgreementOutcome:
    """Run the consensus flood on a clique cluster of ``n_i + 1`` nodes.

    Node 0 is the cluster head (the monitored sender), nodes ``1..n_cb`` are
    bridges, the rest common nodes.  Correct time is 0.  Delivery within the
    clique is reliable (atomic broadcast); ``order_seed`` shuffles the order
    in which queued frames are processed.
    """
    n = n_i + 1
    cbs = list(range(1, n_cb + 1))
    faulty = frozenset(faults)
    wrong_values = wrong_values or {}
    rng = random.Random(order_seed) if order_seed is not None else None

    ch_b = faults.get(0)
    ch_value = None if ch_b is Behavior.SILENT else (wrong_values.get(0, 10000.0)
                                                     if ch_b is Behavior.WRONG else 0.0)
    # every node held the correct time before the slot; those that are not
    # bridges adopt the CH broadcast as soon as it lands
    final = {v: (ch_value if (ch_value is not None and v not in cbs and v != 0) else 0.0)
             for v in range(n)}
    trusted = {v: 0.0 for v in range(n)}
    views = {v: ClusterView(v, 0, frozenset(cbs), n_i) for v in range(n)}
    tallies = {v: ConsensusTally(n_i, threshold) for v in range(n)}
    agreed: Dict[int, Optional[float]] = {v: None for v in range(n)}
    blacklists: Dict[int, set] = {v: set() for v in range(n)}
    heard_ok = {v: ch_value is not None and abs(ch_value) <= threshold for v in range(n)}

    queue: List[ByzantineMsg] = []
    for c in cbs:
        b = faults.get(c)
        if b is None or b is Behavior.BENIGN:
            if ch_value is None or abs(ch_value) > threshold:
                queue.append(ByzantineMsg(c, c, 0.0, 1.0, 0, 0, c))
        elif b is Behavior.WRONG:
            queue.append(ByzantineMsg(c, c, wrong_values.get(c, 10000.0), 1.0, 0, 0, c))
        elif b is Behavior.ACCUSE:
            queue.append(ByzantineMsg(c, c, 0.0, 1.0, 0, 0, c))
    for v, b in faults.items():
        if v not in cbs and v != 0 and b in (Behavior.WRONG, Behavior.ACCUSE):
            # no bridge reference available: the frame references itself
            queue.append(ByzantineMsg(v, v, wrong_values.get(v, 10000.0), 1.0, 0, 0, v))

    sent = 0
    while queue:
        if rng is not None:
            rng.shuffle(queue)
        msg = queue.pop(0)
        sent += 1
        for v in range(n):
            if v == msg.sender:
                continue
            d = handle_byzantine(views[v], msg, tallies[v], 0.0, trusted[v], heard_ok[v])
            if v in faulty:
                b = faults[v]
                if d.retransmit and b is Behavior.BENIGN:
                    queue.append(replace(msg, sender=v))
                continue
            if d.retransmit:
                queue.append(replace(msg, sender=v))
            if d.adopt is not None:
                agreed[v] = d.adopt[0]
                final[v] = d.adopt[0]
            if d.blacklist is not None:
                blacklists[v].add(d.blacklist)

    return AgreementOutcome(cluster_assumptions(n, cbs, faulty), final, agreed, blacklists,
                            faulty, sent)


def enumerate_placements(n_i: int, max_k: int, kinds: Sequence[FaultKind] = tuple(FaultKind),
                         extra: Sequence[Behavior] = (Behavior.ACCUSE,)
                         ) -> Iterator[Tuple[int, Tuple[int, ...], Tuple[Behavior, ...]]]:
    """Yield ``(n_cb, faulty nodes, behaviors)`` over all layouts and placements.

    Fault kinds collapse to behaviors; duplicates are yielded once.
    """
    behaviors = sorted({behavior_of(k) for k in kinds} | set(extra), key=lambda b: b.value)
    n = n_i + 1
    for n_cb in range(1, n_i + 1):
        for k in range(0, max_k + 1):
            for nodes in itertools.combinations(range(n), k):
                for bs in itertools.product(behaviors, repeat=k):
                    yield n_cb, nodes, bs


def check_theorem(n_i: int, colluding: bool = True, max_k: Optional[int] = None) -> dict:
    """Exhaustive agreement check on one cluster size.

    Returns counts; ``violations`` lists placements where the property fails.
    """
    max_k = (n_i + 1) // 2 if max_k is None else max_k
    stats = {"runs": 0, "agreements": 0, "assumption_violations": 0, "violations": [], "by_k": {}}
    for n_cb, nodes, bs in enumerate_placements(n_i, max_k):
        faults = dict(zip(nodes, bs))
        if colluding:
            wrong = {v: 10000.0 for v in nodes}
        else:
            wrong = {v: 10000.0 + 1000.0 * i for i, v in enumerate(nodes)}
        out = simulate_cluster_agreement(n_i, n_cb, faults, wrong)
        stats["runs"] += 1
        k = len(nodes)
        per_k = stats["by_k"].setdefault(k, {"runs": 0, "assumption_violations": 0, "faulty_agreements": 0})
        per_k["runs"] += 1
        correct = out.correct_nodes()
        faulty_agreement = any(out.agreed[v] is not None and abs(out.agreed[v]) > DEFAULT_BYZ_THRESHOLD_US
                               for v in correct)
        false_blacklist = any(b - out.faulty for v in correct for b in [out.blacklists[v]])
        per_k["faulty_agreements"] += faulty_agreement
        per_k["assumption_violations"] += not out.assumptions_ok
        ch_bad = faults.get(0) in (Behavior.SILENT, Behavior.WRONG)
        if out.assumptions_ok:
            ok = (not faulty_agreement and not false_blacklist
                  and all(abs(out.final[v]) <= DEFAULT_BYZ_THRESHOLD_US for v in correct))
            if ch_bad:
                ok = ok and all(out.agreed[v] is not None and 0 in out.blacklists[v] for v in correct)
                stats["agreements"] += ok
        else:
            stats["assumption_violations"] += 1
            ok = not faulty_agreement and not false_blacklist
        if k < n_i / 2 and n_cb == n_i and not out.assumptions_ok:
            ok = False
        if not ok:
            stats["violations"].append((n_cb, nodes, tuple(b.value for b in bs)))
    return stats
