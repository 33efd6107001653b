"""Clustered synchronization: clustering phase, consensus phase, node state machine."""

from __future__ import annotations

import enum
import itertools
import random
from dataclasses import dataclass, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

from .clock import HardwareClock, LogicalClock, NeighborSample, average_update, logical_now
from .engine import Actions, ClockedNode, Message, MsgType, Radio
from .resilience import (ByzantineMsg, ClusterView, ConsensusTally, cb_token, handle_byzantine,
                         verify_cb_token)


class Role(str, enum.Enum):
    CM = "CM"
    CH = "CH"
    CB = "CB"
    CBH = "CBH"


class State(str, enum.Enum):
    DISCOVERY = "DISCOVERY"
    ELECTION_REVELATION = "ELECTION_REVELATION"
    ELECTION_DECLARATION = "ELECTION_DECLARATION"
    CONNECTION_REVELATION = "CONNECTION_REVELATION"
    CONNECTION_DECLARATION = "CONNECTION_DECLARATION"
    CONSENSUS_CONVERGENCE = "CONSENSUS_CONVERGENCE"
    CONSENSUS_SYNCHRONIZATION = "CONSENSUS_SYNCHRONIZATION"
    IDLE = "IDLE"


MS = 1000.0
SEC = 1_000_000.0


@dataclass
class ProtocolConfig:
    st_interval: float = 5 * SEC
    sync_threshold: float = 2560.0
    max_slots: int = 10
    max_count: int = 10
    slot_duration: float = 300 * MS
    idle_slots: int = 10
    discovery_period: float = 500 * MS
    discovery_min_rounds: int = 3
    discovery_timeout: float = 20 * SEC
    rate_threshold: float = 1e-4
    announce_listen: float = 1 * SEC
    cluster_window: float = 1.5 * SEC
    byz_threshold: float = 500.0
    byz_repeat: int = 1
    miss_repeat: int = 3
    airtime_us: float = 2048.0
    max_backoff_us: float = 2560.0

    def __post_init__(self):
        for name in ("st_interval", "sync_threshold", "max_slots", "max_count", "slot_duration",
                     "idle_slots", "discovery_period", "discovery_min_rounds", "discovery_timeout",
                     "rate_threshold", "announce_listen", "cluster_window", "byz_threshold",
                     "byz_repeat", "miss_repeat"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.cluster_window >= self.st_interval:
            raise ValueError("cluster_window must fit inside one ST interval")
        if self.slot_duration < 200 * MS:
            raise ValueError("slot_duration too short for relay, broadcast and consensus")

    @property
    def round_len(self) -> float:
        return (self.max_slots + self.idle_slots) * self.slot_duration

    @property
    def two_tx(self) -> float:
        return 2 * (self.airtime_us + self.max_backoff_us)

    @property
    def convergence_len(self) -> float:
        return self.max_slots * self.slot_duration


# -- pure election / slot functions -----------------------------------------

Key = Tuple[int, int]  # (degree, addr)


def elect_ch(own: Key, rivals: Iterable[Key]) -> Role:
    """CH iff ``own`` beats every rival on (degree, addr)."""
    rivals = list(rivals)
    if not rivals:
        return Role.CH
    return Role.CH if own > max(rivals) else Role.CM


def elect_cb(ch_neighbors: Iterable[int]) -> Tuple[Role, Tuple[int, ...]]:
    chs = tuple(sorted(set(ch_neighbors)))
    return (Role.CB, chs) if len(chs) >= 2 else (Role.CM, chs)


def cb_pairs(chs: Sequence[int]) -> List[Tuple[int, int]]:
    return [tuple(sorted(p)) for p in itertools.combinations(sorted(chs), 2)]


def elect_cbh(candidates: Iterable[Key]) -> Optional[int]:
    cands = list(candidates)
    if not cands:
        return None
    return max(cands)[1]


def claim_now(k: int, ch_neighbor_count: int, neighbor_slots: Iterable[int], max_slots: int) -> bool:
    """Whether an unclaimed CH takes slot ``k`` of the convergence window."""
    if k == 1 and ch_neighbor_count <= 1:
        return True
    if k >= max_slots:
        return True
    return any(s < k for s in neighbor_slots)


def assign_slot(ch_neighbor_count: int, received_claims: Iterable[Tuple[int, int]],
                max_slots: int) -> int:
    """Slot a CH settles on given every claim its neighbors made before it.

    Edge CHs (at most one CH neighbor) go first; the others sit one slot after
    their earliest neighbor, clamped to ``max_slots``.
    """
    if ch_neighbor_count <= 1:
        return 1
    slots = [s for _, s in received_claims]
    for k in range(1, max_slots + 1):
        if claim_now(k, ch_neighbor_count, slots, max_slots):
            return k
    return max_slots


def ack_slot(claims: Iterable[int]) -> int:
    """A bridge hearing several claims acknowledges the highest."""
    return max(claims)


def elect_local_center(own: Tuple[int, int, int], peer_claims: Iterable[Tuple[int, int, int]]) -> bool:
    """``own`` and each peer are ``(ch_neighbor_count, addr, slot)``.

    A CH is a local center when no neighboring CH sits in a strictly later
    convergence slot; equal slots transmit in the same synchronization slot
    and cannot feed each other, so both stay centers.
    """
    my_slot = own[2]
    return all(p[2] <= my_slot for p in peer_claims)


def mirror_slot(slot: int, max_slots: int) -> int:
    if not 1 <= slot <= max_slots:
        raise ValueError(f"slot {slot} outside [1, {max_slots}]")
    return max_slots - slot


def upstream_ch(ch_slots: Dict[int, int]) -> Optional[int]:
    """A bridge takes time from its CH with the latest slot (ties: higher address)."""
    if not ch_slots:
        return None
    return max(ch_slots, key=lambda c: (ch_slots[c], c))


def downstream_chs(ch_slots: Dict[int, int]) -> List[int]:
    up = upstream_ch(ch_slots)
    if up is None:
        return []
    return sorted(c for c, s in ch_slots.items() if s < ch_slots[up])


@dataclass(frozen=True)
class Relay:
    value: float  # sender's logical time at our reception
    rx_hw: float
    rate: Optional[float]  # sender logical progress per our hardware unit
    hops: int
    lc: int
    src: Optional[int] = None


def consensus_sync_round(lc: LogicalClock, hw_now: float, relays: Sequence[Relay]) -> LogicalClock:
    """Adopt the (averaged) LC-referenced time and rate carried by ``relays``.

    Each relay value is carried forward to ``hw_now``; rates from several
    upstream paths are averaged.
    """
    if not relays:
        return lc
    rates = [r.rate for r in relays if r.rate is not None]
    vals = [r.value + (hw_now - r.rx_hw) * (r.rate if r.rate is not None else lc.rate)
            for r in relays]
    out = lc
    if rates:
        out = out.with_rate(hw_now, sum(rates) / len(rates))
    return out.set_to(hw_now, sum(vals) / len(vals))


def greedy_clusters(adj: Dict[int, Set[int]]) -> Dict[int, Optional[int]]:
    """Reference clustering: CH iff no higher-(degree, addr) neighbor is CH.

    Returns node -> its CH (itself for a CH).
    """
    key = {v: (len(adj[v]), v) for v in adj}
    head: Dict[int, Optional[int]] = {}
    for v in sorted(adj, key=lambda u: key[u], reverse=True):
        chs = [u for u in adj[v] if head.get(u) == u]
        head[v] = max(chs, key=lambda u: key[u]) if chs else v
    return head


# -- node ---------------------------------------------------------------------

@dataclass
class _Nbr:
    logical: float
    rx_hw: float
    src_hw: float
    rate: Optional[float] = None
    count: int = 1


class CsyncNode(ClockedNode):
    """One sensor node running the clustered protocol.

    All protocol timing is derived from the node's own logical clock.  Timer
    tags carry the current epoch so timers left over from an abandoned phase
    are ignored.
    """

    def __init__(self, addr: int, hw: HardwareClock, cfg: Optional[ProtocolConfig] = None,
                 seed: int = 0, faulty: bool = False):
        super().__init__(addr, hw)
        self.cfg = cfg or ProtocolConfig()
        self.rng = random.Random(f"csync:{seed}:{addr}")
        self.faulty = faulty
        self.epoch = 0
        self.phase = 0
        self.blacklist: Set[int] = set()
        self.clustered_at: List[float] = []  # true time each clustering phase ended
        self.first_idle: Optional[float] = None
        self._reset_phase()

    # -- bookkeeping ---------------------------------------------------
    def _reset_phase(self):
        self.state = State.DISCOVERY
        self.role = Role.CM
        self.is_lc = False
        self.degree = 0
        self.nbrs: Dict[int, _Nbr] = {}
        self.last_new_hw = self.hw_now()
        self.disc_start_hw = self.hw_now()
        self.t0: Optional[float] = None
        self.origin: Optional[int] = None
        self.last_announce_hw = -1e18
        self.repush_pending = False
        self.heard_lists: Dict[int, FrozenSet[int]] = {}
        self.sym: Set[int] = set()
        self.nbr_degree: Dict[int, int] = {}
        self.declared: Dict[int, Role] = {}
        self.decided = False
        self.my_ch: Optional[int] = None
        self.ch_list: Tuple[int, ...] = ()
        self.nbr_info: Dict[int, Tuple[Role, Optional[int], Tuple[int, ...]]] = {}
        self.cb_claims: Dict[int, Set[Tuple[int, int]]] = {}
        self.ch_nbrs: Set[int] = set()
        self.cluster_cbs: Dict[int, FrozenSet[int]] = {}
        self.cbh_pairs: Set[Tuple[int, int]] = set()
        self.pair_cbh: Dict[Tuple[int, int], int] = {}
        self.slot: Optional[int] = None
        self.known_slots: Dict[int, Tuple[int, int]] = {}
        self.heard_claims: Dict[int, Tuple[int, int]] = {}
        self.ack_pending = False
        self.ch_slot: Optional[int] = None
        self.upstream: Optional[int] = None
        self.downstream: List[int] = []
        self.consensus_count = 0
        self.syncs = 0
        self.hops: Optional[int] = None
        self.lc_ref: Optional[int] = None
        self.pairs: Dict[int, Tuple[float, float]] = {}
        self.sync_src: Optional[int] = None
        self.relays: List[Relay] = []
        self.round = -1
        self.trusted: Optional[LogicalClock] = None
        self.heard_ok: Set[int] = set()
        self.seen: Set[Tuple[str, int]] = set()
        self.violations: Dict[Tuple[str, int], str] = {}
        self.streaks: Dict[Tuple[str, int], int] = {}
        self.tallies: Dict[Tuple[int, int, int], ConsensusTally] = {}
        self.byz_active_until = -1e18
        self.open_windows = 0

    def _tag(self, *parts):
        return (self.epoch,) + parts

    def _at(self, acts: Actions, target_logical: float, *tag):
        acts.timer(self.logical_delay(target_logical), self._tag(*tag))

    def _after(self, acts: Actions, delay_hw: float, *tag):
        acts.timer(delay_hw, self._tag(*tag))

    def _set_state(self, acts: Actions, state: State):
        if state is not self.state:
            self.state = state
            acts.note("state", state.value)

    def _j(self, lo: float, hi: float) -> float:
        return self.rng.uniform(lo, hi)

    def _msg(self, mtype: MsgType, **meta) -> Message:
        return Message(src=self.addr, msg_type=mtype, degree=self.degree,
                       slot=self.slot or 0, hop_meta=meta)

    def stamp(self, msg: Message, airtime_us: float) -> Message:
        out = super().stamp(msg, airtime_us)
        if "abs" in msg.hop_meta:
            norm, scale = msg.hop_meta["abs"]
            out = replace(out, logical_time=norm + out.hw_time * scale, rate=scale)
        return out

    @property
    def clusters(self) -> Set[int]:
        if self.role is Role.CH:
            return {self.addr}
        if self.role in (Role.CB, Role.CBH):
            return set(self.ch_list)
        return {self.my_ch} if self.my_ch is not None else set()

    def t(self, offset: float) -> float:
        return self.t0 + offset

    # -- entry points --------------------------------------------------
    def boot(self) -> Actions:
        acts = Actions(radio=Radio.IDLE_LISTEN)
        self.disc_start_hw = self.hw_now()
        self.last_new_hw = self.disc_start_hw
        acts.note("state", State.DISCOVERY.value)
        self._after(acts, self._j(0, self.cfg.discovery_period), "beacon")
        return acts

    def on_timer(self, tag) -> Actions:
        acts = Actions()
        if not isinstance(tag, tuple) or tag[0] != self.epoch:
            return acts
        name, args = tag[1], tag[2:]
        getattr(self, f"_t_{name}")(acts, *args)
        return acts

    def on_frame(self, msg: Message) -> Actions:
        acts = Actions()
        if msg.src in self.blacklist:
            return acts
        handler = getattr(self, f"_rx_{msg.msg_type.value.lower()}")
        try:
            handler(acts, msg)
        except (KeyError, TypeError, ValueError) as exc:
            acts.note("malformed", f"{msg.src}:{msg.msg_type.value}:{exc}")
        return acts

    # -- discovery -----------------------------------------------------
    def _samples(self, h: float) -> List[NeighborSample]:
        out = []
        for j, n in self.nbrs.items():
            if j in self.blacklist:
                continue
            out.append(NeighborSample(j, n.logical, n.rate if n.rate is not None else self.lc.rate,
                                      n.rx_hw))
        return out

    def _gate_open(self, h: float) -> bool:
        cfg = self.cfg
        live = [j for j in self.nbrs if j not in self.blacklist]
        if not live or h - self.last_new_hw < 2 * cfg.discovery_period:
            return False
        own = logical_now(self.lc, h)
        for j in live:
            n = self.nbrs[j]
            if n.count < cfg.discovery_min_rounds or n.rate is None:
                return False
            if abs(n.logical + (h - n.rx_hw) * n.rate - own) > cfg.sync_threshold:
                return False
            if abs(n.rate - self.lc.rate) > cfg.rate_threshold:
                return False
        return True

    def _t_beacon(self, acts: Actions):
        if self.state is not State.DISCOVERY or self.t0 is not None:
            return
        h = self.hw_now()
        samples = self._samples(h)
        if samples:
            self.lc = average_update(self.lc, logical_now(self.lc, h), samples, now_hw=h)
        if self._gate_open(h) or h - self.disc_start_hw > self.cfg.discovery_timeout:
            acts.note("announce", "gate" if self._gate_open(h) else "timeout")
            self._adopt_t0(acts, logical_now(self.lc, h) + self.cfg.st_interval, self.addr)
            return
        acts.send(self._msg(MsgType.DISCOVERY))
        self._after(acts, self.cfg.discovery_period * self._j(0.9, 1.1), "beacon")

    def _adopt_t0(self, acts: Actions, t0: float, origin: int):
        self.epoch += 1
        self.t0, self.origin = t0, origin
        self.last_announce_hw = self.hw_now()
        self.repush_pending = False
        # second copy covers a hidden-terminal loss of the first
        for lo, hi in ((1 * MS, 30 * MS), (100 * MS, 300 * MS)):
            acts.send(self._msg(MsgType.DISCOVERY, t0=t0, origin=origin), self._j(lo, hi))
        self._after(acts, self.cfg.announce_listen, "settle")
        self._at(acts, t0, "er")

    def _t_repush(self, acts: Actions):
        self.repush_pending = False
        self.last_announce_hw = self.hw_now()
        acts.send(self._msg(MsgType.DISCOVERY, t0=self.t0, origin=self.origin))

    def _t_settle(self, acts: Actions):
        if self.state is State.DISCOVERY:
            acts.radio = Radio.SLEEP

    def _rx_discovery(self, acts: Actions, msg: Message):
        h = self.hw_now()
        meta = msg.hop_meta
        if self.state is not State.DISCOVERY:
            return
        if "t0" in meta:
            if self.t0 is None or meta["origin"] > self.origin:
                self.lc = self.lc.set_to(h, msg.logical_time)
                self._adopt_t0(acts, meta["t0"], meta["origin"])
            elif meta["origin"] < self.origin and not self.repush_pending:
                # a competing, weaker announcement: push ours over it, rate limited
                self.repush_pending = True
                wait = max(0.0, self.last_announce_hw + 50 * MS - h)
                self._after(acts, wait + self._j(1 * MS, 30 * MS), "repush")
            return
        prev = self.nbrs.get(msg.src)
        if prev is None:
            self.nbrs[msg.src] = _Nbr(msg.logical_time, h, msg.hw_time)
            self.degree = len(self.nbrs)
            self.last_new_hw = h
            acts.note("neighbor", str(msg.src))
        else:
            rate = prev.rate
            if h > prev.rx_hw and msg.hw_time > prev.src_hw:
                rate = msg.rate * (msg.hw_time - prev.src_hw) / (h - prev.rx_hw)
            self.nbrs[msg.src] = _Nbr(msg.logical_time, h, msg.hw_time, rate, prev.count + 1)
        if self.t0 is not None and h - self.last_announce_hw > 200 * MS:
            # a neighbor still beaconing missed the announcement
            self.last_announce_hw = h
            acts.send(self._msg(MsgType.DISCOVERY, t0=self.t0, origin=self.origin),
                      self._j(1 * MS, 30 * MS))

    # -- election revelation ------------------------------------------
    def _open_window(self, acts: Actions, state: State, close_after: float):
        self._set_state(acts, state)
        acts.radio = Radio.IDLE_LISTEN
        self._after(acts, close_after, "sleep", state.value)

    def _t_sleep(self, acts: Actions, state_name: str):
        if self.state.value == state_name:
            acts.radio = Radio.SLEEP

    def _t_er(self, acts: Actions):
        self.sym = set()
        self._open_window(acts, State.ELECTION_REVELATION, self.cfg.cluster_window)
        # lists are built at send time so later copies carry neighbors found meanwhile
        for lo, hi in ((10 * MS, 300 * MS), (310 * MS, 600 * MS), (610 * MS, 900 * MS)):
            self._after(acts, self._j(lo, hi), "er_list")
        self._after(acts, 920 * MS, "er_degree")
        st = self.cfg.st_interval
        for i, name in enumerate(("ed", "cr", "cd", "cc"), start=1):
            self._at(acts, self.t(i * st), name)

    def _t_er_list(self, acts: Actions):
        nbrs = tuple(sorted(j for j in self.nbrs if j not in self.blacklist))
        acts.send(self._msg(MsgType.ELECTION, phase="ER", nbrs=nbrs))

    def _t_er_degree(self, acts: Actions):
        self.sym = {j for j, lst in self.heard_lists.items()
                    if self.addr in lst and j in self.nbrs and j not in self.blacklist}
        self.degree = len(self.sym)
        for lo, hi in ((10 * MS, 250 * MS), (260 * MS, 500 * MS)):
            acts.send(self._msg(MsgType.ELECTION, phase="DEG"), self._j(lo, hi))

    def _rx_election(self, acts: Actions, msg: Message):
        phase = msg.hop_meta["phase"]
        if phase == "ER" and self.state is State.ELECTION_REVELATION:
            self.heard_lists[msg.src] = frozenset(msg.hop_meta["nbrs"])
            if msg.src not in self.nbrs and msg.src not in self.blacklist:
                # missed during discovery; no clock samples, but a neighbor all the same
                self.nbrs[msg.src] = _Nbr(msg.logical_time, self.hw_now(), msg.hw_time)
                acts.note("neighbor", str(msg.src))
        elif phase == "DEG" and self.state is State.ELECTION_REVELATION:
            self.nbr_degree[msg.src] = msg.degree
        elif phase == "ED" and self.state is State.ELECTION_DECLARATION and msg.src in self.sym:
            self.nbr_degree.setdefault(msg.src, msg.degree)
            self.declared[msg.src] = Role(msg.hop_meta["role"])
            self._ed_eval(acts)

    # -- election declaration -----------------------------------------
    def _key(self, j: int) -> Key:
        return (self.nbr_degree.get(j, 0), j)

    def _t_ed(self, acts: Actions):
        self._open_window(acts, State.ELECTION_DECLARATION, self.cfg.cluster_window)
        self._after(acts, self._j(5 * MS, 20 * MS), "ed_eval", False)
        self._after(acts, self.cfg.cluster_window / 2, "ed_eval", True)
        self._after(acts, self.cfg.cluster_window - 100 * MS, "ed_final")

    def _t_ed_eval(self, acts: Actions, late: bool = False):
        self._ed_eval(acts, late)

    def _declare(self, acts: Actions, role: Role):
        self.decided = True
        self.role = role
        acts.note("role", role.value)
        # hidden neighbors decide at similar times; spread copies to dodge collisions
        for lo, hi in ((1 * MS, 60 * MS), (150 * MS, 450 * MS), (500 * MS, 900 * MS)):
            acts.send(self._msg(MsgType.ELECTION, phase="ED", role=role.value), self._j(lo, hi))

    def _ed_eval(self, acts: Actions, late: bool = True):
        if self.decided or self.state is not State.ELECTION_DECLARATION:
            return
        if any(r is Role.CH for r in self.declared.values()):
            self._declare(acts, Role.CM)
            return
        open_ = [j for j in self.sym if self.declared.get(j) is not Role.CM]
        if not late and any(j not in self.nbr_degree for j in open_):
            # a lost DEG frame; wait for that neighbor's own declaration
            return
        rivals = [self._key(j) for j in open_]
        if elect_ch((self.degree, self.addr), rivals) is Role.CH:
            self._declare(acts, Role.CH)

    def _t_ed_final(self, acts: Actions):
        if not self.decided:
            chs = [j for j, r in self.declared.items() if r is Role.CH]
            self._declare(acts, Role.CM if chs else Role.CH)
        chs = [j for j, r in self.declared.items() if r is Role.CH and j in self.sym]
        if self.role is Role.CH:
            self.my_ch = self.addr
        else:
            self.my_ch = max(chs, key=self._key) if chs else None
            if self.my_ch is None:
                self.role = Role.CH
                self.my_ch = self.addr

    # -- connection revelation / declaration --------------------------
    def _t_cr(self, acts: Actions):
        self._open_window(acts, State.CONNECTION_REVELATION, self.cfg.cluster_window)
        tokens = {}
        if self.role is not Role.CH:
            chs = [j for j, r in self.declared.items() if r is Role.CH and j in self.sym]
            role, self.ch_list = elect_cb(chs)
            if role is Role.CB:
                self.role = Role.CB
                acts.note("role", "CB")
                tokens = {p: cb_token(p) for p in cb_pairs(self.ch_list)}
        meta = dict(phase="CR", role=self.role.value, ch=self.my_ch, chs=self.ch_list, tokens=tokens)
        for lo, hi in ((10 * MS, 450 * MS), (500 * MS, 950 * MS), (1000 * MS, 1400 * MS)):
            acts.send(self._msg(MsgType.CONNECTION, **meta), self._j(lo, hi))

    def _t_cd(self, acts: Actions):
        self._open_window(acts, State.CONNECTION_DECLARATION, self.cfg.cluster_window)
        if self.role is not Role.CH:
            return
        cbs = frozenset(self.cb_claims)
        self.cluster_cbs[self.addr] = cbs
        cbh = {}
        for other in self.ch_nbrs:
            pair = tuple(sorted((self.addr, other)))
            cands = [(self.nbr_degree.get(c, 0), c) for c, ps in self.cb_claims.items() if pair in ps]
            winner = elect_cbh(cands)
            if winner is not None:
                cbh[pair] = winner
        meta = dict(phase="CD", ch_nbrs=tuple(sorted(self.ch_nbrs)), cbs=tuple(sorted(cbs)), cbh=cbh)
        for lo, hi in ((10 * MS, 450 * MS), (500 * MS, 950 * MS), (1000 * MS, 1400 * MS)):
            acts.send(self._msg(MsgType.CONNECTION, **meta), self._j(lo, hi))

    def _rx_connection(self, acts: Actions, msg: Message):
        meta = msg.hop_meta
        if meta["phase"] == "CR" and self.state is State.CONNECTION_REVELATION:
            role = Role(meta["role"])
            chs = tuple(meta["chs"])
            self.nbr_info[msg.src] = (role, meta["ch"], chs)
            if self.role is Role.CH and role is Role.CB and self.addr in chs:
                ok = {p for p, tok in meta["tokens"].items()
                      if self.addr in p and verify_cb_token(tok, p)}
                if ok:
                    self.cb_claims[msg.src] = ok
                    self.ch_nbrs |= {c for p in ok for c in p if c != self.addr}
                else:
                    acts.note("cb-rejected", str(msg.src))
        elif meta["phase"] == "CD" and self.state is State.CONNECTION_DECLARATION:
            if msg.src in self.clusters:
                self.cluster_cbs[msg.src] = frozenset(meta["cbs"])
                for pair, who in meta["cbh"].items():
                    self.pair_cbh[tuple(pair)] = who
                    if who == self.addr and self.role in (Role.CB, Role.CBH):
                        self.cbh_pairs.add(tuple(pair))
                if self.cbh_pairs and self.role is Role.CB:
                    self.role = Role.CBH
                    acts.note("role", "CBH")

    # -- consensus convergence ----------------------------------------
    def _cc_start(self) -> float:
        return self.t(4 * self.cfg.st_interval)

    def _cc_end(self) -> float:
        return self._cc_start() + self.cfg.convergence_len

    def _t_cc(self, acts: Actions):
        self._set_state(acts, State.CONSENSUS_CONVERGENCE)
        self.clustered_at.append(self.hw.true_time_us)
        cfg = self.cfg
        start = self._cc_start()
        if self.role is Role.CM:
            acts.radio = Radio.SLEEP
            self._at(acts, start + (cfg.max_slots - 1) * cfg.slot_duration - 5 * MS, "cm_final_wake")
        else:
            acts.radio = Radio.IDLE_LISTEN
        if self.role is Role.CH:
            for k in range(1, cfg.max_slots + 1):
                self._at(acts, start + (k - 1) * cfg.slot_duration + self._j(5 * MS, 40 * MS),
                         "cc_slot", k)
            self._at(acts, start + (cfg.max_slots - 1) * cfg.slot_duration + 200 * MS, "cc_final")
        self._at(acts, self._cc_end(), "cc_end")

    def _t_cm_final_wake(self, acts: Actions):
        acts.radio = Radio.IDLE_LISTEN

    def _t_cc_slot(self, acts: Actions, k: int):
        count = len(self.ch_nbrs)
        nslots = [s for s, _ in self.known_slots.values()]
        if self.slot is None and claim_now(k, count, nslots, self.cfg.max_slots):
            self.slot = k
            acts.note("slot", str(k))
        if self.slot is not None and k <= self.slot + 1:
            acts.send(self._msg(MsgType.SLOT_CLAIM, count=count))

    def _t_cc_final(self, acts: Actions):
        if self.slot is None:
            self.slot = self.cfg.max_slots
        peers = [(c, a, s) for a, (s, c) in self.known_slots.items() if a in self.ch_nbrs]
        self.is_lc = elect_local_center((len(self.ch_nbrs), self.addr, self.slot), peers)
        if self.is_lc:
            acts.note("lc", "")
        acts.send(self._msg(MsgType.SLOT_CLAIM, count=len(self.ch_nbrs), final=True, lc=self.is_lc))

    def _rx_slot_claim(self, acts: Actions, msg: Message):
        if msg.hop_meta.get("final") and msg.src == self.my_ch and self.role is Role.CM:
            self.ch_slot = msg.slot
            return
        if self.state is not State.CONSENSUS_CONVERGENCE:
            return
        if self.role in (Role.CB, Role.CBH) and msg.src in self.ch_list:
            self.heard_claims[msg.src] = (msg.slot, msg.hop_meta["count"])
            if not self.ack_pending:
                # two copies, both before the next slot step; hidden bridges collide
                self.ack_pending = True
                self._after(acts, self._j(40 * MS, 130 * MS), "ack", False)
                self._after(acts, self._j(140 * MS, 230 * MS), "ack", True)

    def _t_ack(self, acts: Actions, last: bool = True):
        if last:
            self.ack_pending = False
        if not self.heard_claims:
            return
        slot = ack_slot(s for s, _ in self.heard_claims.values())
        msg = self._msg(MsgType.SLOT_ACK, claims=dict(self.heard_claims))
        acts.send(replace(msg, slot=slot))

    def _rx_slot_ack(self, acts: Actions, msg: Message):
        if self.role is not Role.CH or self.state is not State.CONSENSUS_CONVERGENCE:
            return
        for ch, sc in msg.hop_meta["claims"].items():
            if ch != self.addr and ch in self.ch_nbrs:
                self.known_slots[ch] = tuple(sc)

    def _t_cc_end(self, acts: Actions):
        if self.role in (Role.CB, Role.CBH):
            slots = {c: s for c, (s, _) in self.heard_claims.items()}
            self.upstream = upstream_ch(slots)
            self.downstream = downstream_chs(slots)
        if self.first_idle is None:
            self.first_idle = self.hw.true_time_us
        acts.note("clustered", f"{self.role.value},{self.my_ch},{self.slot or self.ch_slot or 0},{int(self.is_lc)}")
        self._set_state(acts, State.IDLE)
        acts.radio = Radio.SLEEP
        self._start_round(acts, 0)

    # -- consensus synchronization ------------------------------------
    def _round_start(self, r: int) -> float:
        return self._cc_end() + r * self.cfg.round_len

    def _win_start(self, r: int, ch_slot: int) -> float:
        return self._round_start(r) + mirror_slot(ch_slot, self.cfg.max_slots) * self.cfg.slot_duration

    def _slot_of(self, ch: int) -> Optional[int]:
        if ch == self.addr:
            return self.slot
        if ch in self.heard_claims:
            return self.heard_claims[ch][0]
        if ch == self.my_ch:
            return self.ch_slot
        return None

    def _start_round(self, acts: Actions, r: int):
        cfg = self.cfg
        if r >= cfg.max_count:
            self._at(acts, self._round_start(r), "rediscover")
            return
        self._at(acts, self._round_start(r) - 1 * MS, "round", r)

    def _t_round(self, acts: Actions, r: int):
        cfg = self.cfg
        self.round = r
        self.consensus_count = r + 1
        self.seen = set()
        self.violations = {}
        self.heard_ok = set()
        self.relays = []
        self.trusted = None
        guard = 5 * MS
        if self.role is Role.CH:
            ws = self._win_start(r, self.slot)
            self._at(acts, ws - guard, "win_open", r)
            # hidden CHs sharing a slot must not transmit in lockstep
            self._at(acts, ws + self._j(80 * MS, 200 * MS), "ch_send", r)
            self._at(acts, ws + 250 * MS, "win_close", r, ws)
        elif self.role is Role.CM:
            if self.my_ch is not None:
                if self.ch_slot is not None:
                    ws = self._win_start(r, self.ch_slot)
                    self._at(acts, ws - guard, "win_open", r)
                    self._at(acts, ws + 250 * MS, "win_close", r, ws)
                else:
                    # slot unknown: listen through the whole synchronization part
                    ws = self._round_start(r)
                    self._at(acts, ws - guard, "win_open", r)
                    self._at(acts, ws + cfg.convergence_len, "win_close", r, ws + cfg.convergence_len - 250 * MS)
        else:
            if self.upstream is not None:
                ws = self._win_start(r, self._slot_of(self.upstream))
                self._at(acts, ws - guard, "win_open", r)
                self._at(acts, ws + 200 * MS + cfg.two_tx, "mon_up", r, self.upstream)
                self._at(acts, ws + 250 * MS, "win_close", r, ws)
            for x in self.downstream:
                ws = self._win_start(r, self._slot_of(x))
                self._at(acts, ws - guard, "win_open", r)
                pair = tuple(sorted((self.upstream, x)))
                if pair in self.cbh_pairs:
                    self._at(acts, ws + self._j(10 * MS, 60 * MS), "relay", r, x)
                self._at(acts, ws + 200 * MS + cfg.two_tx, "mon_down", r, x)
                self._at(acts, ws + 250 * MS, "win_close", r, ws)
        self._start_round(acts, r + 1)

    def _t_win_open(self, acts: Actions, r: int):
        self.open_windows += 1
        self._set_state(acts, State.CONSENSUS_SYNCHRONIZATION)
        acts.radio = Radio.IDLE_LISTEN

    def _t_win_close(self, acts: Actions, r: int, ws: float):
        if self.byz_active_until > self.now() and self.now() < ws + 280 * MS:
            self._at(acts, min(self.byz_active_until, ws + 280 * MS), "win_close", r, ws)
            return
        self.open_windows = max(0, self.open_windows - 1)
        if self.open_windows == 0:
            self._set_state(acts, State.IDLE)
            acts.radio = Radio.SLEEP

    def _t_rediscover(self, acts: Actions):
        self.epoch += 1
        self.phase += 1
        self._reset_phase()
        acts.radio = Radio.IDLE_LISTEN
        acts.note("state", State.DISCOVERY.value)
        self._after(acts, self._j(0, self.cfg.discovery_period), "beacon")

    def _sync_meta(self, **extra) -> dict:
        meta = dict(hops=self.hops if self.hops is not None else 0, lc=self.lc_ref,
                    t0=self.t0, round=self.round)
        meta.update(extra)
        return meta

    def _t_ch_send(self, acts: Actions, r: int):
        h = self.hw_now()
        if self.is_lc:
            self.hops, self.lc_ref = 0, self.addr
            self.syncs += 1
        elif self.relays:
            # independent LCs free-run; follow only the nearest (then highest) one
            best = min(self.relays, key=lambda x: (x.hops, -x.lc))
            self.lc = consensus_sync_round(self.lc, h, [x for x in self.relays if x.lc == best.lc])
            self.hops, self.lc_ref, self.sync_src = best.hops + 1, best.lc, best.src
            self.syncs += 1
            acts.note("sync", f"{self.hops},{self.lc_ref}")
        acts.send(self._msg(MsgType.SYNC, **self._sync_meta(ch=self.addr)))

    def _t_relay(self, acts: Actions, r: int, x: int):
        if self.lc_ref is None:
            return
        acts.send(replace(self._msg(MsgType.SYNC, **self._sync_meta(relay_to=x)), slot=self._slot_of(x)))

    def _rate_from(self, src: int, value: float, h: float) -> Optional[float]:
        prev = self.pairs.get(src)
        self.pairs[src] = (value, h)
        if prev is None or h <= prev[1]:
            return None
        return (value - prev[0]) / (h - prev[1])

    def _plausible(self, value: float, h: float, ref: Optional[LogicalClock] = None) -> bool:
        ref = ref or self.lc
        return abs(value - logical_now(ref, h)) <= self.cfg.byz_threshold

    def _rx_sync(self, acts: Actions, msg: Message):
        if self.state is State.DISCOVERY:
            self._late_join(acts, msg)
            return
        meta = msg.hop_meta
        h = self.hw_now()
        relay_to = meta.get("relay_to")
        if relay_to is not None:
            if relay_to == self.addr and self.role is Role.CH and meta["lc"] is not None:
                rate = self._rate_from(msg.src, msg.logical_time, h)
                self.relays.append(Relay(msg.logical_time, h, rate, meta["hops"], meta["lc"], msg.src))
            elif (self.role in (Role.CB, Role.CBH) and relay_to in self.downstream
                  and self.syncs > 0 and msg.src != self.addr and meta["lc"] == self.lc_ref):
                if self._plausible(msg.logical_time, h):
                    self.heard_ok.add(msg.src)
                else:
                    self._initiate(acts, suspect=msg.src, cluster=relay_to, ref=self.lc, why="relay")
            return
        src = msg.src
        if self.syncs == 0 or meta.get("lc") != self.lc_ref or self._plausible(msg.logical_time, h):
            self.heard_ok.add(src)
        if self.role is Role.CM and src == self.my_ch:
            self._adopt_sync(acts, msg, h)
            if self.ch_slot is None:
                self.ch_slot = msg.slot
        elif self.role in (Role.CB, Role.CBH) and src == self.upstream:
            pre_synced = self.syncs > 0
            self._adopt_sync(acts, msg, h)
            self.seen.add(("up", src))
            if pre_synced and not self._plausible(msg.logical_time, h, self.trusted):
                self.violations[("up", src)] = "value"
        elif self.role in (Role.CB, Role.CBH) and src in self.downstream:
            self.seen.add(("down", src))
            # a CH may follow another LC; its time is not comparable to ours
            if self.syncs == 0 or meta.get("lc") != self.lc_ref:
                return
            if self._plausible(msg.logical_time, h):
                self.heard_ok.add(src)
            else:
                self._initiate(acts, suspect=src, cluster=src, ref=self.lc, why="down-value")

    def _adopt_sync(self, acts: Actions, msg: Message, h: float):
        pre = self.lc
        if self.syncs == 0 or self._plausible(msg.logical_time, h, pre):
            self.heard_ok.add(msg.src)
        rate = self._rate_from(msg.src, msg.logical_time, h)
        self.trusted = pre
        self.lc = consensus_sync_round(self.lc, h, [Relay(msg.logical_time, h, rate, 0, 0)])
        self.hops = msg.hop_meta["hops"] + 1
        self.lc_ref = msg.hop_meta["lc"]
        self.sync_src = msg.src
        self.syncs += 1

    def _t_mon_up(self, acts: Actions, r: int, ch: int):
        if self.syncs == 0 or ch in self.blacklist:
            return
        missing = ("up", ch) not in self.seen
        value = bool(self.violations.get(("up", ch)))
        if self._persistent(("up", ch), missing, value):
            ref = self.trusted if self.trusted is not None else self.lc
            if not self._agreed(ch):
                self._initiate(acts, suspect=ch, cluster=ch, ref=ref,
                               why="up-missing" if missing else "up-value")

    def _t_mon_down(self, acts: Actions, r: int, ch: int):
        if self.syncs == 0 or ch in self.blacklist:
            return
        if self._persistent(("down", ch), ("down", ch) not in self.seen, False) and not self._agreed(ch):
            self._initiate(acts, suspect=ch, cluster=ch, ref=self.lc, why="down-missing")

    def _persistent(self, key, missing: bool, value: bool) -> bool:
        """True once misses or violations repeat often enough to act on.

        A single lost frame is usually a hidden-terminal collision, so misses
        need ``miss_repeat`` consecutive rounds.
        """
        kind = "miss" if missing else "value" if value else None
        n = self.streaks.get((key, kind), 0) + 1
        self.streaks = {k: v for k, v in self.streaks.items() if k[0] != key}
        if kind is None:
            return False
        self.streaks[(key, kind)] = n
        need = self.cfg.miss_repeat if missing else self.cfg.byz_repeat
        return n >= need

    def _agreed(self, suspect: int) -> bool:
        return any(k[1] == suspect and k[2] == self.round and t.agreed is not None
                   for k, t in self.tallies.items())

    # -- byzantine consensus ------------------------------------------
    def _view(self, cluster: int) -> ClusterView:
        members = {self.addr} if self.role is Role.CH else set()
        for j, (role, ch, chs) in self.nbr_info.items():
            if j in self.sym and (j == cluster or ch == cluster or cluster in chs):
                members.add(j)
        if cluster in self.sym:
            members.add(cluster)
        members.discard(self.addr)
        return ClusterView(self.addr, cluster, self.cluster_cbs.get(cluster, frozenset()),
                           max(1, len(members)), cluster in self.clusters)

    def _tally(self, cluster: int, suspect: int) -> ConsensusTally:
        key = (cluster, suspect, self.round)
        if key not in self.tallies:
            self.tallies[key] = ConsensusTally(self._view(cluster).n_i, self.cfg.byz_threshold)
        return self.tallies[key]

    def _initiate(self, acts: Actions, suspect: int, cluster: int, ref: LogicalClock, why: str = ""):
        key = ("init", suspect)
        if key in self.seen or cluster not in self.clusters:
            return
        self.seen.add(key)
        tally = self._tally(cluster, suspect)
        tally.retransmitted.add(self.addr)
        norm = ref.base + ref.offset - ref.last_hw * ref.rate
        acts.note("byz-init", f"{suspect},{why}")
        self.byz_active_until = self.now() + 120 * MS
        acts.send(Message(src=self.addr, msg_type=MsgType.BYZ_CONSENSUS, reference_addr=self.addr,
                          hop_meta=dict(initiator=self.addr, suspect=suspect, cluster=cluster,
                                        abs=(norm, ref.rate))))

    def _rx_byz_consensus(self, acts: Actions, msg: Message):
        bm = ByzantineMsg.from_frame(msg)
        if bm.cluster not in self.clusters:
            return
        self.byz_active_until = self.now() + 120 * MS
        h = self.hw_now()
        ref = self.trusted if self.trusted is not None else self.lc
        trusted_now = logical_now(ref, h) if self.syncs > 0 else None
        tally = self._tally(bm.cluster, bm.suspect)
        heard = bm.suspect in self.heard_ok or bm.suspect not in self.sym
        d = handle_byzantine(self._view(bm.cluster), bm, tally, h * ref.rate, trusted_now, heard)
        if d.retransmit:
            norm = msg.logical_time - h * ref.rate
            acts.send(Message(src=self.addr, msg_type=MsgType.BYZ_CONSENSUS,
                              reference_addr=bm.reference_addr,
                              hop_meta=dict(initiator=bm.initiator, suspect=bm.suspect,
                                            cluster=bm.cluster, abs=(norm, ref.rate))),
                      self._j(0.5 * MS, 8 * MS))
        if d.adopt is not None:
            # only the suspect's own dependents take the agreed time
            if bm.suspect in (self.sync_src, self.upstream, self.my_ch):
                norm, _ = d.adopt
                self.lc = ref.set_to(h, norm + h * ref.rate)
                self.pairs.pop(bm.suspect, None)
            acts.note("byz-agree", f"{bm.suspect}")
        if d.blacklist is not None and d.blacklist not in self.blacklist:
            self.blacklist.add(d.blacklist)
            acts.note("blacklist", str(d.blacklist))

    # -- late join -----------------------------------------------------
    def _late_join(self, acts: Actions, msg: Message):
        meta = msg.hop_meta
        if "ch" not in meta or meta.get("t0") is None or self.t0 is not None:
            return
        h = self.hw_now()
        self.epoch += 1
        self.t0 = meta["t0"]
        self.role, self.my_ch, self.ch_slot = Role.CM, msg.src, msg.slot
        self.lc = self.lc.set_to(h, msg.logical_time)
        self.pairs[msg.src] = (msg.logical_time, h)
        self.hops, self.lc_ref = meta["hops"] + 1, meta["lc"]
        acts.note("late-join", str(msg.src))
        self._set_state(acts, State.IDLE)
        acts.radio = Radio.SLEEP
        self._start_round(acts, meta["round"] + 1)


def step(node: CsyncNode, event) -> Actions:
    """Advance ``node`` by one event (a frame or a timer tag)."""
    if isinstance(event, Message):
        return node.on_frame(event)
    return node.on_timer(event)
