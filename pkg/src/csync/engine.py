"""Deterministic discrete-event core: event queue, broadcast radio, power accounting.

True simulation time is a float in microseconds.  Events dequeue in
``(fire_time, seq)`` order so that a run is a pure function of its inputs.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import math
import random
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Protocol, Tuple

from .clock import HardwareClock, LogicalClock, advance, logical_now


class SimulationError(RuntimeError):
    """A fatal scenario error: broken causality or an internal protocol bug."""


class MsgType(str, enum.Enum):
    DISCOVERY = "DISCOVERY"
    ELECTION = "ELECTION"
    CONNECTION = "CONNECTION"
    SLOT_CLAIM = "SLOT_CLAIM"
    SLOT_ACK = "SLOT_ACK"
    SYNC = "SYNC"
    BYZ_CONSENSUS = "BYZ_CONSENSUS"


class EventKind(str, enum.Enum):
    FRAME_START = "frame-start"
    FRAME_END = "frame-end"
    TX_ATTEMPT = "tx-attempt"
    TX_END = "tx-end"
    TIMER = "timer"
    FAULT = "fault-activation"
    CONTROL = "scenario-control"


class Radio(str, enum.Enum):
    TX = "TX"
    RX = "RX"
    IDLE_LISTEN = "IDLE_LISTEN"
    SLEEP = "SLEEP"


@dataclass(frozen=True)
class Message:
    src: int
    msg_type: MsgType
    degree: int = 0
    logical_time: float = 0.0
    rate: float = 1.0
    hw_time: float = 0.0
    slot: int = 0
    reference_addr: Optional[int] = None
    auth_token: Optional[bytes] = None
    hop_meta: Dict[str, Any] = field(default_factory=dict, hash=False, compare=False)


@dataclass(order=True)
class SimEvent:
    fire_time: float
    seq: int
    kind: EventKind = field(compare=False)
    node: Optional[int] = field(compare=False, default=None)
    payload: Any = field(compare=False, default=None)


@dataclass
class Topology:
    """Node set, optional positions (m), explicit links and range.

    When ``links`` is given it defines the default (bidirectional) adjacency;
    otherwise adjacency follows ``comm_range`` over ``positions``.  Boosted
    transmissions always use geometry when positions are known.
    """

    nodes: List[int]
    comm_range: float = 30.0
    positions: Dict[int, Tuple[float, float]] = field(default_factory=dict)
    links: Optional[set] = None
    down: set = field(default_factory=set)

    def __post_init__(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("node addresses must be unique")
        self.nodes = sorted(self.nodes)
        if self.links is not None:
            self.links = {frozenset(l) for l in self.links}
            for l in self.links:
                if len(l) != 2 or not l <= set(self.nodes):
                    raise ValueError(f"bad link {sorted(l)}")
        self._cache: Dict[Tuple[int, float], List[int]] = {}

    def distance(self, a: int, b: int) -> Optional[float]:
        if a in self.positions and b in self.positions:
            (xa, ya), (xb, yb) = self.positions[a], self.positions[b]
            return math.hypot(xa - xb, ya - yb)
        return None

    def neighbors(self, a: int) -> List[int]:
        return self.reach(a, 1.0)

    def reach(self, a: int, tx_power_mult: float = 1.0) -> List[int]:
        """Receivers of a frame sent by ``a``, ascending by address."""
        key = (a, tx_power_mult)
        if key not in self._cache:
            out = set()
            if self.links is not None:
                out |= {b for l in self.links if a in l for b in l if b != a}
            elif self.positions:
                out |= {b for b in self.nodes if b != a
                        and self.distance(a, b) <= self.comm_range}
            if tx_power_mult > 1.0 and self.positions:
                out |= {b for b in self.nodes if b != a and self.distance(a, b) is not None
                        and self.distance(a, b) <= self.comm_range * tx_power_mult}
            self._cache[key] = sorted(out)
        return [b for b in self._cache[key] if (a, b) not in self.down]

    def edges(self) -> List[Tuple[int, int]]:
        return sorted({(min(a, b), max(a, b)) for a in self.nodes for b in self.neighbors(a)})

    def is_connected(self) -> bool:
        if not self.nodes:
            return True
        seen, stack = {self.nodes[0]}, [self.nodes[0]]
        while stack:
            for b in self.neighbors(stack.pop()):
                if b not in seen:
                    seen.add(b)
                    stack.append(b)
        return len(seen) == len(self.nodes)


@dataclass
class RadioConfig:
    tx_mw: float = 52.2
    rx_mw: float = 56.4
    sleep_mw: float = 0.003
    bitrate_bps: float = 250_000
    frame_bytes: int = 64
    backoff_unit_us: float = 320.0
    backoff_max_units: int = 8
    max_retries: int = 5
    prop_us_per_100m: float = 0.3
    default_prop_us: float = 0.3

    @property
    def airtime_us(self) -> float:
        return self.frame_bytes * 8 / self.bitrate_bps * 1e6

    @property
    def max_backoff_us(self) -> float:
        return self.backoff_unit_us * self.backoff_max_units

    def power_mw(self, state: Radio) -> float:
        return {Radio.TX: self.tx_mw, Radio.RX: self.rx_mw,
                Radio.IDLE_LISTEN: self.rx_mw, Radio.SLEEP: self.sleep_mw}[state]


@dataclass
class PowerLedger:
    state_durations: Dict[Radio, float] = field(
        default_factory=lambda: {s: 0.0 for s in Radio})

    def energy_uj(self, radio: RadioConfig) -> Dict[Radio, float]:
        return {s: radio.power_mw(s) * d / 1000.0 for s, d in self.state_durations.items()}

    def total_us(self) -> float:
        return sum(self.state_durations.values())

    def copy(self) -> "PowerLedger":
        return PowerLedger(dict(self.state_durations))

    def minus(self, other: "PowerLedger") -> "PowerLedger":
        return PowerLedger({s: self.state_durations[s] - other.state_durations[s] for s in Radio})

    def mean_power_mw(self, radio: RadioConfig) -> float:
        total = self.total_us()
        if total <= 0:
            return 0.0
        return sum(self.energy_uj(radio).values()) * 1000.0 / total

    def radio_on_fraction(self) -> float:
        total = self.total_us()
        return 0.0 if total <= 0 else 1.0 - self.state_durations[Radio.SLEEP] / total


@dataclass
class Actions:
    """Side effects requested by a protocol step, applied by the engine."""

    messages: List[Tuple[float, Message]] = field(default_factory=list)  # (hw delay, msg)
    timers: List[Tuple[float, Any]] = field(default_factory=list)  # (hw delay, tag)
    radio: Optional[Radio] = None
    log: List[Tuple[str, str]] = field(default_factory=list)

    def send(self, msg: Message, delay_hw: float = 0.0):
        self.messages.append((delay_hw, msg))

    def timer(self, delay_hw: float, tag: Any):
        self.timers.append((max(0.0, delay_hw), tag))

    def note(self, kind: str, detail: str = ""):
        self.log.append((kind, detail))

    def extend(self, other: "Actions"):
        self.messages += other.messages
        self.timers += other.timers
        if other.radio is not None:
            self.radio = other.radio
        self.log += other.log


class ProtocolNode(Protocol):
    addr: int
    hw: HardwareClock

    def boot(self) -> Actions: ...

    def on_timer(self, tag: Any) -> Actions: ...

    def on_frame(self, msg: Message) -> Actions: ...

    def stamp(self, msg: Message, airtime_us: float) -> Message: ...


class ClockedNode:
    """Hardware clock plus logical clock, shared by every protocol node."""

    def __init__(self, addr: int, hw: HardwareClock):
        self.addr = addr
        self.hw = hw
        self.lc = LogicalClock()

    def hw_now(self) -> float:
        return self.hw.read_us()

    def now(self) -> float:
        return logical_now(self.lc, self.hw_now())

    def hw_to_true(self, delay_hw: float) -> float:
        return delay_hw / (1.0 + self.hw.crystal_ppm_error * 1e-6)

    def logical_delay(self, target: float) -> float:
        """Hardware delay until the logical clock reads ``target``."""
        return max(0.0, (target - self.now()) / self.lc.rate)

    def stamp(self, msg: Message, airtime_us: float) -> Message:
        # MAC-layer timestamp: value the clock will show when the frame ends
        h = self.hw_now() + airtime_us
        return replace(msg, logical_time=logical_now(self.lc, h) + msg.hop_meta.get("delta", 0.0),
                       rate=self.lc.rate, hw_time=h)


class Trace:
    """Append-only ``t_us,node,event_kind,detail`` records."""

    HEADER = "t_us,node,event_kind,detail"

    def __init__(self, level: str = "events"):
        if level not in ("off", "events", "full"):
            raise ValueError(f"unknown trace level {level!r}")
        self.level = level
        self.lines: List[str] = []

    def emit(self, t: float, node: Optional[int], kind: str, detail: str = "", radio: bool = False):
        if self.level == "off" or (radio and self.level != "full"):
            return
        detail = detail.replace('"', "'")
        if "," in detail:
            detail = f'"{detail}"'
        self.lines.append(f"{t:.3f},{'' if node is None else node},{kind},{detail}")

    def text(self) -> str:
        return "\n".join([self.HEADER] + self.lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.text())


@dataclass
class _Incoming:
    sender: int
    start: float
    end: float
    msg: Message
    corrupt: bool = False


@dataclass
class _NodeRuntime:
    node: Any
    ledger: PowerLedger
    base_radio: Radio = Radio.SLEEP
    tx_until: float = -1.0
    since: float = 0.0
    current: Radio = Radio.SLEEP
    incoming: List[_Incoming] = field(default_factory=list)
    rx_busy_until: float = 0.0
    alive: bool = False


TxFilter = Callable[[int, Message, float], Tuple[Optional[Message], float]]


class Simulator:
    def __init__(self, topology: Topology, radio: Optional[RadioConfig] = None, seed: int = 0,
                 trace: Optional[Trace] = None, tx_filter: Optional[TxFilter] = None,
                 blocked: Optional[Callable[[int, int], bool]] = None):
        self.topology = topology
        self.radio = radio or RadioConfig()
        self.rng = random.Random(f"engine:{seed}")
        self.trace = trace or Trace("off")
        self.tx_filter = tx_filter
        self.blocked = blocked
        self.now = 0.0
        self._queue: List[SimEvent] = []
        self._seq = 0
        self.nodes: Dict[int, _NodeRuntime] = {}
        self.observers: List[Callable[[float], None]] = []
        self.stats = {"tx": 0, "collisions": 0, "csma_drops": 0, "delivered": 0}

    # -- queue ---------------------------------------------------------
    def schedule(self, event: SimEvent) -> SimEvent:
        if event.fire_time < self.now:
            raise SimulationError(f"event at {event.fire_time} scheduled in the past (now={self.now})")
        heapq.heappush(self._queue, event)
        return event

    def at(self, t: float, kind: EventKind, node: Optional[int] = None, payload: Any = None) -> SimEvent:
        self._seq += 1
        return self.schedule(SimEvent(t, self._seq, kind, node, payload))

    # -- nodes ---------------------------------------------------------
    def add_node(self, node: Any, boot_time: float = 0.0):
        if node.addr not in self.topology.nodes:
            raise SimulationError(f"node {node.addr} not in topology")
        self.nodes[node.addr] = _NodeRuntime(node=node, ledger=PowerLedger())
        self.at(boot_time, EventKind.CONTROL, node.addr, ("boot",))

    def _sync_clock(self, rt: _NodeRuntime):
        hw = rt.node.hw
        dt = self.now - hw.true_time_us
        # float residue from summing advances can leave us a hair ahead
        if dt > 0:
            advance(hw, dt)

    def _switch(self, rt: _NodeRuntime, state: Radio):
        rt.ledger.state_durations[rt.current] += self.now - rt.since
        rt.since = self.now
        rt.current = state

    def set_radio_state(self, addr: int, state: Radio):
        rt = self.nodes[addr]
        if state not in (Radio.IDLE_LISTEN, Radio.SLEEP):
            raise SimulationError(f"base radio state must be IDLE_LISTEN or SLEEP, got {state}")
        rt.base_radio = state
        if rt.tx_until <= self.now:
            self._switch(rt, state)

    def listening(self, rt: _NodeRuntime) -> bool:
        return rt.alive and rt.current == Radio.IDLE_LISTEN and rt.tx_until <= self.now

    def kill(self, addr: int):
        """Fail-stop: silence the node permanently."""
        rt = self.nodes[addr]
        rt.alive = False
        rt.base_radio = Radio.SLEEP
        self._switch(rt, Radio.SLEEP)
        self.trace.emit(self.now, addr, "fail-stop")

    # -- effects -------------------------------------------------------
    def _apply(self, addr: int, actions: Actions):
        rt = self.nodes[addr]
        for kind, detail in actions.log:
            self.trace.emit(self.now, addr, kind, detail)
        if not rt.alive:
            return
        if actions.radio is not None:
            self.set_radio_state(addr, actions.radio)
        for delay_hw, tag in actions.timers:
            self.at(self.now + rt.node.hw_to_true(delay_hw), EventKind.TIMER, addr, tag)
        for delay_hw, msg in actions.messages:
            self.at(self.now + rt.node.hw_to_true(delay_hw), EventKind.TX_ATTEMPT, addr, (msg, 0))

    def _prop(self, a: int, b: int) -> float:
        d = self.topology.distance(a, b)
        if d is None:
            return self.radio.default_prop_us
        return self.radio.prop_us_per_100m * d / 100.0

    def _channel_busy(self, rt: _NodeRuntime) -> bool:
        if rt.tx_until > self.now:
            return True
        return any(f.start <= self.now < f.end for f in rt.incoming)

    def broadcast(self, src: int, msg: Message, tx_power_mult: float = 1.0) -> List[SimEvent]:
        """Put ``msg`` on the air now; returns the scheduled frame-start events."""
        rt = self.nodes[src]
        air = self.radio.airtime_us
        self._switch(rt, Radio.TX)
        rt.tx_until = self.now + air
        self.at(self.now + air, EventKind.TX_END, src)
        self.stats["tx"] += 1
        self.trace.emit(self.now, src, "tx", f"{msg.msg_type.value}", radio=True)
        out = []
        for dst in self.topology.reach(src, tx_power_mult):
            if dst not in self.nodes:
                continue
            start = self.now + self._prop(src, dst)
            out.append(self.at(start, EventKind.FRAME_START, dst,
                               _Incoming(src, start, start + air, msg)))
        return out

    def _tx_attempt(self, addr: int, payload):
        msg, tries = payload
        rt = self.nodes[addr]
        if not rt.alive:
            return
        if self._channel_busy(rt):
            if tries >= self.radio.max_retries:
                self.stats["csma_drops"] += 1
                self.trace.emit(self.now, addr, "csma-drop", msg.msg_type.value)
                return
            units = self.rng.randint(1, self.radio.backoff_max_units)
            self.at(self.now + units * self.radio.backoff_unit_us, EventKind.TX_ATTEMPT, addr,
                    (msg, tries + 1))
            return
        mult = 1.0
        self._sync_clock(rt)
        msg = rt.node.stamp(msg, self.radio.airtime_us)
        if self.tx_filter is not None:
            msg, mult = self.tx_filter(addr, msg, self.now)
            if msg is None:
                self.trace.emit(self.now, addr, "tx-suppressed", payload[0].msg_type.value)
                return
        self.broadcast(addr, msg, mult)

    def _frame_start(self, addr: int, frame: _Incoming):
        rt = self.nodes[addr]
        rt.incoming = [f for f in rt.incoming if f.end > self.now]
        if not self.listening(rt):
            return
        for other in rt.incoming:
            if other.end > frame.start:
                if not other.corrupt:
                    self.stats["collisions"] += 1
                other.corrupt = True
                frame.corrupt = True
        rt.incoming.append(frame)
        self.at(frame.end, EventKind.FRAME_END, addr, frame)

    def _frame_end(self, addr: int, frame: _Incoming):
        rt = self.nodes[addr]
        carved = frame.end - max(frame.start, rt.rx_busy_until)
        if carved > 0:
            rt.ledger.state_durations[Radio.RX] += carved
            rt.rx_busy_until = frame.end
        if frame.corrupt or not self.listening(rt):
            self.trace.emit(self.now, addr, "rx-lost", f"{frame.sender}", radio=True)
            return
        if self.blocked is not None and self.blocked(addr, frame.sender):
            return
        self.stats["delivered"] += 1
        self.trace.emit(self.now, addr, "rx", f"{frame.sender}:{frame.msg.msg_type.value}", radio=True)
        self._sync_clock(rt)
        self._apply(addr, rt.node.on_frame(frame.msg))

    def _tx_end(self, addr: int):
        rt = self.nodes[addr]
        if rt.tx_until <= self.now + 1e-9:
            self._switch(rt, rt.base_radio if rt.alive else Radio.SLEEP)

    # -- loop ----------------------------------------------------------
    def step(self) -> bool:
        if not self._queue:
            return False
        ev = heapq.heappop(self._queue)
        self.now = ev.fire_time
        rt = self.nodes.get(ev.node) if ev.node is not None else None
        if ev.kind is EventKind.TIMER:
            if rt.alive:
                self._sync_clock(rt)
                self._apply(ev.node, rt.node.on_timer(ev.payload))
        elif ev.kind is EventKind.FRAME_START:
            self._frame_start(ev.node, ev.payload)
        elif ev.kind is EventKind.FRAME_END:
            self._frame_end(ev.node, ev.payload)
        elif ev.kind is EventKind.TX_ATTEMPT:
            self._tx_attempt(ev.node, ev.payload)
        elif ev.kind is EventKind.TX_END:
            self._tx_end(ev.node)
        elif ev.kind in (EventKind.CONTROL, EventKind.FAULT):
            self._control(ev)
        for obs in self.observers:
            obs(self.now)
        return True

    def _control(self, ev: SimEvent):
        action = ev.payload[0]
        if action == "boot":
            rt = self.nodes[ev.node]
            rt.alive = True
            self._sync_clock(rt)
            self.trace.emit(self.now, ev.node, "boot")
            self._apply(ev.node, rt.node.boot())
        elif action == "kill":
            self.kill(ev.node)
        elif action == "call":
            ev.payload[1](self)

    def call_at(self, t: float, fn: Callable[["Simulator"], None]):
        self.at(t, EventKind.CONTROL, None, ("call", fn))

    def run_until(self, t_end: float) -> Trace:
        while self._queue and self._queue[0].fire_time <= t_end:
            self.step()
        self.now = max(self.now, t_end)
        for rt in self.nodes.values():
            self._switch(rt, rt.current)
            if rt.alive:
                self._sync_clock(rt)
        return self.trace

    def ledger(self, addr: int) -> PowerLedger:
        rt = self.nodes[addr]
        led = rt.ledger.copy()
        led.state_durations[rt.current] += self.now - rt.since
        # carved RX time came out of listening
        led.state_durations[Radio.IDLE_LISTEN] -= led.state_durations[Radio.RX]
        if led.state_durations[Radio.IDLE_LISTEN] < 0:
            led.state_durations[Radio.SLEEP] += led.state_durations[Radio.IDLE_LISTEN]
            led.state_durations[Radio.IDLE_LISTEN] = 0.0
        return led
