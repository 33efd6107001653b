"""Gradient time synchronization baseline: periodic beacons and neighbor averaging."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Dict, Optional

from .clock import HardwareClock, NeighborSample, average_update, logical_now
from .engine import Actions, ClockedNode, Message, MsgType, Radio

SEC = 1_000_000.0


@dataclass
class GtspConfig:
    beacon_period: float = 30 * SEC
    jitter: float = 0.05  # fraction of the period

    def __post_init__(self):
        if not self.beacon_period > 0:
            raise ValueError("beacon_period must be positive")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must be in [0, 1)")


@dataclass
class _Sample:
    logical: float
    rx_hw: float
    src_hw: float
    rate: Optional[float] = None


class GtspNode(ClockedNode):
    """Always-listening node that beacons ``(L, l, h)`` once per period."""

    def __init__(self, addr: int, hw: HardwareClock, cfg: Optional[GtspConfig] = None, seed: int = 0):
        super().__init__(addr, hw)
        self.cfg = cfg or GtspConfig()
        self.rng = random.Random(f"gtsp:{seed}:{addr}")
        self.samples: Dict[int, _Sample] = {}
        self.blacklist: set = set()
        self.updates = 0

    def boot(self) -> Actions:
        acts = Actions(radio=Radio.IDLE_LISTEN)
        acts.timer(self.rng.uniform(0, self.cfg.beacon_period), "beacon")
        return acts

    def on_timer(self, tag) -> Actions:
        acts = Actions()
        h = self.hw_now()
        ready = [NeighborSample(j, s.logical, s.rate, s.rx_hw)
                 for j, s in self.samples.items() if s.rate is not None]
        if ready:
            self.lc = average_update(self.lc, logical_now(self.lc, h), ready, now_hw=h)
            self.updates += 1
        acts.send(Message(src=self.addr, msg_type=MsgType.SYNC, degree=len(self.samples)))
        p = self.cfg.beacon_period
        acts.timer(p * self.rng.uniform(1 - self.cfg.jitter, 1 + self.cfg.jitter), "beacon")
        return acts

    def on_frame(self, msg: Message) -> Actions:
        h = self.hw_now()
        prev = self.samples.get(msg.src)
        rate = None
        if prev is not None:
            rate = prev.rate
            if h > prev.rx_hw and msg.hw_time > prev.src_hw:
                # sender logical rate re-expressed against our hardware clock
                rate = msg.rate * (msg.hw_time - prev.src_hw) / (h - prev.rx_hw)
        self.samples[msg.src] = _Sample(msg.logical_time, h, msg.hw_time, rate)
        return Actions()


def gtsp_step(node: GtspNode, event) -> Actions:
    if isinstance(event, Message):
        return node.on_frame(event)
    return node.on_timer(event)
