"""Hardware oscillator simulation and logical-clock arithmetic.

Hardware time handed to the protocol layer is expressed in microsecond units
at DCO-tick resolution (one tick = 1e6 / 524288 us, roughly 1.9 us).  The raw
DCO runs with a large multiplicative drift which is compensated against the
stable crystal, exactly like the timer-A / timer-B pair on an MSP430.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

CRYSTAL_HZ = 512
DCO_HZ = 524288
TICK_US = 1e6 / DCO_HZ
# 4 timer-A ticks correspond to 4096 timer-B ticks
DCO_PER_CRYSTAL = DCO_HZ // CRYSTAL_HZ

MAX_DCO_DRIFT = 0.2


class ClockError(ValueError):
    """Raised on degenerate clock arithmetic (stalled DCO, duplicate timestamps)."""


def constant_drift(factor: float) -> Callable[[float], float]:
    def drift(t_us: float) -> float:
        return factor

    drift.factor = factor  # type: ignore[attr-defined]
    return drift


def sinusoidal_drift(mean: float, amplitude: float, period_us: float,
                     phase: float = 0.0) -> Callable[[float], float]:
    """Slow temperature-like wander of the DCO around ``mean``."""
    if abs(mean - 1.0) + abs(amplitude) > MAX_DCO_DRIFT:
        raise ValueError("drift model leaves the +-20% envelope")

    def drift(t_us: float) -> float:
        return mean + amplitude * math.sin(2 * math.pi * t_us / period_us + phase)

    return drift


@dataclass
class HardwareClock:
    crystal_freq: float = CRYSTAL_HZ
    dco_freq: float = DCO_HZ
    crystal_ppm_error: float = 0.0
    dco_drift_fn: Callable[[float], float] = field(default_factory=lambda: constant_drift(1.0))
    hw_ticks: int = 0
    crystal_ticks: int = 0
    true_time_us: float = 0.0
    # exact (unfloored) accumulations backing the integer counters
    _dco_exact: float = 0.0
    _crystal_exact: float = 0.0

    def compensated_ticks(self) -> int:
        """DCO ticks corrected by the crystal-derived drift factor."""
        if self._dco_exact <= 0.0:
            return 0
        factor = dco_drift_factor(self._crystal_exact * DCO_PER_CRYSTAL, self._dco_exact)
        return int(math.floor(self.hw_ticks * factor + 1e-9))

    def read_us(self) -> float:
        """Compensated hardware time in microseconds (tick resolution)."""
        return self.compensated_ticks() * TICK_US


def advance(clock: HardwareClock, sim_dt: float) -> int:
    """Advance ``clock`` by ``sim_dt`` microseconds of true time.

    Returns the number of raw DCO ticks elapsed.  The drift function is
    sampled at the midpoint of the interval.
    """
    if sim_dt < 0:
        raise ClockError(f"negative advance {sim_dt}")
    if sim_dt == 0:
        return 0
    drift = clock.dco_drift_fn(clock.true_time_us + sim_dt / 2)
    if not (1 - MAX_DCO_DRIFT - 1e-12 <= drift <= 1 + MAX_DCO_DRIFT + 1e-12):
        raise ClockError(f"DCO drift {drift} outside the +-20% envelope")
    before = clock.hw_ticks
    clock._dco_exact += sim_dt * clock.dco_freq * drift / 1e6
    clock._crystal_exact += sim_dt * clock.crystal_freq * (1 + clock.crystal_ppm_error * 1e-6) / 1e6
    clock.hw_ticks = int(math.floor(clock._dco_exact + 1e-9))
    clock.crystal_ticks = int(math.floor(clock._crystal_exact + 1e-9))
    clock.true_time_us += sim_dt
    return clock.hw_ticks - before


def dco_drift_factor(tb_estimated: float, tb_actual: float) -> float:
    if tb_actual <= 0:
        raise ClockError("timer-B did not advance; DCO stalled")
    return tb_estimated / tb_actual


@dataclass(frozen=True)
class LogicalClock:
    """Piecewise-linear logical clock ``L = base + (h - last_hw) * rate + offset``.

    ``base`` holds the rate-integrated part folded in at the last update and
    ``last_logical`` the full logical value at that instant.
    """

    rate: float = 1.0
    offset: float = 0.0
    base: float = 0.0
    last_hw: float = 0.0

    def __post_init__(self):
        if not self.rate > 0:
            raise ClockError(f"logical rate must be positive, got {self.rate}")

    @property
    def last_logical(self) -> float:
        return self.base + self.offset

    def fold(self, hw_us: float) -> "LogicalClock":
        """Integrate up to ``hw_us`` so a later rate change applies from here on."""
        return replace(self, base=self.base + (hw_us - self.last_hw) * self.rate, last_hw=hw_us)

    def with_rate(self, hw_us: float, rate: float) -> "LogicalClock":
        return replace(self.fold(hw_us), rate=rate)

    def shifted(self, delta: float) -> "LogicalClock":
        return replace(self, offset=self.offset + delta)

    def set_to(self, hw_us: float, value: float) -> "LogicalClock":
        """Jump so that the clock reads ``value`` at hardware time ``hw_us``."""
        return self.shifted(value - logical_now(self, hw_us))


def logical_now(lc: LogicalClock, hw_us: float) -> float:
    return lc.base + (hw_us - lc.last_hw) * lc.rate + lc.offset


@dataclass(frozen=True)
class NeighborSample:
    """A neighbor's clock reading captured at our reception instant.

    ``neighbor_rate`` must be the neighbor's logical rate expressed against
    the *owner's* hardware clock, so that averaging it with the owner's own
    rate is meaningful.
    """

    neighbor_id: int
    neighbor_logical: float
    neighbor_rate: float
    rx_hw_time: float

    def logical_at(self, hw_us: float) -> float:
        return self.neighbor_logical + (hw_us - self.rx_hw_time) * self.neighbor_rate


def average_update(lc: LogicalClock, own_logical: float, samples: Sequence[NeighborSample],
                   now_hw: Optional[float] = None) -> LogicalClock:
    """Neighbor averaging of rate and offset.

    New rate is the mean of the neighbors' rates and our own; the offset moves
    by the mean difference between neighbor clocks and ours.  With ``now_hw``
    the neighbor readings are extrapolated to that instant first.
    """
    if not samples:
        return lc
    ids = [s.neighbor_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ClockError("samples must come from distinct neighbors")
    n = len(samples)
    rate = (sum(s.neighbor_rate for s in samples) + lc.rate) / (n + 1)
    if now_hw is None:
        diffs = sum(s.neighbor_logical - own_logical for s in samples)
    else:
        diffs = sum(s.logical_at(now_hw) - own_logical for s in samples)
    out = lc.shifted(diffs / (n + 1))
    if now_hw is not None:
        out = out.with_rate(now_hw, rate)
    else:
        out = replace(out, rate=rate)
    return out


def relative_rate(sender_logical: float, receiver_hw: float,
                  prev_pair: tuple[float, float]) -> float:
    """Sender logical progress over receiver hardware progress between two receptions."""
    prev_logical, prev_hw = prev_pair
    dh = receiver_hw - prev_hw
    if dh == 0:
        raise ClockError("duplicate reception timestamp")
    return (sender_logical - prev_logical) / dh


def lc_referenced_rate(l_rs: float, l_r: float) -> float:
    if l_r <= 0:
        raise ClockError(f"receiver rate must be positive, got {l_r}")
    return l_rs / l_r


def mean_rate(rates: Iterable[float]) -> float:
    rates = list(rates)
    return sum(rates) / len(rates)
