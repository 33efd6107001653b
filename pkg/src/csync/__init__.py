"""Clustered, fault-resilient time synchronization for wireless sensor networks (simulation)."""

from .clock import HardwareClock, LogicalClock, average_update, logical_now
from .engine import Message, MsgType, Radio, RadioConfig, Simulator, Topology, Trace
from .protocol import CsyncNode, ProtocolConfig, Role, State, mirror_slot
from .gtsp import GtspConfig, GtspNode
from .scenario import Scenario
from .runner import run_scenario

__all__ = ["HardwareClock", "LogicalClock", "average_update", "logical_now", "Message", "MsgType",
           "Radio", "RadioConfig", "Simulator", "Topology", "Trace", "CsyncNode", "ProtocolConfig",
           "Role", "State", "mirror_slot", "GtspConfig", "GtspNode", "Scenario", "run_scenario"]
__version__ = "0.1.0"
