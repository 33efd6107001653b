import sys
from pathlib import Path

import pytest

from csync import scenario as scn
from csync.runner import run_scenario
from csync.scenario import OutputConfig, Scenario

HERE = Path(__file__).parent
ROOT = HERE.parent
SCENARIOS = ROOT / "scenarios"
sys.path.insert(0, str(HERE))


def run_topology(topo, seed=1, duration_s=60, trace="off", **kw):
    s = Scenario(name="t", duration_us=duration_s * 1e6, seed=seed, output=OutputConfig(trace_level=trace), **kw)
    return run_scenario(s, topology=topo)


def load_scenario(name, *overrides):
    s = scn.load(SCENARIOS / f"{name}.scn")
    return scn.apply_overrides(s, list(overrides)) if overrides else s


@pytest.fixture
def scenario_dir():
    return SCENARIOS
