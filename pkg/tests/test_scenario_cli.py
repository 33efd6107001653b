import csv

import pytest
from hypothesis import given, settings, strategies as st

from conftest import SCENARIOS, load_scenario
from csync import scenario as scn
from csync.cli import main
from csync.engine import Topology
from csync.runner import EXIT_ASSUMPTION, EXIT_CONFIG, EXIT_OK
from csync.topology import generate_topology, load_topology, save_topology

CANONICAL = ["dense", "sparse", "full", "chain13", "fault_ch2"]

MINIMAL = """csync_scenario: 1
name: tiny
topology:
  kind: dense
  n: 6
duration_us: 150000000
"""


@pytest.mark.parametrize("name", CANONICAL)
def test_canonical_scenarios_round_trip(name):
    s = load_scenario(name)
    again = scn.loads(scn.dumps(s), base_dir=s.base_dir)
    assert again == s


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), ms=st.integers(2, 20), thr=st.floats(1, 1e4),
       kind=st.sampled_from(["dense", "sparse", "full", "chain13"]))
def test_round_trip_property(seed, ms, thr, kind):
    s = scn.apply_overrides(scn.loads(MINIMAL), [f"seed={seed}", f"protocol_config.max_slots={ms}",
                                                 f"protocol_config.byz_threshold={thr}",
                                                 f"topology.kind={kind}"])
    assert scn.loads(scn.dumps(s)) == s


def test_unknown_key_rejected_with_line():
    text = MINIMAL + "protocol_config:\n  max_slot: 12\n"
    with pytest.raises(scn.ConfigError, match=r"protocol_config.max_slot: unknown key \(line 8\)"):
        scn.loads(text)


@pytest.mark.parametrize("text", [
    MINIMAL.replace("csync_scenario: 1\n", ""),
    MINIMAL.replace("csync_scenario: 1", "csync_scenario: 2"),
    MINIMAL + "protocol: ntp\n",
    MINIMAL + "faults:\n  - target: 3\n    kind: MELT\n",
    MINIMAL + "topology: [1, 2\n",
])
def test_bad_scenarios(text):
    with pytest.raises(scn.ConfigError):
        scn.loads(text)


def test_override_unknown_path():
    with pytest.raises(scn.ConfigError):
        scn.apply_overrides(scn.loads(MINIMAL), ["protocol_config.nope=1"])


def test_topology_file_round_trip(tmp_path):
    topo = generate_topology("sparse", 12, seed=4)
    save_topology(topo, tmp_path / "t.yaml")
    back = load_topology(tmp_path / "t.yaml")
    assert back.nodes == topo.nodes and back.edges() == topo.edges()


def test_generated_topologies():
    chain = generate_topology("chain13")
    assert len(chain.nodes) == 13 and len(chain.edges()) == 12
    full = generate_topology("full")
    assert len(full.nodes) == 45 and full.is_connected()


@pytest.mark.parametrize("name", CANONICAL)
def test_cli_validate(name, capsys):
    assert main(["validate", str(SCENARIOS / f"{name}.scn")]) == EXIT_OK
    assert capsys.readouterr().out.startswith("ok:")


def test_cli_missing_file(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "nope.scn")]) == EXIT_CONFIG
    assert "not found" in capsys.readouterr().err


def test_cli_bad_override(capsys):
    assert main(["validate", str(SCENARIOS / "dense.scn"), "--set", "radio.tx_mw"]) == EXIT_CONFIG


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.scn"
    p.write_text(MINIMAL, encoding="utf-8")
    return p


def test_cli_run_writes_outputs(tiny, tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["run", str(tiny), "--out", str(out)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "digest=" in printed and "clustering completed" in printed
    trace = out / "tiny_csync_s1_trace.csv"
    assert trace.exists() and (out / "tiny_csync_s1_report.csv").exists()
    assert main(["report", str(trace)]) == EXIT_OK
    assert "node,role,ch,slot,lc" in capsys.readouterr().out


def test_cli_env_out_dir(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv("CSYNC_OUT_DIR", str(tmp_path / "env"))
    assert main(["run", str(tiny), "--set", "protocol=gtsp", "--set", "gtsp_warmup_us=60000000"]) == EXIT_OK
    assert (tmp_path / "env" / "tiny_gtsp_s1_report.csv").exists()


def test_cli_report_rejects_non_trace(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    assert main(["report", str(p)]) == EXIT_CONFIG


def test_cli_sweep_rows(tiny, tmp_path):
    out = tmp_path / "sw"
    assert main(["sweep", str(tiny), "--seeds", "20", "--out", str(out)]) == EXIT_OK
    with open(out / "tiny_csync_sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 21 and rows[-1]["seed"] == "ALL"
    assert [r["seed"] for r in rows[:3]] == ["1", "2", "3"]


def test_cli_assumption_exit(tmp_path):
    star = Topology(nodes=[1, 2, 3, 9], links={frozenset((9, k)) for k in (1, 2, 3)})
    save_topology(star, tmp_path / "star.yaml")
    p = tmp_path / "star.scn"
    p.write_text("""csync_scenario: 1
name: star
topology:
  kind: file
  file: star.yaml
duration_us: 150000000
faults:
  - target: 9
    kind: ALTERED_TIME
    start_us: 100000000
    magnitude: 10000
output:
  trace_level: "off"
""", encoding="utf-8")
    assert main(["run", str(p), "--out", str(tmp_path / "o")]) == EXIT_ASSUMPTION


def test_bare_off_trace_level():
    s = scn.loads(MINIMAL + "output:\n  trace_level: off\n")
    assert s.output.trace_level == "off"
    assert scn.loads(scn.dumps(s)) == s
