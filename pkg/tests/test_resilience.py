import random

import pytest

from conftest import load_scenario, run_topology
from csync.engine import Message, MsgType
from csync.resilience import (Behavior, ByzantineMsg, ClusterView, ConfigError, ConsensusTally,
                              FaultKind, FaultSpec, FaultState, apply_fault, cb_token, check_theorem,
                              handle_byzantine, monitor, quorum, simulate_cluster_agreement,
                              verify_cb_token)
from csync.runner import run_scenario
from csync.topology import three_cluster

SYNC = Message(5, MsgType.SYNC, logical_time=1000.0)


def test_fail_stop_silences_after_start():
    spec = FaultSpec(5, FaultKind.FAIL_STOP, start_us=100.0)
    rng = random.Random(0)
    assert apply_fault(spec, SYNC, 50.0, rng)[0] is SYNC
    assert apply_fault(spec, SYNC, 150.0, rng)[0] is None


def test_altered_time_shifts_sync_only():
    spec = FaultSpec(5, FaultKind.ALTERED_TIME, magnitude=10000)
    out, _ = apply_fault(spec, SYNC, 0.0, random.Random(0))
    assert out.logical_time == pytest.approx(11000.0)
    disc = Message(5, MsgType.DISCOVERY, logical_time=1000.0)
    assert apply_fault(spec, disc, 0.0, random.Random(0))[0] is disc


def test_spike_fires_once():
    spec, state = FaultSpec(5, FaultKind.SPIKE, magnitude=2000), FaultState()
    first, _ = apply_fault(spec, SYNC, 0.0, random.Random(0), state)
    second, _ = apply_fault(spec, SYNC, 1.0, random.Random(0), state)
    assert first.logical_time == 3000.0 and second.logical_time == 1000.0


def test_selective_forward_drops_sync():
    spec = FaultSpec(5, FaultKind.SELECTIVE_FORWARD, magnitude=1.0)
    assert apply_fault(spec, SYNC, 0.0, random.Random(0))[0] is None
    other = Message(5, MsgType.ELECTION)
    assert apply_fault(spec, other, 0.0, random.Random(0))[0] is other


def test_discovery_flood_boosts_power():
    spec = FaultSpec(5, FaultKind.DISCOVERY_FLOOD, magnitude=3.0)
    assert apply_fault(spec, Message(5, MsgType.DISCOVERY), 0.0, random.Random(0))[1] == 3.0


@pytest.mark.parametrize("kw", [
    dict(kind="NOPE"),
    dict(kind=FaultKind.INTERMITTENT, magnitude=1.5),
    dict(kind=FaultKind.DISCOVERY_FLOOD, magnitude=0.5),
    dict(kind=FaultKind.OUTLIER, magnitude=100),
    dict(kind=FaultKind.SPIKE, start_us=10, end_us=5),
])
def test_fault_spec_validation(kw):
    with pytest.raises(ConfigError):
        FaultSpec(5, **kw)


def test_cb_tokens():
    tok = cb_token((3, 9))
    assert verify_cb_token(tok, (9, 3))
    assert not verify_cb_token(tok, (3, 8))
    assert not verify_cb_token(None, (3, 9))


def test_flooded_ch_pair_needs_token():
    # a node overheard through boosted power never completed the two-way
    # exchange, so it has no token for the pair it claims to bridge
    assert not verify_cb_token(b"\0" * 16, (3, 9))


@pytest.mark.parametrize("ref, obs, fire, immediate", [
    (0.0, 100.0, False, False),
    (0.0, 10000.0, True, True),
    (0.0, None, True, False),
])
def test_monitor(ref, obs, fire, immediate):
    v = monitor(ref, obs, 500.0)
    assert (v.fire, v.immediate) == (fire, immediate)


def test_monitor_repeat():
    v = monitor(0.0, None, 500.0, consecutive=0, repeat=2)
    assert not v.fire
    assert monitor(0.0, None, 500.0, consecutive=v.consecutive, repeat=2).fire


@pytest.mark.parametrize("n_i, q", [(4, 3), (5, 3), (6, 4), (7, 4)])
def test_quorum(n_i, q):
    assert quorum(n_i) == q


def _msg(sender, ref=1, t=0.0):
    return ByzantineMsg(initiator=ref, reference_addr=ref, correct_time=t, correct_rate=1.0,
                        suspect=0, cluster=0, sender=sender)


def test_handle_rejects_unknown_reference():
    view = ClusterView(me=4, cluster=0, legit_refs=frozenset({1, 2}), n_i=6)
    d = handle_byzantine(view, _msg(3, ref=3), ConsensusTally(6), 0.0, 0.0)
    assert d.reason == "bad-reference" and not d.retransmit


def test_handle_reaches_quorum_and_blacklists():
    view = ClusterView(me=6, cluster=0, legit_refs=frozenset({1, 2}), n_i=6)
    tally = ConsensusTally(6)
    decisions = [handle_byzantine(view, _msg(s), tally, 0.0, 0.0) for s in (1, 2, 3, 4)]
    assert decisions[0].retransmit and not decisions[1].retransmit
    assert decisions[3].reason == "agreed" and decisions[3].blacklist == 0
    assert all(d.adopt is None for d in decisions[:3])


def test_handle_keeps_suspect_heard_correctly():
    view = ClusterView(me=6, cluster=0, legit_refs=frozenset({1}), n_i=4)
    tally = ConsensusTally(4)
    for s in (1, 2, 3):
        d = handle_byzantine(view, _msg(s), tally, 0.0, 0.0, heard_suspect_ok=True)
    assert d.adopt is not None and d.blacklist is None


def test_implausible_value_ignored():
    view = ClusterView(me=6, cluster=0, legit_refs=frozenset({1}), n_i=4)
    d = handle_byzantine(view, _msg(1, t=9000.0), ConsensusTally(4), 0.0, 0.0)
    assert d.reason == "implausible"


@pytest.mark.parametrize("order_seed", range(20))
def test_faulty_ch_corrected_any_order(order_seed):
    out = simulate_cluster_agreement(6, 2, {0: Behavior.WRONG}, order_seed=order_seed)
    assert out.assumptions_ok
    for v in out.correct_nodes():
        assert out.agreed[v] == 0.0 and 0 in out.blacklists[v]


def test_faulty_cm_without_reference_goes_nowhere():
    out = simulate_cluster_agreement(6, 2, {5: Behavior.ACCUSE})
    assert all(a is None for a in out.agreed.values())
    assert out.messages == 1
    assert not any(out.blacklists.values())


def test_floor_half_colluding_still_correct():
    # odd cluster: floor(n_i/2) is still a minority
    out = simulate_cluster_agreement(7, 3, {0: Behavior.WRONG, 1: Behavior.WRONG, 4: Behavior.WRONG})
    assert out.assumptions_ok
    assert all(abs(out.final[v]) <= 500 for v in out.correct_nodes())


def test_too_many_faults_reported():
    out = simulate_cluster_agreement(6, 3, {0: Behavior.WRONG, 1: Behavior.WRONG, 2: Behavior.WRONG,
                                            4: Behavior.WRONG})
    assert not out.assumptions_ok
    assert not any(a is not None and abs(a) > 500 for v, a in out.agreed.items() if v not in out.faulty)


def test_theorem_small_cluster():
    stats = check_theorem(4)
    assert stats["violations"] == []
    assert stats["by_k"][2]["faulty_agreements"] == 0


def test_fault_free_run_has_no_blacklist():
    r = run_topology(three_cluster(), seed=5, duration_s=200, trace="events")
    assert all(not n.blacklist for n in r.nodes.values())
    assert "byz-init" not in r.trace.text()


def test_missed_slot_triggers_consensus():
    s = load_scenario("fault_ch2", "faults.0.kind=SELECTIVE_FORWARD", "faults.0.magnitude=1.0",
                      "output.trace_level=events")
    r = run_scenario(s)
    inits = [l for l in r.trace.text().splitlines() if "byz-init" in l]
    assert inits and all('"250,' in l and "missing" in l for l in inits)
    assert any(250 in n.blacklist for n in r.nodes.values())
