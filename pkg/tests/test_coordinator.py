import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from appf.coordinator import (COMPLETE, DETECTED, FALLBACK, IDLE, LEGAL, MESSAGE_SCHEMA, PHASES, AreaCoordinator,
                              Channel, CoordinationLayer, CoordinatorConfig, IllegalTransition,
                              MeasurementFrame, Message, MessageFabric, PerfectEstimator)
from appf.cases import CONTINGENT_AREA
from appf.dynamics import LoadStep, SimEvent, run_scenario
from conftest import cached_run

INTER_AREA_KINDS = {"DeficitRequest", "TieTargets", "HeadroomUpdate", "Fallback"}


# -- phase machine ---------------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(PHASES), max_size=25))
def test_phase_machine_rejects_illegal_moves(reference, moves):
    c = AreaCoordinator(1, reference, CoordinatorConfig())
    for k, phase in enumerate(moves):
        before = c.state.phase
        if phase == FALLBACK or phase in LEGAL[before]:
            c.transition(phase, float(k))
            assert c.state.phase == phase
        else:
            with pytest.raises(IllegalTransition):
                c.transition(phase, float(k))
            assert c.state.phase == before
    # the recorded history only ever contains legal steps
    for (_, a), (_, b) in zip(c.state.history, c.state.history[1:]):
        assert b == FALLBACK or b in LEGAL[a]


def test_fallback_is_absorbing(reference):
    c = AreaCoordinator(1, reference, CoordinatorConfig())
    c.transition(DETECTED, 0.0)
    c.fallback(1.0)
    for phase in PHASES:
        if phase != FALLBACK:
            with pytest.raises(IllegalTransition):
                c.transition(phase, 2.0)
    c.plan(3.0, IDLE)
    c.advance(4.0)
    assert c.state.phase == FALLBACK


# -- measurement ingestion --------------------------------------------------------------

def frames_for(reference, x_star, import_step=0.0, n=8, step_at=2):
    """Synthetic frames; from frame ``step_at`` on, area 1 imports ``import_step`` more."""
    coord = AreaCoordinator(1, reference, CoordinatorConfig())
    k, sign = next(iter(coord.tie_sign.items()))
    unit = {("SG", u.bus_id): u.p_set for u in reference.sg_units}
    unit.update({("IBR", u.bus_id): u.p_set for u in reference.ibr_units})
    vm = dict(zip(x_star.bus_ids, x_star.vm))
    out = []
    for i in range(n):
        tie = {t: 0.1 for t in reference.tie_lines()}
        if i >= step_at:
            tie[k] += sign * import_step
        out.append(MeasurementFrame(i / 60, vm, vm, tie, dict(tie), dict(unit)))
    return coord, out


def test_steady_frames_stay_idle(reference, x_star):
    coord, frames = frames_for(reference, x_star)
    assert all(coord.ingest(f) is None for f in frames)
    assert coord.state.phase == IDLE


def test_sustained_tie_change_is_detected(reference, x_star):
    coord, frames = frames_for(reference, x_star, import_step=0.63)
    reports = [coord.ingest(f) for f in frames]
    first = next(k for k, r in enumerate(reports) if r is not None)
    rep = reports[first]
    assert first == 2 + coord.config.debounce - 1
    assert rep.contingent_area == 1 and rep.kind == "load_change"
    assert rep.magnitude == pytest.approx(0.63, abs=1e-12)
    assert rep.detection_time == pytest.approx(2 / 60)


def test_stale_frames_are_dropped(reference, x_star):
    coord, frames = frames_for(reference, x_star, n=3)
    for f in frames + frames[:2]:
        coord.ingest(f)
    assert coord.dropped == 2


# -- channels and messages ----------------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 3)), min_size=1, max_size=20))
def test_channel_is_fifo(sends):
    ch = Channel(1, 2, 0.25)
    t = 0.0
    delivered = []
    for gap, lat in sends:
        t += gap
        delivered.append(ch.send("HeadroomUpdate", t, {"headroom": 0.0}, latency=lat))
    times = [m.delivery_time for m in delivered]
    assert times == sorted(times)
    assert all(m.delivery_time >= m.send_time for m in delivered)
    assert ch.delivered == delivered


def test_equal_delivery_times_keep_send_order():
    fab = MessageFabric(0.5)
    a = fab.send("DeficitRequest", 1, 2, 0.0, {"delta_p_req": 0.1})
    b = fab.send("DeficitRequest", 1, 2, 0.0, {"delta_p_req": 0.2})
    assert a.delivery_time == b.delivery_time
    assert [m.seq for m in fab.channels[(1, 2)].delivered] == [0, 1]


def test_message_schema_is_enforced():
    with pytest.raises(ValueError):
        Message("TieTargets", 1, 2, 0.0, 0.1, {"targets": {}, "vm": [1.0]})
    with pytest.raises(ValueError):
        Message("Gossip", 1, 2, 0.0, 0.1, {})
    with pytest.raises(ValueError):
        Message("HeadroomUpdate", 1, 2, 1.0, 0.5, {"headroom": 0.1})


def check_privacy(layer):
    for m in layer.fabric.trace:
        assert set(m.payload) == MESSAGE_SCHEMA[m.kind]
        if m.source != m.destination:
            assert m.kind in INTER_AREA_KINDS


# -- scenario timelines ---------------------------------------------------------------------

def command_times(layer):
    return sorted({t for t, _ in layer.commands})


def check_history(layer):
    for hist in layer.phase_histories().values():
        for (_, a), (_, b) in zip(hist, hist[1:]):
            assert b == FALLBACK or b in LEGAL[a]


def test_case1_timeline():
    res, _ = cached_run("case1", "hierarchical")
    layer = res.layer
    assert layer.reports["active"].detection_time == pytest.approx(10.0, abs=0.1)
    assert command_times(layer) == pytest.approx([10.5, 30.0])
    assert layer.coordinators[CONTINGENT_AREA].state.phase == COMPLETE
    # self-sufficient: nothing crosses area borders except the headroom heartbeat
    assert {m.kind for m in layer.fabric.trace if m.source != m.destination} == {"HeadroomUpdate"}
    check_privacy(layer)
    check_history(layer)


def test_case2_timeline():
    res, _ = cached_run("case2", "hierarchical")
    layer = res.layer
    assert command_times(layer) == pytest.approx([10.5, 11.0, 30.0, 40.0])
    kinds = {m.kind for m in layer.fabric.trace if m.source != m.destination}
    assert {"DeficitRequest", "TieTargets"} <= kinds
    assert all(c.state.phase == COMPLETE for c in layer.coordinators.values())
    check_privacy(layer)
    check_history(layer)


def test_simultaneous_voltage_first():
    res, _ = cached_run("simultaneous", "hierarchical")
    layer = res.layer
    class1 = set(layer.results["simultaneous"]["class1"])
    first = [c for t, c in layer.commands if t == pytest.approx(10.5)]
    q_cmds = [c for c in first if c.q is not None]
    p_cmds = [c for c in first if c.p is not None]
    assert {c.bus_id for c in q_cmds} == class1
    assert not ({c.bus_id for c in p_cmds} & class1)
    assert any(t == pytest.approx(11.0) and c.device == "SG" for t, c in layer.commands)
    later = [c for t, c in layer.commands if t > 11.0 + 1e-9 and c.p is not None]
    assert later and not ({c.bus_id for c in later} & class1)
    check_privacy(layer)
    check_history(layer)


def test_single_kind_events_degenerate():
    volt, _ = cached_run("volt", "hierarchical")
    assert "frequency" not in volt.layer.results and "active" not in volt.layer.reports
    assert command_times(volt.layer) == pytest.approx([10.5, 11.0])
    case1, _ = cached_run("case1", "hierarchical")
    assert "voltage" not in case1.layer.results and "reactive" not in case1.layer.reports


def test_second_detection_while_solving_falls_back(reference, x_star):
    events = [SimEvent(10.0, LoadStep(16, 0.63)), SimEvent(20.0, LoadStep(16, 0.30))]
    layer = CoordinationLayer(reference, x_star, PerfectEstimator(reference, events[:1]))
    layer.attach(reference.bus_ids, [u.bus_id for u in reference.sg_units],
                 [u.bus_id for u in reference.ibr_units], reference.tie_lines())
    traj = run_scenario(reference, x_star, events, 31.0, on_frame=layer.on_frame)
    assert layer.fallbacks and 20.0 <= layer.fallbacks[0][0] <= 21.0
    assert layer.coordinators[CONTINGENT_AREA].state.phase == FALLBACK
    # the stage result planned for t = 30 s is dropped; AGC carries on alone
    assert layer.cancelled == [(30.0, f"APPF stage 1 area {CONTINGENT_AREA}")]
    assert not any(label.startswith("APPF") for _, label in traj.events)
    assert any(m.kind == "Fallback" for m in layer.fabric.trace)
    check_history(layer)


def test_estimator_post_network(reference):
    ev = [SimEvent(1.0, LoadStep(16, 0.8, 0.5))]
    est = PerfectEstimator(reference, ev)
    assert est.post_network("active").loads[16] == reference.loads[16] + 0.8
    assert est.post_network("reactive").loads[16] == reference.loads[16] + 0.5j
    assert est.delta_q(16) == 0.5 and est.delta_q(15) == 0.0
    noisy = PerfectEstimator(reference, ev, noise_sigma=0.01, seed=3)
    assert np.isfinite(noisy.delta_q(16)) and noisy.delta_q(16) != 0.5
