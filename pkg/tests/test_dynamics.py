import numpy as np
import pytest

from appf.dynamics import (F_NOMINAL, DispatchCommand, DynamicsConfig, LoadStep, SetpointArrival, SimEvent,
                           SimulationAbort, Simulator, Trajectory, frequency_nadir, run_scenario, settling_time)
from appf.powerflow import solve_regular_power_flow
from helpers import make_network


def one_machine(load=0.5 + 0.1j, ibr=False):
    kinds = ["SG", "Load"] + (["IBR"] if ibr else [])
    edges = [(1, 2, 0.01 + 0.1j, 0.02j)] + ([(2, 3, 0.01 + 0.05j, 0j)] if ibr else [])
    net = make_network(kinds, edges, loads={2: load},
                       sg={1: dict(p_set=0.5, p_max=5.0, q_min=-5, q_max=5, v_set=1.02, rating=2.0, damping_d=1.0)},
                       ibr={3: dict(p_set=0.2)} if ibr else None)
    op = solve_regular_power_flow(net, 1)
    net = net.with_unit_setpoints(sg={1: {"p_set": float(op.p[0])}})
    return net, solve_regular_power_flow(net, 1)


def test_equilibrium_is_a_fixed_point(reference, x_star):
    traj = run_scenario(reference, x_star, [], 10.0)
    m = traj.matrix()
    assert np.max(np.ptp(m[:, 1:], axis=0)) <= 1e-9
    assert np.max(np.abs(traj.frequency - F_NOMINAL)) <= 1e-9
    assert traj.events == []


def test_zero_ace_leaves_agc_idle(reference, x_star):
    sim = Simulator(reference, x_star, DynamicsConfig(agc=True))
    sim.integrate(1200)
    ng, ni = len(sim.sgs), len(sim.ibrs)
    assert np.max(np.abs(sim.x[4 * ng + 2 * ni:])) <= 1e-9
    assert np.max(np.abs(sim.x[2 * ng:3 * ng] - sim.pref)) <= 1e-9


def test_ibr_first_order_step():
    net, op = one_machine(ibr=True)
    sim = Simulator(net, op)
    p0 = sim.ibr_output()[0][0]
    sim.apply(SetpointArrival((DispatchCommand("IBR", 3, p=p0 + 0.1),)))
    sim.integrate(12)                     # one time constant
    assert sim.ibr_output()[0][0] - p0 == pytest.approx(0.1 * (1 - np.exp(-1)), abs=1e-6)
    assert 0.1 * (1 - np.exp(-1)) == pytest.approx(0.06321, abs=1e-5)
    sim.integrate(48)                     # five time constants in total
    assert sim.ibr_output()[0][0] - p0 >= 0.99 * 0.1


def droop_oracle(net, op, dp):
    """Steady speed deviation: the AVR restores |V|, so the electrical output is the slack power
    of the post-step power flow and the governor/damping balance gives w = -dPe / (rating/R + D)."""
    post = solve_regular_power_flow(net.with_load(2, dp), 1)
    u = net.sg_units[0]
    d_pe = post.p[0] - op.p[0]
    return -d_pe / (u.rating / u.droop_r + u.damping_d)


def test_single_machine_droop_steady_state():
    net, op = one_machine()
    traj = run_scenario(net, op, [SimEvent(1.0, LoadStep(2, 0.1))], 60.0)
    w = droop_oracle(net, op, 0.1)
    assert traj.frequency[-1, 0] - F_NOMINAL == pytest.approx(F_NOMINAL * w, abs=1e-5)
    assert abs(traj.frequency[-1, 0] - F_NOMINAL) > 0.01      # proportional control leaves an offset


def test_agc_removes_the_droop_offset():
    net, op = one_machine()
    traj = run_scenario(net, op, [SimEvent(1.0, LoadStep(2, 0.1))], 400.0, DynamicsConfig(agc=True))
    assert abs(traj.frequency[-1, 0] - F_NOMINAL) < 1e-3


def test_halving_the_step_changes_little(reference, x_star):
    events = [SimEvent(1.0, LoadStep(16, 0.63))]
    a = run_scenario(reference, x_star, events, 6.0)
    b = run_scenario(reference, x_star, events, 6.0, DynamicsConfig(dt=1 / 2400))
    assert np.array_equal(a.time, b.time)
    assert np.max(np.abs(a.frequency - b.frequency)) < 1e-4


def test_energy_balance_and_determinism(reference, x_star):
    events = [SimEvent(1.0, LoadStep(16, 0.63, 0.2))]
    a = run_scenario(reference, x_star, events, 4.0)
    b = run_scenario(reference, x_star, events, 4.0)
    assert np.max(np.abs(a.balance_residual)) <= 1e-6
    assert a.to_csv() == b.to_csv()
    assert a.metadata_json() == b.metadata_json()
    assert frequency_nadir(a.frequency) < F_NOMINAL - 0.01


def test_trajectory_csv_round_trip(reference, x_star):
    traj = run_scenario(reference, x_star, [SimEvent(0.5, LoadStep(16, 0.3))], 1.0)
    again = Trajectory.from_csv(traj.to_csv())
    assert again.header() == traj.header()
    assert np.allclose(again.matrix(), traj.matrix(), rtol=1e-9, atol=1e-12)
    assert again.to_csv() == traj.to_csv()


def test_collapse_aborts_with_state_dump():
    net, op = one_machine()
    with pytest.raises(SimulationAbort) as err:
        run_scenario(net, op, [SimEvent(0.1, LoadStep(2, 40.0))], 2.0)
    assert "time" in err.value.state and "state" in err.value.state


def test_event_in_the_past_rejected(reference, x_star):
    def late(frame, schedule):
        if frame["time"] > 0.05:
            schedule(SimEvent(0.0, LoadStep(16, 0.1)))
    with pytest.raises(ValueError, match="past"):
        run_scenario(reference, x_star, [], 0.2, on_frame=late)


def test_config_validation():
    with pytest.raises(ValueError):
        DynamicsConfig(dt=0.01)
    with pytest.raises(ValueError):
        DynamicsConfig(dt=1 / 1000, sample_rate=70.0)
    assert DynamicsConfig().steps_per_sample == 20


def test_settling_time_conventions():
    t = np.arange(0, 10, 0.5)
    f = np.full_like(t, F_NOMINAL)
    assert settling_time(t, f) == 0.0
    f[4] = 59.9
    assert settling_time(t, f, start=1.0) == pytest.approx(1.5)
    f[-1] = 59.9
    assert np.isnan(settling_time(t, f))
