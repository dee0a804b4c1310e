"""Acceptance criteria 1-9; each test prints one PASS/FAIL line in the terminal summary."""

import time

import numpy as np
import pytest

import test_engagement
import test_stage
from appf.cases import CONTINGENT_AREA, REFERENCE_SLACK
from appf.dynamics import F_NOMINAL, frequency_nadir, settling_time
from appf.frequency import ImbalanceReport, primary_dispatch_all, run_appf
from appf.grid import assign_hierarchies, build_admittance
from appf.powerflow import solve_regular_power_flow
from appf.scenarios import SCENARIOS, ScenarioConfig, run_mode, write_artifacts
from appf.stage import P, Q
from appf.voltage import (compute_sensitivity, primary_reactive_dispatch, rank_and_classify,
                          sequential_voltage_optimization)
from conftest import balance_residual, cached_run

BAND = (0.95, 1.05)


def criterion(num):
    def mark(fn):
        fn.criterion = num
        return fn
    return mark


def frequency_appf(reference, x_star, dp):
    post = reference.with_load(16, dp + 0j)
    part = assign_hierarchies(post, CONTINGENT_AREA)
    disp = primary_dispatch_all(post, part, dp)
    stages = run_appf(post, part, x_star, ImbalanceReport(CONTINGENT_AREA, "load_change", dp, 10.0), disp)
    return post, part, disp, stages


def voltage_appf(reference, x_star, dq=1.05):
    post = reference.with_load(16, 1j * dq)
    part = rank_and_classify(compute_sensitivity(post, x_star, REFERENCE_SLACK), 16, dq, post.ibr_units)
    disp = primary_reactive_dispatch(part, dq, {u.bus_id: u.q_set for u in post.ibr_units})
    return post, sequential_voltage_optimization(post, x_star, part, disp, slack_bus=REFERENCE_SLACK)


def within_spec(spec, sol, tol=1e-7):
    """Every finite stage bound and MVA circle holds at ``sol``."""
    val = np.column_stack([sol.vm, sol.va, sol.p, sol.q])
    lo, hi = spec.bounds[..., 0], spec.bounds[..., 1]
    ok = np.all(val >= lo - tol) and np.all(val <= hi + tol)
    for lim in spec.apparent_limits:
        s = np.hypot(val[lim.pos, P] - lim.p_offset, val[lim.pos, Q] - lim.q_offset)
        ok &= s <= lim.s_max + tol
    return bool(ok)


def voltage_condition(vm_final, vm_none, k):
    """Contingent bus inside the band, or strictly closer to it than without control."""
    def gap(v):
        return max(BAND[0] - v, v - BAND[1], 0.0)
    return gap(vm_final[k]) == 0.0 or gap(vm_final[k]) < gap(vm_none[k])


@criterion(1)
def test_criterion_1_case1_steady_state(reference, x_star):
    """case-1 steady state: contingent IBRs absorb 0.63 p.u., SG injections unchanged"""
    t0 = time.perf_counter()
    post, _, disp, stages = frequency_appf(reference, x_star, 0.63)
    elapsed = time.perf_counter() - t0
    assert len(stages) == 1 and disp[0].residual_deficit == 0.0
    sol = stages[0].solution
    absorbed = sum(p - reference.ibr_at(b).p_set for b, (p, _) in stages[0].ibr_setpoints.items()
                   if reference.area_of(b) == CONTINGENT_AREA)
    assert 0.63 - 1e-4 <= absorbed <= 0.63 * 1.02 + 1e-4
    pos = {b: k for k, b in enumerate(x_star.bus_ids)}
    for k, b in enumerate(sol.bus_ids):
        sg = post.sg_at(b)
        if sg is not None:
            # held on the set-point bit for bit; the pre-contingency flow agrees to rounding
            assert sol.p[k] == sg.p_set - reference.loads.get(b, 0j).real
            assert abs(sol.p[k] - x_star.p[pos[b]]) <= 1e-12
    assert elapsed < 5.0


@criterion(2)
def test_criterion_2_case2_two_stages(reference, x_star):
    """case-2: level-1 IBRs saturate, the exact residual goes to four level-2 IBRs within bounds"""
    t0 = time.perf_counter()
    post, part, disp, stages = frequency_appf(reference, x_star, 1.30)
    elapsed = time.perf_counter() - t0
    level1 = [u for u in reference.ibr_units if reference.area_of(u.bus_id) == CONTINGENT_AREA]
    heads = sum(u.p_max - u.p_set for u in level1)
    for u in level1:
        assert disp[0].setpoints[u.bus_id] == pytest.approx(u.p_max, abs=1e-12)
    assert abs(disp[0].residual_deficit - (1.30 - heads)) <= 1e-12
    assert [s.hierarchy_level for s in stages] == [1, 2]
    second = stages[1]
    assert len(second.ibr_setpoints) == 4
    assert within_spec(second.spec, second.solution)
    pre = {u.bus_id: u.p_set for u in reference.ibr_units}
    assert all(p > pre[b] for b, (p, _) in second.ibr_setpoints.items())
    assert elapsed < 10.0


@criterion(3)
def test_criterion_3_dynamic_restoration():
    """case-1 dynamics: settles within 15 s of the stage-1 setpoints, AGC alone at least 3x slower"""
    hier, t_hier = cached_run("case1", "hierarchical")
    agc, t_agc = cached_run("case1", "agc-only")
    stage1 = max(t for t, _ in hier.layer.commands)
    tr = hier.trajectory
    assert settling_time(tr.time, tr.frequency, start=stage1) <= 15.0
    event = hier.summary["event_time_s"]
    fast = settling_time(tr.time, tr.frequency, start=event)
    slow = settling_time(agc.trajectory.time, agc.trajectory.frequency, start=event)
    assert np.isnan(slow) or slow >= 3 * fast
    # the nadir falls at the step, before any control acts: never deeper with APPF
    assert frequency_nadir(tr.frequency) >= frequency_nadir(agc.trajectory.frequency) - 1e-9
    assert t_hier + t_agc < 60.0


@criterion(4)
def test_criterion_4_sensitivity_oracle(reference, x_star):
    """dV/dQ sensitivities agree with a full finite-difference matrix"""
    t0 = time.perf_counter()
    S = compute_sensitivity(reference, x_star, REFERENCE_SLACK)
    idx = [S.bus_ids.index(b) for b in S.pq_buses]
    h = 1e-4
    fd = np.zeros((len(idx), len(idx)))
    for j, m in enumerate(S.pq_buses):
        up = solve_regular_power_flow(reference.with_load(m, -1j * h), REFERENCE_SLACK, tol=1e-13).vm
        dn = solve_regular_power_flow(reference.with_load(m, 1j * h), REFERENCE_SLACK, tol=1e-13).vm
        fd[:, j] = (up - dn)[idx] / (2 * h)
    elapsed = time.perf_counter() - t0
    err = np.max(np.abs(S.S[np.ix_(idx, idx)] - fd)) / np.max(np.abs(fd))
    assert err <= 1e-4
    assert elapsed < 10.0


@criterion(5)
def test_criterion_5_voltage_case():
    """105 MVAR at bus 16: bus pulled toward the band, all other buses within their bounds"""
    res, wall = cached_run("volt", "hierarchical")
    none, _ = cached_run("volt", "none")
    vm = res.trajectory.vm[-1]
    k = res.trajectory.bus_ids.index(16)
    assert voltage_condition(vm, none.trajectory.vm[-1], k)
    relaxed = set(res.layer.results["voltage"]["result"].relaxed_buses)
    for j, b in enumerate(res.trajectory.bus_ids):
        if b == 16:
            continue
        if b in relaxed:
            assert vm[j] <= 1.10 + 1e-9
        else:
            assert BAND[0] - 1e-9 <= vm[j] <= BAND[1] + 1e-9
    assert wall < 30.0


@criterion(6)
def test_criterion_6_engagement_ordering():
    """engagement ordering holds over 50 randomised small cases"""
    violations = []
    for seed in range(test_engagement.N_FREQUENCY):
        try:
            test_engagement.test_level2_engaged_only_after_level1_saturates(seed)
        except AssertionError:
            violations.append(("frequency", seed))
    for seed in range(test_engagement.N_VOLTAGE):
        try:
            test_engagement.test_sg_reactive_engaged_only_after_class1_exhausted(seed)
        except AssertionError:
            violations.append(("voltage", seed))
    assert test_engagement.N_FREQUENCY + test_engagement.N_VOLTAGE == 50
    assert violations == []


@criterion(7)
def test_criterion_7_stage_oracle():
    """constrained stage matches brute-force grid search on small instances"""
    t0 = time.perf_counter()
    matched = 0
    for seed in test_stage.ORACLE_SEEDS:
        inst = test_stage.toy_instance(seed)
        try:
            f_grid, (p_grid, q_grid) = test_stage.grid_search(inst)
        except AssertionError:
            continue
        sol = test_stage.solve_constrained_stage(inst["Y"], test_stage.stage_from(inst))
        if abs(sol.p[1] - p_grid) <= 1e-3 and abs(sol.q[1] - q_grid) <= 1e-3 and sol.objective <= f_grid + 1e-9:
            matched += 1
        else:
            pytest.fail(f"instance {seed} disagrees with the grid search")
    assert matched >= 20
    assert time.perf_counter() - t0 < 120.0


@criterion(8)
def test_criterion_8_conservation_and_balance(reference, x_star):
    """balance residuals, dispatch conservation and the simultaneous-control end state"""
    for dp in (0.63, 1.30):
        post, _, disp, stages = frequency_appf(reference, x_star, dp)
        first = disp[0]
        moved = sum(first.setpoints.values()) - sum(reference.ibr_at(b).p_set for b in first.setpoints)
        assert abs(moved + first.residual_deficit - dp) <= 1e-12
        for s in stages:
            assert balance_residual(build_admittance(post, s.solution.bus_ids), s.solution) <= 1e-6
    post, vres = voltage_appf(reference, x_star)
    assert balance_residual(build_admittance(post), vres.solution) <= 1e-6
    for scenario in SCENARIOS:
        res, _ = cached_run(scenario, "hierarchical")
        assert np.max(np.abs(res.trajectory.balance_residual)) <= 1e-6
    sim, _ = cached_run("simultaneous", "hierarchical")
    none, _ = cached_run("simultaneous", "none")
    assert np.all(np.abs(sim.trajectory.frequency[-1] - F_NOMINAL) <= 0.01)
    k = sim.trajectory.bus_ids.index(16)
    assert voltage_condition(sim.trajectory.vm[-1], none.trajectory.vm[-1], k)


@criterion(9)
def test_criterion_9_determinism(tmp_path):
    """repeated runs of every scenario give byte-identical artifacts"""
    for scenario in SCENARIOS:
        first, _ = cached_run(scenario, "hierarchical")
        again = run_mode(ScenarioConfig(scenario=scenario), "hierarchical")
        a = write_artifacts(first, tmp_path / "a")
        b = write_artifacts(again, tmp_path / "b")
        assert [p.name for p in a] == [p.name for p in b]
        for pa, pb in zip(a, b):
            assert pa.read_bytes() == pb.read_bytes(), f"{scenario}: {pa.name} differs"
