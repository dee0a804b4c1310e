"""Newton-Raphson power flow, nodal mismatch and branch flows."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .grid import Network, build_admittance

PF_TOL = 1e-8
PF_MAX_ITER = 50


class PowerFlowDivergence(RuntimeError):
    """Newton iteration did not reach tolerance; ``last`` holds the final iterate."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


@dataclass
class PowerFlowSolution:
    bus_ids: list
    vm: np.ndarray
    va: np.ndarray
    p: np.ndarray
    q: np.ndarray
    converged: bool = True
    iterations: int = 0
    max_mismatch: float = 0.0
    objective: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def voltage(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    def lookup(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)

    def as_dict(self) -> dict:
        return {b: {"vm": float(m), "va": float(a), "p": float(p), "q": float(q)}
                for b, m, a, p, q in zip(self.bus_ids, self.vm, self.va, self.p, self.q)}


def mismatch(Y: np.ndarray, voltages: np.ndarray, injections: np.ndarray) -> np.ndarray:
    """Complex nodal residual ``V * conj(Y V) - S`` for every bus."""
    V = np.asarray(voltages, dtype=complex)
    return V * np.conj(Y @ V) - np.asarray(injections, dtype=complex)


def power_derivatives(Y: np.ndarray, V: np.ndarray):
    """Partial derivatives of ``V * conj(Y V)`` w.r.t. |V| and angle."""
    I = Y @ V
    Vnorm = V / np.abs(V)
    dS_dVm = np.diag(V) @ np.conj(Y * Vnorm[None, :]) + np.diag(np.conj(I) * Vnorm)
    dS_dVa = 1j * np.diag(V) @ np.conj(np.diag(I) - Y * V[None, :])
    return dS_dVm, dS_dVa


def line_flow(branch, v_from: complex, v_to: complex):
    """Pi-model complex power leaving each end: ``(P_from, Q_from, P_to, Q_to)``."""
    ys = 1.0 / branch.series_impedance
    half = branch.shunt_admittance / 2
    i_from = (v_from - v_to) * ys + v_from * half
    i_to = (v_to - v_from) * ys + v_to * half
    s_from = v_from * np.conj(i_from)
    s_to = v_to * np.conj(i_to)
    return float(s_from.real), float(s_from.imag), float(s_to.real), float(s_to.imag)


def bus_types(network: Network, slack_bus: int) -> dict:
    """Map bus id -> 'slack' | 'PV' | 'PQ' for a regular power flow."""
    types = {}
    for b in network.buses:
        if b.id == slack_bus:
            types[b.id] = "slack"
        elif network.sg_at(b.id) is not None:
            types[b.id] = "PV"
        elif (u := network.ibr_at(b.id)) is not None and u.mode == "PV":
            types[b.id] = "PV"
        else:
            types[b.id] = "PQ"
    return types


def _voltage_setpoints(network: Network) -> dict:
    out = {}
    for u in network.sg_units:
        out[u.bus_id] = u.v_set
    for u in network.ibr_units:
        if u.mode == "PV":
            out[u.bus_id] = u.v_set
    return out


def solve_regular_power_flow(network: Network, slack_bus: int, *, participation=None,
                             flat_start: bool = False, tol: float = PF_TOL,
                             max_iter: int = PF_MAX_ITER, Y=None) -> PowerFlowSolution:
    """Newton-Raphson power flow.

    SG buses are PV, IBR buses PV or PQ per ``IbrUnit.mode``, the rest PQ.
    ``participation`` (bus id -> factor) turns on a distributed slack: the
    active imbalance is shared among those buses in proportion to the
    factors, with ``slack_bus`` still providing the angle reference.
    """
    ids = network.bus_ids
    idx = network.index()
    n = len(ids)
    if Y is None:
        Y = build_admittance(network)
    types = bus_types(network, slack_bus)
    if slack_bus not in idx:
        raise ValueError(f"slack bus {slack_bus} not in network")
    vset = _voltage_setpoints(network)

    if flat_start:
        vm = np.ones(n)
        va = np.zeros(n)
    else:
        vm = np.array([b.voltage_magnitude for b in network.buses], dtype=float)
        va = np.array([b.voltage_angle for b in network.buses], dtype=float)
    for b, v in vset.items():
        if types[b] in ("PV", "slack"):
            vm[idx[b]] = v

    S = network.injections()
    pv = [idx[b] for b in ids if types[b] == "PV"]
    pq = [idx[b] for b in ids if types[b] == "PQ"]
    ref = idx[slack_bus]
    ang = sorted(pv + pq)
    alpha = np.zeros(n)
    distributed = bool(participation)
    if distributed:
        for b, a in participation.items():
            alpha[idx[b]] = a
        alpha /= alpha.sum()
        p_rows = list(range(n))
    else:
        p_rows = ang
    lam = 0.0

    def residual(vm, va, lam):
        V = vm * np.exp(1j * va)
        r = mismatch(Y, V, S + lam * alpha)
        return np.concatenate([r.real[p_rows], r.imag[pq]]), r

    it = 0
    f, r = residual(vm, va, lam)
    err = np.max(np.abs(f)) if f.size else 0.0
    while err > tol and it < max_iter:
        V = vm * np.exp(1j * va)
        dVm, dVa = power_derivatives(Y, V)
        J = np.block([
            [dVa.real[np.ix_(p_rows, ang)], dVm.real[np.ix_(p_rows, pq)]],
            [dVa.imag[np.ix_(pq, ang)], dVm.imag[np.ix_(pq, pq)]],
        ])
        if distributed:
            col = np.concatenate([-alpha[p_rows], np.zeros(len(pq))])
            J = np.column_stack([J, col])
        try:
            dx = -np.linalg.solve(J, f)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowDivergence(f"singular Jacobian at iteration {it}",
                                      _pack(ids, vm, va, r, S, lam, alpha, it, err)) from exc
        va[ang] += dx[:len(ang)]
        vm[pq] += dx[len(ang):len(ang) + len(pq)]
        if distributed:
            lam += dx[-1]
        it += 1
        f, r = residual(vm, va, lam)
        err = np.max(np.abs(f))
        if not np.isfinite(err) or np.any(vm <= 0):
            break
    sol = _pack(ids, vm, va, r, S, lam, alpha, it, err)
    if not (err <= tol):
        raise PowerFlowDivergence(
            f"power flow did not converge after {it} iterations (mismatch {err:.3e})", sol)
    return sol


def _pack(ids, vm, va, r, S, lam, alpha, it, err) -> PowerFlowSolution:
    # injections consistent with the voltages: scheduled + residual at slack/PV rows
    s_calc = r + S + lam * alpha
    return PowerFlowSolution(list(ids), vm.copy(), va.copy(), s_calc.real.copy(), s_calc.imag.copy(),
                             converged=bool(err <= PF_TOL), iterations=it, max_mismatch=float(err),
                             info={"distributed_slack": float(lam)})


def branch_flows(network: Network, sol: PowerFlowSolution, branch_ids=None) -> dict:
    """Branch index -> ``(P_from, Q_from, P_to, Q_to)`` at the solution voltages."""
    V = sol.voltage
    pos = {b: k for k, b in enumerate(sol.bus_ids)}
    out = {}
    for k, br in enumerate(network.branches):
        if branch_ids is not None and k not in branch_ids:
            continue
        if br.from_bus in pos and br.to_bus in pos:
            out[k] = line_flow(br, V[pos[br.from_bus]], V[pos[br.to_bus]])
    return out


def total_losses(network: Network, sol: PowerFlowSolution) -> complex:
    return sum(complex(pf + pt, qf + qt) for pf, qf, pt, qt in branch_flows(network, sol).values())


def apply_solution(network: Network, sol: PowerFlowSolution) -> Network:
    """Network with bus voltages set from ``sol`` (used as a warm start)."""
    pos = {b: k for k, b in enumerate(sol.bus_ids)}
    vm = [sol.vm[pos[b]] if b in pos else bus.voltage_magnitude for b, bus in zip(network.bus_ids, network.buses)]
    va = [sol.va[pos[b]] if b in pos else bus.voltage_angle for b, bus in zip(network.bus_ids, network.buses)]
    return network.with_voltages(vm, va)
