"""Voltage control: band detection, dV/dQ sensitivities, IBR ranking and the sequential relaxation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import Network, build_admittance, compute_headroom
from .powerflow import (PowerFlowDivergence, PowerFlowSolution, bus_types, power_derivatives,
                        solve_regular_power_flow, apply_solution)
from .stage import P, Q, VA, VM, ApparentLimit, ObjectiveTerm, StageError, StageSpec, VariableMask, \
    solve_constrained_stage

STALENESS_Q = 0.05
BAND_EPS = 1e-12      # deviations within this of a band edge count as on the edge (not flagged)


class SensitivityError(RuntimeError):
    """Singular power-flow Jacobian at the operating point."""


@dataclass(frozen=True)
class VoltageBounds:
    local: tuple = (0.95, 1.05)
    delta_v: float = 0.10
    beta1: float = 0.05
    beta2: float = 0.05

    def __post_init__(self):
        lo, hi = self.local
        if not lo < hi:
            raise ValueError("local band must have lo < hi")
        if self.delta_v < (hi - lo) / 2:
            raise ValueError("global half-width must cover the local band")

    def global_band(self, v_pre: float) -> tuple:
        return (v_pre - self.delta_v, v_pre + self.delta_v)


# -- detection ------------------------------------------------------------------

@dataclass
class ReactiveImbalance:
    contingent_bus: int
    delta_q: float
    deviation: float
    detection_time: float = 0.0
    violating: tuple = ()


class ReactiveImbalanceDetector:
    """Flags buses leaving ``[V_pre - beta1, V_pre + beta2]`` for ``debounce`` samples."""

    def __init__(self, v_pre: dict, bounds: VoltageBounds = VoltageBounds(), debounce: int = 3):
        self.v_pre = dict(v_pre)
        self.bounds = bounds
        self.debounce = debounce
        self._count = {}
        self._onset = {}

    def update(self, t: float, vm: dict, estimator=None):
        dev = {}
        for b, v in vm.items():
            d = v - self.v_pre[b]
            if d < -self.bounds.beta1 - BAND_EPS or d > self.bounds.beta2 + BAND_EPS:
                if self._count.get(b, 0) == 0:
                    self._onset[b] = t
                self._count[b] = self._count.get(b, 0) + 1
                dev[b] = d
            else:
                self._count[b] = 0
        persistent = [b for b in dev if self._count[b] >= self.debounce]
        if not persistent:
            return None
        bus = max(persistent, key=lambda b: (abs(dev[b]), -b))
        dq = float(estimator(bus)) if estimator is not None else float("nan")
        return ReactiveImbalance(bus, dq, float(dev[bus]), self._onset[bus], tuple(sorted(persistent)))


def detect_reactive_imbalance(v_pre: dict, stream, bounds: VoltageBounds = VoltageBounds(),
                              estimator=None, debounce: int = 1, times=None):
    """First persistent band violation in ``stream`` (a sequence of ``{bus: |V|}``)."""
    det = ReactiveImbalanceDetector(v_pre, bounds, debounce)
    for k, vm in enumerate(stream):
        t = times[k] if times is not None else float(k)
        hit = det.update(t, vm, estimator)
        if hit is not None:
            return hit
    return None


# -- sensitivities ------------------------------------------------------------------

@dataclass
class SensitivityMatrix:
    bus_ids: list
    S: np.ndarray                 # S[k, m] = d|V_k| / dQ_m, zero outside the PQ set
    pq_buses: list
    operating_point: PowerFlowSolution
    q_reference: float = 0.0

    def coefficient(self, bus_k: int, bus_m: int) -> float:
        idx = {b: i for i, b in enumerate(self.bus_ids)}
        return float(self.S[idx[bus_k], idx[bus_m]])

    def is_stale(self, total_q: float, threshold: float = STALENESS_Q) -> bool:
        return abs(total_q - self.q_reference) > threshold


def compute_sensitivity(network: Network, operating_point: PowerFlowSolution,
                        slack_bus: int = None) -> SensitivityMatrix:
    """V-Q block of the inverse power-flow Jacobian over the PQ buses."""
    if slack_bus is None:
        slack_bus = network.sg_units[0].bus_id
    ids = list(operating_point.bus_ids)
    idx = {b: k for k, b in enumerate(ids)}
    types = bus_types(network, slack_bus)
    pv = [idx[b] for b in ids if types[b] == "PV"]
    pq = [idx[b] for b in ids if types[b] == "PQ"]
    ang = sorted(pv + pq)
    Y = build_admittance(network, ids)
    dVm, dVa = power_derivatives(Y, operating_point.voltage)
    J = np.block([
        [dVa.real[np.ix_(ang, ang)], dVm.real[np.ix_(ang, pq)]],
        [dVa.imag[np.ix_(pq, ang)], dVm.imag[np.ix_(pq, pq)]],
    ])
    if not np.all(np.isfinite(J)) or np.linalg.cond(J) > 1e12:
        raise SensitivityError("power-flow Jacobian is singular at the operating point")
    inv = np.linalg.inv(J)
    block = inv[len(ang):, len(ang):]
    n = len(ids)
    S = np.zeros((n, n))
    S[np.ix_(pq, pq)] = block
    return SensitivityMatrix(ids, S, [ids[k] for k in pq], operating_point,
                             float(np.sum(operating_point.q)))


# -- ranking and primary reactive dispatch ------------------------------------------

@dataclass
class IbrClassPartition:
    ranking: list                  # IBR bus ids, most sensitive first
    class1: list
    class2: list
    headrooms: dict
    sensitivities: dict
    delta_q: float = 0.0


def rank_and_classify(S: SensitivityMatrix, contingent_bus: int, delta_q: float, ibrs) -> IbrClassPartition:
    ibrs = list(ibrs)
    sens = {u.bus_id: S.coefficient(contingent_bus, u.bus_id) for u in ibrs}
    head = {u.bus_id: compute_headroom(u, "reactive") for u in ibrs}
    ranking = sorted(sens, key=lambda b: (-sens[b], b))
    class1 = list(ranking)
    acc = 0.0
    for k, b in enumerate(ranking):
        acc += head[b]
        if acc >= delta_q:
            class1 = ranking[:k + 1]
            break
    class2 = [b for b in ranking if b not in class1]
    return IbrClassPartition(ranking, class1, class2, head, sens, delta_q)


@dataclass
class ReactiveDispatch:
    setpoints: dict       # bus -> Q
    increments: dict
    residual: float


def primary_reactive_dispatch(partition: IbrClassPartition, delta_q: float, q_set: dict) -> ReactiveDispatch:
    """Fill class-1 headrooms in ranking order; the last one takes the remainder."""
    need = max(0.0, delta_q)
    inc = {}
    for b in partition.class1:
        take = min(partition.headrooms[b], need)
        inc[b] = take
        need -= take
    sp = {b: q_set[b] + inc[b] for b in partition.class1}
    return ReactiveDispatch(sp, inc, need)


# -- sequential relaxation --------------------------------------------------------------

@dataclass
class VoltageResult:
    solution: PowerFlowSolution
    step: int
    sg_voltage_setpoints: dict
    sg_reactive: dict
    ibr_setpoints: dict
    relaxed_buses: tuple
    bounds_used: dict
    log: list = field(default_factory=list)


class VoltageInfeasible(RuntimeError):
    def __init__(self, message, log):
        super().__init__(message)
        self.log = log


def _voltage_spec(network, x_init, partition, step, bounds_map, objective_buses, label, active_weight):
    ids = network.bus_ids
    pos = {b: k for k, b in enumerate(ids)}
    n = len(ids)
    xi = {b: k for k, b in enumerate(x_init.bus_ids)}
    rows, controls, limits, reg = [], [], [], []
    init = np.zeros((n, 4))
    bnd = np.tile(np.array([-np.inf, np.inf]), (n, 4, 1))
    class1 = set(partition.class1)
    for b in ids:
        k = pos[b]
        load = network.loads.get(b, 0j)
        init[k] = [x_init.vm[xi[b]], x_init.va[xi[b]], x_init.p[xi[b]], x_init.q[xi[b]]]
        bnd[k, VM] = bounds_map[b]
        sg, ibr = network.sg_at(b), network.ibr_at(b)
        if sg is not None:
            bnd[k, Q] = [sg.q_min - load.imag, sg.q_max - load.imag]
            if step == 5:
                rows.append("AP")
                init[k, P] = sg.p_set - load.real
            else:
                rows.append("PQ")
                init[k, P], init[k, Q] = sg.p_set - load.real, sg.q_set - load.imag
        elif ibr is not None:
            if step in (5, 6) and b in class1:
                rows.append("PQ")
                init[k, P], init[k, Q] = ibr.p_set - load.real, ibr.q_set - load.imag
            else:
                rows.append("VA")
                controls += [(k, VM), (k, VA)]
                bnd[k, P] = [ibr.p_min - load.real, ibr.p_max - load.real]
                bnd[k, Q] = [ibr.q_min - load.imag, ibr.q_max - load.imag]
                limits.append(ApparentLimit(k, ibr.s_max, -load.real, -load.imag))
                if active_weight > 0:
                    reg.append(ObjectiveTerm(active_weight, {(k, P): 1.0}, ibr.p_set - load.real,
                                             label=f"ibr {b} P"))
        else:
            rows.append("PQ")
            init[k, P], init[k, Q] = -load.real, -load.imag
    if not any("A" in r for r in rows):
        ref = network.sg_units[0].bus_id
        rows[pos[ref]] = "VA"
        bnd[pos[ref], P] = [-np.inf, np.inf]
    objective = [ObjectiveTerm(1.0, {(pos[b], VM): 1.0}, 1.0, label=f"bus {b}") for b in objective_buses]
    return StageSpec(ids, VariableMask.from_rows(rows), objective + reg, bnd, init, controls=controls,
                     apparent_limits=limits, label=label)


def _ibr_setpoints(network, sol):
    pos = {b: k for k, b in enumerate(sol.bus_ids)}
    out = {}
    for u in network.ibr_units:
        load = network.loads.get(u.bus_id, 0j)
        out[u.bus_id] = (float(sol.p[pos[u.bus_id]] + load.real), float(sol.q[pos[u.bus_id]] + load.imag))
    return out


def sequential_voltage_optimization(network: Network, x_star: PowerFlowSolution,
                                    partition: IbrClassPartition, dispatch: ReactiveDispatch,
                                    bounds: VoltageBounds = VoltageBounds(), objective_buses=None,
                                    slack_bus: int = None, active_weight: float = 1.0) -> VoltageResult:
    """Steps 3-6 of the sequential relaxation on the post-contingency ``network``.

    ``dispatch`` holds the class-1 reactive setpoints; they initialise Step 3
    and are the fixed class-1 injections of Steps 5 and 6.  IBR active outputs
    left free by the masks are pulled toward their set-points with weight
    ``active_weight``; the voltage term alone leaves them undetermined.
    """
    if slack_bus is None:
        slack_bus = network.sg_units[0].bus_id
    if abs(partition.delta_q) <= 1e-12 and not any(dispatch.increments.values()):
        # nothing to correct: the operating point is already the answer
        pos = {b: k for k, b in enumerate(x_star.bus_ids)}
        sg_v = {u.bus_id: float(x_star.vm[pos[u.bus_id]]) for u in network.sg_units}
        sg_q = {u.bus_id: float(x_star.q[pos[u.bus_id]] + network.loads.get(u.bus_id, 0j).imag)
                for u in network.sg_units}
        bmap = {b.id: tuple(bounds.local) for b in network.buses}
        return VoltageResult(x_star, 0, sg_v, sg_q, _ibr_setpoints(network, x_star), (), bmap,
                             [(0, "no imbalance", 0.0)])
    if objective_buses is None:
        objective_buses = sorted(b for b in network.loads if network.sg_at(b) is None
                                 and network.ibr_at(b) is None)
    xs = {b: k for k, b in enumerate(x_star.bus_ids)}
    primed = network.with_unit_setpoints(ibr={b: {"q_set": q} for b, q in dispatch.setpoints.items()})
    try:
        x0 = solve_regular_power_flow(apply_solution(primed, x_star), slack_bus)
    except PowerFlowDivergence:
        x0 = x_star
    local = {b.id: tuple(bounds.local) for b in network.buses}
    relax_kinds = ("SG", "IBR", "Transfer")
    relaxed = tuple(sorted(b.id for b in network.buses if b.kind in relax_kinds))
    wide = dict(local)
    for b in relaxed:
        wide[b] = bounds.global_band(x_star.vm[xs[b]])
    log = []
    Y = build_admittance(network)

    def attempt(net, x_init, step, bmap):
        spec = _voltage_spec(net, x_init, partition, step, bmap, objective_buses, f"voltage step {step}",
                             active_weight)
        try:
            sol = solve_constrained_stage(Y, spec)
        except StageError as exc:
            log.append((step, "failed", str(exc)))
            return None
        log.append((step, "converged", sol.objective))
        return sol

    accepted, step_ok, bmap = None, None, local
    sol = attempt(primed, x0, 3, local)
    if sol is not None:
        accepted, step_ok = sol, 3
    else:
        sol = attempt(primed, x0, 4, wide)
        if sol is not None:
            accepted, step_ok, bmap = sol, 4, wide
        else:
            bmap = wide

    saturated = dispatch.residual > 1e-9
    if accepted is None or saturated:
        # class-1 held at its dispatch (full headroom when Steps 3/4 failed)
        c1 = {}
        for b in partition.class1:
            q0 = network.ibr_at(b).q_set
            q = dispatch.setpoints[b] if accepted is not None else q0 + partition.headrooms[b]
            c1[b] = {"q_set": q}
        stepped = primed.with_unit_setpoints(ibr=c1)
        warm = accepted or x0
        sol = attempt(stepped, warm, 5, wide)
        if sol is not None and (accepted is None or sol.objective <= accepted.objective + 1e-12):
            accepted, step_ok, bmap = sol, 5, wide
        elif sol is None:
            sol6 = attempt(stepped, warm, 6, wide)
            if sol6 is not None and (accepted is None or sol6.objective <= accepted.objective + 1e-12):
                accepted, step_ok, bmap = sol6, 6, wide
        final_net = stepped
    else:
        final_net = primed
    if accepted is None:
        raise VoltageInfeasible("all relaxation steps failed: insufficient reactive capacity", log)

    pos = {b: k for k, b in enumerate(accepted.bus_ids)}
    sg_v = {u.bus_id: float(accepted.vm[pos[u.bus_id]]) for u in final_net.sg_units}
    sg_q = {u.bus_id: float(accepted.q[pos[u.bus_id]] + final_net.loads.get(u.bus_id, 0j).imag)
            for u in final_net.sg_units}
    ibr_sp = _ibr_setpoints(final_net, accepted)
    return VoltageResult(accepted, step_ok, sg_v, sg_q, ibr_sp,
                         relaxed if bmap is wide else (), dict(bmap), log)
