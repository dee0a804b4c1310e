"""Frequency control: imbalance detection, headroom dispatch and sequential APPF stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import HierarchyPartition, Network, build_admittance, compute_headroom
from .powerflow import PowerFlowSolution, line_flow
from .stage import (P, Q, VA, VM, ApparentLimit, ObjectiveTerm, SequencingError, StageError,
                    StageSpec, VariableMask, solve_constrained_stage)

DEFAULT_W1 = 1.0
DEFAULT_W2 = 1.0


# -- detection ------------------------------------------------------------------

@dataclass
class ImbalanceReport:
    contingent_area: int
    kind: str                      # "load_change" | "generation_trip"
    magnitude: float               # p.u., + means the area lacks power
    detection_time: float
    observations: dict = field(default_factory=dict)   # area -> (dP_tie, dP_gen)
    areas_flagged: tuple = ()
    tripped_unit: int | None = None

    @property
    def multiple(self) -> bool:
        return len(self.areas_flagged) > 1


class ActiveImbalanceDetector:
    """Stream consumer flagging the area whose tie and generation deltas disagree.

    An area is contingent when ``| |dP_tie| - |dP_gen| | > threshold`` holds for
    ``debounce`` consecutive samples.  A unit whose output collapses from above
    ``threshold`` to near zero is reported as a generation trip directly.
    """

    def __init__(self, threshold: float = 0.02, debounce: int = 3):
        self.threshold = threshold
        self.debounce = debounce
        self._count = {}
        self._onset = {}
        self._unit_base = None

    def update(self, t: float, deltas: dict, unit_power: dict | None = None):
        if unit_power is not None and self._unit_base is None:
            self._unit_base = dict(unit_power)
        if unit_power is not None:
            for (area, unit), p in unit_power.items():
                base = self._unit_base.get((area, unit), 0.0)
                if base > self.threshold and abs(p) < 1e-6:
                    return ImbalanceReport(area, "generation_trip", float(base), t,
                                           observations=dict(deltas), areas_flagged=(area,),
                                           tripped_unit=unit)
        flagged = []
        for area, (dtie, dgen) in deltas.items():
            if abs(abs(dtie) - abs(dgen)) > self.threshold:
                if self._count.get(area, 0) == 0:
                    self._onset[area] = t
                self._count[area] = self._count.get(area, 0) + 1
            else:
                self._count[area] = 0
            if self._count.get(area, 0) >= self.debounce:
                flagged.append(area)
        if not flagged:
            return None
        area = max(flagged, key=lambda a: abs(deltas[a][0] + deltas[a][1]))
        dtie, dgen = deltas[area]
        gen_drop = dgen < -self.threshold and abs(dtie + dgen) <= self.threshold
        if gen_drop:
            kind, magnitude = "generation_trip", -dgen
        else:
            kind, magnitude = "load_change", dtie + dgen
        return ImbalanceReport(area, kind, float(magnitude), self._onset[area],
                               observations=dict(deltas), areas_flagged=tuple(sorted(flagged)))


def detect_active_imbalance(samples, threshold: float = 0.02, debounce: int = 3, times=None):
    """Run the detector over a sequence of ``{area: (dP_tie, dP_gen)}`` samples.

    Each sample may also be a pair ``(deltas, unit_power)``.  Returns the first
    report or ``None``.
    """
    det = ActiveImbalanceDetector(threshold, debounce)
    for k, sample in enumerate(samples):
        t = times[k] if times is not None else float(k)
        if isinstance(sample, tuple):
            report = det.update(t, *sample)
        else:
            report = det.update(t, sample)
        if report is not None:
            return report
    return None


# -- primary dispatch -------------------------------------------------------------

@dataclass
class PrimaryDispatch:
    setpoints: dict                 # IBR bus id -> P setpoint
    increments: dict                # IBR bus id -> P change
    residual_deficit: float
    hierarchy_level: int
    area_shares: dict = field(default_factory=dict)
    requested: float = 0.0


def _headrooms(ibrs, sign):
    if sign >= 0:
        return [compute_headroom(u, "active") for u in ibrs]
    return [max(0.0, u.p_set - u.p_min) for u in ibrs]


def primary_dispatch_first_hierarchy(delta_p: float, ibrs) -> PrimaryDispatch:
    """Headroom-proportional split of the contingent area's imbalance."""
    ibrs = list(ibrs)
    sign = 1.0 if delta_p >= 0 else -1.0
    need = abs(delta_p)
    h = _headrooms(ibrs, sign)
    total = sum(h)
    inc = {}
    if need == 0 or not ibrs:
        inc = {u.bus_id: 0.0 for u in ibrs}
        residual = need
    elif need <= total:
        inc = {u.bus_id: sign * hj / total * need for u, hj in zip(ibrs, h)}
        residual = 0.0
    else:
        inc = {u.bus_id: sign * hj for u, hj in zip(ibrs, h)}
        residual = need - total
    setpoints = {u.bus_id: u.p_set + inc[u.bus_id] for u in ibrs}
    return PrimaryDispatch(setpoints, inc, residual, 1, requested=need)


def primary_dispatch_higher_hierarchy(delta_req: float, area_ibrs: dict, level: int = 2) -> PrimaryDispatch:
    """Split a deficit over the areas of a hierarchy, then over each area's IBRs."""
    sign = 1.0 if delta_req >= 0 else -1.0
    need = abs(delta_req)
    area_h = {a: _headrooms(units, sign) for a, units in area_ibrs.items()}
    area_tot = {a: sum(h) for a, h in area_h.items()}
    total = sum(area_tot.values())
    inc, shares = {}, {}
    sufficient = need <= total
    for a, units in area_ibrs.items():
        if need == 0 or total == 0:
            share = 0.0
        elif sufficient:
            share = area_tot[a] / total * need
        else:
            share = area_tot[a]
        shares[a] = share
        for u, hj in zip(units, area_h[a]):
            if area_tot[a] > 0 and sufficient:
                inc[u.bus_id] = sign * min(hj, hj / area_tot[a] * share)
            elif area_tot[a] > 0:
                inc[u.bus_id] = sign * hj
            else:
                inc[u.bus_id] = 0.0
    residual = 0.0 if sufficient else need - total
    setpoints = {}
    for units in area_ibrs.values():
        for u in units:
            setpoints[u.bus_id] = u.p_set + inc[u.bus_id]
    return PrimaryDispatch(setpoints, inc, residual, level, area_shares=shares, requested=need)


def primary_dispatch_all(network: Network, partition: HierarchyPartition, delta_p: float,
                         eligible=None) -> list:
    """Primary dispatch level by level until the deficit is absorbed."""
    def units(areas):
        out = network.ibrs_in(areas)
        return [u for u in out if eligible is None or u.bus_id in eligible]

    dispatches = [primary_dispatch_first_hierarchy(delta_p, units(partition.levels[0]))]
    level = 1
    while dispatches[-1].residual_deficit > 0 and level < partition.n_levels:
        level += 1
        areas = sorted(partition.levels[level - 1])
        per_area = {a: units([a]) for a in areas}
        dispatches.append(primary_dispatch_higher_hierarchy(
            np.sign(delta_p) * dispatches[-1].residual_deficit, per_area, level))
    return dispatches


# -- APPF stages --------------------------------------------------------------------

@dataclass
class StageResult:
    hierarchy_level: int
    solution: PowerFlowSolution
    ibr_setpoints: dict          # bus -> (P, Q)
    tie_targets_down: dict       # tie branch idx -> (P, Q) inflow at the level-i end, from stage i-1
    tie_targets_up: dict         # tie branch idx -> (P, Q) inflow required at the level-i end
    spec: StageSpec | None = None


def _local_injection(network: Network, bus_id: int) -> complex:
    s = -network.loads.get(bus_id, 0j)
    u = network.sg_at(bus_id)
    if u is not None:
        s += complex(u.p_set, u.q_set)
    u = network.ibr_at(bus_id)
    if u is not None:
        s += complex(u.p_set, u.q_set)
    return s


def tie_inflows(network: Network, sol: PowerFlowSolution, tie_ids, near_buses) -> dict:
    """Tie index -> complex power flowing *into* the near-side bus at ``sol``."""
    pos = {b: k for k, b in enumerate(sol.bus_ids)}
    V = sol.voltage
    out = {}
    for k in tie_ids:
        br = network.branches[k]
        pf, qf, pt, qt = line_flow(br, V[pos[br.from_bus]], V[pos[br.to_bus]])
        out[k] = -complex(pf, qf) if br.from_bus in near_buses else -complex(pt, qt)
    return out


def _tie_bus(network, k, buses):
    br = network.branches[k]
    return br.from_bus if br.from_bus in buses else br.to_bus


def build_stage_spec(network: Network, partition: HierarchyPartition, level: int,
                     x_star: PowerFlowSolution, primary_setpoints: dict, w1: float = DEFAULT_W1,
                     w2: float = DEFAULT_W2, delta_p_load: float = 0.0, upstream: StageResult | None = None,
                     fixed_ibrs: dict | None = None, voltage_bounds: dict | None = None,
                     x_init: PowerFlowSolution | None = None, sg_voltage: dict | None = None) -> StageSpec:
    """Stage ``level`` of APPF on the (post-contingency) ``network``.

    ``x_star`` is the full-network pre-contingency solution; it supplies the
    tie-flow targets and the fixed voltages.  ``fixed_ibrs`` maps IBR buses
    that must keep a given ``(P, Q)`` (treated like load buses).
    """
    if level > 1 and upstream is None:
        raise SequencingError(f"stage {level} needs the stage {level - 1} result")
    fixed_ibrs = fixed_ibrs or {}
    voltage_bounds = voltage_bounds or {}
    sg_voltage = sg_voltage or {}
    x_init = x_init or x_star
    areas = partition.levels[level - 1]
    scope = sorted(b.id for b in network.buses if b.area_id in areas)
    pos = {b: k for k, b in enumerate(scope)}
    xs = {b: k for k, b in enumerate(x_star.bus_ids)}
    xi = {b: k for k, b in enumerate(x_init.bus_ids)}
    up_key, down_key = (level, level + 1), (level - 1, level)
    up_ties = partition.tie_lines.get(up_key, [])
    down_ties = partition.tie_lines.get(down_key, [])
    up_buses = set(partition.boundary_buses.get(up_key, ()))
    down_buses = set(partition.far_boundary_buses.get(down_key, ()))
    if up_buses & down_buses:
        raise SequencingError(f"buses {sorted(up_buses & down_buses)} border both neighbouring hierarchies")

    n = len(scope)
    rows, controls = [], []
    init = np.zeros((n, 4))
    bounds = np.tile(np.array([-np.inf, np.inf]), (n, 4, 1))
    limits, objective = [], []
    tie_star_in = tie_inflows(network, x_star, up_ties, up_buses) if up_ties else {}
    down_in = {}
    if level > 1:
        down_in = {k: -complex(*upstream.tie_targets_up[k]) for k in down_ties}

    for b in scope:
        k = pos[b]
        bus = network.bus(b)
        local = _local_injection(network, b)
        init[k] = [x_init.vm[xi[b]], x_init.va[xi[b]], local.real, local.imag]
        vlo, vhi = voltage_bounds.get(b, (bus.v_min, bus.v_max))
        bounds[k, VM] = [vlo, vhi]
        sg, ibr = network.sg_at(b), network.ibr_at(b)
        if b in up_buses:
            rows.append("VA")
            init[k, VM], init[k, VA] = x_star.vm[xs[b]], x_star.va[xs[b]]
            star_in = sum(v for t, v in tie_star_in.items() if _tie_bus(network, t, up_buses) == b)
            init[k, P], init[k, Q] = local.real + star_in.real, local.imag + star_in.imag
            for t in up_ties:
                if _tie_bus(network, t, up_buses) != b:
                    continue
                br = network.branches[t]
                cap = min(tie_star_in[t].real + abs(delta_p_load), br.thermal_rating_p)
                bounds[k, P] = [local.real - br.thermal_rating_p, local.real + cap]
        elif b in down_buses:
            rows.append("PQ")
            inflow = sum(v for t, v in down_in.items() if _tie_bus(network, t, down_buses) == b)
            init[k, P], init[k, Q] = local.real + inflow.real, local.imag + inflow.imag
        elif ibr is not None and b in fixed_ibrs:
            rows.append("PQ")
            p_fix, q_fix = fixed_ibrs[b]
            init[k, P] = p_fix - network.loads.get(b, 0j).real
            init[k, Q] = q_fix - network.loads.get(b, 0j).imag
        elif ibr is not None:
            rows.append("VA")
            controls += [(k, VM), (k, VA)]
            load = network.loads.get(b, 0j)
            bounds[k, P] = [ibr.p_min - load.real, ibr.p_max - load.real]
            bounds[k, Q] = [ibr.q_min - load.imag, ibr.q_max - load.imag]
            limits.append(ApparentLimit(k, ibr.s_max, -load.real, -load.imag))
            if b in primary_setpoints:
                objective.append(ObjectiveTerm(w2, {(k, P): 1.0}, primary_setpoints[b] - load.real,
                                               label=f"ibr {b}"))
        elif sg is not None:
            rows.append("VP")
            init[k, VM] = sg_voltage.get(b, x_star.vm[xs[b]])
            load = network.loads.get(b, 0j)
            bounds[k, Q] = [sg.q_min - load.imag, sg.q_max - load.imag]
        else:
            rows.append("PQ")

    if up_ties and w1 > 0:
        local_sum = sum(_local_injection(network, b) for b in up_buses)
        star_sum = sum(tie_star_in.values())
        coeffs_p = {(pos[b], P): 1.0 for b in up_buses}
        coeffs_q = {(pos[b], Q): 1.0 for b in up_buses}
        objective.append(ObjectiveTerm(w1, coeffs_p, local_sum.real + star_sum.real, label="tie P"))
        objective.append(ObjectiveTerm(w1, coeffs_q, local_sum.imag + star_sum.imag, label="tie Q"))

    mask = VariableMask.from_rows(rows)
    has_angle = any("A" in r for r in rows)
    if not has_angle:
        ref = next((b for b in scope if network.sg_at(b) is not None), scope[0])
        k = pos[ref]
        rows[k] = "VA"
        mask = VariableMask.from_rows(rows)
        bounds[k, P] = [-np.inf, np.inf]
    return StageSpec(scope, mask, objective, bounds, init, controls=controls,
                     apparent_limits=limits, label=f"frequency stage {level}")


def _stage_result(network, partition, level, spec, sol, upstream) -> StageResult:
    pos = {b: k for k, b in enumerate(sol.bus_ids)}
    ibr_sp = {}
    for u in network.ibrs_in(partition.levels[level - 1]):
        k = pos[u.bus_id]
        load = network.loads.get(u.bus_id, 0j)
        ibr_sp[u.bus_id] = (float(sol.p[k] + load.real), float(sol.q[k] + load.imag))
    up_key = (level, level + 1)
    up_ties = partition.tie_lines.get(up_key, [])
    up_buses = set(partition.boundary_buses.get(up_key, ()))
    targets_up = {}
    for b in up_buses:
        ties_here = [t for t in up_ties if _tie_bus(network, t, up_buses) == b]
        inflow = complex(sol.p[pos[b]], sol.q[pos[b]]) - _local_injection(network, b)
        for t in ties_here:
            share = inflow / len(ties_here)
            targets_up[t] = (float(share.real), float(share.imag))
    down = {}
    if upstream is not None:
        down = {k: (-v[0], -v[1]) for k, v in upstream.tie_targets_up.items()}
    return StageResult(level, sol, ibr_sp, down, targets_up, spec)


class AppfAbort(RuntimeError):
    def __init__(self, message, partial, cause):
        super().__init__(message)
        self.partial = partial
        self.cause = cause


def run_appf(network: Network, partition: HierarchyPartition, x_star: PowerFlowSolution,
             report: ImbalanceReport, dispatches: list, w1: float = DEFAULT_W1, w2: float = DEFAULT_W2,
             **spec_kwargs) -> list:
    """Solve APPF stages from the contingent hierarchy outward.

    ``network`` is the post-contingency network.  Stops after the first level
    whose primary dispatch left no residual deficit.
    """
    results = []
    upstream = None
    for level in range(1, partition.n_levels + 1):
        disp = dispatches[level - 1] if level - 1 < len(dispatches) else None
        setpoints = disp.setpoints if disp is not None else {}
        spec = build_stage_spec(network, partition, level, x_star, setpoints, w1, w2,
                                report.magnitude, upstream, **spec_kwargs)
        Y = build_admittance(network, spec.bus_ids)
        try:
            sol = solve_constrained_stage(Y, spec)
        except StageError as exc:
            raise AppfAbort(f"APPF stage {level} failed: {exc}", results, exc) from exc
        upstream = _stage_result(network, partition, level, spec, sol, upstream)
        results.append(upstream)
        if disp is None or disp.residual_deficit <= 0:
            break
    return results
