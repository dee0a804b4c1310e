"""Area coordinators, delayed FIFO message channels and the dispatch timeline."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import DispatchCommand, GeneratorTrip, LoadStep, SetpointArrival, SimEvent
from .frequency import (ActiveImbalanceDetector, AppfAbort, ImbalanceReport, primary_dispatch_all,
                        run_appf)
from .grid import Network, assign_hierarchies
from .powerflow import PowerFlowSolution
from .voltage import (ReactiveImbalanceDetector, VoltageBounds, VoltageInfeasible, compute_sensitivity,
                      primary_reactive_dispatch, rank_and_classify, sequential_voltage_optimization)

IDLE, DETECTED, PRIMARY, SOLVING, AWAITING, COMPLETE, FALLBACK = (
    "Idle", "Detected", "PrimaryDispatched", "StageSolving", "AwaitingUpstream", "Complete", "FallbackAGC")
PHASES = (IDLE, DETECTED, PRIMARY, SOLVING, AWAITING, COMPLETE, FALLBACK)
LEGAL = {
    IDLE: {DETECTED},
    DETECTED: {PRIMARY},
    PRIMARY: {SOLVING},
    SOLVING: {COMPLETE, AWAITING},
    AWAITING: {COMPLETE},
    COMPLETE: {IDLE},
    FALLBACK: set(),
}
BUSY = {DETECTED, PRIMARY, SOLVING, AWAITING}

MESSAGE_SCHEMA = {
    "DeficitRequest": {"delta_p_req"},
    "TieTargets": {"targets"},
    "HeadroomUpdate": {"headroom"},
    "SetpointCommand": {"commands"},
    "Fallback": {"reason"},
}


class IllegalTransition(RuntimeError):
    pass


@dataclass(frozen=True)
class CoordinatorConfig:
    primary_delay: float = 0.5
    estimation_delay: float = 20.0
    latency: float = 0.25
    dispatch_delay: float = 0.25
    stage_solve_delay: float = 9.75
    voltage_primary_delay: float = 0.5
    voltage_secondary_delay: float = 1.0
    threshold: float = 0.02
    overlap_threshold: float = 0.05
    debounce: int = 3
    decision_window: float = 0.25
    w1: float = 1.0
    w2: float = 1.0
    frequency: bool = True
    voltage: bool = False
    voltage_bounds: VoltageBounds = VoltageBounds()


# -- measurements --------------------------------------------------------------------

@dataclass
class MeasurementFrame:
    timestamp: float
    vm: dict
    va: dict
    tie_p: dict
    tie_q: dict
    unit_p: dict          # (kind, bus) -> P

    @classmethod
    def from_sim(cls, fr: dict, bus_ids, sg_buses, ibr_buses, tie_ids) -> "MeasurementFrame":
        unit = {("SG", b): float(p) for b, p in zip(sg_buses, fr["sg_p"])}
        unit.update({("IBR", b): float(p) for b, p in zip(ibr_buses, fr["ibr_p"])})
        return cls(float(fr["time"]), dict(zip(bus_ids, map(float, fr["vm"]))),
                   dict(zip(bus_ids, map(float, fr["va"]))), dict(zip(tie_ids, map(float, fr["tie_p"]))),
                   dict(zip(tie_ids, map(float, fr["tie_q"]))), unit)


# -- messages ------------------------------------------------------------------------

@dataclass
class Message:
    kind: str
    source: int
    destination: int
    send_time: float
    delivery_time: float
    payload: dict
    seq: int = 0

    def __post_init__(self):
        if self.kind not in MESSAGE_SCHEMA:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if set(self.payload) != MESSAGE_SCHEMA[self.kind]:
            raise ValueError(f"{self.kind} payload must carry exactly {sorted(MESSAGE_SCHEMA[self.kind])}")
        if self.delivery_time < self.send_time:
            raise ValueError("delivery before send")

    def to_json(self) -> str:
        return json.dumps({"seq": self.seq, "kind": self.kind, "source": self.source,
                           "destination": self.destination, "send_time": round(self.send_time, 9),
                           "delivery_time": round(self.delivery_time, 9), "payload": self.payload},
                          sort_keys=True)


class Channel:
    """Delayed FIFO link; delivery order always equals send order."""

    def __init__(self, source, destination, latency):
        self.source, self.destination, self.latency = source, destination, latency
        self._last = -np.inf
        self.delivered = []

    def send(self, kind, send_time, payload, seq=0, latency=None) -> Message:
        lat = self.latency if latency is None else latency
        t = max(send_time + lat, self._last)
        self._last = t
        msg = Message(kind, self.source, self.destination, send_time, t, payload, seq)
        self.delivered.append(msg)
        return msg


class MessageFabric:
    def __init__(self, latency: float, latency_sampler=None):
        self.latency = latency
        self.sampler = latency_sampler
        self.channels = {}
        self.trace = []

    def send(self, kind, source, destination, t, payload) -> Message:
        key = (source, destination)
        if key not in self.channels:
            self.channels[key] = Channel(source, destination, self.latency)
        lat = self.sampler() if self.sampler is not None else None
        if source == destination:
            lat = 0.0
        msg = self.channels[key].send(kind, t, payload, seq=len(self.trace), latency=lat)
        self.trace.append(msg)
        return msg

    def to_jsonl(self) -> str:
        return "".join(m.to_json() + "\n" for m in self.trace)


# -- coordinator state ----------------------------------------------------------------

@dataclass
class CoordinatorState:
    phase: str = IDLE
    baselines: dict = field(default_factory=dict)
    pending_deficit: float = 0.0
    hierarchy_level: int | None = None
    history: list = field(default_factory=list)


class AreaCoordinator:
    """One area's logical process: measurement ingestion, detection and phase tracking."""

    def __init__(self, area_id: int, network: Network, config: CoordinatorConfig):
        self.area_id = area_id
        self.config = config
        self.state = CoordinatorState()
        self.state.history.append((0.0, IDLE))
        # sign turning the measured from-end flow into power entering this area
        self.tie_sign = {}
        for k in network.tie_lines():
            br = network.branches[k]
            if network.area_of(br.from_bus) == area_id:
                self.tie_sign[k] = -1.0
            elif network.area_of(br.to_bus) == area_id:
                self.tie_sign[k] = 1.0
        self.units = [("SG", u.bus_id) for u in network.sg_units if network.area_of(u.bus_id) == area_id]
        self.units += [("IBR", u.bus_id) for u in network.ibr_units if network.area_of(u.bus_id) == area_id]
        self.detector = ActiveImbalanceDetector(config.threshold, config.debounce)
        self.last_ts = -np.inf
        self.dropped = 0
        self._timeline = []
        self.expected_balance = 0.0

    # phase machine
    def transition(self, phase: str, t: float):
        if phase == FALLBACK:
            if self.state.phase == FALLBACK:
                return
        elif phase not in LEGAL[self.state.phase]:
            raise IllegalTransition(f"area {self.area_id}: {self.state.phase} -> {phase}")
        self.state.phase = phase
        self.state.history.append((round(t, 9), phase))

    def plan(self, t: float, phase: str):
        self._timeline.append((t, len(self._timeline), phase))
        self._timeline.sort()

    def advance(self, t: float):
        while self._timeline and self._timeline[0][0] <= t + 1e-9:
            tt, _, phase = self._timeline.pop(0)
            if self.state.phase != FALLBACK:
                self.transition(phase, tt)

    def fallback(self, t: float):
        self._timeline.clear()
        self.transition(FALLBACK, t)

    @property
    def busy(self) -> bool:
        return self.state.phase in BUSY or bool(self._timeline)

    # measurements
    def _import(self, frame: MeasurementFrame) -> float:
        """Net active power entering the area over its ties (from-end metering)."""
        return sum(sign * frame.tie_p[k] for k, sign in self.tie_sign.items())

    def ingest(self, frame: MeasurementFrame):
        """Update deltas from ``frame``; returns an :class:`ImbalanceReport` or ``None``."""
        if frame.timestamp <= self.last_ts:
            self.dropped += 1
            return None
        self.last_ts = frame.timestamp
        p_import = self._import(frame)
        p_gen = sum(frame.unit_p[u] for u in self.units)
        units = {(self.area_id, u): frame.unit_p[u] for u in self.units if u[0] == "SG"}
        if not self.state.baselines:
            self.state.baselines = {"import": p_import, "gen": p_gen}
            self.detector.update(frame.timestamp, {self.area_id: (0.0, 0.0)}, units)
            return None
        d_tie = p_import - self.state.baselines["import"]
        d_gen = p_gen - self.state.baselines["gen"]
        if self.busy or self.state.phase == COMPLETE:
            # own dispatch in progress: flag only a further, unexplained imbalance
            known = self.expected_balance
            if abs(d_tie + d_gen - known) > self.config.overlap_threshold:
                return ImbalanceReport(self.area_id, "overlap", d_tie + d_gen - known, frame.timestamp,
                                       observations={self.area_id: (d_tie, d_gen)},
                                       areas_flagged=(self.area_id,))
            return None
        return self.detector.update(frame.timestamp, {self.area_id: (d_tie, d_gen)}, units)


# -- estimator ------------------------------------------------------------------------

class PerfectEstimator:
    """Post-contingency models from the injected events (optional Gaussian noise on dQ)."""

    def __init__(self, network: Network, events, noise_sigma: float = 0.0, seed: int = 0):
        self.network = network
        self.events = [e for e in events if isinstance(e.payload, (LoadStep, GeneratorTrip))]
        self.rng = np.random.default_rng(seed)
        self.noise_sigma = noise_sigma

    def post_network(self, kind: str = "both") -> Network:
        net = self.network
        for ev in self.events:
            pl = ev.payload
            if isinstance(pl, LoadStep):
                dp = pl.dp if kind in ("both", "active") else 0.0
                dq = pl.dq if kind in ("both", "reactive") else 0.0
                if dp or dq:
                    net = net.with_load(pl.bus_id, complex(dp, dq))
            elif kind in ("both", "active"):
                net = net.without_sg(pl.bus_id)
        return net

    def delta_q(self, bus_id: int) -> float:
        dq = sum(ev.payload.dq for ev in self.events
                 if isinstance(ev.payload, LoadStep) and ev.payload.bus_id == bus_id)
        if self.noise_sigma > 0:
            dq += float(self.rng.normal(0.0, self.noise_sigma))
        return dq


# -- orchestration ----------------------------------------------------------------------

def _ibr_commands(setpoints: dict, issued_by: int, with_q: bool = True) -> tuple:
    cmds = []
    for b in sorted(setpoints):
        v = setpoints[b]
        if isinstance(v, tuple):
            cmds.append(DispatchCommand("IBR", b, p=float(v[0]), q=float(v[1]) if with_q else None,
                                        issued_by=issued_by))
        else:
            cmds.append(DispatchCommand("IBR", b, p=float(v), issued_by=issued_by))
    return tuple(cmds)


def _command_payload(cmds) -> dict:
    return {"commands": [{"device": c.device, "bus": c.bus_id, "p": c.p, "q": c.q, "v": c.v} for c in cmds]}


class CoordinationLayer:
    """All area coordinators plus the message fabric, driven by simulator frames."""

    def __init__(self, network: Network, x_star: PowerFlowSolution, estimator: PerfectEstimator,
                 config: CoordinatorConfig = CoordinatorConfig(), latency_sampler=None):
        self.network = network
        self.x_star = x_star
        self.estimator = estimator
        self.config = config
        self.fabric = MessageFabric(config.latency, latency_sampler)
        self.coordinators = {a.id: AreaCoordinator(a.id, network, config) for a in network.areas}
        v_pre = dict(zip(x_star.bus_ids, map(float, x_star.vm)))
        self.vdetector = ReactiveImbalanceDetector(v_pre, config.voltage_bounds, config.debounce)
        self.commands = []          # (time, DispatchCommand) as planned
        self.cancelled = []         # (time, label) of planned dispatches dropped by a fallback
        self.reports = {}
        self.results = {}
        self.fallbacks = []
        self._pending = {}
        self._decide_at = None
        self._started = False
        self._meta = None

    def attach(self, bus_ids, sg_buses, ibr_buses, tie_ids):
        self._meta = (bus_ids, sg_buses, ibr_buses, tie_ids)

    def _heartbeat(self, t):
        from .grid import area_adjacency, compute_headroom
        adj = area_adjacency(self.network)
        for a in sorted(adj):
            h = sum(compute_headroom(u) for u in self.network.ibrs_in([a]))
            for b in sorted(adj[a]):
                self.fabric.send("HeadroomUpdate", a, b, t, {"headroom": round(h, 12)})

    # frame hook for run_scenario
    def on_frame(self, fr: dict, schedule):
        t = float(fr["time"])
        if not self._started:
            self._heartbeat(t)
            self._started = True
        frame = MeasurementFrame.from_sim(fr, *self._meta)
        for c in self.coordinators.values():
            c.advance(t)
        for a in sorted(self.coordinators):
            c = self.coordinators[a]
            rep = c.ingest(frame)
            if rep is None:
                continue
            if rep.kind == "overlap" or self._any_busy(exclude_pending=True):
                self._fallback(t, rep)
                continue
            if self.config.frequency and "active" not in self._pending and "active" not in self.reports:
                self._pending["active"] = rep
                # a load change stays visible in tie + generation deltas; a trip does not
                c.expected_balance = rep.magnitude if rep.kind == "load_change" else 0.0
        if self.config.voltage and "reactive" not in self._pending and "reactive" not in self.reports:
            vrep = self.vdetector.update(t, frame.vm, self.estimator.delta_q)
            if vrep is not None:
                self._pending["reactive"] = vrep
        if self._pending and self._decide_at is None:
            onset = min(r.detection_time for r in self._pending.values())
            self._decide_at = onset + self.config.decision_window
            for kind, rep in self._pending.items():
                area = rep.contingent_area if kind == "active" else self.network.area_of(rep.contingent_bus)
                if self.coordinators[area].state.phase == IDLE:
                    self.coordinators[area].transition(DETECTED, t)
        if self._decide_at is not None and t >= self._decide_at - 1e-9:
            self._decide(schedule, t)

    def _any_busy(self, exclude_pending=False):
        return any(c.state.phase in BUSY for c in self.coordinators.values()) and not (
            exclude_pending and self._decide_at is not None)

    def _fallback(self, t, rep):
        self.fallbacks.append((round(t, 9), rep.contingent_area))
        for a, c in sorted(self.coordinators.items()):
            if c.busy or c.state.phase == DETECTED:
                c.fallback(t)
                for b in sorted(self.coordinators):
                    if b != a:
                        self.fabric.send("Fallback", a, b, t, {"reason": "overlapping contingency"})

    def _decide(self, schedule, t):
        act, rea = self._pending.get("active"), self._pending.get("reactive")
        self._pending = {}
        self._decide_at = None
        if act is not None:
            self.reports["active"] = act
        if rea is not None:
            self.reports["reactive"] = rea
        if act is not None and rea is not None:
            timeline = self.orchestrate_simultaneous(act, rea)
        elif act is not None:
            timeline = self.orchestrate_frequency(act)
        else:
            timeline = self.orchestrate_voltage(rea)
        for ev in timeline:
            schedule(ev)

    def _emit(self, t, area, cmds, label):
        self.fabric.send("SetpointCommand", area, area, t, _command_payload(cmds))
        for c in cmds:
            self.commands.append((round(t, 9), c))
        coord = self.coordinators[area]

        def deliverable():
            if coord.state.phase == FALLBACK:
                self.cancelled.append((round(t, 9), label))
                return False
            return True
        return SimEvent(t, SetpointArrival(cmds), label, guard=deliverable)

    # frequency
    def orchestrate_frequency(self, report: ImbalanceReport, fixed_ibrs=None, eligible=None,
                              voltage_bounds=None, sg_voltage=None, x_init=None, anchor=None) -> list:
        cfg = self.config
        t_d = report.detection_time if anchor is None else anchor
        area = report.contingent_area
        post = self.estimator.post_network("active")
        partition = assign_hierarchies(post, area)
        dispatches = primary_dispatch_all(post, partition, report.magnitude, eligible=eligible)
        events = []
        main = self.coordinators[area]
        main.state.hierarchy_level = 1
        main.state.pending_deficit = dispatches[0].residual_deficit
        t1 = t_d + cfg.primary_delay
        events.append(self._emit(t1, area, _ibr_commands(dispatches[0].setpoints, area), "primary L1"))
        main.plan(t1, PRIMARY)
        main.plan(t1, SOLVING)
        kwargs = dict(fixed_ibrs=fixed_ibrs, voltage_bounds=voltage_bounds, sg_voltage=sg_voltage,
                      x_init=x_init)
        try:
            results = run_appf(post, partition, self.x_star, report, dispatches, cfg.w1, cfg.w2, **kwargs)
            failure = None
        except AppfAbort as exc:
            results, failure = exc.partial, exc
        self.results["frequency"] = {"partition": partition, "dispatches": dispatches, "stages": results,
                                     "failure": str(failure) if failure else None}
        t_stage = t_d + cfg.estimation_delay
        prev_t = t1
        for lvl, disp in enumerate(dispatches[1:], start=2):
            sender = sorted(partition.levels[lvl - 2])[0]
            for a in sorted(partition.levels[lvl - 1]):
                msg = self.fabric.send("DeficitRequest", sender, a, prev_t,
                                       {"delta_p_req": round(disp.area_shares.get(a, 0.0), 12)})
                c = self.coordinators[a]
                c.state.hierarchy_level = lvl
                c.state.pending_deficit = disp.area_shares.get(a, 0.0)
                t_arr = msg.delivery_time
                t_disp = t_arr + cfg.dispatch_delay
                c.plan(t_arr, DETECTED)
                c.plan(t_disp, PRIMARY)
                c.plan(t_disp, SOLVING)
                mine = {b: p for b, p in disp.setpoints.items() if self.network.area_of(b) == a}
                events.append(self._emit(t_disp, a, _ibr_commands(mine, a), f"primary L{lvl} area {a}"))
            prev_t = t_disp
        # stage completions
        done_t = {}
        t_prev_stage = t_stage
        for r in results:
            lvl = r.hierarchy_level
            if lvl == 1:
                t_s = t_stage
            else:
                sender = sorted(partition.levels[lvl - 2])[0]
                targets = {str(k): [round(v[0], 12), round(v[1], 12)] for k, v in sorted(r.tie_targets_down.items())}
                arr = [self.fabric.send("TieTargets", sender, a, t_prev_stage, {"targets": targets}).delivery_time
                       for a in sorted(partition.levels[lvl - 1])]
                t_s = max(arr) + cfg.stage_solve_delay
            for a in sorted(partition.levels[lvl - 1]):
                mine = {b: v for b, v in r.ibr_setpoints.items() if self.network.area_of(b) == a}
                if eligible is not None:
                    mine = {b: v for b, v in mine.items() if b in eligible or lvl > 1}
                if mine:
                    events.append(self._emit(t_s, a, _ibr_commands(mine, a), f"APPF stage {lvl} area {a}"))
            done_t[lvl] = t_s
            t_prev_stage = t_s
        final_t = max(done_t.values()) if done_t else t_stage
        if failure is not None:
            t_fail = t_stage if not done_t else final_t
            for c in self.coordinators.values():
                c.plan(t_fail, FALLBACK)
            self.fallbacks.append((round(t_fail, 9), area))
            return events
        if len(results) > 1:
            main.plan(t_stage, AWAITING)
        main.plan(final_t, COMPLETE)
        for lvl in range(2, len(results) + 1):
            for a in sorted(partition.levels[lvl - 1]):
                self.coordinators[a].plan(done_t[lvl], COMPLETE)
        return events

    # voltage
    def _voltage_plan(self, report, kind):
        cfg = self.config
        post = self.estimator.post_network(kind)
        S = compute_sensitivity(self.network, self.x_star, self.network.sg_units[0].bus_id)
        dq = report.delta_q
        part = rank_and_classify(S, report.contingent_bus, dq, self.network.ibr_units)
        q_now = {u.bus_id: u.q_set for u in self.network.ibr_units}
        disp = primary_reactive_dispatch(part, dq, q_now)
        res = sequential_voltage_optimization(post, self.x_star, part, disp, cfg.voltage_bounds)
        self.results["voltage"] = {"partition": part, "dispatch": disp, "result": res, "sensitivity": S}
        return part, disp, res

    def orchestrate_voltage(self, report) -> list:
        cfg = self.config
        area = self.network.area_of(report.contingent_bus)
        c = self.coordinators[area]
        t_d = report.detection_time
        try:
            part, disp, res = self._voltage_plan(report, "both")
        except VoltageInfeasible:
            c.plan(t_d + cfg.voltage_secondary_delay, FALLBACK)
            return []
        t1, t2 = t_d + cfg.voltage_primary_delay, t_d + cfg.voltage_secondary_delay
        q_cmds = tuple(DispatchCommand("IBR", b, q=float(q), issued_by=area) for b, q in sorted(disp.setpoints.items()))
        events = [self._emit(t1, area, q_cmds, "primary reactive")]
        cmds = [DispatchCommand("SG", b, v=v, issued_by=area) for b, v in sorted(res.sg_voltage_setpoints.items())]
        cmds += list(_ibr_commands(res.ibr_setpoints, area))
        events.append(self._emit(t2, area, tuple(cmds), "voltage APPF"))
        c.plan(t1, PRIMARY)
        c.plan(t1, SOLVING)
        c.plan(t2, COMPLETE)
        return events

    def orchestrate_simultaneous(self, active: ImbalanceReport, reactive) -> list:
        """Voltage first (class-1 Q, then the relaxation), frequency on class-2 IBRs."""
        cfg = self.config
        t_d = min(active.detection_time, reactive.detection_time)
        area = active.contingent_area
        try:
            part, disp, vres = self._voltage_plan(reactive, "reactive")
        except VoltageInfeasible:
            return self.orchestrate_frequency(active, anchor=t_d)
        t1, t2 = t_d + cfg.voltage_primary_delay, t_d + cfg.voltage_secondary_delay
        q_cmds = tuple(DispatchCommand("IBR", b, q=float(q), issued_by=area) for b, q in sorted(disp.setpoints.items()))
        events = [self._emit(t1, area, q_cmds, "primary reactive")]
        cmds = [DispatchCommand("SG", b, v=v, issued_by=area) for b, v in sorted(vres.sg_voltage_setpoints.items())]
        cmds += [DispatchCommand("IBR", b, q=float(pq[1]), issued_by=area) for b, pq in sorted(vres.ibr_setpoints.items())]
        events.append(self._emit(t2, area, tuple(cmds), "voltage APPF"))
        class1 = set(part.class1)
        fixed = {b: (self.network.ibr_at(b).p_set, vres.ibr_setpoints[b][1]) for b in class1}
        eligible = {u.bus_id for u in self.network.ibr_units if u.bus_id not in class1}
        events += self.orchestrate_frequency(active, fixed_ibrs=fixed, eligible=eligible,
                                             voltage_bounds=vres.bounds_used, sg_voltage=vres.sg_voltage_setpoints,
                                             x_init=vres.solution, anchor=t_d)
        self.results["simultaneous"] = {"class1": sorted(class1), "class2": sorted(eligible)}
        return events

    def trace_jsonl(self) -> str:
        return self.fabric.to_jsonl()

    def phase_histories(self) -> dict:
        return {a: list(c.state.history) for a, c in sorted(self.coordinators.items())}
