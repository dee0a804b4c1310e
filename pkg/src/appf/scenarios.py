"""Case-study scenarios, control modes, RPF/APPF comparison and run artifacts."""

from __future__ import annotations

import csv
import importlib.util
import io
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .cases import CONTINGENT_AREA, REFERENCE_SLACK, build_reference_case
from .coordinator import CoordinationLayer, CoordinatorConfig, PerfectEstimator
from .dynamics import (F_NOMINAL, DynamicsConfig, GeneratorTrip, LoadStep, SimEvent, Trajectory, config_hash,
                       frequency_nadir, run_scenario, settling_time)
from .frequency import ImbalanceReport, primary_dispatch_all, run_appf
from .grid import Network, assign_hierarchies, build_admittance, load_network
from .powerflow import PowerFlowSolution, solve_regular_power_flow
from .report import render_comparison, render_run, write_plot_data

MODES = ("none", "droop", "agc-only", "hierarchical", "hierarchical+droop")
EVENT_TIME = 10.0
SETTLING_BAND = 0.01


class ConfigError(ValueError):
    """Invalid scenario configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class ScenarioSpec:
    id: str
    description: str
    events: tuple
    duration: float
    frequency: bool
    voltage: bool


def _load_step(mw=0.0, mvar=0.0, bus=16):
    return LoadStep(bus, mw / 100.0, mvar / 100.0)


SCENARIOS = {
    "case1": ScenarioSpec("case1", "63 MW load increase at bus 16 (contingent area self-sufficient)",
                          ((EVENT_TIME, _load_step(63.0)),), 100.0, True, False),
    "case2": ScenarioSpec("case2", "130 MW load increase at bus 16 (second hierarchy engaged)",
                          ((EVENT_TIME, _load_step(130.0)),), 100.0, True, False),
    "gen-trip": ScenarioSpec("gen-trip", "trip of the 69 MW machine at bus 4",
                             ((EVENT_TIME, GeneratorTrip(4)),), 100.0, True, False),
    "volt": ScenarioSpec("volt", "105 MVAR reactive load increase at bus 16",
                         ((EVENT_TIME, _load_step(0.0, 105.0)),), 40.0, False, True),
    "simultaneous": ScenarioSpec("simultaneous", "80 MW + 50 MVAR load increase at bus 16",
                                 ((EVENT_TIME, _load_step(80.0, 50.0)),), 100.0, True, True),
}


@dataclass
class ScenarioConfig:
    scenario: str = "case1"
    modes: tuple = ("hierarchical",)
    case_file: str | None = None
    output_dir: str = "appf-out"
    duration: float | None = None
    event_time: float = EVENT_TIME
    event_bus: int | None = None
    event_mw: float | None = None
    event_mvar: float | None = None
    primary_delay: float = 0.5
    estimation_delay: float = 20.0
    latency: float = 0.25
    randomize_latency: bool = False
    w1: float = 1.0
    w2: float = 1.0
    dt: float = 1.0 / 1200.0
    agc_ki: float = 0.025
    seed: int = 0
    figures: bool = False

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {sorted(SCENARIOS)}")
        bad = [m for m in self.modes if m not in MODES]
        if bad or not self.modes:
            raise ConfigError(f"unknown control mode(s) {bad}; choose from {list(MODES)}")
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigError("objective weights must be non-negative")
        for name in ("primary_delay", "estimation_delay", "latency", "event_time"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.duration is not None and self.duration <= self.event_time:
            raise ConfigError("duration must extend past the event")
        try:
            DynamicsConfig(dt=self.dt)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.figures and importlib.util.find_spec("matplotlib") is None:
            raise ConfigError("figures need matplotlib: pip install 'artifact[figures]'")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        data = dict(data)
        if "modes" in data:
            m = data["modes"]
            data["modes"] = tuple([m] if isinstance(m, str) else m)
        return cls(**data)


def scenario_events(cfg: ScenarioConfig) -> list:
    spec = SCENARIOS[cfg.scenario]
    events = []
    for _, payload in spec.events:
        if isinstance(payload, LoadStep):
            payload = LoadStep(cfg.event_bus if cfg.event_bus is not None else payload.bus_id,
                               cfg.event_mw / 100.0 if cfg.event_mw is not None else payload.dp,
                               cfg.event_mvar / 100.0 if cfg.event_mvar is not None else payload.dq)
        events.append(SimEvent(cfg.event_time, payload, "contingency"))
    return events


def load_case(cfg: ScenarioConfig) -> Network:
    if cfg.case_file:
        try:
            return load_network(cfg.case_file)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load case file {cfg.case_file}: {exc}") from exc
    return build_reference_case()


# -- steady-state comparison -----------------------------------------------------------

@dataclass
class SteadyStateTable:
    bus_ids: list
    columns: dict                 # name -> array over buses
    utilization: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(self.columns)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bus"] + names)
        for k, b in enumerate(self.bus_ids):
            w.writerow([b] + [f"{self.columns[n][k]:.10g}" for n in names])
        return buf.getvalue()


def _apply_contingency(network: Network, contingency) -> Network:
    if isinstance(contingency, LoadStep):
        if contingency.dp == 0 and contingency.dq == 0:
            return network
        return network.with_load(contingency.bus_id, complex(contingency.dp, contingency.dq))
    if isinstance(contingency, GeneratorTrip):
        return network.without_sg(contingency.bus_id)
    raise TypeError("contingency must be LoadStep or GeneratorTrip")


def _contingency_magnitude(network, contingency) -> float:
    if isinstance(contingency, LoadStep):
        return contingency.dp
    return network.sg_at(contingency.bus_id).p_set


def merged_appf_solution(network: Network, x_star: PowerFlowSolution, stages) -> PowerFlowSolution:
    """Whole-network view: stage solutions where solved, pre-contingency values elsewhere."""
    vm, va, p, q = x_star.vm.copy(), x_star.va.copy(), x_star.p.copy(), x_star.q.copy()
    pos = {b: k for k, b in enumerate(x_star.bus_ids)}
    for st in stages:
        s = st.solution
        for k, b in enumerate(s.bus_ids):
            j = pos[b]
            vm[j], va[j], p[j], q[j] = s.vm[k], s.va[k], s.p[k], s.q[k]
    # stage injections at tie ends include the tie inflow; recompute them on the full network
    V = vm * np.exp(1j * va)
    S = V * np.conj(build_admittance(network, list(x_star.bus_ids)) @ V)
    for k in network.tie_lines():
        br = network.branches[k]
        for b in (br.from_bus, br.to_bus):
            p[pos[b]], q[pos[b]] = S[pos[b]].real, S[pos[b]].imag
    return PowerFlowSolution(list(x_star.bus_ids), vm, va, p, q)


def compare_rpf_appf(network: Network, contingency, slack_bus: int = REFERENCE_SLACK,
                     w1: float = 1.0, w2: float = 1.0) -> SteadyStateTable:
    """Distributed-slack RPF redispatch against APPF for one contingency."""
    x_star = solve_regular_power_flow(network, slack_bus)
    post = _apply_contingency(network, contingency)
    part = {u.bus_id: u.p_max for u in post.sg_units}
    rpf = solve_regular_power_flow(post, slack_bus, participation=part)
    area = network.area_of(contingency.bus_id)
    magnitude = _contingency_magnitude(network, contingency)
    partition = assign_hierarchies(post, area)
    dispatches = primary_dispatch_all(post, partition, magnitude)
    report = ImbalanceReport(area, "load_change" if isinstance(contingency, LoadStep) else "generation_trip",
                             magnitude, 0.0)
    stages = run_appf(post, partition, x_star, report, dispatches, w1, w2)
    appf = merged_appf_solution(post, x_star, stages)
    cols = {}
    for tag, sol in (("pre", x_star), ("rpf", rpf), ("appf", appf)):
        cols[f"{tag}_p"] = sol.p.copy()
        cols[f"{tag}_q"] = sol.q.copy()
        cols[f"{tag}_vm"] = sol.vm.copy()
    util = {}
    pos = {b: k for k, b in enumerate(x_star.bus_ids)}
    for scope, areas in (("contingent_area", [area]), ("all", [a.id for a in network.areas])):
        units = post.ibrs_in(areas)
        cap = sum(u.p_max for u in units)
        for tag, sol in (("pre", x_star), ("rpf", rpf), ("appf", appf)):
            used = sum(sol.p[pos[u.bus_id]] + post.loads.get(u.bus_id, 0j).real for u in units)
            util[f"{tag}_{scope}"] = float(used / cap) if cap else 0.0
    return SteadyStateTable(list(x_star.bus_ids), cols, util)


# -- dynamic runs ----------------------------------------------------------------------

def _dynamics_config(cfg: ScenarioConfig, mode: str) -> DynamicsConfig:
    agc = mode in ("agc-only", "hierarchical", "hierarchical+droop")
    droop = mode in ("droop", "hierarchical+droop")
    return DynamicsConfig(dt=cfg.dt, agc=agc, agc_ki=cfg.agc_ki, ibr_droop=droop)


@dataclass
class RunResult:
    scenario: str
    mode: str
    trajectory: Trajectory
    summary: dict
    layer: CoordinationLayer | None = None
    table: SteadyStateTable | None = None


def _round(obj, digits=10):
    if isinstance(obj, float):
        return float(f"{obj:.{digits}g}") if np.isfinite(obj) else None
    if isinstance(obj, (np.floating,)):
        return _round(float(obj), digits)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {str(k): _round(v, digits) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v, digits) for v in obj]
    return obj


def system_frequency(traj: Trajectory) -> np.ndarray:
    """Mean machine speed in Hz (tripped machines, whose speed is frozen at zero, are skipped)."""
    live = ~np.all(traj.sg_p[-10:] == 0.0, axis=0)
    return F_NOMINAL * (1.0 + traj.sg_speed[:, live].mean(axis=1))


def summarize(traj: Trajectory, network: Network, event_time: float, v_pre=None) -> dict:
    """Metrics recomputable from the trajectory plus static unit ratings."""
    after = traj.time >= event_time
    f = traj.frequency
    v0 = traj.vm[0] if v_pre is None else v_pre
    dv = np.abs(traj.vm[after] - v0)
    p_max = {u.bus_id: u.p_max for u in network.ibr_units}
    util = {str(b): float(traj.ibr_p[-1, k] / p_max[b]) for k, b in enumerate(traj.ibr_buses)}
    f_sys = system_frequency(traj)
    return {
        "settling_time_s": settling_time(traj.time, f, SETTLING_BAND, start=event_time),
        "system_settling_time_s": settling_time(traj.time, f_sys, SETTLING_BAND, start=event_time),
        "frequency_nadir_hz": frequency_nadir(f_sys),
        "bus_frequency_min_hz": frequency_nadir(f[after]) if np.any(after) else frequency_nadir(f),
        "final_frequency_min_hz": float(f[-1].min()),
        "final_frequency_max_hz": float(f[-1].max()),
        "max_voltage_deviation_pu": float(dv.max()) if dv.size else 0.0,
        "final_max_voltage_deviation_pu": float(np.abs(traj.vm[-1] - v0).max()),
        "final_vm": {str(b): float(v) for b, v in zip(traj.bus_ids, traj.vm[-1])},
        "ibr_utilization": util,
        "ibr_p_final": {str(b): float(p) for b, p in zip(traj.ibr_buses, traj.ibr_p[-1])},
        "sg_p_final": {str(b): float(p) for b, p in zip(traj.sg_buses, traj.sg_p[-1])},
        "sg_q_final": {str(b): float(q) for b, q in zip(traj.sg_buses, traj.sg_q[-1])},
        "balance_residual_max": float(np.max(np.abs(traj.balance_residual))),
    }


def run_mode(cfg: ScenarioConfig, mode: str, network: Network | None = None) -> RunResult:
    cfg.validate()
    spec = SCENARIOS[cfg.scenario]
    network = network or load_case(cfg)
    slack = network.sg_units[0].bus_id
    x_star = solve_regular_power_flow(network, slack)
    events = scenario_events(cfg)
    duration = cfg.duration if cfg.duration is not None else spec.duration
    dyn = _dynamics_config(cfg, mode)
    layer = None
    on_frame = None
    if mode.startswith("hierarchical"):
        ccfg = CoordinatorConfig(primary_delay=cfg.primary_delay, estimation_delay=cfg.estimation_delay,
                                 latency=cfg.latency, w1=cfg.w1, w2=cfg.w2, frequency=spec.frequency,
                                 voltage=spec.voltage)
        sampler = None
        if cfg.randomize_latency:
            rng = np.random.default_rng(cfg.seed)
            sampler = lambda: float(rng.uniform(0.15, 2.0))  # noqa: E731
        layer = CoordinationLayer(network, x_star, PerfectEstimator(network, events, seed=cfg.seed), ccfg,
                                  latency_sampler=sampler)
        layer.attach(network.bus_ids, [u.bus_id for u in network.sg_units],
                     [u.bus_id for u in network.ibr_units], network.tie_lines())
        on_frame = layer.on_frame
    traj = run_scenario(network, x_star, events, duration, dyn, on_frame)
    summary = {"scenario": cfg.scenario, "mode": mode, "event_time_s": cfg.event_time,
               "duration_s": duration, **summarize(traj, network, cfg.event_time, x_star.vm)}
    traj.metadata.update({"scenario": cfg.scenario, "mode": mode, "scenario_config": _round(asdict(cfg)),
                          "scenario_hash": config_hash(asdict(cfg)),
                          "ibr_p_max": {str(u.bus_id): u.p_max for u in network.ibr_units}})
    if layer is not None:
        summary["commands"] = [{"time": t, "device": c.device, "bus": c.bus_id, "p": c.p, "q": c.q, "v": c.v}
                               for t, c in layer.commands]
        summary["phases"] = {str(a): h for a, h in layer.phase_histories().items()}
        summary["fallbacks"] = layer.fallbacks
        summary["cancelled_dispatches"] = layer.cancelled
        fr = layer.results.get("frequency")
        if fr is not None:
            summary["primary_dispatch"] = [{"level": d.hierarchy_level, "setpoints": d.setpoints,
                                            "residual_deficit": d.residual_deficit}
                                           for d in fr["dispatches"]]
            summary["appf_stages"] = [{"level": s.hierarchy_level, "ibr_setpoints": s.ibr_setpoints,
                                       "objective": s.solution.objective,
                                       "balance_residual": s.solution.max_mismatch}
                                      for s in fr["stages"]]
            summary["deficit"] = fr["dispatches"][-1].residual_deficit
            summary["appf_failure"] = fr["failure"]
        vr = layer.results.get("voltage")
        if vr is not None:
            summary["voltage"] = {"ranking": vr["partition"].ranking, "class1": vr["partition"].class1,
                                  "class2": vr["partition"].class2, "step": vr["result"].step,
                                  "relaxed_buses": list(vr["result"].relaxed_buses),
                                  "sg_voltage_setpoints": vr["result"].sg_voltage_setpoints,
                                  "ibr_setpoints": vr["result"].ibr_setpoints}
        if layer.reports.get("active") is not None:
            r = layer.reports["active"]
            summary["detection"] = {"area": r.contingent_area, "kind": r.kind, "magnitude": r.magnitude,
                                    "time": r.detection_time}
        if layer.reports.get("reactive") is not None:
            r = layer.reports["reactive"]
            summary["reactive_detection"] = {"bus": r.contingent_bus, "delta_q": r.delta_q,
                                             "time": r.detection_time}
    table = None
    if spec.frequency and isinstance(events[0].payload, (LoadStep, GeneratorTrip)) and mode == cfg.modes[0]:
        payload = events[0].payload
        if isinstance(payload, GeneratorTrip) or payload.dp != 0:
            table = compare_rpf_appf(network, LoadStep(payload.bus_id, payload.dp)
                                     if isinstance(payload, LoadStep) else payload, slack, cfg.w1, cfg.w2)
            summary["utilization"] = table.utilization
    return RunResult(cfg.scenario, mode, traj, _round(summary), layer, table)


def write_artifacts(result: RunResult, out_dir, figures: bool = False) -> list:
    """Write trajectory CSV, metadata, summary, message trace and optional figures."""
    out = Path(out_dir) / f"{result.scenario}_{result.mode.replace('+', '_')}"
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        path = out / name
        path.write_text(text)
        written.append(path)

    put("trajectory.csv", result.trajectory.to_csv())
    put("metadata.json", result.trajectory.metadata_json())
    put("summary.json", json.dumps(result.summary, indent=1, sort_keys=True) + "\n")
    if result.layer is not None:
        put("messages.jsonl", result.layer.trace_jsonl())
    if result.table is not None:
        put("steady_state.csv", result.table.to_csv())
    written.append(write_plot_data(result, out))
    if figures:
        written += render_run(result, out)
    return written


def run_case(cfg: ScenarioConfig) -> list:
    """Run every configured mode of one scenario and write artifacts; returns RunResults."""
    cfg.validate()
    network = load_case(cfg)
    results = []
    for mode in cfg.modes:
        res = run_mode(cfg, mode, network)
        write_artifacts(res, cfg.output_dir, cfg.figures)
        results.append(res)
    if len(results) > 1:
        comp = {r.mode: {k: r.summary.get(k) for k in ("settling_time_s", "frequency_nadir_hz",
                                                       "max_voltage_deviation_pu", "final_frequency_min_hz")}
                for r in results}
        path = Path(cfg.output_dir) / f"{cfg.scenario}_comparison.json"
        path.write_text(json.dumps(comp, indent=1, sort_keys=True) + "\n")
        if cfg.figures:
            render_comparison(results, Path(cfg.output_dir))
    return results


def replace_config(cfg: ScenarioConfig, **kw) -> ScenarioConfig:
    return replace(cfg, **kw)
