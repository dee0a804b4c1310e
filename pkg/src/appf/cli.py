"""Command-line harness: ``appf run | compare | list-scenarios | validate-case``.

Precedence is config file > command-line flags > defaults.  Exit codes:
0 success, 2 configuration error, 3 simulation or optimisation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .cases import REFERENCE_SLACK
from .dynamics import GeneratorTrip, LoadStep, SimulationAbort
from .frequency import AppfAbort
from .grid import GridError
from .powerflow import PowerFlowDivergence, solve_regular_power_flow
from .scenarios import MODES, SCENARIOS, ConfigError, ScenarioConfig, compare_rpf_appf, load_case, run_case, \
    scenario_events
from .stage import StageError
from .voltage import SensitivityError, VoltageInfeasible

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIMULATION = 3

SIMULATION_ERRORS = (SimulationAbort, StageError, AppfAbort, VoltageInfeasible, SensitivityError,
                     PowerFlowDivergence)

log = logging.getLogger("appf")

# flag dest -> ScenarioConfig field
FLAG_FIELDS = {
    "scenario": "scenario", "modes": "modes", "case_file": "case_file", "output_dir": "output_dir",
    "duration": "duration", "event_time": "event_time", "event_bus": "event_bus", "event_mw": "event_mw",
    "event_mvar": "event_mvar", "primary_delay": "primary_delay", "estimation_delay": "estimation_delay",
    "latency": "latency", "randomize_latency": "randomize_latency", "w1": "w1", "w2": "w2",
    "agc_ki": "agc_ki", "seed": "seed", "figures": "figures",
}


def _add_config_flags(p: argparse.ArgumentParser):
    # every default is None so that only explicitly given flags override the defaults
    p.add_argument("--config", help="JSON file of ScenarioConfig fields (overrides flags)")
    p.add_argument("-s", "--scenario", help=f"scenario id, one of {sorted(SCENARIOS)}")
    p.add_argument("-m", "--modes", nargs="+", help=f"control modes from {list(MODES)}")
    p.add_argument("--case-file", help="network JSON (default: built-in 33-bus reference case)")
    p.add_argument("-o", "--output-dir", help="artifact directory")
    p.add_argument("--duration", type=float, help="simulated time [s]")
    p.add_argument("--event-time", type=float, help="contingency time [s]")
    p.add_argument("--event-bus", type=int, help="contingency bus id")
    p.add_argument("--event-mw", type=float, help="active load step [MW]")
    p.add_argument("--event-mvar", type=float, help="reactive load step [MVAR]")
    p.add_argument("--primary-delay", type=float, help="detection to primary dispatch [s]")
    p.add_argument("--estimation-delay", type=float, help="detection to stage-1 setpoints [s]")
    p.add_argument("--latency", type=float, help="inter-area message latency [s]")
    p.add_argument("--randomize-latency", action="store_true", default=None,
                   help="draw per-message latency from a seeded distribution")
    p.add_argument("--w1", type=float, help="tie-line deviation weight")
    p.add_argument("--w2", type=float, help="IBR deviation weight")
    p.add_argument("--agc-ki", type=float, help="AGC integral gain")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--figures", action="store_true", default=None, help="also render PNG figures")


def build_config(args) -> ScenarioConfig:
    values = {}
    for dest, name in FLAG_FIELDS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[name] = tuple(v) if name == "modes" else v
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ConfigError("config file must hold a JSON object")
        values.update(file_values)
    try:
        return ScenarioConfig.from_dict(values).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_run(args) -> int:
    cfg = build_config(args)
    results = run_case(cfg)
    for r in results:
        s = r.summary
        print(f"{r.scenario:13s} {r.mode:18s} settling={s.get('settling_time_s')} "
              f"nadir={s.get('frequency_nadir_hz')} dV={s.get('max_voltage_deviation_pu')}")
    print(f"artifacts in {cfg.output_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = build_config(args)
    payload = scenario_events(cfg)[0].payload
    if isinstance(payload, LoadStep):
        contingency = LoadStep(payload.bus_id, payload.dp)
    else:
        contingency = GeneratorTrip(payload.bus_id)
    table = compare_rpf_appf(load_case(cfg), contingency, REFERENCE_SLACK, cfg.w1, cfg.w2)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{cfg.scenario}_steady_state.csv").write_text(table.to_csv())
    (out / f"{cfg.scenario}_utilization.json").write_text(
        json.dumps(table.utilization, indent=1, sort_keys=True) + "\n")
    for k, v in sorted(table.utilization.items()):
        print(f"{k:24s} {v:.4f}")
    return EXIT_OK


def cmd_list(args) -> int:
    for sid, spec in SCENARIOS.items():
        print(f"{sid:13s} {spec.duration:6.1f} s  {spec.description}")
    print("modes: " + ", ".join(MODES))
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = ScenarioConfig(case_file=args.case_file)
    try:
        net = load_case(cfg)
    except GridError as exc:
        raise ConfigError(str(exc)) from exc
    sol = solve_regular_power_flow(net, args.slack if args.slack is not None else net.buses[0].id)
    ties = net.tie_lines()
    print(f"buses={len(net.buses)} areas={len(net.areas)} sg={len(net.sg_units)} ibr={len(net.ibr_units)} "
          f"ties={len(ties)}")
    print(f"base power flow converged in {sol.iterations} iterations, max mismatch {sol.max_mismatch:.3e}")
    print(f"|V| range [{np.min(sol.vm):.4f}, {np.max(sol.vm):.4f}]")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="appf", description="Area-prioritized post-contingency dispatch studies")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="simulate a scenario under one or more control modes")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("compare", help="steady-state RPF vs APPF table for a scenario")
    _add_config_flags(p)
    p.set_defaults(func=cmd_compare)
    p = sub.add_parser("list-scenarios", help="list scenario ids and control modes")
    p.set_defaults(func=cmd_list)
    p = sub.add_parser("validate-case", help="load a case file and solve its base power flow")
    p.add_argument("case_file", nargs="?", help="network JSON (default: built-in reference case)")
    p.add_argument("--slack", type=int, help="slack bus id (default: first bus)")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SIMULATION_ERRORS as exc:
        print(f"simulation failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SIMULATION


if __name__ == "__main__":
    sys.exit(main())
