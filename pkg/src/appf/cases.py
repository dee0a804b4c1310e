"""Reference 33-bus, 3-area, 9-machine, 6-IBR test system.

Each area is the WSCC 3-machine 9-bus system (Anderson & Fouad / Sauer & Pai
machine set) with two inverter buses attached to load buses.  The baseline
dispatch is a repository calibration (the published case modified its
dispatch without listing values); it was chosen so that every tie carries a
non-zero flow and each IBR holds 45 MW of active headroom.

Global bus numbering::

    area 1 (west)    SG 1-3, network 10 11 25 26 27 28, IBR1 19 (on 11), IBR2 20 (on 27)
    area 2 (central) SG 4-6, network 12 13 14 15 16 17, IBR3 21 (on 13), IBR4 22 (on 16)
    area 3 (east)    SG 7-9, network 18 29 30 31 32 33, IBR5 23 (on 29), IBR6 24 (on 32)
    ties: 26-12, 17-18, 28-31
"""

from __future__ import annotations

from importlib import resources

from .grid import Area, Branch, Bus, IbrUnit, Network, SgUnit, load_network

BASE_MVA = 100.0
IBR_RATING_MW = 75.48
TIE_Z = 0.05 + 0.20j
TIE_Y = 0.15j
TIE_RATING = 1.5
IBR_LINE_Z = 0.005 + 0.05j
CONTINGENT_AREA = 2
CONTINGENCY_BUS = 16
REFERENCE_SLACK = 1

# (local from, local to, r, x, total line charging b)
NINE_BUS_BRANCHES = [
    (1, 4, 0.0, 0.0576, 0.0),
    (4, 5, 0.010, 0.085, 0.176),
    (4, 6, 0.017, 0.092, 0.158),
    (5, 7, 0.032, 0.161, 0.306),
    (6, 9, 0.039, 0.170, 0.358),
    (7, 8, 0.0085, 0.072, 0.149),
    (8, 9, 0.0119, 0.1008, 0.209),
    (2, 7, 0.0, 0.0625, 0.0),
    (3, 9, 0.0, 0.0586, 0.0),
]
# local machine: H (s, 100 MVA base), x'd, rating MVA, voltage setpoint
NINE_BUS_MACHINES = {
    1: (23.64, 0.0608, 247.5, 1.040),
    2: (6.40, 0.1198, 192.0, 1.025),
    3: (3.01, 0.1813, 128.0, 1.025),
}

AREAS = {
    1: dict(name="west", buses={1: 1, 2: 2, 3: 3, 4: 10, 5: 11, 6: 25, 7: 26, 8: 27, 9: 28},
            ibr={19: 5, 20: 8},
            loads={5: 1.25 + 0.50j, 6: 0.90 + 0.30j, 8: 1.00 + 0.35j},
            sg_p={1: 0.85, 2: 1.30, 3: 0.70}),
    2: dict(name="central", buses={1: 4, 2: 5, 3: 6, 4: 12, 5: 13, 6: 14, 7: 15, 8: 16, 9: 17},
            ibr={21: 5, 22: 8},
            loads={5: 1.50 + 0.50j, 6: 1.10 + 0.30j, 8: 1.22 + 0.35j},
            sg_p={1: 0.69, 2: 1.15, 3: 0.815}),
    3: dict(name="east", buses={1: 7, 2: 8, 3: 9, 4: 18, 5: 29, 6: 30, 7: 31, 8: 32, 9: 33},
            ibr={23: 5, 24: 8},
            loads={5: 1.25 + 0.50j, 6: 0.90 + 0.30j, 8: 1.00 + 0.35j},
            sg_p={1: 0.95, 2: 1.30, 3: 0.70}),
}
TIES = [(26, 12), (17, 18), (28, 31)]
IBR_P_SET = 0.30

# dynamic constants shared by every machine (repository calibration)
SG_DAMPING_PER_RATING = 20.0     # D = 20 x rating (p.u. on 100 MVA): stands in for damper windings / PSS
SG_DROOP = 0.05
SG_GOV_T = 0.5
SG_AVR_GAIN = 2.0


def assemble_reference_case() -> Network:
    """Build the uncalibrated case from the tables above (slack output not yet solved)."""
    buses, branches, sgs, ibrs, loads, areas = [], [], [], [], {}, []
    ibr_count = 0
    for area_id, spec in AREAS.items():
        g = spec["buses"]
        members = set(g.values()) | set(spec["ibr"])
        areas.append(Area(area_id, frozenset(members), spec["name"]))
        for local, bus_id in g.items():
            if local in NINE_BUS_MACHINES:
                kind = "SG"
            elif local in spec["loads"]:
                kind = "Load"
            else:
                kind = "Transfer"
            buses.append(Bus(bus_id, kind, area_id))
        for local, load in spec["loads"].items():
            loads[g[local]] = load
        for f, t, r, x, b in NINE_BUS_BRANCHES:
            branches.append(Branch(g[f], g[t], complex(r, x), complex(0, b)))
        for local, (h, xd, rating, vset) in NINE_BUS_MACHINES.items():
            s = rating / BASE_MVA
            sgs.append(SgUnit(
                bus_id=g[local], p_set=spec["sg_p"][local], q_set=0.0,
                p_min=0.0, p_max=s, q_min=-0.4 * s, q_max=0.6 * s, v_set=vset,
                inertia_h=h, damping_d=SG_DAMPING_PER_RATING * s, droop_r=SG_DROOP,
                governor_time_constant=SG_GOV_T, avr_gain=SG_AVR_GAIN,
                transient_reactance=xd, rating=s, agc_participation_factor=s,
                name=f"SG{g[local]}"))
        for bus_id, local in spec["ibr"].items():
            ibr_count += 1
            rating = IBR_RATING_MW / BASE_MVA
            buses.append(Bus(bus_id, "IBR", area_id))
            branches.append(Branch(bus_id, g[local], IBR_LINE_Z))
            ibrs.append(IbrUnit(bus_id=bus_id, p_set=IBR_P_SET, q_set=0.0, s_max=rating,
                                p_min=0.0, p_max=rating, q_min=-rating, q_max=rating,
                                actuation_time_constant=0.01, name=f"IBR{ibr_count}"))
    area_of = {b.id: b.area_id for b in buses}
    for a, b in TIES:
        assert area_of[a] != area_of[b]
        branches.append(Branch(a, b, TIE_Z, TIE_Y, thermal_rating_p=TIE_RATING, is_tie_line=True))
    buses.sort(key=lambda b: b.id)
    sgs.sort(key=lambda u: u.bus_id)
    ibrs.sort(key=lambda u: u.bus_id)
    return Network(buses, branches, sgs, ibrs, loads, areas, BASE_MVA, name="33-bus 3-area APPF reference")


def calibrate(network: Network, slack_bus: int = REFERENCE_SLACK) -> Network:
    """Solve the baseline flow and store slack output, SG reactive outputs and voltages."""
    from .powerflow import solve_regular_power_flow

    sol = solve_regular_power_flow(network, slack_bus, flat_start=True)
    pos = {b: k for k, b in enumerate(sol.bus_ids)}
    sg_updates = {}
    loads = network.loads
    for u in network.sg_units:
        k = pos[u.bus_id]
        p = sol.p[k] + loads.get(u.bus_id, 0j).real
        q = sol.q[k] + loads.get(u.bus_id, 0j).imag
        upd = {"q_set": float(q)}
        if u.bus_id == slack_bus:
            upd["p_set"] = float(p)
        sg_updates[u.bus_id] = upd
    net = network.with_unit_setpoints(sg=sg_updates)
    return net.with_voltages(sol.vm, sol.va)


def reference_case_path():
    return resources.files("appf").joinpath("data/case33.json")


def build_reference_case() -> Network:
    """The checked-in 33-bus reference network."""
    with resources.as_file(reference_case_path()) as path:
        return load_network(path)
