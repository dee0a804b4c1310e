"""Static grid model: buses, branches, devices, areas and hierarchy levels.

All quantities are per unit on ``Network.base_mva`` (100 MVA by default).
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

BUS_KINDS = ("SG", "IBR", "Load", "Transfer")


class GridError(ValueError):
    """Raised when grid data violates a structural invariant."""


class DegenerateBranchError(GridError):
    pass


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    area_id: int
    voltage_magnitude: float = 1.0
    voltage_angle: float = 0.0
    v_min: float = 0.95
    v_max: float = 1.05
    shunt: complex = 0j

    def __post_init__(self):
        if self.kind not in BUS_KINDS:
            raise GridError(f"bus {self.id}: unknown kind {self.kind!r}")
        if not self.v_min < self.v_max:
            raise GridError(f"bus {self.id}: v_min must be below v_max")
        for name in ("voltage_magnitude", "voltage_angle", "v_min", "v_max"):
            if not math.isfinite(getattr(self, name)):
                raise GridError(f"bus {self.id}: {name} is not finite")


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    series_impedance: complex
    shunt_admittance: complex = 0j
    thermal_rating_p: float = 9.99
    is_tie_line: bool = False

    def __post_init__(self):
        if self.from_bus == self.to_bus:
            raise GridError(f"branch {self.from_bus}-{self.to_bus} is a self loop")
        if self.series_impedance == 0:
            raise DegenerateBranchError(
                f"branch {self.from_bus}-{self.to_bus} has zero series impedance")

    @property
    def series_admittance(self) -> complex:
        return 1.0 / self.series_impedance


@dataclass(frozen=True)
class SgUnit:
    bus_id: int
    p_set: float
    q_set: float = 0.0
    p_min: float = 0.0
    p_max: float = 9.99
    q_min: float = -9.99
    q_max: float = 9.99
    v_set: float = 1.0
    inertia_h: float = 5.0
    damping_d: float = 0.0
    droop_r: float = 0.05
    governor_time_constant: float = 0.5
    avr_gain: float = 5.0
    transient_reactance: float = 0.1
    rating: float = 1.0
    agc_participation_factor: float = 1.0
    name: str = ""

    def __post_init__(self):
        tol = 1e-9
        if not self.p_min - tol <= self.p_set <= self.p_max + tol:
            raise GridError(f"SG at bus {self.bus_id}: p_set outside [p_min, p_max]")
        if not self.q_min - tol <= self.q_set <= self.q_max + tol:
            raise GridError(f"SG at bus {self.bus_id}: q_set outside [q_min, q_max]")
        if self.inertia_h <= 0:
            raise GridError(f"SG at bus {self.bus_id}: inertia must be positive")


@dataclass(frozen=True)
class IbrUnit:
    bus_id: int
    p_set: float
    q_set: float = 0.0
    s_max: float = 0.7548
    p_min: float = 0.0
    p_max: float = 0.7548
    q_min: float = -0.7548
    q_max: float = 0.7548
    actuation_time_constant: float = 0.01
    mode: str = "PQ"
    v_set: float = 1.0
    name: str = ""

    def __post_init__(self):
        tol = 1e-9
        if self.p_set ** 2 + self.q_set ** 2 > self.s_max ** 2 + tol:
            raise GridError(f"IBR at bus {self.bus_id}: setpoint outside MVA rating")
        if not self.p_min - tol <= self.p_set <= self.p_max + tol:
            raise GridError(f"IBR at bus {self.bus_id}: p_set outside [p_min, p_max]")
        if not self.q_min - tol <= self.q_set <= self.q_max + tol:
            raise GridError(f"IBR at bus {self.bus_id}: q_set outside [q_min, q_max]")
        if self.mode not in ("PQ", "PV"):
            raise GridError(f"IBR at bus {self.bus_id}: mode must be PQ or PV")


@dataclass(frozen=True)
class Area:
    id: int
    bus_ids: frozenset
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "bus_ids", frozenset(self.bus_ids))
        if not self.bus_ids:
            raise GridError(f"area {self.id} is empty")


@dataclass(frozen=True)
class HierarchyPartition:
    """Areas grouped by tie-line distance from the contingent area.

    ``levels[0]`` is hierarchy 1 (the contingent area alone).  Keys of
    ``boundary_buses`` and ``tie_lines`` are 1-based level pairs ``(i, i+1)``;
    ``boundary_buses[(i, i+1)]`` holds the level-``i`` ends of those ties and
    ``far_boundary_buses[(i, i+1)]`` the level-``i+1`` ends.
    """

    contingent_area: int
    levels: tuple
    boundary_buses: dict
    far_boundary_buses: dict
    tie_lines: dict
    excluded: frozenset = frozenset()

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def level_of(self, area_id: int) -> int:
        for i, areas in enumerate(self.levels, start=1):
            if area_id in areas:
                return i
        raise KeyError(area_id)


@dataclass(frozen=True)
class Network:
    buses: tuple
    branches: tuple
    sg_units: tuple = ()
    ibr_units: tuple = ()
    loads: dict = field(default_factory=dict)
    areas: tuple = ()
    base_mva: float = 100.0
    name: str = ""

    def __post_init__(self):
        for attr in ("buses", "branches", "sg_units", "ibr_units", "areas"):
            object.__setattr__(self, attr, tuple(getattr(self, attr)))
        object.__setattr__(self, "loads", {int(k): complex(v) for k, v in self.loads.items()})
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise GridError("duplicate bus ids")
        known = set(ids)
        area_of = {b.id: b.area_id for b in self.buses}
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise GridError(f"branch {br.from_bus}-{br.to_bus} references unknown bus")
            if br.is_tie_line != (area_of[br.from_bus] != area_of[br.to_bus]):
                raise GridError(f"branch {br.from_bus}-{br.to_bus}: tie flag disagrees with areas")
        for unit in self.sg_units + self.ibr_units:
            if unit.bus_id not in known:
                raise GridError(f"device references unknown bus {unit.bus_id}")
        for bus_id in self.loads:
            if bus_id not in known:
                raise GridError(f"load references unknown bus {bus_id}")
        if self.areas:
            seen = set()
            for area in self.areas:
                if seen & area.bus_ids:
                    raise GridError("areas overlap")
                seen |= area.bus_ids
                for bus_id in area.bus_ids:
                    if area_of.get(bus_id) != area.id:
                        raise GridError(f"bus {bus_id} area label disagrees with area {area.id}")
            if seen != known:
                raise GridError("areas do not cover every bus")
        sg_buses = {u.bus_id for u in self.sg_units}
        ibr_buses = {u.bus_id for u in self.ibr_units}
        for b in self.buses:
            if b.kind == "SG" and b.id not in sg_buses:
                raise GridError(f"bus {b.id} is SG kind without a generator")
            if b.kind == "IBR" and b.id not in ibr_buses:
                raise GridError(f"bus {b.id} is IBR kind without an inverter")
            if b.kind != "SG" and b.id in sg_buses:
                raise GridError(f"bus {b.id} hosts a generator but is {b.kind}")
            if b.kind != "IBR" and b.id in ibr_buses:
                raise GridError(f"bus {b.id} hosts an inverter but is {b.kind}")
        # participation factors are normalised per area by agc_participation()

    # -- indexing helpers ---------------------------------------------------
    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> list:
        return [b.id for b in self.buses]

    def index(self) -> dict:
        return {b.id: k for k, b in enumerate(self.buses)}

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.index()[bus_id]]

    def area(self, area_id: int) -> Area:
        for a in self.areas:
            if a.id == area_id:
                return a
        raise KeyError(area_id)

    def area_of(self, bus_id: int) -> int:
        return self.bus(bus_id).area_id

    def sg_at(self, bus_id: int):
        return next((u for u in self.sg_units if u.bus_id == bus_id), None)

    def ibr_at(self, bus_id: int):
        return next((u for u in self.ibr_units if u.bus_id == bus_id), None)

    def ibrs_in(self, area_ids) -> list:
        area_ids = set(area_ids)
        return [u for u in self.ibr_units if self.area_of(u.bus_id) in area_ids]

    def tie_lines(self) -> list:
        return [k for k, br in enumerate(self.branches) if br.is_tie_line]

    def injections(self) -> np.ndarray:
        """Scheduled complex injections (generation minus load) per bus."""
        idx = self.index()
        s = np.zeros(self.n_bus, dtype=complex)
        for u in self.sg_units:
            s[idx[u.bus_id]] += complex(u.p_set, u.q_set)
        for u in self.ibr_units:
            s[idx[u.bus_id]] += complex(u.p_set, u.q_set)
        for bus_id, load in self.loads.items():
            s[idx[bus_id]] -= load
        return s

    def agc_participation(self) -> dict:
        """SG bus id -> participation factor, normalised to sum to 1 per area."""
        totals = {}
        for u in self.sg_units:
            a = self.area_of(u.bus_id)
            totals[a] = totals.get(a, 0.0) + u.agc_participation_factor
        return {u.bus_id: u.agc_participation_factor / totals[self.area_of(u.bus_id)]
                for u in self.sg_units}

    # -- modification helpers (return new networks) -------------------------
    def with_load(self, bus_id: int, delta: complex) -> "Network":
        loads = dict(self.loads)
        loads[bus_id] = loads.get(bus_id, 0j) + delta
        buses = self.buses
        b = self.bus(bus_id)
        if b.kind == "Transfer" and loads[bus_id] != 0:
            buses = tuple(replace(x, kind="Load") if x.id == bus_id else x for x in buses)
        return replace(self, loads=loads, buses=buses)

    def without_sg(self, bus_id: int) -> "Network":
        units = tuple(u for u in self.sg_units if u.bus_id != bus_id)
        kind = "Load" if self.loads.get(bus_id, 0j) != 0 else "Transfer"
        buses = tuple(replace(b, kind=kind) if b.id == bus_id else b for b in self.buses)
        return replace(self, sg_units=units, buses=buses)

    def with_voltages(self, vm, va) -> "Network":
        buses = tuple(replace(b, voltage_magnitude=float(m), voltage_angle=float(a))
                      for b, m, a in zip(self.buses, vm, va))
        return replace(self, buses=buses)

    def with_unit_setpoints(self, sg=None, ibr=None) -> "Network":
        """Replace device setpoints: ``sg``/``ibr`` map bus id -> dict of fields."""
        sg = sg or {}
        ibr = ibr or {}
        sgs = tuple(replace(u, **sg[u.bus_id]) if u.bus_id in sg else u for u in self.sg_units)
        ibrs = tuple(replace(u, **ibr[u.bus_id]) if u.bus_id in ibr else u for u in self.ibr_units)
        return replace(self, sg_units=sgs, ibr_units=ibrs)


def build_admittance(network: Network, bus_ids=None, include=None) -> np.ndarray:
    """Nodal admittance matrix of ``network`` (or of the sub-network on ``bus_ids``).

    Only branches with both ends inside ``bus_ids`` are stamped.  ``include``
    optionally filters branches by index.
    """
    if bus_ids is None:
        bus_ids = network.bus_ids
    pos = {b: k for k, b in enumerate(bus_ids)}
    n = len(bus_ids)
    Y = np.zeros((n, n), dtype=complex)
    for k, br in enumerate(network.branches):
        if include is not None and k not in include:
            continue
        if br.from_bus not in pos or br.to_bus not in pos:
            continue
        if br.series_impedance == 0:
            raise DegenerateBranchError(f"branch {br.from_bus}-{br.to_bus}")
        i, j = pos[br.from_bus], pos[br.to_bus]
        ys = 1.0 / br.series_impedance
        half = br.shunt_admittance / 2
        Y[i, i] += ys + half
        Y[j, j] += ys + half
        Y[i, j] -= ys
        Y[j, i] -= ys
    for b in network.buses:
        if b.id in pos and b.shunt:
            Y[pos[b.id], pos[b.id]] += b.shunt
    return Y


def area_adjacency(network: Network) -> dict:
    adj = {a.id: set() for a in network.areas}
    for br in network.branches:
        if br.is_tie_line:
            a, b = network.area_of(br.from_bus), network.area_of(br.to_bus)
            adj[a].add(b)
            adj[b].add(a)
    return adj


def assign_hierarchies(network: Network, contingent_area: int) -> HierarchyPartition:
    """Breadth-first hierarchy levels over the tie-line area graph."""
    adj = area_adjacency(network)
    if contingent_area not in adj:
        raise GridError(f"unknown area {contingent_area}")
    depth = {contingent_area: 0}
    queue = deque([contingent_area])
    while queue:
        a = queue.popleft()
        for b in sorted(adj[a]):
            if b not in depth:
                depth[b] = depth[a] + 1
                queue.append(b)
    n_levels = max(depth.values()) + 1
    levels = tuple(frozenset(a for a, d in depth.items() if d == i) for i in range(n_levels))
    boundary, far, ties = {}, {}, {}
    for i in range(1, n_levels):
        lower, upper = levels[i - 1], levels[i]
        key = (i, i + 1)
        boundary[key], far[key], ties[key] = set(), set(), []
        for k, br in enumerate(network.branches):
            if not br.is_tie_line:
                continue
            af, at = network.area_of(br.from_bus), network.area_of(br.to_bus)
            if af in lower and at in upper:
                near_bus, far_bus = br.from_bus, br.to_bus
            elif at in lower and af in upper:
                near_bus, far_bus = br.to_bus, br.from_bus
            else:
                continue
            boundary[key].add(near_bus)
            far[key].add(far_bus)
            ties[key].append(k)
        boundary[key] = frozenset(boundary[key])
        far[key] = frozenset(far[key])
    excluded = frozenset(set(adj) - set(depth))
    return HierarchyPartition(contingent_area, levels, boundary, far, ties, excluded)


def compute_headroom(unit, mode: str = "active") -> float:
    """Injection-direction headroom of an IBR (or SG) from its current setpoint."""
    s_max = getattr(unit, "s_max", math.inf)
    if mode == "active":
        h = min(unit.p_max, s_max) - unit.p_set
    elif mode == "reactive":
        circle = math.sqrt(max(0.0, s_max ** 2 - unit.p_set ** 2))
        h = min(unit.q_max, circle) - unit.q_set
    else:
        raise ValueError(f"mode must be 'active' or 'reactive', not {mode!r}")
    return max(0.0, h)


# -- serialisation ------------------------------------------------------------

def _cplx(z: complex) -> list:
    return [z.real, z.imag]


def network_to_dict(network: Network) -> dict:
    return {
        "name": network.name,
        "base_mva": network.base_mva,
        "buses": [{**{k: v for k, v in asdict(b).items() if k != "shunt"}, "shunt": _cplx(b.shunt)}
                  for b in network.buses],
        "branches": [{
            "from_bus": br.from_bus, "to_bus": br.to_bus,
            "series_impedance": _cplx(br.series_impedance),
            "shunt_admittance": _cplx(br.shunt_admittance),
            "thermal_rating_p": br.thermal_rating_p,
            "is_tie_line": br.is_tie_line,
        } for br in network.branches],
        "sg": [asdict(u) for u in network.sg_units],
        "ibr": [asdict(u) for u in network.ibr_units],
        "loads": [{"bus": b, "p": s.real, "q": s.imag} for b, s in sorted(network.loads.items())],
        "areas": [{"id": a.id, "name": a.name, "bus_ids": sorted(a.bus_ids)} for a in network.areas],
    }


def network_from_dict(data: dict) -> Network:
    try:
        buses = [Bus(**{**b, "shunt": complex(*b.get("shunt", (0.0, 0.0)))}) for b in data["buses"]]
        branches = [Branch(
            from_bus=br["from_bus"], to_bus=br["to_bus"],
            series_impedance=complex(*br["series_impedance"]),
            shunt_admittance=complex(*br.get("shunt_admittance", (0.0, 0.0))),
            thermal_rating_p=br.get("thermal_rating_p", 9.99),
            is_tie_line=br.get("is_tie_line", False),
        ) for br in data["branches"]]
        sgs = [SgUnit(**u) for u in data.get("sg", [])]
        ibrs = [IbrUnit(**u) for u in data.get("ibr", [])]
        loads = {int(ld["bus"]): complex(ld["p"], ld["q"]) for ld in data.get("loads", [])}
        areas = [Area(a["id"], frozenset(a["bus_ids"]), a.get("name", "")) for a in data.get("areas", [])]
    except (KeyError, TypeError) as exc:
        raise GridError(f"malformed grid description: {exc}") from exc
    return Network(buses, branches, sgs, ibrs, loads, areas,
                   base_mva=data.get("base_mva", 100.0), name=data.get("name", ""))


def save_network(network: Network, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(network), indent=1) + "\n")


def load_network(path) -> Network:
    with open(path) as fh:
        return network_from_dict(json.load(fh))
