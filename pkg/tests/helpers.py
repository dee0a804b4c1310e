"""Small-network builders shared by the test modules."""

import numpy as np

from appf.grid import Area, Branch, Bus, IbrUnit, Network, SgUnit
from appf.powerflow import solve_regular_power_flow


def make_network(kinds, edges, *, areas=None, loads=None, sg=None, ibr=None, shunts=None, name="toy"):
    """Buses ``1..n`` of the given kinds; ``edges`` are ``(from, to, z, y_shunt)``.

    ``sg`` and ``ibr`` map bus id to keyword arguments of the unit.
    """
    n = len(kinds)
    areas = list(areas or [1] * n)
    shunts = shunts or {}
    buses = [Bus(i + 1, kinds[i], areas[i], shunt=shunts.get(i + 1, 0j)) for i in range(n)]
    branches = [Branch(f, t, complex(z), complex(y), is_tie_line=areas[f - 1] != areas[t - 1])
                for f, t, z, y in edges]
    sg_units = [SgUnit(b, **kw) for b, kw in (sg or {}).items()]
    ibr_units = [IbrUnit(b, **kw) for b, kw in (ibr or {}).items()]
    area_objs = [Area(a, frozenset(i + 1 for i in range(n) if areas[i] == a)) for a in sorted(set(areas))]
    return Network(tuple(buses), tuple(branches), tuple(sg_units), tuple(ibr_units), dict(loads or {}),
                   tuple(area_objs), name=name)


def two_bus(z=0.01 + 0.1j, y=0j, load=0.5 + 0.2j):
    """Slack SG at bus 1 feeding a PQ load at bus 2."""
    return make_network(["SG", "Load"], [(1, 2, z, y)], loads={2: load},
                        sg={1: dict(p_set=0.0, p_max=99.0, p_min=-99.0, q_min=-99.0, q_max=99.0)})


def area_graph_network(n_areas, area_edges):
    """Two buses per area (SG + load); one tie per area-graph edge between the SG buses."""
    kinds, areas, edges, sg, loads = [], [], [], {}, {}
    for a in range(1, n_areas + 1):
        kinds += ["SG", "Load"]
        areas += [a, a]
        s, l = 2 * a - 1, 2 * a
        edges.append((s, l, 0.01 + 0.1j, 0j))
        sg[s] = dict(p_set=0.5)
        loads[l] = 0.5 + 0.1j
    for a, b in area_edges:
        edges.append((2 * a - 1, 2 * b - 1, 0.05 + 0.2j, 0.15j))
    return make_network(kinds, edges, areas=areas, loads=loads, sg=sg)


def random_three_area(rng, n_ibr=2, ibr_p=0.3, s_max=0.7548):
    """Three pairwise-tied areas: SG, load bus and ``n_ibr`` IBR buses per area.

    The SG in area 1 balances the baseline so the pre-contingency power flow
    closes with every unit on its set-point.
    """
    kinds, areas, edges, sg, ibr, loads = [], [], [], {}, {}, {}
    bus = 0
    sg_bus = {}
    per = 2 + n_ibr
    for a in (1, 2, 3):
        base = bus
        kinds += ["SG", "Load"] + ["IBR"] * n_ibr
        areas += [a] * per
        s, l = base + 1, base + 2
        sg_bus[a] = s
        x = rng.uniform(0.05, 0.12)
        edges.append((s, l, complex(0.1 * x, x), 0.02j))
        loads[l] = complex(rng.uniform(0.6, 1.0), rng.uniform(0.1, 0.3))
        sg[s] = dict(p_set=float(loads[l].real), p_min=0.0, p_max=3.0, q_min=-2.0, q_max=2.0, rating=2.0)
        for j in range(n_ibr):
            b = base + 3 + j
            x = rng.uniform(0.04, 0.1)
            edges.append((l, b, complex(0.1 * x, x), 0.01j))
            p = float(rng.uniform(0.1, 0.5)) if ibr_p is None else ibr_p
            ibr[b] = dict(p_set=p, s_max=s_max, p_max=s_max, q_min=-s_max, q_max=s_max)
            loads[l] += p
        bus += per
    for a, b in ((1, 2), (2, 3), (3, 1)):
        edges.append((sg_bus[a] + 1, sg_bus[b] + 1, 0.05 + 0.2j, 0.15j))
    return make_network(kinds, edges, areas=areas, loads=loads, sg=sg, ibr=ibr, name="random3")


def independent_gauss_seidel(Y, V0, S, kinds, tol=1e-12, max_iter=20000):
    """Plain Gauss-Seidel power flow: ``kinds`` entries are 'slack', 'pv' or 'pq'."""
    V = np.array(V0, dtype=complex)
    S = np.array(S, dtype=complex)
    n = len(V)
    for _ in range(max_iter):
        dv = 0.0
        for i in range(n):
            if kinds[i] == "slack":
                continue
            s = S[i]
            if kinds[i] == "pv":
                q = -np.imag(np.conj(V[i]) * (Y[i] @ V))
                s = complex(S[i].real, q)
                S[i] = s
            acc = Y[i] @ V - Y[i, i] * V[i]
            vi = (np.conj(s) / np.conj(V[i]) - acc) / Y[i, i]
            if kinds[i] == "pv":
                vi = abs(V0[i]) * vi / abs(vi)
            dv = max(dv, abs(vi - V[i]))
            V[i] = vi
        if dv < tol:
            return V
    raise RuntimeError("Gauss-Seidel did not converge")


def calibrated(net, slack=1):
    """Put every SG set-point on its power-flow output so the baseline is an equilibrium."""
    sol = solve_regular_power_flow(net, slack)
    pos = {b: k for k, b in enumerate(sol.bus_ids)}
    upd = {u.bus_id: {"q_set": float(sol.q[pos[u.bus_id]] + net.loads.get(u.bus_id, 0j).imag)}
           for u in net.sg_units}
    upd[slack]["p_set"] = float(sol.p[pos[slack]] + net.loads.get(slack, 0j).real)
    net = net.with_unit_setpoints(sg=upd)
    return net, solve_regular_power_flow(net, slack)
