"""Quasi-static phasor simulation of SG electromechanics, IBR actuation and AGC.

Network algebra is solved every integrator stage: machines are internal EMFs
behind transient reactance (Norton-stamped into the admittance matrix), loads
and IBRs are constant-power injections, solved by fixed-point iteration on
the prefactored impedance matrix.  The integrator is classical RK4; bus
frequency is the angle derivative seen through a first-order filter whose
update is exact for piecewise-linear angles.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .grid import Network, build_admittance
from .powerflow import PowerFlowSolution

F_NOMINAL = 60.0
OMEGA_S = 2 * np.pi * F_NOMINAL
SPEED_LIMIT = 0.05
FP_TOL = 1e-11
FP_MAX_ITER = 200


class SimulationAbort(RuntimeError):
    """Network solve failure or instability; ``state`` carries a dump."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class DynamicsConfig:
    dt: float = 1.0 / 1200.0
    sample_rate: float = 60.0
    freq_filter_tc: float = 0.05
    agc: bool = False
    agc_ki: float = 0.025
    agc_kp: float = 0.0
    ibr_droop: bool = False
    ibr_droop_r: float = 0.05

    def __post_init__(self):
        if not 0 < self.dt <= 1e-3 + 1e-15:
            raise ValueError("dt must lie in (0, 1 ms]")
        ratio = 1.0 / (self.sample_rate * self.dt)
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("sample period must be a whole number of steps")

    @property
    def steps_per_sample(self) -> int:
        return int(round(1.0 / (self.sample_rate * self.dt)))


# -- events ------------------------------------------------------------------------

@dataclass(frozen=True)
class DispatchCommand:
    device: str            # "IBR" | "SG"
    bus_id: int
    p: float | None = None
    q: float | None = None
    v: float | None = None
    issued_by: int | None = None


@dataclass(frozen=True)
class LoadStep:
    bus_id: int
    dp: float
    dq: float = 0.0


@dataclass(frozen=True)
class GeneratorTrip:
    bus_id: int


@dataclass(frozen=True)
class SetpointArrival:
    commands: tuple


@dataclass(frozen=True)
class AvrSetpoint:
    bus_id: int
    v_ref: float


@dataclass(frozen=True)
class SimEvent:
    time: float
    payload: object
    label: str = ""
    guard: object = field(default=None, compare=False, repr=False)   # delivered only if guard() is true

    def __post_init__(self):
        if self.time < 0:
            raise ValueError("event time must be non-negative")


# -- state types ----------------------------------------------------------------------

@dataclass
class SgState:
    bus_id: int
    rotor_angle: float
    speed_deviation: float
    mechanical_power: float
    governor_reference: float
    field_voltage: float
    agc_share: float


@dataclass
class IbrState:
    bus_id: int
    p_out: float
    q_out: float
    p_ref: float
    q_ref: float
    time_constant: float


# -- numba kernel ---------------------------------------------------------------------

@njit(cache=True)
def _solve_network(Z, i_src, s_inj, V, tol, max_iter):
    """Fixed point ``V = Z (i_src + conj(s_inj / V))`` on the full bus set (reference version)."""
    n = V.shape[0]
    rhs = np.empty(n, dtype=np.complex128)
    for it in range(max_iter):
        for k in range(n):
            rhs[k] = i_src[k] + np.conj(s_inj[k] / V[k])
        err = 0.0
        for k in range(n):
            acc = 0j
            for m in range(n):
                acc += Z[k, m] * rhs[m]
            d = abs(acc - V[k])
            if d > err:
                err = d
            V[k] = acc
        if err < tol:
            return it + 1
    return -1


@njit(cache=True)
def _solve_reduced(ZII, ZIS, ZfS, ZfI, inj_idx, ie, s_inj, V, tol, max_iter):
    """Same fixed point iterated only over constant-power buses, then expanded."""
    ni = inj_idx.shape[0]
    ns = ie.shape[0]
    n = V.shape[0]
    base = np.zeros(ni, dtype=np.complex128)
    for k in range(ni):
        acc = 0j
        for g in range(ns):
            acc += ZIS[k, g] * ie[g]
        base[k] = acc
    vi = np.empty(ni, dtype=np.complex128)
    for k in range(ni):
        vi[k] = V[inj_idx[k]]
    rhs = np.empty(ni, dtype=np.complex128)
    its = -1
    for it in range(max_iter):
        for k in range(ni):
            rhs[k] = np.conj(s_inj[k] / vi[k])
        err = 0.0
        for k in range(ni):
            acc = base[k]
            for m in range(ni):
                acc += ZII[k, m] * rhs[m]
            d = abs(acc - vi[k])
            if d > err:
                err = d
            vi[k] = acc
        if err < tol:
            its = it + 1
            break
    if its < 0:
        return -1
    for k in range(ni):
        rhs[k] = np.conj(s_inj[k] / vi[k])
    for b in range(n):
        acc = 0j
        for g in range(ns):
            acc += ZfS[b, g] * ie[g]
        for m in range(ni):
            acc += ZfI[b, m] * rhs[m]
        V[b] = acc
    return its


@njit(cache=True)
def _deriv(x, V, ZII, ZIS, ZfS, ZfI, inj_idx, s_inj_base, ibr_pos, sg_idx, sg_on, H, D, Tg, R, rating,
           xd, Ka, pref, vref, alpha, sg_area, ibr_pref, ibr_qref, tau, smax, pmin, pmax, droop_k, ibr_area,
           tie_f, tie_t, tie_ys, tie_half, tie_af, tie_at, export_sched, B, kp, ki, agc_on, area_h, omega_s,
           dx):
    ng = sg_idx.shape[0]
    ni = ibr_pos.shape[0]
    na = export_sched.shape[0]
    o_w, o_pm, o_e, o_p = ng, 2 * ng, 3 * ng, 4 * ng
    o_q, o_z = 4 * ng + ni, 4 * ng + 2 * ni
    ie = np.zeros(ng, dtype=np.complex128)
    for g in range(ng):
        if sg_on[g] > 0:
            ie[g] = x[o_e + g] * np.exp(1j * x[g]) / (1j * xd[g])
    s_inj = s_inj_base.copy()
    for j in range(ni):
        s_inj[ibr_pos[j]] += x[o_p + j] + 1j * x[o_q + j]
    its = _solve_reduced(ZII, ZIS, ZfS, ZfI, inj_idx, ie, s_inj, V, 1e-11, 200)
    if its < 0:
        return False
    # area frequency from inertia-weighted machine speeds
    dw_area = np.zeros(na)
    for g in range(ng):
        if sg_on[g] > 0:
            dw_area[sg_area[g]] += H[g] * x[o_w + g]
    for a in range(na):
        if area_h[a] > 0:
            dw_area[a] /= area_h[a]
    export = np.zeros(na)
    for k in range(tie_f.shape[0]):
        vf = V[tie_f[k]]
        vt = V[tie_t[k]]
        pf = (vf * np.conj((vf - vt) * tie_ys[k] + vf * tie_half[k])).real
        pt = (vt * np.conj((vt - vf) * tie_ys[k] + vt * tie_half[k])).real
        export[tie_af[k]] += pf
        export[tie_at[k]] += pt
    ace = np.zeros(na)
    for a in range(na):
        ace[a] = export[a] - export_sched[a] + B[a] * dw_area[a]
    for g in range(ng):
        if sg_on[g] <= 0:
            dx[g] = 0.0
            dx[o_w + g] = 0.0
            dx[o_pm + g] = 0.0
            dx[o_e + g] = 0.0
            continue
        e = x[o_e + g] * np.exp(1j * x[g])
        vt = V[sg_idx[g]]
        ig = (e - vt) / (1j * xd[g])
        pe = (e * np.conj(ig)).real
        w = x[o_w + g]
        a = sg_area[g]
        agc = 0.0
        if agc_on > 0:
            agc = -alpha[g] * (kp * ace[a] + ki * x[o_z + a])
        dx[g] = omega_s * w
        dx[o_w + g] = (x[o_pm + g] - pe - D[g] * w) / (2.0 * H[g])
        dx[o_pm + g] = (pref[g] + agc - rating[g] / R[g] * w - x[o_pm + g]) / Tg[g]
        dx[o_e + g] = Ka[g] * (vref[g] - abs(vt))
    for j in range(ni):
        pr = ibr_pref[j] - droop_k[j] * dw_area[ibr_area[j]]
        if pr > pmax[j]:
            pr = pmax[j]
        if pr < pmin[j]:
            pr = pmin[j]
        qr = ibr_qref[j]
        lim = smax[j] * smax[j] - pr * pr
        qcap = np.sqrt(lim) if lim > 0 else 0.0
        if qr > qcap:
            qr = qcap
        if qr < -qcap:
            qr = -qcap
        dx[o_p + j] = (pr - x[o_p + j]) / tau[j]
        dx[o_q + j] = (qr - x[o_q + j]) / tau[j]
    for a in range(na):
        dx[o_z + a] = ace[a] if agc_on > 0 else 0.0
    return True


@njit(cache=True)
def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


@njit(cache=True)
def _segment(nsteps, h, x, V, theta, psi, tf, *args):
    m = x.shape[0]
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    k4 = np.empty(m)
    xt = np.empty(m)
    sg_on = args[8]
    ng = sg_on.shape[0]
    decay = np.exp(-h / tf)
    if not _deriv(x, V, *args, k1):
        return 0, 1
    for s in range(nsteps):
        Vs = V.copy()
        for i in range(m):
            xt[i] = x[i] + 0.5 * h * k1[i]
        if not _deriv(xt, Vs, *args, k2):
            return s, 1
        for i in range(m):
            xt[i] = x[i] + 0.5 * h * k2[i]
        if not _deriv(xt, Vs, *args, k3):
            return s, 1
        for i in range(m):
            xt[i] = x[i] + h * k3[i]
        if not _deriv(xt, Vs, *args, k4):
            return s, 1
        for i in range(m):
            x[i] += h / 6.0 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i])
        # algebraic solution at the new state doubles as the next step's first stage
        if not _deriv(x, V, *args, k1):
            return s, 1
        for b in range(V.shape[0]):
            th1 = theta[b] + _wrap(np.angle(V[b]) - _wrap(theta[b]))
            slope = (th1 - theta[b]) / h
            psi[b] = th1 - slope * tf + (psi[b] - theta[b] + slope * tf) * decay
            theta[b] = th1
        for g in range(ng):
            if sg_on[g] > 0 and abs(x[ng + g]) > 0.05:
                return s + 1, 2
    return nsteps, 0


# -- trajectory -----------------------------------------------------------------------

@dataclass
class Trajectory:
    time: np.ndarray
    bus_ids: list
    frequency: np.ndarray          # (n_samples, n_bus) Hz
    vm: np.ndarray                 # (n_samples, n_bus)
    sg_buses: list
    sg_p: np.ndarray
    sg_q: np.ndarray
    sg_speed: np.ndarray
    ibr_buses: list
    ibr_p: np.ndarray
    ibr_q: np.ndarray
    tie_ids: list
    tie_p: np.ndarray              # from-end P
    balance_residual: np.ndarray
    events: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def header(self) -> list:
        cols = ["time"]
        cols += [f"f_{b}" for b in self.bus_ids]
        cols += [f"vm_{b}" for b in self.bus_ids]
        cols += [f"sg_p_{b}" for b in self.sg_buses] + [f"sg_q_{b}" for b in self.sg_buses]
        cols += [f"sg_dw_{b}" for b in self.sg_buses]
        cols += [f"ibr_p_{b}" for b in self.ibr_buses] + [f"ibr_q_{b}" for b in self.ibr_buses]
        cols += [f"tie_p_{k}" for k in self.tie_ids]
        return cols + ["balance_residual"]

    def matrix(self) -> np.ndarray:
        return np.column_stack([self.time, self.frequency, self.vm, self.sg_p, self.sg_q, self.sg_speed,
                                self.ibr_p, self.ibr_q, self.tie_p, self.balance_residual])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.header()) + "\n")
        for row in self.matrix():
            buf.write(",".join(f"{v:.10g}" for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Trajectory":
        lines = text.strip().splitlines()
        cols = lines[0].split(",")
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])

        def grab(prefix):
            keys = [(k, c) for k, c in enumerate(cols) if c.startswith(prefix)]
            ids = [int(c[len(prefix):]) for _, c in keys]
            return ids, data[:, [k for k, _ in keys]]

        bus_ids, freq = grab("f_")
        _, vm = grab("vm_")
        sg_buses, sg_p = grab("sg_p_")
        _, sg_q = grab("sg_q_")
        _, sg_dw = grab("sg_dw_")
        ibr_buses, ibr_p = grab("ibr_p_")
        _, ibr_q = grab("ibr_q_")
        tie_ids, tie_p = grab("tie_p_")
        return cls(data[:, 0], bus_ids, freq, vm, sg_buses, sg_p, sg_q, sg_dw, ibr_buses, ibr_p, ibr_q,
                   tie_ids, tie_p, data[:, cols.index("balance_residual")])

    def column(self, name: str) -> np.ndarray:
        return self.matrix()[:, self.header().index(name)]

    def metadata_json(self) -> str:
        meta = dict(self.metadata)
        meta["events"] = [{"time": round(t, 9), "label": lbl} for t, lbl in self.events]
        return json.dumps(meta, indent=1, sort_keys=True) + "\n"


# -- simulator ------------------------------------------------------------------------

class Simulator:
    """Stateful simulator; ``advance`` integrates to the next sample and returns a frame."""

    def __init__(self, network: Network, operating_point: PowerFlowSolution,
                 config: DynamicsConfig = DynamicsConfig()):
        self.config = config
        self.network = network
        self.bus_ids = list(network.bus_ids)
        idx = {b: k for k, b in enumerate(self.bus_ids)}
        self.idx = idx
        op = {b: k for k, b in enumerate(operating_point.bus_ids)}
        V0 = np.array([operating_point.voltage[op[b]] for b in self.bus_ids])
        sgs, ibrs = list(network.sg_units), list(network.ibr_units)
        self.sgs, self.ibrs = sgs, ibrs
        area_ids = sorted(a.id for a in network.areas)
        self.area_ids = area_ids
        aidx = {a: k for k, a in enumerate(area_ids)}
        ng, ni, na = len(sgs), len(ibrs), len(area_ids)
        self.sg_idx = np.array([idx[u.bus_id] for u in sgs], dtype=np.int64)
        self.sg_on = np.ones(ng)
        self.H = np.array([u.inertia_h for u in sgs])
        self.D = np.array([u.damping_d for u in sgs])
        self.Tg = np.array([u.governor_time_constant for u in sgs])
        self.R = np.array([u.droop_r for u in sgs])
        self.rating = np.array([u.rating for u in sgs])
        self.xd = np.array([u.transient_reactance for u in sgs])
        self.Ka = np.array([u.avr_gain for u in sgs])
        self.sg_area = np.array([aidx[network.area_of(u.bus_id)] for u in sgs], dtype=np.int64)
        self.ibr_idx = np.array([idx[u.bus_id] for u in ibrs], dtype=np.int64)
        self.tau = np.array([u.actuation_time_constant for u in ibrs])
        self.smax = np.array([u.s_max for u in ibrs])
        self.pmin = np.array([u.p_min for u in ibrs])
        self.pmax = np.array([u.p_max for u in ibrs])
        self.ibr_area = np.array([aidx[network.area_of(u.bus_id)] for u in ibrs], dtype=np.int64)
        k_d = 1.0 / config.ibr_droop_r if config.ibr_droop else 0.0
        self.droop_k = self.smax * k_d
        self.s_load = np.zeros(len(self.bus_ids), dtype=complex)
        for b, s in network.loads.items():
            self.s_load[idx[b]] = s
        ties = network.tie_lines()
        self.tie_ids = list(ties)
        self.tie_f = np.array([idx[network.branches[k].from_bus] for k in ties], dtype=np.int64)
        self.tie_t = np.array([idx[network.branches[k].to_bus] for k in ties], dtype=np.int64)
        self.tie_ys = np.array([1.0 / network.branches[k].series_impedance for k in ties])
        self.tie_half = np.array([network.branches[k].shunt_admittance / 2 for k in ties])
        self.tie_af = np.array([aidx[network.area_of(network.branches[k].from_bus)] for k in ties], dtype=np.int64)
        self.tie_at = np.array([aidx[network.area_of(network.branches[k].to_bus)] for k in ties], dtype=np.int64)
        self.alpha = np.zeros(ng)
        for a in range(na):
            members = self.sg_area == a
            tot = np.sum(np.array([u.agc_participation_factor for u in sgs])[members])
            for g in np.nonzero(members)[0]:
                self.alpha[g] = sgs[g].agc_participation_factor / tot if tot > 0 else 0.0
        self.B = np.zeros(na)
        self.area_h = np.zeros(na)
        self._refresh_area_constants()
        self.Y = build_admittance(network, self.bus_ids)
        self._refactor()

        # initial condition from the operating point
        x = np.zeros(4 * ng + 2 * ni + na)
        for g, u in enumerate(sgs):
            k = idx[u.bus_id]
            s_g = complex(operating_point.p[op[u.bus_id]], operating_point.q[op[u.bus_id]]) + self.s_load[k]
            vt = V0[k]
            ig = np.conj(s_g / vt)
            e = vt + 1j * self.xd[g] * ig
            x[g] = np.angle(e)
            x[3 * ng + g] = abs(e)
        for j, u in enumerate(ibrs):
            x[4 * ng + j] = u.p_set
            x[4 * ng + ni + j] = u.q_set
        self.x = x
        self.V = V0.astype(complex).copy()
        self.ibr_pref = np.array([u.p_set for u in ibrs])
        self.ibr_qref = np.array([u.q_set for u in ibrs])
        self.pref = np.zeros(ng)
        self.vref = np.ones(ng)
        self.export_sched = np.zeros(na)
        # exact algebraic equilibrium of the dynamic model
        self._solve_algebra()
        pe = self.sg_electrical()[0]
        self.pref = pe.copy()
        x[2 * ng:3 * ng] = pe
        self.vref = np.abs(self.V[self.sg_idx])
        self.export_sched = self.area_export()
        self.theta = np.angle(self.V).copy()
        self.psi = self.theta.copy()
        self.step_count = 0
        self.events_applied = []

    # helpers
    @property
    def time(self) -> float:
        return self.step_count * self.config.dt

    def _refresh_area_constants(self):
        na = len(self.area_ids)
        self.B[:] = 0.0
        self.area_h[:] = 0.0
        for g in range(len(self.sgs)):
            if self.sg_on[g] > 0:
                a = self.sg_area[g]
                self.B[a] += self.rating[g] / self.R[g] + self.D[g]
                self.area_h[a] += self.H[g]
        return na

    def _refactor(self):
        Yaug = self.Y.copy()
        for g in range(len(self.sgs)):
            if self.sg_on[g] > 0:
                Yaug[self.sg_idx[g], self.sg_idx[g]] += 1.0 / (1j * self.xd[g])
        self.Z = np.linalg.inv(Yaug)
        self._reindex()

    def _reindex(self):
        # constant-power buses: loads and IBR terminals
        inj = sorted(set(np.nonzero(self.s_load)[0].tolist()) | set(self.ibr_idx.tolist()))
        self.inj_idx = np.array(inj, dtype=np.int64)
        pos = {b: k for k, b in enumerate(inj)}
        self.ibr_pos = np.array([pos[b] for b in self.ibr_idx], dtype=np.int64)
        self.s_inj_base = -self.s_load[self.inj_idx]
        Z = self.Z
        self.ZII = np.ascontiguousarray(Z[np.ix_(self.inj_idx, self.inj_idx)])
        self.ZIS = np.ascontiguousarray(Z[np.ix_(self.inj_idx, self.sg_idx)])
        self.ZfS = np.ascontiguousarray(Z[:, self.sg_idx])
        self.ZfI = np.ascontiguousarray(Z[:, self.inj_idx])

    def _args(self):
        return (self.ZII, self.ZIS, self.ZfS, self.ZfI, self.inj_idx, self.s_inj_base, self.ibr_pos,
                self.sg_idx, self.sg_on, self.H, self.D, self.Tg, self.R, self.rating, self.xd, self.Ka,
                self.pref, self.vref, self.alpha, self.sg_area, self.ibr_pref, self.ibr_qref,
                self.tau, self.smax, self.pmin, self.pmax, self.droop_k, self.ibr_area, self.tie_f,
                self.tie_t, self.tie_ys, self.tie_half, self.tie_af, self.tie_at, self.export_sched, self.B,
                float(self.config.agc_kp), float(self.config.agc_ki), 1.0 if self.config.agc else 0.0,
                self.area_h, OMEGA_S)

    def _solve_algebra(self):
        dx = np.zeros_like(self.x)
        ok = _deriv(self.x, self.V, *self._args(), dx)
        if not ok:
            raise SimulationAbort(f"network solve diverged at t={self.time:.4f}s", self.dump())
        return dx

    def derivatives(self) -> np.ndarray:
        return self._solve_algebra()

    def dump(self) -> dict:
        return {"time": self.time, "state": self.x.tolist(),
                "vm": np.abs(self.V).tolist(), "events": list(self.events_applied)}

    # measurements
    def sg_electrical(self):
        ng = len(self.sgs)
        e = self.x[3 * ng:4 * ng] * np.exp(1j * self.x[:ng])
        vt = self.V[self.sg_idx]
        ig = (e - vt) / (1j * self.xd)
        s = vt * np.conj(ig) * self.sg_on
        return s.real, s.imag

    def ibr_output(self):
        ng, ni = len(self.sgs), len(self.ibrs)
        return self.x[4 * ng:4 * ng + ni].copy(), self.x[4 * ng + ni:4 * ng + 2 * ni].copy()

    def tie_flows(self):
        vf, vt = self.V[self.tie_f], self.V[self.tie_t]
        sf = vf * np.conj((vf - vt) * self.tie_ys + vf * self.tie_half)
        return sf.real, sf.imag

    def area_export(self) -> np.ndarray:
        vf, vt = self.V[self.tie_f], self.V[self.tie_t]
        pf = (vf * np.conj((vf - vt) * self.tie_ys + vf * self.tie_half)).real
        pt = (vt * np.conj((vt - vf) * self.tie_ys + vt * self.tie_half)).real
        out = np.zeros(len(self.area_ids))
        np.add.at(out, self.tie_af, pf)
        np.add.at(out, self.tie_at, pt)
        return out

    def bus_frequency(self) -> np.ndarray:
        return F_NOMINAL * (1.0 + (self.theta - self.psi) / self.config.freq_filter_tc / OMEGA_S)

    def balance_residual(self) -> float:
        """Generation minus load minus series/shunt losses (should vanish)."""
        pg, _ = self.sg_electrical()
        pi, _ = self.ibr_output()
        losses = float(np.real(np.vdot(self.V, self.Y @ self.V)))
        return float(pg.sum() + pi.sum() - self.s_load.real.sum() - losses)

    def frame(self) -> dict:
        pg, qg = self.sg_electrical()
        pi, qi = self.ibr_output()
        tp, tq = self.tie_flows()
        return {"time": self.time, "frequency": self.bus_frequency(), "vm": np.abs(self.V).copy(),
                "va": np.angle(self.V).copy(), "sg_p": pg, "sg_q": qg,
                "sg_speed": self.x[len(self.sgs):2 * len(self.sgs)].copy(), "ibr_p": pi, "ibr_q": qi,
                "tie_p": tp, "tie_q": tq, "balance": self.balance_residual()}

    # events
    def apply(self, payload, label=""):
        if isinstance(payload, LoadStep):
            self.s_load[self.idx[payload.bus_id]] += complex(payload.dp, payload.dq)
            self._reindex()
        elif isinstance(payload, GeneratorTrip):
            g = [u.bus_id for u in self.sgs].index(payload.bus_id)
            self.sg_on[g] = 0.0
            self.x[len(self.sgs) + g] = 0.0
            self._refresh_area_constants()
            self._refactor()
        elif isinstance(payload, SetpointArrival):
            ibr_buses = [u.bus_id for u in self.ibrs]
            sg_buses = [u.bus_id for u in self.sgs]
            for c in payload.commands:
                if c.device == "IBR":
                    j = ibr_buses.index(c.bus_id)
                    if c.p is not None:
                        self.ibr_pref[j] = c.p
                    if c.q is not None:
                        self.ibr_qref[j] = c.q
                elif c.device == "SG":
                    g = sg_buses.index(c.bus_id)
                    if c.v is not None:
                        self.vref[g] = c.v
                    if c.p is not None:
                        self.pref[g] = c.p
                else:
                    raise ValueError(f"unknown device {c.device!r}")
        elif isinstance(payload, AvrSetpoint):
            g = [u.bus_id for u in self.sgs].index(payload.bus_id)
            self.vref[g] = payload.v_ref
        else:
            raise TypeError(f"unsupported event payload {type(payload).__name__}")
        # algebraic jump: re-solve and carry the angle jump straight into the filter
        old = self.theta.copy()
        self._solve_algebra()
        jump = np.angle(self.V) - np.angle(np.exp(1j * old))
        jump = (jump + np.pi) % (2 * np.pi) - np.pi
        self.theta = old + jump
        self.events_applied.append((round(self.time, 9), label or type(payload).__name__))

    def integrate(self, nsteps: int):
        if nsteps <= 0:
            return
        done, status = _segment(nsteps, self.config.dt, self.x, self.V, self.theta, self.psi,
                                self.config.freq_filter_tc, *self._args())
        self.step_count += done
        if status == 1:
            raise SimulationAbort(f"network solve diverged at t={self.time:.4f}s", self.dump())
        if status == 2:
            raise SimulationAbort(f"speed deviation beyond {SPEED_LIMIT} p.u. at t={self.time:.4f}s",
                                  self.dump())


def _step_of(t, dt):
    return int(round(t / dt))


def run_scenario(network: Network, operating_point: PowerFlowSolution, events, duration: float,
                 config: DynamicsConfig = DynamicsConfig(), on_frame=None) -> Trajectory:
    """Simulate ``duration`` seconds.

    ``events`` is a list of :class:`SimEvent`.  ``on_frame(frame, schedule)`` is
    called at every output sample; it may call ``schedule(SimEvent)`` to add
    future events (used by the area coordinators).
    """
    sim = Simulator(network, operating_point, config)
    dt = config.dt
    queue = []
    counter = [0]

    def schedule(ev: SimEvent):
        k = _step_of(ev.time, dt)
        if k < sim.step_count:
            raise ValueError(f"event at {ev.time}s scheduled in the past")
        queue.append((k, counter[0], ev))
        counter[0] += 1
        queue.sort(key=lambda item: (item[0], item[1]))

    for ev in sorted(events, key=lambda e: e.time):
        schedule(ev)
    spp = config.steps_per_sample
    n_samples = _step_of(duration, dt) // spp + 1
    frames = []
    for s in range(n_samples):
        target = s * spp
        while True:
            while queue and queue[0][0] == sim.step_count:
                _, _, ev = queue.pop(0)
                if ev.guard is None or ev.guard():
                    sim.apply(ev.payload, ev.label)
            nxt = queue[0][0] if queue else None
            if sim.step_count >= target:
                break
            stop = target if nxt is None or nxt > target else nxt
            sim.integrate(stop - sim.step_count)
        fr = sim.frame()
        frames.append(fr)
        if on_frame is not None:
            on_frame(fr, schedule)
    traj = Trajectory(
        time=np.array([f["time"] for f in frames]), bus_ids=sim.bus_ids,
        frequency=np.array([f["frequency"] for f in frames]), vm=np.array([f["vm"] for f in frames]),
        sg_buses=[u.bus_id for u in sim.sgs], sg_p=np.array([f["sg_p"] for f in frames]),
        sg_q=np.array([f["sg_q"] for f in frames]), sg_speed=np.array([f["sg_speed"] for f in frames]),
        ibr_buses=[u.bus_id for u in sim.ibrs], ibr_p=np.array([f["ibr_p"] for f in frames]),
        ibr_q=np.array([f["ibr_q"] for f in frames]), tie_ids=sim.tie_ids,
        tie_p=np.array([f["tie_p"] for f in frames]),
        balance_residual=np.array([f["balance"] for f in frames]),
        events=list(sim.events_applied),
        metadata={"config": asdict(config), "config_hash": config_hash(asdict(config)),
                  "duration": duration})
    return traj


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def settling_time(time: np.ndarray, freq: np.ndarray, band: float = 0.01, f0: float = F_NOMINAL,
                  start: float = 0.0) -> float:
    """Last instant after ``start`` at which any bus lies outside ``f0 +- band`` (nan if never settles)."""
    freq = np.atleast_2d(freq.T).T
    out = np.any(np.abs(freq - f0) > band, axis=1) & (time >= start)
    if not np.any(out):
        return 0.0
    last = int(np.nonzero(out)[0][-1])
    if last == len(time) - 1:
        return float("nan")
    return float(time[last + 1] - start)


def frequency_nadir(freq: np.ndarray) -> float:
    return float(np.min(freq))
