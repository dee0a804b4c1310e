"""Masked constrained power-flow optimisation used by every APPF stage.

Each bus carries four variables ``(|V|, theta, P, Q)``.  A ``VariableMask``
marks each one fixed or free.  Free variables are *dependent*: for given
fixed values they are obtained from the nodal balance equations by Newton's
method.  A subset of the fixed variables may be released as *controls*;
the optimiser moves these inside their box bounds to minimise the stage
objective, while bounds on dependent variables are enforced with an
augmented Lagrangian (PHR) penalty.  Gradients w.r.t. the controls are
computed with the adjoint of the balance Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import minimize, nnls

from .powerflow import PowerFlowSolution, mismatch, power_derivatives

VARS = ("vm", "va", "p", "q")
VM, VA, P, Q = range(4)

BALANCE_TOL = 1e-6
OPTIMALITY_TOL = 1e-6
FEAS_TOL = 1e-9
LOW_BRANCH_VM = 0.7
UNSOLVABLE_MERIT = 1e6
INNER_TOL = 1e-11


class StageError(RuntimeError):
    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class StageInfeasible(StageError):
    """No point satisfies the constraints; ``constraint`` names the worst one."""

    def __init__(self, message, constraint=None, violation=None, iterate=None):
        super().__init__(message, iterate)
        self.constraint = constraint
        self.violation = violation


class StageNonConvergence(StageError):
    pass


class SequencingError(RuntimeError):
    pass


@dataclass
class VariableMask:
    """``fixed[k, v]`` is True when variable ``v`` of bus position ``k`` is fixed."""

    fixed: np.ndarray

    @classmethod
    def from_rows(cls, rows) -> "VariableMask":
        """Build from per-bus strings such as ``"VA"`` naming the *fixed* variables.

        Letters: V = |V|, A = angle, P, Q.
        """
        letters = {"V": VM, "A": VA, "P": P, "Q": Q}
        fixed = np.zeros((len(rows), 4), dtype=bool)
        for k, row in enumerate(rows):
            for ch in row:
                fixed[k, letters[ch]] = True
        return cls(fixed)

    @property
    def n_bus(self) -> int:
        return self.fixed.shape[0]

    def table_pattern_ok(self) -> bool:
        return bool(np.all(self.fixed.sum(axis=1) == 2))


@dataclass
class ObjectiveTerm:
    """``weight * (sum coeff * variable - target) ** 2``; coeffs keyed by (bus pos, var)."""

    weight: float
    coeffs: dict
    target: float = 0.0
    label: str = ""


@dataclass
class ApparentLimit:
    """Device MVA circle: ``(P - p_offset)^2 + (Q - q_offset)^2 <= s_max^2`` at a bus."""

    pos: int
    s_max: float
    p_offset: float = 0.0
    q_offset: float = 0.0


@dataclass
class StageSpec:
    bus_ids: list
    mask: VariableMask
    objective: list
    bounds: np.ndarray            # (n, 4, 2) min / max, +-inf when unbounded
    initial_point: np.ndarray     # (n, 4)
    controls: list = field(default_factory=list)        # [(pos, var)] released fixed variables
    balance_scope: list = None
    apparent_limits: list = field(default_factory=list)
    label: str = ""

    def __post_init__(self):
        n = len(self.bus_ids)
        self.bounds = np.array(self.bounds, dtype=float)
        self.initial_point = np.array(self.initial_point, dtype=float)
        if self.bounds.shape != (n, 4, 2) or self.initial_point.shape != (n, 4):
            raise ValueError("bounds/initial point shape does not match bus count")
        if np.any(self.bounds[..., 0] > self.bounds[..., 1]):
            raise ValueError("bound min exceeds max")
        if any(t.weight < 0 for t in self.objective):
            raise ValueError("objective weights must be non-negative")
        if self.balance_scope is None:
            self.balance_scope = list(range(n))
        for pos, var in self.controls:
            if not self.mask.fixed[pos, var]:
                raise ValueError(f"control ({self.bus_ids[pos]}, {VARS[var]}) is not a fixed variable")

    @property
    def n_bus(self) -> int:
        return len(self.bus_ids)


class _Problem:
    def __init__(self, Y, spec: StageSpec):
        self.Y = np.asarray(Y, dtype=complex)
        self.spec = spec
        n = spec.n_bus
        self.n = n
        fixed = spec.mask.fixed.reshape(-1, order="F")
        self.dep = np.flatnonzero(~fixed)
        self.ctrl = np.array([var * n + pos for pos, var in spec.controls], dtype=int)
        self.rows = np.asarray(spec.balance_scope, dtype=int)
        if len(self.dep) != 2 * len(self.rows):
            raise ValueError(
                f"stage is not square: {len(self.dep)} free variables for {2 * len(self.rows)} balance equations")
        self.z0 = spec.initial_point.reshape(-1, order="F").copy()
        lo = spec.bounds[..., 0].reshape(-1, order="F")
        hi = spec.bounds[..., 1].reshape(-1, order="F")
        self.u_lo, self.u_hi = lo[self.ctrl], hi[self.ctrl]
        # objective as dense rows over the flat variable vector
        self.A = np.zeros((len(spec.objective), 4 * n))
        self.t = np.array([term.target for term in spec.objective], dtype=float)
        self.w = np.array([term.weight for term in spec.objective], dtype=float)
        for r, term in enumerate(spec.objective):
            for (pos, var), c in term.coeffs.items():
                self.A[r, var * n + pos] += c
        # dependent-bound constraints
        self.blo, self.bhi = lo, hi
        bidx, bsign, blab = [], [], []
        for j in self.dep:
            pos, var = j % n, j // n
            if np.isfinite(hi[j]):
                bidx.append(j); bsign.append(1.0); blab.append(f"{VARS[var]}[{spec.bus_ids[pos]}] <= {hi[j]:.6g}")
            if np.isfinite(lo[j]):
                bidx.append(j); bsign.append(-1.0); blab.append(f"{VARS[var]}[{spec.bus_ids[pos]}] >= {lo[j]:.6g}")
        self.bidx = np.array(bidx, dtype=int)
        self.bsign = np.array(bsign)
        self.bval = np.where(self.bsign > 0, hi[self.bidx], -lo[self.bidx]) if bidx else np.zeros(0)
        self.labels = blab + [f"|S|[{spec.bus_ids[a.pos]}] <= {a.s_max:.6g}" for a in spec.apparent_limits]
        self.z_warm = self.z0.copy()
        self.n_eval = 0
        self.last_merit = 0.0

    # -- balance equations --------------------------------------------------
    def _voltage(self, z):
        n = self.n
        return z[:n] * np.exp(1j * z[n:2 * n])

    def residual(self, z):
        n = self.n
        V = self._voltage(z)
        S = z[2 * n:3 * n] + 1j * z[3 * n:]
        r = mismatch(self.Y, V, S)[self.rows]
        return np.concatenate([r.real, r.imag])

    def jacobian(self, z):
        """Real Jacobian of the scoped residual w.r.t. the flat variable vector."""
        n = self.n
        V = self._voltage(z)
        dVm, dVa = power_derivatives(self.Y, V)
        m = len(self.rows)
        J = np.zeros((2 * m, 4 * n))
        dVm, dVa = dVm[self.rows], dVa[self.rows]
        J[:m, :n], J[m:, :n] = dVm.real, dVm.imag
        J[:m, n:2 * n], J[m:, n:2 * n] = dVa.real, dVa.imag
        J[np.arange(m), 2 * n + self.rows] = -1.0
        J[m + np.arange(m), 3 * n + self.rows] = -1.0
        return J

    def solve_dependent(self, u, z_start=None, max_iter=30):
        z = (self.z_warm if z_start is None else z_start).copy()
        z[self.ctrl] = u
        for _ in range(max_iter):
            f = self.residual(z)
            if np.max(np.abs(f), initial=0.0) <= INNER_TOL:
                return z
            J = self.jacobian(z)[:, self.dep]
            try:
                dz = np.linalg.solve(J, -f)
            except np.linalg.LinAlgError:
                return None
            z[self.dep] += dz
            if not np.all(np.isfinite(z)):
                return None
        f = self.residual(z)
        return z if np.max(np.abs(f), initial=0.0) <= 1e-9 else None

    # -- objective and constraints -----------------------------------------
    def constraints(self, z):
        c = self.bsign * z[self.bidx] - self.bval if len(self.bidx) else np.zeros(0)
        circ = []
        n = self.n
        for a in self.spec.apparent_limits:
            dp = z[2 * n + a.pos] - a.p_offset
            dq = z[3 * n + a.pos] - a.q_offset
            circ.append((dp * dp + dq * dq - a.s_max ** 2) / (2 * a.s_max))
        return np.concatenate([c, np.array(circ)])

    def constraint_grad(self, z, weights):
        """``sum_j weights_j * grad c_j`` over the flat variable vector."""
        g = np.zeros(4 * self.n)
        nb = len(self.bidx)
        if nb:
            np.add.at(g, self.bidx, weights[:nb] * self.bsign)
        n = self.n
        for a, wgt in zip(self.spec.apparent_limits, weights[nb:]):
            g[2 * n + a.pos] += wgt * (z[2 * n + a.pos] - a.p_offset) / a.s_max
            g[3 * n + a.pos] += wgt * (z[3 * n + a.pos] - a.q_offset) / a.s_max
        return g

    def objective(self, z):
        r = self.A @ z - self.t
        return float(np.sum(self.w * r * r)), 2 * (self.w * r) @ self.A

    def reduced_gradient(self, z, dFdz):
        """Adjoint: gradient w.r.t. controls of F(z(u)) given ``dF/dz``."""
        if len(self.ctrl) == 0:
            return np.zeros(0)
        J = self.jacobian(z)
        lu = lu_factor(J[:, self.dep])
        lam = lu_solve(lu, dFdz[self.dep], trans=1)
        return dFdz[self.ctrl] - J[:, self.ctrl].T @ lam

    def _low_branch(self, z):
        vm = z[self.dep[self.dep < self.n]]
        return vm.size > 0 and float(np.min(vm)) < LOW_BRANCH_VM

    def solve_robust(self, u):
        z = self.solve_dependent(u)
        if z is None or self._low_branch(z):
            # a warm start left over from a long trial step can land on the
            # low-voltage power-flow branch; restart from the initial point
            z0 = self.solve_dependent(u, self.z0)
            if z0 is not None or z is None:
                z = z0
        return z

    def merit(self, u, mu, rho):
        self.n_eval += 1
        z = self.solve_robust(u)
        if z is None:
            # no balance solution at this trial point: well above any merit seen so far,
            # but finite and moderate so the line search can still interpolate
            return max(UNSOLVABLE_MERIT, 100.0 * abs(self.last_merit)), np.zeros_like(u)
        self.z_warm = z
        F, dF = self.objective(z)
        c = self.constraints(z)
        act = np.maximum(0.0, mu + rho * c)
        F += float(np.sum(act ** 2 - mu ** 2) / (2 * rho))
        self.last_merit = F
        dF = dF + self.constraint_grad(z, act)
        return F, self.reduced_gradient(z, dF)


def _projected_gradient(u, g, lo, hi):
    return np.clip(u - g, lo, hi) - u


def _kkt_gradient(prob, z, u, c, dF, active_tol=1e-7):
    """Projected Lagrangian gradient with NNLS multipliers on the near-active constraints."""
    g0 = prob.reduced_gradient(z, dF)
    act = np.flatnonzero(c > -active_tol)
    free = (u > prob.u_lo + 1e-12) & (u < prob.u_hi - 1e-12)
    if len(act) and free.any():
        G = np.column_stack([prob.reduced_gradient(z, prob.constraint_grad(z, np.eye(len(c))[j])) for j in act])
        lam, _ = nnls(G[free], -g0[free])
        g0 = g0 + G @ lam
    return float(np.max(np.abs(_projected_gradient(u, g0, prob.u_lo, prob.u_hi)), initial=0.0))


def _stalled(history, window=4, rtol=1e-9):
    # objective flat over the last outer iterations while feasible: the
    # remaining projected gradient is multiplier noise at large rho
    if len(history) < window:
        return False
    f = np.array([h[1] for h in history[-window:]])
    v = np.array([h[2] for h in history[-window:]])
    return bool(np.ptp(f) <= rtol * (1.0 + abs(f[-1])) and np.all(v <= 10 * FEAS_TOL))


def solve_constrained_stage(Y, spec: StageSpec, *, max_outer: int = 40,
                            balance_tol: float = BALANCE_TOL,
                            optimality_tol: float = OPTIMALITY_TOL) -> PowerFlowSolution:
    """Minimise ``spec.objective`` subject to nodal balance and bounds."""
    prob = _Problem(Y, spec)
    u = np.clip(prob.z0[prob.ctrl], prob.u_lo, prob.u_hi)
    z = prob.solve_dependent(u, prob.z0)
    if z is None:
        raise StageNonConvergence(f"{spec.label}: balance equations unsolvable at the initial point",
                                  spec.initial_point)
    prob.z_warm = z
    n_con = len(prob.constraints(z))
    mu = np.zeros(n_con)
    rho = 10.0
    viol_prev = np.inf
    pg = np.inf
    stalled = False
    history = []
    for outer in range(max_outer):
        if len(u):
            res = minimize(prob.merit, u, args=(mu, rho), jac=True, method="L-BFGS-B",
                           bounds=list(zip(prob.u_lo, prob.u_hi)),
                           options={"maxiter": 5000, "ftol": 1e-16, "gtol": 1e-12, "maxcor": 30})
            u = np.clip(res.x, prob.u_lo, prob.u_hi)
        z = prob.solve_robust(u)
        if z is None:
            raise StageNonConvergence(f"{spec.label}: balance equations diverged", prob.z_warm)
        prob.z_warm = z
        c = prob.constraints(z)
        viol = float(np.max(c, initial=0.0))
        mu = np.maximum(0.0, mu + rho * c)
        F, dF = prob.objective(z)
        g = prob.reduced_gradient(z, dF + prob.constraint_grad(z, mu))
        pg = float(np.max(np.abs(_projected_gradient(u, g, prob.u_lo, prob.u_hi)), initial=0.0))
        if viol <= FEAS_TOL and pg > optimality_tol and len(u):
            pg = min(pg, _kkt_gradient(prob, z, u, c, dF))
        history.append((outer, F, viol, pg, rho))
        if viol <= FEAS_TOL and pg <= optimality_tol:
            break
        if viol <= FEAS_TOL and _stalled(history):
            stalled = True
            break
        if viol > 0.25 * viol_prev and viol > FEAS_TOL:
            rho = min(rho * 10, 1e10)
        viol_prev = viol
    else:
        if viol > max(FEAS_TOL, 1e-7):
            worst = int(np.argmax(c))
            raise StageInfeasible(
                f"{spec.label}: infeasible, most violated constraint {prob.labels[worst]} by {viol:.3e}",
                constraint=prob.labels[worst], violation=viol, iterate=z.reshape(4, -1).T.copy())
        if pg > optimality_tol:
            exc = StageNonConvergence(
                f"{spec.label}: projected gradient {pg:.3e} above tolerance", z.reshape(4, -1).T.copy())
            exc.history = history
            raise exc

    # post-projection onto bounds of dependent variables
    zc = z.copy()
    zc[prob.dep] = np.clip(zc[prob.dep], prob.blo[prob.dep], prob.bhi[prob.dep])
    res_max = float(np.max(np.abs(prob.residual(zc)), initial=0.0))
    if res_max > balance_tol:
        raise StageNonConvergence(f"{spec.label}: balance residual {res_max:.3e} after projection", zc)
    n = prob.n
    F, _ = prob.objective(zc)
    return PowerFlowSolution(
        list(spec.bus_ids), zc[:n].copy(), zc[n:2 * n].copy(), zc[2 * n:3 * n].copy(), zc[3 * n:].copy(),
        converged=True, iterations=len(history), max_mismatch=res_max, objective=F,
        info={"projected_gradient": pg, "max_violation": viol, "history": history,
              "evaluations": prob.n_eval, "stalled": stalled})


def stage_point(sol: PowerFlowSolution) -> np.ndarray:
    return np.column_stack([sol.vm, sol.va, sol.p, sol.q])
