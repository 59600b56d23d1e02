"""Implicit upwind finite-volume scheme for barotropic viscous flow.

One backward-Euler step advances cellwise density and momentum by solving

    |K| (rho^k - rho^{k-1}) / dt + sum_faces s |sigma| F(rho, u)          = 0,
    |K| (m^k - m^{k-1}) / dt  + convective flux + pressure faces
        - viscous faces + dilatation penalty - |K| rho g                 = 0,

with every flux evaluated at the new time level and the dissipative
upwind face flux

    F(r, v) = <r> <v>.n - (h^eps + |<v>.n| / 2) [[r]].

The nonlinear system is solved by damped Newton iteration on the analytic
sparse Jacobian (direct sparse LU).  The Newton path starting from the
previous time level is the deterministic selection among possibly
multiple solutions of the implicit system.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dfield, replace

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu

from .fields import (
    Field,
    State,
    StepDiagnostics,
    Trajectory,
    div_h,
    total_energy,
    w12_seminorm,
)
from .mesh import TorusMesh, project


class SchemeError(ValueError):
    """Invalid physical or numerical parameters."""


class NewtonFailure(ArithmeticError):
    """One Newton attempt did not converge at the current step size."""


class StepFailure(ArithmeticError):
    """A time step failed even after exhausting step-size halvings."""


class DataError(ValueError):
    """Initial data outside the admissible data space."""


@dataclass(frozen=True)
class FluidParams:
    """Viscosities, equation of state, and (projected) body force."""

    mu: float
    lam: float
    gamma: float
    a: float
    g: Field | None = None

    def __post_init__(self):
        if self.mu <= 0.0:
            raise SchemeError(f"mu: shear viscosity must be > 0, got {self.mu}")
        if self.lam < 0.0:
            raise SchemeError(f"lambda: bulk parameter must be >= 0, got {self.lam}")
        if self.gamma <= 1.0:
            raise SchemeError(f"gamma: adiabatic exponent must be > 1, got {self.gamma}")
        if self.a < 0.0:
            raise SchemeError(f"a: pressure coefficient must be >= 0, got {self.a}")
        if self.g is not None and not self.g.is_vector:
            raise SchemeError("g: body force must be a vector field")

    def eta(self, d: int) -> float:
        """Dilatation viscosity (d-2)/d * mu + lambda, always recomputed."""
        return (d - 2) / d * self.mu + self.lam


@dataclass(frozen=True)
class SolverOptions:
    tol_abs: float = 1e-11
    tol_rel: float = 1e-10
    max_iters: int = 25
    max_dt_halvings: int = 6
    max_damping: int = 40

    def __post_init__(self):
        if self.tol_abs <= 0.0 or self.tol_rel <= 0.0:
            raise SchemeError("solver tolerances must be positive")


@dataclass(frozen=True)
class SchemeConfig:
    T: float
    epsilon: float = 0.6
    dt_factor: float = 1.0
    quad_order: int = 3
    solver: SolverOptions = dfield(default_factory=SolverOptions)

    def __post_init__(self):
        if self.epsilon <= -1.0:
            raise SchemeError(f"epsilon: flux exponent must be > -1, got {self.epsilon}")
        if self.T <= 0.0:
            raise SchemeError(f"T: final time must be > 0, got {self.T}")
        if self.dt_factor <= 0.0:
            raise SchemeError(f"dt_factor must be > 0, got {self.dt_factor}")


def upwind_flux(r_in, r_out, v_in, v_out, normal, h: float, epsilon: float):
    """Dissipative upwind flux through one oriented face.

    ``v_in``/``v_out`` are the adjacent velocity vectors and ``normal``
    the face unit normal; scalars are accepted for one-dimensional data.
    Vector-valued ``r`` is transported componentwise.
    """
    if h <= 0.0:
        raise SchemeError(f"mesh width must be positive, got {h}")
    if epsilon <= -1.0:
        raise SchemeError(f"flux exponent must be > -1, got {epsilon}")
    vbar = 0.5 * (np.asarray(v_in, dtype=float) + np.asarray(v_out, dtype=float))
    vn = np.dot(vbar, np.asarray(normal, dtype=float)) if np.ndim(vbar) else vbar
    rbar = 0.5 * (np.asarray(r_in, dtype=float) + np.asarray(r_out, dtype=float))
    rjump = np.asarray(r_out, dtype=float) - np.asarray(r_in, dtype=float)
    return rbar * vn - (h**epsilon + 0.5 * np.abs(vn)) * rjump


# ---------------------------------------------------------------------------
# residual


def _residual_arrays(rho, mom, rho_old, mom_old, dt, mesh: TorusMesh,
                     params: FluidParams, epsilon: float):
    """Weak-form per-cell residuals (mass, momentum), |K|-weighted."""
    d, h = mesh.d, mesh.h
    vol, area = mesh.cell_volume, mesh.face_area
    heps = h**epsilon
    u = mom / rho[..., None]

    res_rho = vol / dt * (rho - rho_old)
    res_mom = vol / dt * (mom - mom_old)
    p = params.a * rho**params.gamma

    for a in range(d):
        u_a = u[..., a]
        vbar = 0.5 * (u_a + np.roll(u_a, -1, axis=a))
        coef = heps + 0.5 * np.abs(vbar)

        flux = 0.5 * (rho + np.roll(rho, -1, axis=a)) * vbar
        flux -= coef * (np.roll(rho, -1, axis=a) - rho)
        res_rho += area * (flux - np.roll(flux, 1, axis=a))

        mflux = 0.5 * (mom + np.roll(mom, -1, axis=a)) * vbar[..., None]
        mflux -= coef[..., None] * (np.roll(mom, -1, axis=a) - mom)
        res_mom += area * (mflux - np.roll(mflux, 1, axis=a))

        pbar = 0.5 * (p + np.roll(p, -1, axis=a))
        res_mom[..., a] += area * (pbar - np.roll(pbar, 1, axis=a))

        ju = np.roll(u, -1, axis=a) - u
        res_mom -= params.mu / h * area * (ju - np.roll(ju, 1, axis=a))

    eta = params.eta(d)
    if eta != 0.0:
        divu = np.zeros(mesh.shape)
        for b in range(d):
            divu += (np.roll(u[..., b], -1, axis=b) - np.roll(u[..., b], 1, axis=b)) / (2 * h)
        for i in range(d):
            res_mom[..., i] += eta * area / 2 * (
                np.roll(divu, 1, axis=i) - np.roll(divu, -1, axis=i)
            )

    if params.g is not None:
        res_mom -= vol * rho[..., None] * params.g.values
    return res_rho, res_mom


def residual(s_new: State, s_old: State, dt: float, params: FluidParams,
             epsilon: float) -> np.ndarray:
    """Per-cell scheme residual, shape ``mesh.shape + (d+1,)`` (mass first)."""
    if s_new.mesh != s_old.mesh:
        raise SchemeError("states live on different meshes")
    if s_new.rho.values.min() <= 0.0:
        raise SchemeError("residual evaluation needs strictly positive density")
    rr, rm = _residual_arrays(
        s_new.rho.values, s_new.mom.values, s_old.rho.values, s_old.mom.values,
        dt, s_new.mesh, params, epsilon,
    )
    return np.concatenate([rr[..., None], rm], axis=-1)


# ---------------------------------------------------------------------------
# analytic Jacobian


class _Workspace:
    """Static sparsity pattern and scratch indices for one mesh/term set.

    Bands are recorded on the first assembly in a fixed order; later
    assemblies must emit values in the same order and only refresh the
    numeric entries.
    """

    def __init__(self, mesh: TorusMesh):
        self.mesh = mesh
        self.nunk = mesh.cell_count * (mesh.d + 1)
        self._shifted: dict[tuple, np.ndarray] = {}
        self._rows: dict[int, np.ndarray] = {}
        self.rows: np.ndarray | None = None
        self.cols: np.ndarray | None = None
        self._building = True
        self._signature = None
        self._row_list: list[np.ndarray] = []
        self._col_list: list[np.ndarray] = []
        self.vals: list[np.ndarray] = []
        self.lu = None       # factorization reused across iterations/steps
        self.lu_dt = None    # step size the factorization was built for

    def shifted(self, shift: tuple[int, ...]) -> np.ndarray:
        if shift not in self._shifted:
            arr = self.mesh.index_grid
            for ax, s in enumerate(shift):
                if s:
                    arr = np.roll(arr, -s, axis=ax)
            self._shifted[shift] = np.ascontiguousarray(arr.ravel())
        return self._shifted[shift]

    def row_indices(self, comp: int) -> np.ndarray:
        if comp not in self._rows:
            nc = self.mesh.d + 1
            self._rows[comp] = self.mesh.index_grid.ravel() * nc + comp
        return self._rows[comp]

    def begin(self, signature: tuple):
        if signature != self._signature:
            # term set changed (eta or g toggled): rebuild the pattern
            self._signature = signature
            self._building = True
            self.rows = self.cols = None
        self.vals = []
        if self._building:
            self._row_list, self._col_list = [], []

    def add(self, rcomp: int, ccomp: int, shift: tuple[int, ...], values: np.ndarray):
        self.vals.append(values.ravel())
        if self._building:
            nc = self.mesh.d + 1
            self._row_list.append(self.row_indices(rcomp))
            self._col_list.append(self.shifted(shift) * nc + ccomp)

    def finish(self):
        if self._building:
            self.rows = np.concatenate(self._row_list)
            self.cols = np.concatenate(self._col_list)
            self._row_list, self._col_list = [], []
            self._building = False
        data = np.concatenate(self.vals)
        return coo_matrix((data, (self.rows, self.cols)),
                          shape=(self.nunk, self.nunk)).tocsc()


def _unit_shift(axis: int, sign: int, d: int) -> tuple[int, ...]:
    s = [0] * d
    s[axis] = sign
    return tuple(s)


def _jacobian(rho, mom, dt, mesh: TorusMesh, params: FluidParams,
              epsilon: float, ws: _Workspace):
    d, h = mesh.d, mesh.h
    vol, area = mesh.cell_volume, mesh.face_area
    heps = h**epsilon
    u = mom / rho[..., None]
    inv_rho = 1.0 / rho
    zero = (0,) * d

    ws.begin((params.eta(d) != 0.0, params.g is not None))
    diag_time = np.full(mesh.shape, vol / dt)
    for comp in range(d + 1):
        ws.add(comp, comp, zero, diag_time)

    pprime = params.a * params.gamma * rho ** (params.gamma - 1.0)

    for a in range(d):
        plus = _unit_shift(a, +1, d)
        minus = _unit_shift(a, -1, d)
        u_a = u[..., a]
        vbar = 0.5 * (u_a + np.roll(u_a, -1, axis=a))
        coef = heps + 0.5 * np.abs(vbar)
        sgn = np.sign(vbar)
        # d<v>.n at the in/out cell, through u_a = m_a / rho
        dv_rA = -0.5 * u_a * inv_rho
        dv_rB = np.roll(dv_rA, -1, axis=a)
        dv_mA = 0.5 * inv_rho
        dv_mB = np.roll(dv_mA, -1, axis=a)

        rjump = np.roll(rho, -1, axis=a) - rho
        g_rho = 0.5 * (rho + np.roll(rho, -1, axis=a)) - 0.5 * sgn * rjump
        dF_rA = 0.5 * vbar + g_rho * dv_rA + coef
        dF_rB = 0.5 * vbar + g_rho * dv_rB - coef
        dF_mA = g_rho * dv_mA
        dF_mB = g_rho * dv_mB
        ws.add(0, 0, zero, area * (dF_rA - np.roll(dF_rB, 1, axis=a)))
        ws.add(0, 0, plus, area * dF_rB)
        ws.add(0, 0, minus, -area * np.roll(dF_rA, 1, axis=a))
        ws.add(0, 1 + a, zero, area * (dF_mA - np.roll(dF_mB, 1, axis=a)))
        ws.add(0, 1 + a, plus, area * dF_mB)
        ws.add(0, 1 + a, minus, -area * np.roll(dF_mA, 1, axis=a))

        half_p = 0.5 * vbar + coef
        half_m = 0.5 * vbar - coef
        for i in range(d):
            m_i = mom[..., i]
            mjump = np.roll(m_i, -1, axis=a) - m_i
            g_m = 0.5 * (m_i + np.roll(m_i, -1, axis=a)) - 0.5 * sgn * mjump
            dFm_rA = g_m * dv_rA
            dFm_rB = g_m * dv_rB
            ws.add(1 + i, 0, zero, area * (dFm_rA - np.roll(dFm_rB, 1, axis=a)))
            ws.add(1 + i, 0, plus, area * dFm_rB)
            ws.add(1 + i, 0, minus, -area * np.roll(dFm_rA, 1, axis=a))
            ws.add(1 + i, 1 + i, zero, area * (half_p - np.roll(half_m, 1, axis=a)))
            ws.add(1 + i, 1 + i, plus, area * half_m)
            ws.add(1 + i, 1 + i, minus, -area * np.roll(half_p, 1, axis=a))
            dFm_mA = g_m * dv_mA
            dFm_mB = g_m * dv_mB
            ws.add(1 + i, 1 + a, zero, area * (dFm_mA - np.roll(dFm_mB, 1, axis=a)))
            ws.add(1 + i, 1 + a, plus, area * dFm_mB)
            ws.add(1 + i, 1 + a, minus, -area * np.roll(dFm_mA, 1, axis=a))

        ws.add(1 + a, 0, plus, 0.5 * area * np.roll(pprime, -1, axis=a))
        ws.add(1 + a, 0, minus, -0.5 * area * np.roll(pprime, 1, axis=a))

        visc = params.mu / h * area
        for i in range(d):
            u_i = u[..., i]
            ws.add(1 + i, 1 + i, zero, 2.0 * visc * inv_rho)
            ws.add(1 + i, 0, zero, -2.0 * visc * u_i * inv_rho)
            ws.add(1 + i, 1 + i, plus, -visc * np.roll(inv_rho, -1, axis=a))
            ws.add(1 + i, 1 + i, minus, -visc * np.roll(inv_rho, 1, axis=a))
            ws.add(1 + i, 0, plus, visc * np.roll(u_i * inv_rho, -1, axis=a))
            ws.add(1 + i, 0, minus, visc * np.roll(u_i * inv_rho, 1, axis=a))

    eta = params.eta(d)
    if eta != 0.0:
        c = eta * area / (4.0 * h)
        for i in range(d):
            for b in range(d):
                u_b_over_rho = u[..., b] * inv_rho
                for si, sb, sign in ((-1, 1, 1.0), (-1, -1, -1.0), (1, 1, -1.0), (1, -1, 1.0)):
                    shift = [0] * d
                    shift[i] += si
                    shift[b] += sb
                    shift = tuple(shift)
                    ws.add(1 + i, 1 + b, shift, sign * c * _roll_to(inv_rho, shift))
                    ws.add(1 + i, 0, shift, -sign * c * _roll_to(u_b_over_rho, shift))

    if params.g is not None:
        for i in range(d):
            ws.add(1 + i, 0, zero, -vol * params.g.values[..., i])

    return ws.finish()


def _roll_to(arr: np.ndarray, shift: tuple[int, ...]) -> np.ndarray:
    """Array of values at cell K+shift, indexed by K."""
    out = arr
    for ax, s in enumerate(shift):
        if s:
            out = np.roll(out, -s, axis=ax)
    return out


# ---------------------------------------------------------------------------
# Newton iteration and time stepping


_SLOW_CONTRACTION = 0.2  # per-iteration residual ratio that triggers a refactorization


def _newton(rho_old, mom_old, dt, mesh: TorusMesh, params: FluidParams,
            epsilon: float, opts: SolverOptions, ws: _Workspace):
    """Damped Newton iteration with a lazily refreshed factorization.

    The LU of the Jacobian is reused across iterations (and across time
    steps through the workspace) as long as it keeps contracting the
    residual quickly; a slow iteration or a step-size change invalidates
    it, falling back to an exact Newton step.
    """
    d = mesh.d
    ncells = mesh.cell_count
    inv_vol = 1.0 / mesh.cell_volume
    rho = rho_old.copy()
    mom = mom_old.copy()
    if ws.lu_dt != dt:
        ws.lu = None

    rr, rm = _residual_arrays(rho, mom, rho_old, mom_old, dt, mesh, params, epsilon)
    rmax = max(np.abs(rr).max(), np.abs(rm).max()) * inv_vol
    target = opts.tol_abs + opts.tol_rel * rmax
    for it in range(opts.max_iters):
        if rmax <= target:
            return rho, mom, it, rmax
        if ws.lu is None:
            jac = _jacobian(rho, mom, dt, mesh, params, epsilon, ws)
            ws.lu = splu(jac, permc_spec="MMD_AT_PLUS_A")
            ws.lu_dt = dt
        rhs = np.empty((ncells, d + 1))
        rhs[:, 0] = rr.ravel()
        rhs[:, 1:] = rm.reshape(ncells, d)
        delta = ws.lu.solve(-rhs.ravel()).reshape(ncells, d + 1)
        drho = delta[:, 0].reshape(mesh.shape)
        dmom = delta[:, 1:].reshape(mesh.shape + (d,))
        alpha = 1.0
        for _ in range(opts.max_damping):
            if (rho + alpha * drho).min() > 0.0:
                break
            alpha *= 0.5
        else:
            raise NewtonFailure("positivity damping exhausted")
        rho = rho + alpha * drho
        mom = mom + alpha * dmom
        rr, rm = _residual_arrays(rho, mom, rho_old, mom_old, dt, mesh, params, epsilon)
        prev = rmax
        rmax = max(np.abs(rr).max(), np.abs(rm).max()) * inv_vol
        if rmax > _SLOW_CONTRACTION * prev and rmax > target:
            ws.lu = None  # stale or genuinely hard: use a fresh Jacobian next
    if rmax <= target:
        return rho, mom, opts.max_iters, rmax
    raise NewtonFailure(f"no convergence after {opts.max_iters} iterations "
                        f"(residual {rmax:.3e}, target {target:.3e})")


def step(s_old: State, dt: float, params: FluidParams, cfg: SchemeConfig,
         ws: _Workspace | None = None) -> tuple[State, StepDiagnostics]:
    """Advance one implicit Euler step, halving dt on Newton failure.

    Returns the new state and diagnostics; the achieved step may be
    shorter than requested (recorded in ``diagnostics.dt``).
    """
    mesh = s_old.mesh
    if ws is None:
        ws = _Workspace(mesh)
    halvings = 0
    dt_try = dt
    while True:
        try:
            rho, mom, iters, rmax = _newton(
                s_old.rho.values, s_old.mom.values, dt_try, mesh, params,
                cfg.epsilon, cfg.solver, ws,
            )
            state = State(Field(mesh, rho), Field(mesh, mom))
            diag = StepDiagnostics(
                time=float("nan"), dt=dt_try, newton_iters=iters, residual=rmax,
                min_density=float(rho.min()), energy=float("nan"),
                dissipation=float("nan"), dt_halvings=halvings,
            )
            return state, diag
        except NewtonFailure as exc:
            halvings += 1
            if halvings > cfg.solver.max_dt_halvings:
                raise StepFailure(
                    f"step failed after {cfg.solver.max_dt_halvings} dt halvings: {exc}"
                ) from exc
            dt_try *= 0.5


def dissipation_rate(state: State, params: FluidParams) -> float:
    """Viscous dissipation mu |grad_D u|^2 + eta |div_h u|^2 of one state."""
    u = state.velocity()
    mesh = state.mesh
    diss = params.mu * w12_seminorm(u) ** 2
    eta = params.eta(mesh.d)
    if eta != 0.0:
        dv = div_h(u)
        diss += eta * mesh.cell_volume * float(np.sum(dv.values**2))
    return diss


def solve_trajectory(sample, mesh: TorusMesh, cfg: SchemeConfig, a: float,
                     gamma: float, mass_lower_bound: float = 1e-6) -> Trajectory:
    """Project one data sample and march it to the final time.

    The nominal step is dt_factor * h; the last step is truncated so the
    terminal state sits exactly at T.  Per-step energy, dissipation and
    solver diagnostics are recorded along the way.
    """
    rho0 = project(sample.rho0, mesh, cfg.quad_order)
    mom0 = project(sample.m0, mesh, cfg.quad_order)
    if rho0.values.min() <= 0.0:
        raise DataError(f"projected initial density has min {rho0.values.min():.3e}")
    mass0 = mesh.cell_volume * float(np.sum(rho0.values))
    if mass0 < mass_lower_bound:
        raise DataError(f"initial mass {mass0:.3e} below lower bound {mass_lower_bound:.0e}")
    g_field = None
    if getattr(sample, "g", None) is not None:
        g_field = project(sample.g, mesh, cfg.quad_order)
    params = FluidParams(mu=sample.mu, lam=sample.lam, gamma=gamma, a=a, g=g_field)
    total_energy(State(rho0, mom0), a, gamma)  # rejects infinite-energy data

    state = State(rho0, mom0)
    traj = Trajectory(dt_nominal=cfg.dt_factor * mesh.h)
    traj.times.append(0.0)
    traj.states.append(state)
    ws = _Workspace(mesh)

    t = 0.0
    tol_t = 1e-12 * max(cfg.T, 1.0)
    while cfg.T - t > tol_t:
        dt = min(traj.dt_nominal, cfg.T - t)
        state, diag = step(state, dt, params, cfg, ws)
        t += diag.dt
        diag = replace(
            diag, time=t,
            energy=total_energy(state, a, gamma),
            dissipation=dissipation_rate(state, params),
        )
        traj.times.append(t)
        traj.states.append(state)
        traj.diagnostics.append(diag)
    return traj


# ---------------------------------------------------------------------------
# structure-preservation ledger


@dataclass(frozen=True)
class LedgerReport:
    """Per-step slack of the discrete energy inequality (g = 0 only)."""

    applicable: bool
    slacks: np.ndarray
    energies: np.ndarray
    dissipations: np.ndarray
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.applicable and (self.slacks.size == 0 or self.slacks.min() >= -self.tolerance)

    @property
    def worst_slack(self) -> float:
        return float(self.slacks.min()) if self.slacks.size else 0.0

    def violations(self) -> np.ndarray:
        """Step indices (1-based) where the inequality fails."""
        return np.nonzero(self.slacks < -self.tolerance)[0] + 1


def energy_ledger_check(traj: Trajectory, params: FluidParams,
                        tolerance: float = 1e-9) -> LedgerReport:
    """Check E^k + dt_k (mu |grad_D u^k|^2 + eta |div u^k|^2) <= E^{k-1}.

    Energies and dissipation rates are recomputed from the stored states,
    so tampered trajectories are caught.  With a nonzero body force the
    plain inequality does not apply and the report says so.
    """
    applicable = params.g is None or not np.any(params.g.values)
    energies = np.array([total_energy(s, params.a, params.gamma) for s in traj.states])
    diss = np.array([dissipation_rate(s, params) for s in traj.states])
    slacks = np.empty(len(traj.states) - 1)
    for k in range(1, len(traj.states)):
        dt_k = traj.times[k] - traj.times[k - 1]
        slacks[k - 1] = energies[k - 1] - energies[k] - dt_k * diss[k]
    return LedgerReport(applicable=applicable, slacks=slacks, energies=energies,
                        dissipations=diss, tolerance=tolerance)
