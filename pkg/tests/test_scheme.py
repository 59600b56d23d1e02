import numpy as np
import pytest

from mcnsfv.fields import Field, State, total_energy
from mcnsfv.mesh import build_mesh
from mcnsfv.random_data import ExperimentModel, draw_sample
from mcnsfv.scheme import (
    FluidParams,
    SchemeConfig,
    SchemeError,
    SolverOptions,
    StepFailure,
    energy_ledger_check,
    residual,
    solve_trajectory,
    step,
    upwind_flux,
)


def make_state(mesh, rho, mom):
    return State(Field(mesh, rho), Field(mesh, mom))


def random_state(mesh, rng, rho_spread=0.3, mom_spread=0.3):
    rho = 1.0 + rho_spread * rng.random(mesh.shape)
    mom = mom_spread * rng.standard_normal(mesh.shape + (mesh.d,))
    return make_state(mesh, rho, mom)


def reference_residual(s_new, s_old, dt, params, epsilon):
    """Independent face-loop assembly of the scheme residual.

    Walks the oriented face list and applies the per-face formulas
    directly, without any of the vectorised rolling used by the package.
    """
    mesh = s_new.mesh
    d = mesh.d
    rho = s_new.rho.flat()
    mom = s_new.mom.flat()
    u = mom / rho[:, None]
    vol, area, h = mesh.cell_volume, mesh.face_area, mesh.h
    res = np.zeros((mesh.cell_count, d + 1))
    res[:, 0] = vol * (rho - s_old.rho.flat()) / dt
    res[:, 1:] = vol * (mom - s_old.mom.flat()) / dt
    p = params.a * rho**params.gamma
    faces = list(mesh.faces())

    divu = np.zeros(mesh.cell_count)
    for f in faces:
        ubar = 0.5 * (u[f.in_cell, f.axis] + u[f.out_cell, f.axis])
        divu[f.in_cell] += area / vol * ubar
        divu[f.out_cell] -= area / vol * ubar

    for f in faces:
        A, B = f.in_cell, f.out_cell
        normal = mesh.normal(f)
        flux = upwind_flux(rho[A], rho[B], u[A], u[B], normal, h, epsilon)
        res[A, 0] += area * flux
        res[B, 0] -= area * flux
        mflux = upwind_flux(mom[A], mom[B], u[A], u[B], normal, h, epsilon)
        res[A, 1:] += area * mflux
        res[B, 1:] -= area * mflux
        pbar = 0.5 * (p[A] + p[B])
        res[A, 1 + f.axis] += area * pbar
        res[B, 1 + f.axis] -= area * pbar
        ju = u[B] - u[A]
        res[A, 1:] -= params.mu / h * area * ju
        res[B, 1:] += params.mu / h * area * ju

    eta = params.eta(d)
    if eta != 0.0:
        for i in range(d):
            for cell in range(mesh.cell_count):
                acc = 0.0
                for f in faces:
                    if f.axis != i:
                        continue
                    w = 0.5 * ((f.in_cell == cell) + (f.out_cell == cell))
                    if w == 0.0:
                        continue
                    acc += vol * (divu[f.in_cell] * (area / vol) * w
                                  + divu[f.out_cell] * (-(area / vol)) * w)
                res[cell, 1 + i] += eta * acc

    if params.g is not None:
        res[:, 1:] -= vol * rho[:, None] * params.g.flat()
    return res.reshape(mesh.shape + (d + 1,))


# ---------------------------------------------------------------------------
# upwind flux


def test_flux_consistency_on_constants():
    rho, u = 1.7, np.array([0.9, -0.4])
    n = np.array([1.0, 0.0])
    f = upwind_flux(rho, rho, u, u, n, h=0.25, epsilon=0.6)
    assert f == rho * u[0]


def test_flux_zero_velocity_pure_dissipation():
    n = np.array([0.0, 1.0])
    zero = np.zeros(2)
    f = upwind_flux(1.0, 2.0, zero, zero, n, h=0.25, epsilon=0.6)
    assert f == -(0.25**0.6) * 1.0


def test_flux_hand_value():
    # r_in=1, r_out=2, <v>.n = 1, h=0.5, eps=0.6:
    # F = 1.5 - (0.5^0.6 + 0.5) = 0.3402460446135529 (evaluated by hand)
    f = upwind_flux(1.0, 2.0, 1.0, 1.0, 1.0, h=0.5, epsilon=0.6)
    assert f == pytest.approx(0.3402460446135529, abs=1e-15)


def test_flux_componentwise_vector_quantity():
    n = np.array([1.0, 0.0])
    u = np.array([1.0, 0.0])
    f = upwind_flux(np.array([1.0, 3.0]), np.array([2.0, 5.0]), u, u, n,
                    h=0.5, epsilon=0.6)
    coef = 0.5**0.6 + 0.5
    assert f == pytest.approx([1.5 - coef, 4.0 - 2 * coef], abs=1e-15)


def test_flux_rejects_bad_parameters():
    with pytest.raises(SchemeError):
        upwind_flux(1.0, 1.0, 0.0, 0.0, 1.0, h=0.0, epsilon=0.6)
    with pytest.raises(SchemeError):
        upwind_flux(1.0, 1.0, 0.0, 0.0, 1.0, h=0.5, epsilon=-2.0)


# ---------------------------------------------------------------------------
# residual


@pytest.mark.parametrize("lam,with_g", [(0.0, False), (0.4, False), (0.2, True)])
def test_residual_matches_face_loop_reference(lam, with_g):
    mesh = build_mesh(4, 2)
    rng = np.random.default_rng(101)
    s_new = random_state(mesh, rng)
    s_old = random_state(mesh, rng)
    g = Field(mesh, rng.standard_normal(mesh.shape + (2,))) if with_g else None
    params = FluidParams(mu=0.1, lam=lam, gamma=1.4, a=1.0, g=g)
    got = residual(s_new, s_old, dt=0.05, params=params, epsilon=0.6)
    want = reference_residual(s_new, s_old, 0.05, params, 0.6)
    assert np.abs(got - want).max() < 1e-13


@pytest.mark.parametrize("lam,with_g", [(0.0, False), (0.3, True)])
def test_jacobian_matches_finite_differences(lam, with_g):
    from mcnsfv.scheme import _jacobian, _residual_arrays, _Workspace

    mesh = build_mesh(3, 2)
    d, nc = mesh.d, mesh.cell_count
    rng = np.random.default_rng(71)
    rho = 1.0 + 0.3 * rng.random(mesh.shape)
    mom = 0.4 * rng.standard_normal(mesh.shape + (d,))
    rho_old = 1.0 + 0.3 * rng.random(mesh.shape)
    mom_old = 0.4 * rng.standard_normal(mesh.shape + (d,))
    g = Field(mesh, rng.standard_normal(mesh.shape + (d,))) if with_g else None
    params = FluidParams(mu=0.1, lam=lam, gamma=1.4, a=1.0, g=g)
    dt = 0.01

    jac = _jacobian(rho, mom, dt, mesh, params, 0.6, _Workspace(mesh)).toarray()

    def resvec(x):
        r = x.reshape(nc, d + 1)
        rr, rm = _residual_arrays(r[:, 0].reshape(mesh.shape),
                                  r[:, 1:].reshape(mesh.shape + (d,)),
                                  rho_old, mom_old, dt, mesh, params, 0.6)
        out = np.empty((nc, d + 1))
        out[:, 0] = rr.ravel()
        out[:, 1:] = rm.reshape(nc, d)
        return out.ravel()

    x0 = np.empty((nc, d + 1))
    x0[:, 0] = rho.ravel()
    x0[:, 1:] = mom.reshape(nc, d)
    x0 = x0.ravel()
    eps = 1e-7
    fd = np.zeros_like(jac)
    for j in range(len(x0)):
        xp, xm = x0.copy(), x0.copy()
        xp[j] += eps
        xm[j] -= eps
        fd[:, j] = (resvec(xp) - resvec(xm)) / (2 * eps)
    scale = np.abs(fd).max()
    assert np.abs(jac - fd).max() / scale < 1e-7


def test_residual_steady_state_is_zero():
    mesh = build_mesh(8, 2)
    s = make_state(mesh, 1.3 * np.ones(mesh.shape), np.zeros(mesh.shape + (2,)))
    params = FluidParams(mu=0.1, lam=0.0, gamma=1.4, a=1.0)
    res = residual(s, s, dt=0.1, params=params, epsilon=0.6)
    assert np.abs(res).max() == 0.0


def test_residual_telescoping_n4():
    # with the unit test function, face terms cancel pairwise and the sum
    # of mass residuals is the total mass change per unit time
    mesh = build_mesh(4, 2)
    rng = np.random.default_rng(7)
    s_new = random_state(mesh, rng)
    s_old = random_state(mesh, rng)
    params = FluidParams(mu=0.1, lam=0.3, gamma=1.4, a=1.0)
    res = residual(s_new, s_old, dt=0.05, params=params, epsilon=0.6)
    mass_change = mesh.cell_volume * (s_new.rho.values - s_old.rho.values).sum() / 0.05
    assert abs(res[..., 0].sum() - mass_change) < 1e-12
    mom_change = mesh.cell_volume * (s_new.mom.values - s_old.mom.values).sum(axis=(0, 1)) / 0.05
    assert np.abs(res[..., 1:].sum(axis=(0, 1)) - mom_change).max() < 1e-12


def test_residual_single_cell_bump_stencil():
    # one perturbed density cell, zero velocity: the mass residual is the
    # hand-assembled dissipation stencil 2d |sigma| h^eps delta at the bump
    # and -|sigma| h^eps delta at each neighbour; the momentum residual
    # holds only the pressure face terms at the axis neighbours
    mesh = build_mesh(4, 2)
    h, area = mesh.h, mesh.face_area
    eps, delta, a, gamma = 0.6, 0.1, 1.0, 1.4
    rho = np.ones(mesh.shape)
    rho[1, 2] += delta
    s = make_state(mesh, rho, np.zeros(mesh.shape + (2,)))
    params = FluidParams(mu=0.1, lam=0.0, gamma=gamma, a=a)
    res = residual(s, s, dt=0.05, params=params, epsilon=eps)

    mass = res[..., 0]
    want_mass = np.zeros(mesh.shape)
    want_mass[1, 2] = 4 * area * h**eps * delta
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        want_mass[(1 + di) % 4, (2 + dj) % 4] = -area * h**eps * delta
    assert np.abs(mass - want_mass).max() < 1e-15

    dp = a * (1 + delta) ** gamma - a  # p(1+delta) - p(1)
    want_mom = np.zeros(mesh.shape + (2,))
    want_mom[2, 2, 0] = -area * dp / 2  # +x neighbour
    want_mom[0, 2, 0] = +area * dp / 2  # -x neighbour
    want_mom[1, 3, 1] = -area * dp / 2
    want_mom[1, 1, 1] = +area * dp / 2
    assert np.abs(res[..., 1:] - want_mom).max() < 1e-15


def test_residual_supports_d3_structurally():
    mesh = build_mesh(3, 3)
    rng = np.random.default_rng(13)
    rho = 1.0 + 0.2 * rng.random(mesh.shape)
    mom = 0.2 * rng.standard_normal(mesh.shape + (3,))
    s = make_state(mesh, rho, mom)
    params = FluidParams(mu=0.1, lam=0.1, gamma=1.4, a=1.0)
    res = residual(s, s, dt=0.05, params=params, epsilon=0.6)
    assert res.shape == mesh.shape + (4,)
    assert abs(res[..., 0].sum()) < 1e-12  # telescoping survives in 3-D


def test_step_supports_d3_structurally():
    mesh = build_mesh(3, 3)
    rng = np.random.default_rng(29)
    s_old = make_state(mesh, 1.0 + 0.1 * rng.random(mesh.shape),
                       0.1 * rng.standard_normal(mesh.shape + (3,)))
    params = FluidParams(mu=0.1, lam=0.1, gamma=1.4, a=1.0)
    cfg = SchemeConfig(T=1.0)
    s_new, diag = step(s_old, mesh.h, params, cfg)
    assert s_new.rho.values.min() > 0.0
    mass0 = mesh.cell_volume * s_old.rho.values.sum()
    mass1 = mesh.cell_volume * s_new.rho.values.sum()
    assert abs(mass1 - mass0) / mass0 < 1e-11


# ---------------------------------------------------------------------------
# stepping


def test_step_constant_state_fixed_point():
    mesh = build_mesh(8, 2)
    s = make_state(mesh, np.ones(mesh.shape), np.zeros(mesh.shape + (2,)))
    params = FluidParams(mu=0.1, lam=0.0, gamma=1.4, a=1.0)
    cfg = SchemeConfig(T=1.0)
    s_new, diag = step(s, 0.1, params, cfg)
    assert diag.newton_iters <= 1
    assert np.abs(s_new.rho.values - 1.0).max() < 1e-12
    assert np.abs(s_new.mom.values).max() < 1e-12


def test_step_conserves_mass_and_momentum():
    mesh = build_mesh(16, 2)
    model = ExperimentModel("steady_state", seed=5)
    sample = draw_sample(model, 0)
    cfg = SchemeConfig(T=1.0)
    from mcnsfv.mesh import project

    rho0 = project(sample.rho0, mesh)
    mom0 = project(sample.m0, mesh)
    s_old = State(rho0, mom0)
    params = FluidParams(mu=sample.mu, lam=sample.lam, gamma=1.4, a=1.0)
    s_new, diag = step(s_old, mesh.h, params, cfg)
    mass0 = mesh.cell_volume * rho0.values.sum()
    mass1 = mesh.cell_volume * s_new.rho.values.sum()
    assert abs(mass1 - mass0) / mass0 < 1e-11
    mom_before = mesh.cell_volume * mom0.values.sum(axis=(0, 1))
    mom_after = mesh.cell_volume * s_new.mom.values.sum(axis=(0, 1))
    scale = max(np.abs(mom_before).max(), mass0)
    assert np.abs(mom_after - mom_before).max() / scale < 1e-10


def test_step_failure_after_halvings():
    mesh = build_mesh(4, 2)
    s = make_state(mesh, np.ones(mesh.shape), np.zeros(mesh.shape + (2,)))
    params = FluidParams(mu=0.1, lam=0.0, gamma=1.4, a=1.0)
    cfg = SchemeConfig(
        T=1.0, solver=SolverOptions(max_iters=0, max_dt_halvings=2)
    )
    rho_bad = np.ones(mesh.shape)
    rho_bad[0, 0] = 5.0  # nonzero residual, zero allowed iterations
    s_bad = make_state(mesh, rho_bad, np.zeros(mesh.shape + (2,)))
    with pytest.raises(StepFailure):
        step(s_bad, 0.1, params, cfg)


def test_trajectory_zero_perturbation_stays_steady():
    mesh = build_mesh(16, 2)
    model = ExperimentModel("steady_state", seed=1, half_width=0.0)
    sample = draw_sample(model, 3)
    cfg = SchemeConfig(T=0.1)
    traj = solve_trajectory(sample, mesh, cfg, a=1.0, gamma=1.4)
    for s in traj.states:
        assert np.abs(s.rho.values - 1.0).max() < 1e-10
        assert np.abs(s.mom.values).max() < 1e-10


def test_trajectory_truncates_last_step():
    mesh = build_mesh(16, 2)  # h = 1/8, dt = h
    dt = mesh.h
    model = ExperimentModel("steady_state", seed=2)
    sample = draw_sample(model, 0)
    cfg = SchemeConfig(T=3.5 * dt)
    traj = solve_trajectory(sample, mesh, cfg, a=1.0, gamma=1.4)
    assert traj.n_steps == 4
    want = [0.0, dt, 2 * dt, 3 * dt, 3.5 * dt]
    assert np.allclose(traj.times, want, rtol=0, atol=1e-14)
    assert traj.states[0].rho.values.shape == mesh.shape


def test_trajectory_energy_monotone_without_forcing():
    mesh = build_mesh(32, 2)
    model = ExperimentModel("vortex", seed=11)
    sample = draw_sample(model, 4)
    cfg = SchemeConfig(T=0.1)
    traj = solve_trajectory(sample, mesh, cfg, a=1.0, gamma=1.4)
    energies = [d.energy for d in traj.diagnostics]
    e0 = total_energy(traj.states[0], 1.0, 1.4)
    assert all(b <= a + 1e-12 for a, b in zip([e0, *energies], energies))


def test_trajectory_determinism_bitwise():
    mesh = build_mesh(16, 2)
    model = ExperimentModel("vortex_interface", seed=21)
    sample = draw_sample(model, 7)
    cfg = SchemeConfig(T=0.1)
    t1 = solve_trajectory(sample, mesh, cfg, a=1.0, gamma=1.4)
    t2 = solve_trajectory(sample, mesh, cfg, a=1.0, gamma=1.4)
    for s1, s2 in zip(t1.states, t2.states):
        assert np.array_equal(s1.rho.values, s2.rho.values)
        assert np.array_equal(s1.mom.values, s2.mom.values)


# ---------------------------------------------------------------------------
# energy ledger


def test_ledger_constant_state_all_zero():
    mesh = build_mesh(8, 2)
    s = make_state(mesh, np.ones(mesh.shape), np.zeros(mesh.shape + (2,)))
    from mcnsfv.fields import Trajectory

    traj = Trajectory(dt_nominal=0.1, times=[0.0, 0.1, 0.2], states=[s, s, s])
    params = FluidParams(mu=0.1, lam=0.0, gamma=1.4, a=1.0)
    report = energy_ledger_check(traj, params)
    assert report.ok
    assert np.abs(report.slacks).max() == 0.0
    assert np.abs(report.dissipations).max() == 0.0


def test_ledger_holds_on_converged_run():
    mesh = build_mesh(16, 2)
    model = ExperimentModel("steady_state", seed=3)
    sample = draw_sample(model, 1)
    cfg = SchemeConfig(T=0.5)  # h = 1/8: four full steps
    traj = solve_trajectory(sample, mesh, cfg, a=1.0, gamma=1.4)
    params = FluidParams(mu=sample.mu, lam=sample.lam, gamma=1.4, a=1.0)
    report = energy_ledger_check(traj, params, tolerance=1e-9)
    assert traj.n_steps == 4
    assert report.ok
    assert report.violations().size == 0


def test_ledger_flags_injected_fault():
    mesh = build_mesh(16, 2)
    model = ExperimentModel("steady_state", seed=3)
    sample = draw_sample(model, 1)
    cfg = SchemeConfig(T=0.5)
    traj = solve_trajectory(sample, mesh, cfg, a=1.0, gamma=1.4)
    # raise the energy of the state after step 2
    bad = traj.states[2]
    mom = bad.mom.values.copy()
    mom[..., 0] += 0.5
    traj.states[2] = State(bad.rho, Field(mesh, mom))
    params = FluidParams(mu=sample.mu, lam=sample.lam, gamma=1.4, a=1.0)
    report = energy_ledger_check(traj, params, tolerance=1e-9)
    assert not report.ok
    assert 2 in report.violations()


def test_params_validation_and_eta():
    with pytest.raises(SchemeError):
        FluidParams(mu=0.0, lam=0.0, gamma=1.4, a=1.0)
    with pytest.raises(SchemeError):
        FluidParams(mu=0.1, lam=-0.1, gamma=1.4, a=1.0)
    with pytest.raises(SchemeError):
        FluidParams(mu=0.1, lam=0.0, gamma=1.0, a=1.0)
    p = FluidParams(mu=0.3, lam=0.2, gamma=1.4, a=1.0)
    assert p.eta(2) == pytest.approx(0.2)
    assert p.eta(3) == pytest.approx(0.3 / 3 + 0.2)
    with pytest.raises(SchemeError):
        SchemeConfig(T=0.1, epsilon=-2.0)
