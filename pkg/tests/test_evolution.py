import numpy as np
import pytest
import scipy.sparse as sp

from evomix.evolution import (
    CRANK_NICOLSON,
    IMPLICIT_EULER,
    EvoSystem,
    KrylovError,
    NotPositiveRealError,
    PositiveRealSolver,
    Stepper,
    TimeGrid,
    Trajectory,
    WeightedNorm,
    accretivity_sum,
    causality_check,
    energy_identity_residual,
    run,
    solve_positive_real,
    step_crank_nicolson,
    step_implicit_euler,
    weighted_norm,
)

SCHEMES = [IMPLICIT_EULER, CRANK_NICOLSON]


def scalar(m0=1.0, m1=0.0, a=0.0):
    return EvoSystem(sp.csr_matrix([[m0]]), sp.csr_matrix([[m1]]), sp.csr_matrix([[a]]))


def random_system(seed, n=12, dissipative=True):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, n))
    m0 = a @ a.T / n + 0.5 * np.eye(n)
    s = rng.normal(size=(n, n))
    m1 = np.diag(rng.uniform(0.0, 1.0, n)) if dissipative else np.zeros((n, n))
    return EvoSystem(sp.csr_matrix(m0), sp.csr_matrix(m1), sp.csr_matrix(s - s.T)), rng


def rotation():
    return EvoSystem(sp.identity(2, format="csr"), sp.csr_matrix((2, 2)),
                     sp.csr_matrix([[0.0, -1.0], [1.0, 0.0]]))


def test_system_validation():
    with pytest.raises(ValueError):
        EvoSystem(sp.identity(2), sp.identity(3), sp.identity(2))
    with pytest.raises(ValueError):
        TimeGrid(0.0, 0.0, 3)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 0.1, 0)
    with pytest.raises(ValueError):
        Stepper(scalar(), 0.1, "rk4")
    with pytest.raises(ValueError):
        Trajectory(np.zeros(3), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        WeightedNorm(0.0)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_zero_forcing_gives_exact_zeros(scheme):
    system, _ = random_system(0)
    traj = run(system, None, TimeGrid(0.0, 0.1, 5), scheme)
    assert np.all(traj.states == 0.0)
    traj = run(system, lambda t: np.zeros(system.state_dim), TimeGrid(0.0, 0.1, 5), scheme)
    assert np.all(traj.states == 0.0)
    assert len(traj) == 6


def test_scalar_implicit_euler_unit_step():
    assert step_implicit_euler(scalar(), np.zeros(1), np.ones(1), 1.0)[0] == pytest.approx(1.0,
                                                                                           rel=1e-14)


def test_scalar_decay_recursion():
    sigma, dt = 0.7, 0.1
    stepper = Stepper(scalar(1.0, sigma), dt, IMPLICIT_EULER)
    u = np.ones(1)
    for n in range(1, 21):
        u = stepper.step(u, None)
        assert abs(u[0] - (1 + sigma * dt) ** -n) <= 1e-14


def test_scalar_crank_nicolson_closed_form():
    sigma, dt = 0.4, 0.25
    u = step_crank_nicolson(scalar(1.0, sigma), np.array([2.0]), np.array([1.0]), dt)
    expected = ((1 / dt - sigma / 2) * 2.0 + 1.0) / (1 / dt + sigma / 2)
    assert u[0] == pytest.approx(expected, rel=1e-14)


def test_rotation_preserves_norm():
    stepper = Stepper(rotation(), 0.3, CRANK_NICOLSON)
    u = np.array([1.0, 0.5])
    r0 = np.linalg.norm(u)
    for _ in range(50):
        u = stepper.step(u, None)
        assert abs(np.linalg.norm(u) - r0) <= 1e-9 * r0


def test_crank_nicolson_conserves_energy_without_dissipation():
    system, rng = random_system(1, dissipative=False)
    stepper = Stepper(system, 0.05, CRANK_NICOLSON)
    u = rng.normal(size=system.state_dim)
    e0 = system.energy(u)
    for _ in range(40):
        e_prev = system.energy(u)
        u = stepper.step(u, None)
        assert abs(system.energy(u) - e_prev) <= 1e-9 * e0


def test_crank_nicolson_dissipates_monotonically():
    system, rng = random_system(2)
    stepper = Stepper(system, 0.05, CRANK_NICOLSON)
    u = rng.normal(size=system.state_dim)
    energies = [system.energy(u)]
    for _ in range(40):
        u = stepper.step(u, None)
        energies.append(system.energy(u))
    assert np.all(np.diff(energies) <= 1e-10 * energies[0])
    assert energies[-1] < energies[0]


@pytest.mark.parametrize("scheme", SCHEMES)
@pytest.mark.parametrize("seed", range(3))
def test_energy_identity(scheme, seed):
    system, rng = random_system(10 + seed)
    f0 = rng.normal(size=system.state_dim)
    forcing = lambda t: np.sin(3 * t) * f0
    grid = TimeGrid(0.0, 0.05, 30)
    traj = run(system, forcing, grid, scheme)
    res = energy_identity_residual(traj, system, forcing, grid.dt, scheme)
    scale = max(system.energy(u) for u in traj.states)
    assert np.max(np.abs(res)) <= 10 * 1e-10 * scale


def test_forced_scalar_energy_closed_form():
    sigma, dt = 0.3, 0.2
    system = scalar(1.0, sigma)
    traj = run(system, lambda t: np.ones(1), TimeGrid(0.0, dt, 10), CRANK_NICOLSON)
    # closed-form recursion u_{n+1} = ((1/dt - s/2) u_n + 1) / (1/dt + s/2)
    u, ref = 0.0, [0.0]
    for _ in range(10):
        u = ((1 / dt - sigma / 2) * u + 1.0) / (1 / dt + sigma / 2)
        ref.append(u)
    np.testing.assert_allclose(traj.states[:, 0], ref, rtol=1e-12)
    ref = np.array(ref)
    ubar = 0.5 * (ref[1:] + ref[:-1])
    book = 0.5 * np.diff(ref ** 2) + dt * sigma * ubar ** 2 - dt * ubar
    res = energy_identity_residual(traj, system, lambda t: np.ones(1), dt)
    np.testing.assert_allclose(res, book, atol=1e-12)
    assert np.max(np.abs(book)) <= 1e-12


def test_positive_real_solver_matches_dense():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(50, 50))
    d = a @ a.T / 50 + np.eye(50)
    s = rng.normal(size=(50, 50))
    K = d + (s - s.T)
    b = rng.normal(size=50)
    x = solve_positive_real(sp.csr_matrix(K), b)
    assert np.linalg.norm(K @ x - b) <= 1e-10 * np.linalg.norm(b)
    np.testing.assert_allclose(x, np.linalg.solve(K, b), rtol=1e-8, atol=1e-9)


def test_symmetric_case_agrees_with_direct_solve():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(20, 20))
    d = a @ a.T + np.eye(20)
    b = rng.normal(size=20)
    np.testing.assert_allclose(solve_positive_real(d, b), np.linalg.solve(d, b), rtol=1e-9)
    assert np.all(solve_positive_real(d, np.zeros(20)) == 0.0)


@pytest.mark.parametrize("diag", [[1.0, 0.0, 1.0], [1.0, -1.0, 1.0]])
def test_non_positive_symmetric_part_is_an_error(diag):
    s = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 2.0], [0.0, -2.0, 0.0]])
    with pytest.raises(NotPositiveRealError):
        solve_positive_real(sp.csr_matrix(np.diag(diag) + s), np.ones(3))


def test_krylov_error_carries_history():
    rng = np.random.default_rng(5)
    s = 1e3 * rng.normal(size=(60, 60))
    K = sp.csr_matrix(np.eye(60) + s - s.T)
    solver = PositiveRealSolver(K, maxiter=1, restart=2)
    with pytest.raises(KrylovError) as info:
        solver.solve(rng.normal(size=60))
    assert len(info.value.residuals) > 0


def test_weighted_norm_closed_form():
    nu, T = 0.7, 2.0
    exact = np.sqrt((1 - np.exp(-2 * nu * T)) / (2 * nu))
    errs = []
    for steps in (20, 40, 80):
        t = np.linspace(0.0, T, steps + 1)
        errs.append(abs(weighted_norm(Trajectory(t, np.ones((steps + 1, 1))), nu) - exact))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    np.testing.assert_allclose(orders, 2.0, atol=0.05)
    t = np.linspace(0.0, 1.0, 5)
    assert weighted_norm(Trajectory(t, np.zeros((5, 3))), 1.0) == 0.0


def test_weighted_norm_decreases_in_nu():
    system, rng = random_system(6)
    f0 = rng.normal(size=system.state_dim)
    traj = run(system, lambda t: f0, TimeGrid(0.0, 0.1, 20))
    values = [WeightedNorm(nu)(traj) for nu in (0.1, 0.5, 1.0, 2.0, 8.0)]
    assert np.all(np.diff(values) < 0)


@pytest.mark.parametrize("scheme", SCHEMES)
@pytest.mark.parametrize("seed", range(3))
def test_causality(scheme, seed):
    system, rng = random_system(20 + seed)
    f0 = rng.normal(size=system.state_dim)
    grid = TimeGrid(0.0, 0.05, 40)
    t_on = 1.0
    forcing = lambda t: f0 * np.sin(t - t_on) ** 2 if t >= t_on else np.zeros_like(f0)
    c = causality_check(system, forcing, grid, t_on, scheme)
    assert c.peak > 0
    assert c.pre_onset <= 1e-13 * c.peak
    # vacuous window
    assert causality_check(system, forcing, grid, grid.t0, scheme).pre_onset == 0.0


@pytest.mark.parametrize("scheme", SCHEMES)
def test_accretivity_shadow(scheme):
    for seed in range(5):
        system, rng = random_system(30 + seed)
        f0, f1 = rng.normal(size=(2, system.state_dim))
        traj = run(system, lambda t: np.cos(5 * t) * f0 + t * f1, TimeGrid(0.0, 0.1, 25), scheme)
        u = traj.states
        # summation by parts: sum u_n (u_n - u_{n-1}) = |u_N|^2 / 2 + sum |u_n - u_{n-1}|^2 / 2
        sbp = 0.5 * np.sum(u[-1] ** 2) + 0.5 * np.sum(np.diff(u, axis=0) ** 2)
        s = accretivity_sum(traj)
        assert s >= 0.0
        assert s == pytest.approx(sbp, rel=1e-12)


def manufactured_error(scheme, steps, T=1.0):
    system = EvoSystem(sp.csr_matrix([[2.0, 0.0], [0.0, 1.0]]), sp.csr_matrix([[0.5, 0], [0, 0]]),
                       sp.csr_matrix([[0.0, -1.0], [1.0, 0.0]]))
    exact = lambda t: np.array([np.sin(t) ** 2, t * np.sin(t)])
    deriv = lambda t: np.array([np.sin(2 * t), np.sin(t) + t * np.cos(t)])
    forcing = lambda t: system.M0 @ deriv(t) + (system.M1 + system.A) @ exact(t)
    traj = run(system, forcing, TimeGrid(0.0, T / steps, steps), scheme)
    return np.linalg.norm(traj.states[-1] - exact(T))


@pytest.mark.parametrize("scheme, order", [(IMPLICIT_EULER, 1.0), (CRANK_NICOLSON, 2.0)])
def test_convergence_orders(scheme, order):
    errs = [manufactured_error(scheme, n) for n in (20, 40, 80, 160)]
    observed = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    np.testing.assert_allclose(observed[-1], order, atol=0.1)


@pytest.mark.parametrize("scheme", SCHEMES)
def test_runs_are_deterministic(scheme):
    system, rng = random_system(7, n=30)
    f0 = rng.normal(size=system.state_dim)
    a = run(system, lambda t: np.sin(t) * f0, TimeGrid(0.0, 0.1, 10), scheme)
    b = run(system, lambda t: np.sin(t) * f0, TimeGrid(0.0, 0.1, 10), scheme)
    assert np.array_equal(a.states, b.states)
