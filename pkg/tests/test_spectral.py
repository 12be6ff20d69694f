"""Tests for the channel pseudo-spectral solver."""

import numpy as np
import pytest
from scipy.integrate import quad

from shearflow.profiles import StepProfile, energy as profile_energy, momentum as profile_momentum
from shearflow.spectral import (
    BumpScalarField,
    BumpTestField,
    CFLViolationError,
    ChannelGrid,
    ForceField,
    NumericalBlowupError,
    SpectralState,
    advance,
    diagnostics,
    force_fields,
    force_inner_product,
    from_profile,
    mean_flow,
    mollified_profile,
    mollified_shear,
    random_scalar_field,
    random_test_field,
    step,
    suggest_dt,
    velocity_fields,
    vorticity_field,
    weak_residual,
)


def two_step() -> StepProfile:
    return StepProfile((0.0, 0.5, 1.0), (1.0, -1.0))


def random_state(seed: int, n: int = 64, L: float = 2.0, mean: float = 0.2,
                 modes: int = 3, amp: float = 0.4) -> SpectralState:
    """Smooth random initial data, band-limited well inside the grid."""
    rng = np.random.default_rng(seed)
    g = ChannelGrid(n, n, L)
    X1, X2 = np.meshgrid(g.x1, g.x2, indexing="ij")
    om = np.zeros_like(X1)
    for m in range(1, modes + 1):
        for k in range(1, modes + 1):
            om += rng.normal(0.0, amp) * np.cos(
                2.0 * np.pi * m * X1 / L + rng.uniform(0.0, 2.0 * np.pi)
            ) * np.sin(np.pi * k * X2)
    return SpectralState.from_vorticity(g, om, mean_momentum=mean)


# ---------------------------------------------------------------------------
# grids and mollified profiles


def test_grid_validation():
    with pytest.raises(ValueError):
        ChannelGrid(3, 64, 1.0)
    with pytest.raises(ValueError):
        ChannelGrid(64, 2, 1.0)
    with pytest.raises(ValueError):
        ChannelGrid(64, 64, 0.0)


def test_mollifier_preserves_integral_and_wall_slope():
    p = StepProfile((0.0, 0.3, 0.75, 1.0), (1.0, -0.5, 0.25))
    width = 0.06
    total, _ = quad(
        lambda x: mollified_profile(p, width, np.array([x]))[0],
        0.0, 1.0, points=[0.3, 0.75], limit=200, epsabs=1e-13, epsrel=1e-13,
    )
    assert total == pytest.approx(profile_momentum(p), abs=1e-11)
    # even reflection at the walls kills the shear there
    assert mollified_shear(p, width, np.array([0.0, 1.0])) == pytest.approx(0.0)


def test_from_profile_constant_profile_is_irrotational():
    p = StepProfile((0.0, 1.0), (0.75,))
    st = from_profile(p, 0.05, 32, 32, 1.0)
    assert np.max(np.abs(vorticity_field(st))) < 1e-14
    mf = mean_flow(st)
    assert mf.ubar == pytest.approx(0.75 * np.ones(32), abs=1e-13)
    assert mf.momentum == pytest.approx(0.75)


def test_from_profile_momentum_matches_profile():
    p = StepProfile((0.0, 0.4, 0.9, 1.0), (2.0, -1.0, 0.5))
    st = from_profile(p, 0.05, 64, 128, 2.0)
    assert diagnostics(st).momentum == pytest.approx(
        profile_momentum(p), abs=1e-10
    )


def test_from_profile_two_step_shear_is_single_spike():
    p = two_step()
    width = 0.08
    st = from_profile(p, width, 32, 128, 1.0)
    omega_bar = vorticity_field(st).mean(axis=0)
    x2 = st.grid.x2
    # mass equals minus the value jump across the interface
    mass = np.sum(omega_bar) / 128
    assert mass == pytest.approx(-(-1.0 - 1.0), abs=1e-10)
    # supported only within one mollifier width of the interface
    away = np.abs(x2 - 0.5) > width + 1e-9
    assert np.max(np.abs(omega_bar[away])) < 1e-8
    assert omega_bar[np.abs(x2 - 0.5) < width / 4].min() > 0.0


def test_from_profile_average_equals_mollified_profile():
    p = StepProfile((0.0, 0.35, 0.7, 1.0), (1.0, 0.0, -0.5))
    width = 0.07
    st = from_profile(p, width, 32, 128, 1.0)
    ubar = mean_flow(st).ubar
    expected = mollified_profile(p, width, st.grid.x2)
    assert np.max(np.abs(ubar - expected)) < 1e-6


def test_from_profile_rejects_unresolvable_width():
    p = two_step()
    with pytest.raises(ValueError):
        from_profile(p, 0.01, 32, 32, 1.0)  # 2 * 0.01 * 32 < 4 points
    with pytest.raises(ValueError):
        from_profile(p, 0.0, 32, 32, 1.0)


def test_parallel_states_have_no_crossflow():
    st = from_profile(two_step(), 0.08, 64, 64, 2.0)
    u1, u2 = velocity_fields(st)
    assert np.max(np.abs(u2)) == 0.0
    assert u1 == pytest.approx(np.tile(mean_flow(st).ubar, (64, 1)), abs=1e-12)


# ---------------------------------------------------------------------------
# stepping


def test_parallel_flow_is_a_fixed_point():
    st = from_profile(two_step(), 0.08, 64, 64, 2.0)
    dt = suggest_dt(st)
    st1 = step(st, dt)
    rel = np.max(np.abs(st1.omega_hat - st.omega_hat)) / np.max(
        np.abs(st.omega_hat)
    )
    assert rel < 1e-12
    assert st1.mean_momentum == st.mean_momentum
    assert st1.t == pytest.approx(dt)


def test_cfl_violation_is_rejected():
    st = from_profile(two_step(), 0.08, 64, 64, 2.0)
    with pytest.raises(CFLViolationError):
        step(st, 1.0)


def test_blowup_guard_trips_on_rescaled_reference():
    st = random_state(3)
    poisoned = SpectralState(
        st.grid, st.omega_hat, st.mean_momentum, st.t, st.omega_ref / 1e4
    )
    with pytest.raises(NumericalBlowupError):
        step(poisoned, suggest_dt(st))


def test_unforced_conservation_drift():
    st = random_state(0, n=128)
    d0 = diagnostics(st)
    dt = suggest_dt(st)
    st1 = advance(st, dt, int(round(1.0 / dt)))
    d1 = diagnostics(st1)
    T = st1.t
    assert abs(d1.energy - d0.energy) / T < 1e-8
    assert abs(d1.momentum - d0.momentum) / T < 1e-10
    assert abs(d1.enstrophy - d0.enstrophy) / T < 1e-6
    # first two vorticity moments, frozen from a two-resolution study
    assert abs(d1.vorticity_moments[0] - d0.vorticity_moments[0]) / T < 5e-5
    assert abs(d1.vorticity_moments[1] - d0.vorticity_moments[1]) / T < 2e-6


def test_conservation_drift_decreases_with_resolution():
    drifts = []
    for n in (64, 128):
        st = random_state(0, n=n)
        d0 = diagnostics(st)
        dt = suggest_dt(st)
        st1 = advance(st, dt, int(round(0.5 / dt)))
        d1 = diagnostics(st1)
        drifts.append(abs(d1.enstrophy - d0.enstrophy) / st1.t)
    assert drifts[1] < drifts[0]


def test_constant_mean_force_ramps_the_mean_linearly():
    g = ChannelGrid(32, 64, 1.0)
    ubar0 = 0.5 + 0.25 * np.cos(np.pi * g.x2)
    st = SpectralState.from_vorticity(
        g, np.tile(-np.gradient(ubar0, g.x2), (32, 1)), mean_momentum=0.5
    )
    accel = 0.1 + 0.2 * np.cos(np.pi * g.x2) + 0.05 * np.cos(3 * np.pi * g.x2)
    force = ForceField(np.zeros((32, 65), dtype=complex), accel)
    dt, n = 0.005, 40
    st1 = advance(st, dt, n, force)
    T = n * dt
    expected = mean_flow(st).ubar + T * accel
    assert np.max(np.abs(mean_flow(st1).ubar - expected)) < 1e-10
    # momentum budget: integral of the k1=0 momentum input, exactly
    assert st1.mean_momentum - st.mean_momentum == pytest.approx(
        T * accel.mean(), abs=1e-12
    )


def test_momentum_budget_with_time_varying_force():
    g = ChannelGrid(32, 32, 1.0)
    st = SpectralState.from_vorticity(g, np.zeros((32, 32)), mean_momentum=0.0)
    accel = np.ones(32)

    def force(t):
        return ForceField(
            np.zeros((32, 17), dtype=complex), accel * np.cos(t)
        )

    dt, n = 0.01, 100
    st1 = advance(st, dt, n, force)
    # RK4 integrates the forced mean to its classical order
    assert st1.mean_momentum == pytest.approx(np.sin(st1.t), abs=1e-10)


# ---------------------------------------------------------------------------
# diagnostics


def test_diagnostics_zero_state():
    g = ChannelGrid(16, 16, 1.0)
    st = SpectralState.from_vorticity(g, np.zeros((16, 16)))
    d = diagnostics(st)
    assert d.energy == 0.0
    assert d.momentum == 0.0
    assert d.enstrophy == 0.0
    assert d.vorticity_moments == (0.0, 0.0, 0.0, 0.0)
    assert d.linf_velocity == 0.0


def test_parallel_energy_matches_quadrature_and_profile():
    p = two_step()
    width, L = 0.08, 2.0
    st = from_profile(p, width, 64, 128, L)
    d = diagnostics(st)
    exact, _ = quad(
        lambda x: mollified_profile(p, width, np.array([x]))[0] ** 2,
        0.0, 1.0, points=[0.5], limit=200, epsabs=1e-13, epsrel=1e-13,
    )
    assert d.energy == pytest.approx(0.5 * L * exact, abs=1e-10)
    # mollification only perturbs the profile-algebra energy at O(width)
    assert d.energy == pytest.approx(L * profile_energy(p), rel=0.1)
    assert d.momentum == pytest.approx(0.0, abs=1e-12)
    assert d.linf_velocity == pytest.approx(1.0, abs=1e-3)


# ---------------------------------------------------------------------------
# weak residuals


def run_snapshots(st0, T, n):
    dt = T / n
    snaps = [st0]
    s = st0
    for _ in range(n):
        s = step(s, dt)
        snaps.append(s)
    return snaps


def test_weak_residual_vanishes_on_steady_flow():
    st0 = from_profile(two_step(), 0.08, 64, 64, 2.0)
    n = int(np.ceil(1.0 / suggest_dt(st0)))
    snaps = run_snapshots(st0, 1.0, n)
    for seed in range(3):
        v = random_test_field(seed, 2.0, 0.0, 1.0)
        phi = random_scalar_field(seed, 2.0, 0.0, 1.0)
        r_mom, r_inc = weak_residual(snaps, v, phi)
        assert abs(r_mom) < 1e-12
        assert abs(r_inc) < 1e-12


def test_weak_residual_second_order_in_dt():
    st0 = random_state(1)
    T = 1.0
    n0 = int(np.ceil(T / suggest_dt(st0, cfl=0.45)))
    coarse = run_snapshots(st0, T, n0)
    fine = run_snapshots(st0, T, 2 * n0)
    for seed in range(5):
        v = random_test_field(seed, st0.grid.L, 0.0, T)
        phi = random_scalar_field(seed, st0.grid.L, 0.0, T)
        r1, _ = weak_residual(coarse, v, phi)
        r2, _ = weak_residual(fine, v, phi)
        assert abs(r1) >= 3.5 * abs(r2)


def test_weak_residual_incompressibility_is_tiny():
    st0 = random_state(2)
    snaps = run_snapshots(st0, 0.5, int(np.ceil(0.5 / suggest_dt(st0))))
    for seed in range(3):
        v = random_test_field(seed, st0.grid.L, 0.0, 0.5)
        phi = random_scalar_field(seed, st0.grid.L, 0.0, 0.5)
        _, r_inc = weak_residual(snaps, v, phi)
        assert abs(r_inc) < 1e-10


def test_weak_residual_matches_forcing_work():
    g = ChannelGrid(64, 64, 2.0)
    st0 = random_state(4)
    X1, X2 = np.meshgrid(g.x1, g.x2, indexing="ij")
    f1 = 0.3 * np.cos(2 * np.pi * X1 / g.L) * np.sin(np.pi * X2) ** 2
    f2 = np.zeros_like(f1)
    force = ForceField.from_physical(g, f1, f2)
    T = 1.0
    n = int(np.ceil(T / suggest_dt(st0, cfl=0.4)))
    dt = T / n
    snaps = [st0]
    s = st0
    for _ in range(n):
        s = step(s, dt, force)
        snaps.append(s)
    v = random_test_field(0, g.L, 0.0, T)
    phi = random_scalar_field(0, g.L, 0.0, T)
    r_mom, _ = weak_residual(snaps, v, phi)
    times = np.array([s.t for s in snaps])
    work = np.trapezoid(
        [force_inner_product(g, force, v, t) for t in times], times
    )
    assert r_mom == pytest.approx(-work, abs=1e-6 * max(1.0, abs(work)))


def test_weak_residual_rejects_boundary_touching_fields():
    st0 = from_profile(two_step(), 0.08, 32, 32, 1.0)
    snaps = run_snapshots(st0, 0.5, 40)
    good_phi = random_scalar_field(0, 1.0, 0.0, 0.5)
    bad_space = BumpTestField(
        L=1.0, m=1, phase=0.0, amplitude=1.0,
        x2_lo=0.0, x2_hi=0.5, t_lo=0.1, t_hi=0.4,
    )
    with pytest.raises(ValueError):
        weak_residual(snaps, bad_space, good_phi)
    bad_time = BumpTestField(
        L=1.0, m=1, phase=0.0, amplitude=1.0,
        x2_lo=0.2, x2_hi=0.8, t_lo=0.0, t_hi=0.4,
    )
    with pytest.raises(ValueError):
        weak_residual(snaps, bad_time, good_phi)
    good_v = random_test_field(0, 1.0, 0.0, 0.5)
    bad_phi = BumpScalarField(
        L=1.0, m=1, phase=0.0, amplitude=1.0,
        x2_lo=0.2, x2_hi=0.8, t_lo=0.2, t_hi=0.6,
    )
    with pytest.raises(ValueError):
        weak_residual(snaps, good_v, bad_phi)


def test_weak_residual_requires_equal_spacing():
    st0 = from_profile(two_step(), 0.08, 32, 32, 1.0)
    snaps = run_snapshots(st0, 0.5, 40)
    v = random_test_field(0, 1.0, 0.0, 0.5)
    phi = random_scalar_field(0, 1.0, 0.0, 0.5)
    with pytest.raises(ValueError):
        weak_residual([snaps[0], snaps[1], snaps[3]], v, phi)


# ---------------------------------------------------------------------------
# forces


def test_force_field_round_trips_admissible_fields():
    g = ChannelGrid(32, 48, 1.5)
    X1, X2 = np.meshgrid(g.x1, g.x2, indexing="ij")
    # divergence-free by construction: perpendicular gradient of a bump
    chi = np.sin(np.pi * X2) ** 3 * np.cos(2 * np.pi * X1 / g.L)
    f1 = 3 * np.pi * np.sin(np.pi * X2) ** 2 * np.cos(np.pi * X2) * np.cos(
        2 * np.pi * X1 / g.L
    )
    f2 = (2 * np.pi / g.L) * chi * 0.0 + (2 * np.pi / g.L) * np.sin(
        np.pi * X2
    ) ** 3 * np.sin(2 * np.pi * X1 / g.L)
    ff = ForceField.from_physical(g, f1, f2)
    r1, r2 = force_fields(g, ff)
    assert np.max(np.abs(r1 - f1)) < 1e-10
    assert np.max(np.abs(r2 - f2)) < 1e-10


def test_force_field_projection_drops_gradients():
    g = ChannelGrid(32, 48, 1.5)
    X1, X2 = np.meshgrid(g.x1, g.x2, indexing="ij")
    # pure gradient of a periodic pressure: projects to zero
    pr = np.cos(2 * np.pi * X1 / g.L) * np.cos(np.pi * X2)
    g1 = -(2 * np.pi / g.L) * np.sin(2 * np.pi * X1 / g.L) * np.cos(np.pi * X2)
    g2 = -np.pi * np.cos(2 * np.pi * X1 / g.L) * np.sin(np.pi * X2)
    ff = ForceField.from_physical(g, g1, g2)
    r1, r2 = force_fields(g, ff)
    assert np.max(np.abs(r1)) < 1e-10
    assert np.max(np.abs(r2)) < 1e-10


def test_force_norm_is_parseval_exact():
    g = ChannelGrid(32, 64, 2.0)
    accel = 0.5 * np.cos(np.pi * g.x2)
    ff = ForceField(np.zeros((32, 65), dtype=complex), accel)
    # ||f||^2 = L * integral of accel^2 = L * 0.25/2
    assert ff.l2_norm(g) == pytest.approx(np.sqrt(2.0 * 0.125), abs=1e-12)
