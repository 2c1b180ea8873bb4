import math

import numpy as np
import pytest

from damwave.cpgraph import structured_mesh
from damwave.femcore import PhysicsConstants, SparseSym, WaveSystem, build_dof_map
from damwave.timestepper import (
    TIMING_CATEGORIES, AlphaParams, Convention, Hook, LinearSystem, SimulationState, derive_params,
    format_duration, initial_acceleration, run_transient, simulated_time, spectral_radius, step,
)


def oscillator(omega):
    return LinearSystem(SparseSym.from_dense([[1.0]]), SparseSym.from_dense([[omega * omega]]))


def oscillator_error(convention, n, omega=1.0, T=10.0):
    """Phase-space error of u'' + w^2 u = 0, u(0)=1, v(0)=0 at time T."""
    params = derive_params(0.2, convention)
    system = oscillator(omega)
    s = SimulationState(np.array([1.0]), np.array([0.0]), np.zeros(1))
    s.a = initial_acceleration(s.u, s.v, system)
    for _ in range(n):
        s = step(s, system, params, T / n, tol=1e-14)
    return math.hypot(s.u[0] - math.cos(omega * T), (s.v[0] + omega * math.sin(omega * T)) / omega)


def observed_order(convention, ns=(100, 200, 400, 800)):
    h = np.log(1.0 / np.array(ns, dtype=float))
    e = np.log([oscillator_error(convention, n) for n in ns])
    return float(np.polyfit(h, e, 1)[0])


def small_system(c0=5e-4, n=8):
    mesh = structured_mesh(0, 0.4, 0, 0.3, n, n - 2, elevation=lambda lo, la: -40.0 - 20 * lo)
    return WaveSystem(build_dof_map(mesh), PhysicsConstants(c0=c0))


class TestParams:
    def test_rho_02(self):
        p = derive_params(0.2)
        assert p.alpha_m == pytest.approx(-0.5, abs=1e-15)
        assert p.alpha_f == pytest.approx(1 / 6, abs=1e-15)
        assert p.gamma == pytest.approx(7 / 6, abs=1e-15)
        assert p.beta == pytest.approx(25 / 36, abs=1e-15)
        assert p.convention is Convention.STANDARD

    def test_rho_1(self):
        p = derive_params(1.0)
        assert p.alpha_m == p.alpha_f == 0.5
        assert p.gamma == 0.5

    def test_paper_literal(self):
        p = derive_params(0.2, "paper-literal")
        assert p.gamma == pytest.approx(0.5 + 0.5 - 1 / 6)
        assert p.beta == pytest.approx(0.25 * (1 + 0.5 - 1 / 6) ** 2)

    @pytest.mark.parametrize("rho", [-0.1, 1.5])
    def test_range(self, rho):
        with pytest.raises(ValueError):
            derive_params(rho)

    def test_frozen(self):
        with pytest.raises(Exception):
            derive_params(0.2).rho = 0.3


class TestInitialAcceleration:
    def test_equilibrium(self):
        sys_ = small_system()
        z = np.zeros(sys_.dofmap.n_dofs)
        assert not initial_acceleration(z, z, sys_).any()

    def test_constant_level(self):
        sys_ = small_system()
        n = sys_.dofmap.n_dofs
        a0 = initial_acceleration(np.full(n, 2.0), np.zeros(n), sys_)
        assert np.max(np.abs(a0)) < 1e-12

    def test_residual(self):
        sys_ = small_system(n=7)
        assert 40 <= sys_.dofmap.n_dofs <= 60
        rng = np.random.default_rng(0)
        u0 = 0.1 * rng.standard_normal(sys_.dofmap.n_dofs)
        v0 = np.zeros_like(u0)
        a0 = initial_acceleration(u0, v0, sys_, tol=1e-12)
        B = sys_.stiffness(u0)
        rhs = B @ u0
        assert np.linalg.norm(sys_.mass @ a0 + rhs) <= 1e-10 * np.linalg.norm(rhs)


class TestStep:
    def test_equilibrium_fixed_point(self):
        sys_ = small_system()
        z = np.zeros(sys_.dofmap.n_dofs)
        s = step(SimulationState(z, z, z), sys_, derive_params(), 60.0)
        assert not (s.u.any() or s.v.any() or s.a.any())
        assert (s.t, s.step) == (60.0, 1)

    def test_flat_level_fixed_point(self):
        sys_ = small_system()
        n = sys_.dofmap.n_dofs
        u = np.full(n, 1.5)
        s = SimulationState(u, np.zeros(n), np.zeros(n))
        for _ in range(5):
            s = step(s, sys_, derive_params(), 120.0)
        # B 1 vanishes up to rounding, so the level is kept up to rounding
        assert np.max(np.abs(s.u - u)) < 1e-12

    def test_rejects_bad_tau(self):
        with pytest.raises(ValueError):
            step(SimulationState(np.zeros(1), np.zeros(1), np.zeros(1)), oscillator(1.0), derive_params(), 0.0)

    def test_time_bookkeeping(self):
        s = SimulationState(np.array([1.0]), np.zeros(1), np.array([-1.0]))
        for _ in range(7):
            s = step(s, oscillator(1.0), derive_params(), 0.3)
        assert s.step == 7 and s.t == pytest.approx(7 * 0.3)

    def test_second_order(self):
        e1, e2 = oscillator_error("standard-second-order", 100), oscillator_error("standard-second-order", 200)
        assert 3.6 <= e1 / e2 <= 4.4

    def test_paper_literal_is_first_order(self):
        assert observed_order("paper-literal") < 1.5

    @pytest.mark.parametrize("wt", [0.1, 1.0, 10.0, 100.0])
    def test_unconditionally_stable(self, wt):
        assert spectral_radius(derive_params(0.2), wt, 1.0) <= 1 + 1e-12

    def test_high_frequency_limit(self):
        # the limit is approached like (w tau)^(-2/3); at 1e4 it is within 5%
        r = spectral_radius(derive_params(0.2), 1e4, 1.0)
        assert abs(r - 0.2) <= 0.05 * 0.2

    def test_rho_one_conserves_amplitude(self):
        r = spectral_radius(derive_params(1.0), 50.0, 1.0)
        assert r == pytest.approx(1.0, abs=1e-10)


class TestRunTransient:
    def test_zero_steps(self):
        s0 = SimulationState(np.array([1.0]), np.zeros(1), np.array([-1.0]))
        assert run_transient(s0, oscillator(1.0), derive_params(), 0.1, 0) is s0

    def test_hooks_and_records(self):
        sys_ = small_system()
        n = sys_.dofmap.n_dofs
        u0 = 0.1 * np.sin(np.arange(n))
        s0 = SimulationState(u0, np.zeros(n), initial_acceleration(u0, np.zeros(n), sys_))
        seen, every3, records = [], [], []
        run_transient(s0, sys_, derive_params(), 30.0, 10,
                      [Hook(lambda s: seen.append(s.step)), Hook(lambda s: every3.append(s.step), 3)],
                      records=records)
        assert seen == list(range(11))
        assert every3 == [0, 3, 6, 9]
        assert [r.step for r in records] == list(range(1, 11))
        for r in records:
            assert set(r.timings) == set(TIMING_CATEGORIES)
            assert all(v >= 0 for v in r.timings.values())
            assert r.cg_iterations > 0

    def test_volume_conserved_without_damping(self):
        sys_ = small_system(c0=0.0)
        assert sys_.damping is None
        n = sys_.dofmap.n_dofs
        u0 = np.where(sys_.dofmap.lonlat[:, 0] < 0.2, 1.0, 0.0)
        s0 = SimulationState(u0, np.zeros(n), initial_acceleration(u0, np.zeros(n), sys_, tol=1e-13))
        vol = []
        run_transient(s0, sys_, derive_params(), 60.0, 100, [Hook(lambda s: vol.append(sys_.total(s.u)))], tol=1e-13)
        assert abs(vol[-1] - vol[0]) / abs(vol[0]) <= 1e-8

    def test_picard_changes_little_for_small_waves(self):
        sys_ = small_system()
        n = sys_.dofmap.n_dofs
        u0 = 0.01 * np.cos(np.arange(n))
        s0 = SimulationState(u0, np.zeros(n), initial_acceleration(u0, np.zeros(n), sys_))
        a = run_transient(s0, sys_, derive_params(), 30.0, 5)
        b = run_transient(s0, sys_, derive_params(), 30.0, 5, picard=2)
        assert np.max(np.abs(a.u - b.u)) < 1e-3 * np.max(np.abs(u0))
        assert not np.array_equal(a.u, b.u)

    def test_errors_carry_step_index(self):
        bad = LinearSystem(SparseSym.from_dense([[-1.0]]), SparseSym.from_dense([[1.0]]))
        s0 = SimulationState(np.array([1.0]), np.zeros(1), np.zeros(1))
        with pytest.raises(RuntimeError, match="time step 1"):
            run_transient(s0, bad, derive_params(), 0.1, 3)


class TestTable:
    @pytest.mark.parametrize("n, text", [
        (1, "41 minutes"),
        (2, "1 hour 23 minutes"),
        (10, "6 hours 56 minutes"),
        (300, "8 days 16 hours 20 minutes"),
    ])
    def test_rows(self, n, text):
        assert format_duration(simulated_time(n, 2500.0)) == text

    def test_minutes(self):
        assert simulated_time(300, 2500.0) / 60 == 12500
        assert simulated_time(1, 2500.0) / 60 == pytest.approx(41.67, abs=0.005)


def test_alpha_params_convention_field():
    p = AlphaParams(0.2, -0.5, 1 / 6, 25 / 36, 7 / 6)
    assert p.convention is Convention.STANDARD
