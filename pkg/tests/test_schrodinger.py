import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import solve_ivp

from conftest import SX, SZ, constant_schedule, dense_hamiltonian
from spincant import schrodinger as sd
from spincant.errors import DriftError, StepLimitError, TruncationError
from spincant.integrate import IntegratorConfig, Propagator
from spincant.model import (SimParams, SpinorState, coherent_amplitudes, coherent_spinor,
                            field_angle, field_direction, schedule_from_rows,
                            standard_schedule)

def random_state(rng, n):
    v = rng.normal(size=2 * n) + 1j * rng.normal(size=2 * n)
    v /= np.linalg.norm(v)
    return SpinorState(v[:n], v[n:])


class TestRhs:
    def test_matches_dense_hamiltonian(self, rng):
        n = 30
        params = SimParams(eta=0.37, epsilon=12.5, n_basis=n)
        sched = standard_schedule().scaled(0.01)
        for tau in (0.0, 3.7, 25.0):
            s = random_state(rng, n)
            da, db = sd.schrodinger_rhs(s, tau, params, sched)
            h = dense_hamiltonian(params, sched.rate(tau), n)
            expect = -1j * h @ s.packed()
            assert np.allclose(np.concatenate([da, db]), expect, atol=1e-12)

    @pytest.mark.property
    @given(st.complex_numbers(max_magnitude=3, allow_nan=False, allow_infinity=False),
           st.complex_numbers(max_magnitude=3, allow_nan=False, allow_infinity=False),
           st.integers(0, 2 ** 31 - 1))
    def test_linearity(self, c1, c2, seed):
        rng = np.random.default_rng(seed)
        n = 12
        params = SimParams(eta=0.3, epsilon=40, n_basis=n)
        sched = standard_schedule()
        s1, s2 = random_state(rng, n), random_state(rng, n)
        mix = SpinorState(c1 * s1.a + c2 * s2.a, c1 * s1.b + c2 * s2.b)
        r1 = np.concatenate(sd.schrodinger_rhs(s1, 1.3, params, sched))
        r2 = np.concatenate(sd.schrodinger_rhs(s2, 1.3, params, sched))
        rm = np.concatenate(sd.schrodinger_rhs(mix, 1.3, params, sched))
        assert np.allclose(rm, c1 * r1 + c2 * r2, rtol=1e-12, atol=1e-9)

    @pytest.mark.property
    def test_norm_rate_vanishes(self, rng):
        n = 40
        params = SimParams(eta=0.3, epsilon=400, n_basis=n)
        s = random_state(rng, n)
        da, db = sd.schrodinger_rhs(s, 2.0, params, standard_schedule())
        rate = 2 * (np.vdot(s.a, da) + np.vdot(s.b, db)).real
        assert abs(rate) < 1e-9

    def test_workspace_reuse(self, rng):
        n = 10
        params = SimParams(eta=0.3, epsilon=4, n_basis=n)
        ws = sd.RhsWorkspace(n)
        s = random_state(rng, n)
        first = sd.schrodinger_rhs(s, 0.0, params, standard_schedule(), ws)
        again = sd.schrodinger_rhs(s, 0.0, params, standard_schedule(), ws)
        assert np.array_equal(first[0], again[0])

    def test_interaction_roundtrip(self, rng):
        y = random_state(rng, 8).packed()
        assert np.allclose(sd.from_interaction(sd.to_interaction(y, 2.3), 2.3), y)


class TestObservables:
    def test_coherent_moments(self):
        alpha = 1.5 - 0.5j
        s = coherent_spinor(alpha, 48)
        assert sd.expectation_z(s) == pytest.approx(math.sqrt(2) * 1.5)
        assert sd.expectation_pz(s) == pytest.approx(-math.sqrt(2) * 0.5)
        # <z^2> = <z>^2 + 1/2 for a coherent state
        assert sd.expectation_z2(s) == pytest.approx(2 * 1.5 ** 2 + 0.5)

    def test_spin_matrix_and_bloch(self):
        s = coherent_spinor(0.3, 16, theta=1.1, phi=0.4)
        b = sd.bloch_vector(sd.spin_matrix(s))
        expect = [math.sin(1.1) * math.cos(0.4), math.sin(1.1) * math.sin(0.4), math.cos(1.1)]
        assert np.allclose(b, expect)

    def test_energy_matches_dense(self, rng):
        n = 20
        params = SimParams(eta=0.3, epsilon=5, n_basis=n)
        sched = constant_schedule(3.0)
        s = random_state(rng, n)
        h = dense_hamiltonian(params, 3.0, n)
        expect = np.vdot(s.packed(), h @ s.packed()).real
        assert sd.energy(s, params, sched) == pytest.approx(expect)


class TestDynamics:
    def test_free_coherent_rotation(self):
        alpha = 2.0 + 0.5j
        n = 48
        s0 = coherent_spinor(alpha, n)
        params = SimParams(eta=0.0, epsilon=0.0, n_basis=n)
        traj = sd.evolve(s0, 3.0, params, constant_schedule(0.0), cadence=0.5)
        for snap in traj.snapshots:
            t = snap.state.tau
            expect = coherent_amplitudes(alpha * np.exp(-1j * t), n) * np.exp(-0.5j * t)
            assert np.allclose(snap.state.a, expect, atol=1e-9)
            assert snap.z_mean == pytest.approx(
                math.sqrt(2) * (alpha * np.exp(-1j * t)).real, abs=1e-9)

    def test_rabi_closed_form(self):
        eps, detuning = 40.0, 25.0
        params = SimParams(eta=0.0, epsilon=eps, n_basis=4)
        s0 = coherent_spinor(0.0, 4)
        traj = sd.evolve(s0, 1.0, params, constant_schedule(detuning), cadence=0.01)
        omega = math.hypot(eps, detuning)
        for snap in traj.snapshots:
            t = snap.state.tau
            p_down = (eps / omega) ** 2 * math.sin(omega * t / 2) ** 2
            assert np.sum(abs(snap.state.b) ** 2) == pytest.approx(p_down, abs=1e-9)

    def test_spin_only_limit_against_two_level_oracle(self):
        sched = standard_schedule().scaled(0.1)
        params = SimParams(eta=0.0, epsilon=40.0, n_basis=24)
        s0 = coherent_spinor(1.0, 24, theta=0.7, phi=0.2)
        cfg = IntegratorConfig(rtol=1e-12, atol=1e-14)
        traj = sd.evolve(s0, 6.0, params, sched, cfg, cadence=0.25)

        def rhs(t, c):
            h = sched.rate(t) * SZ - 40.0 * SX
            return -1j * h @ c

        chi0 = np.array([math.cos(0.35), np.exp(0.2j) * math.sin(0.35)], dtype=complex)
        taus = [snap.state.tau for snap in traj.snapshots]
        ref = solve_ivp(rhs, (0, 6.0), chi0, method="DOP853", t_eval=taus,
                        rtol=1e-12, atol=1e-14)
        for k, snap in enumerate(traj.snapshots):
            chi = ref.y[:, k]
            expect = np.outer(chi, chi.conj())
            assert np.max(np.abs(sd.spin_matrix(snap.state) - expect)) < 1e-8

    def test_energy_conserved_for_constant_rate(self):
        n = 40
        params = SimParams(eta=0.3, epsilon=20.0, n_basis=n)
        sched = constant_schedule(-15.0)
        s0 = coherent_spinor(-1.5, n, theta=0.4)
        e0 = sd.energy(s0, params, sched)
        traj = sd.evolve(s0, 5.0, params, sched, cadence=0.5)
        for snap in traj.snapshots:
            assert sd.energy(snap.state, params, sched) == pytest.approx(e0, rel=1e-8)

    def test_ehrenfest_free_oscillator(self):
        n = 40
        s0 = coherent_spinor(complex(1.2, -0.4), n)
        params = SimParams(eta=0.0, epsilon=0.0, n_basis=n)
        traj = sd.evolve(s0, 7.0, params, constant_schedule(0.0), cadence=0.7)
        z0, p0 = math.sqrt(2) * 1.2, -math.sqrt(2) * 0.4
        for snap in traj.snapshots:
            t = snap.state.tau
            assert snap.z_mean == pytest.approx(z0 * math.cos(t) + p0 * math.sin(t), abs=1e-9)
            assert snap.pz_mean == pytest.approx(p0 * math.cos(t) - z0 * math.sin(t), abs=1e-9)

    def test_interaction_frame_agrees(self):
        params = SimParams(eta=0.3, epsilon=40, n_basis=48)
        sched = standard_schedule().scaled(0.1)
        s0 = coherent_spinor(-4 / math.sqrt(2), 48)
        lab = sd.evolve(s0, 3.0, params, sched, cadence=1.0).final
        rot = sd.evolve(s0, 3.0, params, sched, IntegratorConfig(interaction=True),
                        cadence=1.0).final
        assert np.max(np.abs(lab.packed() - rot.packed())) < 1e-8

    @pytest.mark.parametrize("method", ["rk45", "rk4"])
    def test_other_methods_agree(self, method):
        params = SimParams(eta=0.3, epsilon=10, n_basis=24)
        sched = constant_schedule(5.0)
        s0 = coherent_spinor(-1.0, 24)
        ref = sd.evolve(s0, 1.0, params, sched, cadence=0.5,
                        cfg=IntegratorConfig(interaction=True)).final
        cfg = IntegratorConfig(method=method, dt=1e-3, rtol=1e-10, atol=1e-12, interaction=True)
        got = sd.evolve(s0, 1.0, params, sched, cfg, cadence=0.5).final
        assert np.max(np.abs(got.packed() - ref.packed())) < 1e-7

    def test_norm_conserved_scaled(self):
        params = SimParams(eta=0.3, epsilon=40, n_basis=64)
        s0 = coherent_spinor(-4 / math.sqrt(2), 64)
        traj = sd.evolve(s0, 15.0, params, standard_schedule().scaled(0.1), cadence=0.5,
                         keep_states=False)
        assert traj.max_norm_drift <= 1e-6
        assert traj.snapshots[0].state.a.size == 64
        assert traj.steps > 0 and traj.column("norm").shape == (31,)

    def test_adiabatic_following(self):
        eps = 40.0
        sched = schedule_from_rows([[0, 200, -400, 4, 0, 0, 0]])
        params = SimParams(eta=0.0, epsilon=eps, n_basis=2)
        theta = field_angle(params, sched, 0.0)
        s0 = coherent_spinor(0.0, 2, theta=theta)
        worst = 0.0
        for s in sd.iter_evolve(s0, 200.0, params, sched, cadence=0.5):
            b = sd.bloch_vector(sd.spin_matrix(s))
            n = field_direction(params, sched, s.tau)
            worst = max(worst, math.acos(min(1.0, float(np.dot(b, n)))))
        assert worst <= 0.05

    def test_step_limit(self):
        params = SimParams(eta=0.3, epsilon=400, n_basis=16)
        cfg = IntegratorConfig(max_steps=10)
        with pytest.raises(StepLimitError):
            sd.evolve(coherent_spinor(0.5, 16), 1.0, params, standard_schedule(), cfg)

    def test_truncation_detected(self):
        a = np.zeros(8, dtype=complex)
        a[-1] = 1.0
        s0 = SpinorState(a, np.zeros(8))
        params = SimParams(eta=0.0, epsilon=0.0, n_basis=8)
        with pytest.raises(TruncationError):
            list(sd.iter_evolve(s0, 0.2, params, constant_schedule(), cadence=0.1,
                                check_truncation=True))

    def test_drift_guard(self, monkeypatch):
        original = Propagator.advance

        def leaky(self, y, t0, t1):
            original(self, y, t0, t1)
            y *= 1.001
            return y

        monkeypatch.setattr(Propagator, "advance", leaky)
        params = SimParams(eta=0.0, epsilon=0.0, n_basis=8)
        with pytest.raises(DriftError):
            list(sd.iter_evolve(coherent_spinor(0.5, 8), 0.2, params, constant_schedule(),
                                cadence=0.1))


def test_truncation_convergence_scaled():
    params = SimParams(eta=0.3, epsilon=40, n_basis=64)
    sched = standard_schedule().scaled(0.1)

    def make(n):
        return coherent_spinor(-4 / math.sqrt(2), n)

    rep = sd.truncation_convergence(make, 30.0, params, sched, [30, 36, 48, 64], cadence=0.5)
    assert rep.monotone
    assert rep.converged
    assert rep.z_deviation[-1] < rep.z_deviation[0]


def test_convergence_report_noise_floor():
    rep = sd.ConvergenceReport([8, 16, 32], [1e-9, 2e-9], [], 1e-3)
    assert rep.monotone and rep.converged
    assert not sd.ConvergenceReport([8, 16, 32], [1e-4, 2e-4], [], 1e-3).monotone
    assert not sd.ConvergenceReport([8, 16], [2e-3], [], 1e-3).converged
