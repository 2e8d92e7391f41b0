import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import qubit_config
from qarrow.operators import PAULI, DensityMatrix, basis_state, pauli_on_qubit, random_density
from qarrow.rng import derive_seed, stream
from qarrow.trajectory import (
    ChannelConfig,
    IntegrationError,
    NoiseModel,
    TrajectoryConfig,
    _check_batch,
    default_pulse,
    iter_ensemble,
    purity_drift,
    simulate,
    simulate_ensemble,
    step,
    trace_and_hermiticity_defects,
)

X, Y, Z = PAULI["X"], PAULI["Y"], PAULI["Z"]


def em_step(rho, H, A, tau, dt, dW):
    """Plain Euler-Maruyama increment of the Ito SME, one channel, eta = 1."""
    a = np.trace(A @ rho).real
    drift = -1j * (H @ rho - rho @ H) + (A @ rho @ A - rho) / tau
    diff = (A @ rho + rho @ A - 2 * a * rho) / math.sqrt(tau)
    return rho + drift * dt + diff * dW


class TestConfig:
    def test_tau_must_be_positive(self):
        with pytest.raises(ValueError, match="tau"):
            ChannelConfig(pauli_on_qubit("Z", 0, 1), 0.0)

    def test_coarse_dt_warns(self):
        with pytest.warns(UserWarning, match="tau/20"):
            qubit_config(dt=0.1)

    def test_default_dt_is_quiet(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            qubit_config(dt=1e-3)

    @pytest.mark.parametrize("kw,match", [({"efficiency": 0.0}, "eta"), ({"efficiency": 1.5}, "eta"),
                                          ({"delay_steps": -1}, "delay"), ({"dt": -1e-3}, "dt")])
    def test_rejects_bad_values(self, kw, match):
        with pytest.raises(ValueError, match=match):
            qubit_config(**kw)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dim"):
            TrajectoryConfig(np.zeros((4, 4)), [ChannelConfig(pauli_on_qubit("Z", 0, 1), 1.0)],
                             DensityMatrix.maximally_mixed(2), 1e-3, 1.0)

    def test_hash_tracks_content(self):
        a, b = qubit_config(omega=1.0), qubit_config(omega=1.0)
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != qubit_config(omega=1.1).config_hash()

    @pytest.mark.parametrize("noise", [NoiseModel(), NoiseModel("student_t", dof=5), NoiseModel("mixture")])
    def test_noise_is_standardized(self, noise):
        x = noise.draw(stream(11), 400_000)
        assert abs(x.mean()) < 5 / math.sqrt(x.size)
        assert abs(x.var() - 1.0) < 0.02

    def test_noise_parameter_checks(self):
        with pytest.raises(ValueError):
            NoiseModel("student_t", dof=2)
        with pytest.raises(ValueError):
            NoiseModel("mixture", weight=1.0)
        with pytest.raises(ValueError):
            NoiseModel("laplace")


class TestStep:
    def test_eigenstate_is_fixed(self):
        cfg = qubit_config()
        rho = DensityMatrix.from_pure(basis_state("0"))
        for dW in (0.0, 0.3, -2.0):
            new, r, _ = step(rho, cfg, [dW])
            assert np.max(np.abs(new.mat - rho.mat)) <= 1e-15
            assert r[0] == pytest.approx(1.0 + dW / cfg.dt)

    def test_dissipator_annihilates_identity(self):
        cfg = qubit_config()
        new, _, _ = step(DensityMatrix.maximally_mixed(2), cfg, [0.0])
        assert np.max(np.abs(new.mat - np.eye(2) / 2)) <= 1e-15

    def test_small_rotation(self):
        omega, dt = 10.0, 1e-3  # omega dt = 0.01
        cfg = qubit_config(omega=omega, dt=dt)
        new, _, _ = step(DensityMatrix.from_pure(basis_state("0")), cfg, [0.0])
        ez = np.trace(Z @ new.mat).real
        ey = np.trace(Y @ new.mat).real
        assert 0 < 1 - ez <= (omega * dt) ** 2
        assert abs(ey + omega * dt) <= (omega * dt) ** 2

    def test_two_channel_joint_eigenstate(self):
        cfg = TrajectoryConfig(
            np.zeros((4, 4)),
            [ChannelConfig(pauli_on_qubit("Z", 0, 2), 1.0), ChannelConfig(pauli_on_qubit("Z", 1, 2), 0.5)],
            DensityMatrix.from_pure(basis_state("00")), 1e-3, 1.0,
        )
        rho = cfg.initial_state
        new, _, _ = step(rho, cfg, [0.0, 0.0])
        assert np.max(np.abs(new.mat - rho.mat)) <= 1e-15

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_euler_maruyama_to_leading_order(self, seed):
        # With dW^2 = dt the completely positive step and the Ito increment
        # agree up to O(dt^1.5); the defect must shrink ~31.6x per 10x in dt.
        rng = np.random.default_rng(seed)
        rho = DensityMatrix(random_density(2, rng))
        H = 0.5 * 3.0 * X
        defects = []
        for dt in (1e-4, 1e-5):
            cfg = TrajectoryConfig(H, [ChannelConfig(pauli_on_qubit("Z", 0, 1), 1.0)], rho, dt, 1.0)
            dW = math.sqrt(dt)
            new, _, _ = step(rho, cfg, [dW])
            defects.append(np.max(np.abs(new.mat - em_step(rho.mat, H, Z, 1.0, dt, dW))))
        assert defects[1] < defects[0] / 20

    def test_check_batch_reports_location(self):
        bad = np.stack([np.eye(2) / 2, np.diag([1.5, -0.5])]).astype(complex)
        with pytest.raises(IntegrationError) as info:
            _check_batch(bad, step=7, offset=10)
        assert info.value.step == 7 and info.value.trajectory == 11


class TestSimulate:
    def test_single_step_fixed_point(self):
        cfg = qubit_config(dt=1e-3, T=1e-3, seed=5)
        t = simulate(cfg)
        assert t.n_steps == 1
        assert np.array_equal(t.states[0], t.states[1])
        xi = stream(5, 0).standard_normal(1)[0]
        assert t.records[0, 0] == pytest.approx(1.0 + math.sqrt(1.0 / 1e-3) * xi, rel=1e-14)

    def test_seeds_change_records_not_fixed_point(self):
        a = simulate(qubit_config(T=0.01, seed=1))
        b = simulate(qubit_config(T=0.01, seed=2))
        assert np.array_equal(a.states, b.states)
        assert not np.array_equal(a.records, b.records)

    def test_finite_omega_arrow_positive(self):
        cfg = qubit_config(omega=8 * math.pi, dt=1 / 2000, T=1.0)
        lnR = []
        for b in iter_ensemble(cfg, 2000, base_seed=3):
            lnR.append(2.0 * np.sum(b.records * b.expectations, axis=(1, 2)) * cfg.dt)
        lnR = np.concatenate(lnR)
        assert lnR.mean() > 3 * lnR.std() / math.sqrt(lnR.size)

    def test_records_satisfy_record_equation(self):
        t = simulate(qubit_config(omega=2.0, efficiency=0.7, seed=9))
        assert t.record_residual() <= 1e-12

    def test_record_mean_converges(self):
        cfg = qubit_config(T=0.2)
        recs = np.concatenate([b.records.ravel() for b in iter_ensemble(cfg, 400, 21)])
        stderr = math.sqrt(1.0 / (cfg.dt * recs.size))
        assert abs(recs.mean() - 1.0) < 4 * stderr

    @pytest.mark.parametrize("eta", [1.0, 0.5])
    def test_record_variance_follows_efficiency(self, eta):
        cfg = qubit_config(T=0.2, efficiency=eta)
        recs = np.concatenate([b.records.ravel() for b in iter_ensemble(cfg, 200, 4)])
        assert recs.var() * cfg.dt * eta == pytest.approx(1.0, rel=0.02)

    @pytest.mark.parametrize("eta", [1.0, 0.5])
    def test_ensemble_average_dephases(self, eta):
        # The unconditional state obeys the Lindblad equation, so
        # E<sigma_x>(t) = exp(-2 t / tau) whatever the efficiency.
        cfg = TrajectoryConfig(np.zeros((2, 2)), [ChannelConfig(pauli_on_qubit("Z", 0, 1), 1.0)],
                               DensityMatrix.from_pure(np.array([1, 1]) / math.sqrt(2)), 1e-3, 0.5,
                               efficiency=eta)
        finals = np.concatenate([b.final_states for b in iter_ensemble(cfg, 2000, 8)])
        sx = np.einsum("ij,nji->n", X, finals).real
        assert abs(sx.mean() - math.exp(-1.0)) < 4 * sx.std() / math.sqrt(sx.size)


class TestEnsemble:
    def test_singleton_matches_simulate(self):
        cfg = qubit_config(omega=3.0, T=0.1)
        [t] = simulate_ensemble(cfg, 1, base_seed=17)
        ref = simulate(cfg.replace(seed=derive_seed(17, 0)))
        assert np.array_equal(t.records, ref.records)
        assert np.array_equal(t.states, ref.states)

    def test_repeatable(self):
        cfg = qubit_config(omega=3.0, T=0.05)
        a = simulate_ensemble(cfg, 100, 2, store_states=False)
        b = simulate_ensemble(cfg, 100, 2, store_states=False)
        assert all(np.array_equal(x.records, y.records) and np.array_equal(x.final_state, y.final_state)
                   for x, y in zip(a, b))

    def test_worker_count_invisible(self):
        cfg = qubit_config(omega=3.0, T=0.05, feedback_gain=-1.0)
        runs = []
        for w in (1, 8):
            batches = list(iter_ensemble(cfg, 100, 2, workers=w, chunk_size=16))
            runs.append(np.concatenate([b.records for b in batches]))
        assert np.array_equal(runs[0], runs[1])


class TestInvariants:
    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**31), omega=st.floats(0.0, 30.0), X=st.floats(-4, 0), eta=st.floats(0.3, 1.0))
    def test_trace_and_hermiticity(self, seed, omega, X, eta):
        t = simulate(qubit_config(omega=omega, T=0.2, feedback_gain=X, efficiency=eta, seed=seed))
        tr, herm = trace_and_hermiticity_defects(t)
        assert tr <= 1e-9 and herm <= 1e-9

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**31), X=st.floats(-4, 4))
    def test_eigenstate_fixed_for_commuting_h(self, seed, X):
        cfg = TrajectoryConfig(0.7 * Z, [ChannelConfig(pauli_on_qubit("Z", 0, 1), 1.0)],
                               DensityMatrix.from_pure(basis_state("1")), 1e-3, 0.2, feedback_gain=X, seed=seed)
        t = simulate(cfg)
        assert np.max(np.abs(t.states - t.states[0])) <= 1e-12

    def test_feedback_cannot_move_commuting_expectation(self):
        base = TrajectoryConfig(0.7 * Z, [ChannelConfig(pauli_on_qubit("Z", 0, 1), 1.0)],
                                DensityMatrix.from_pure(np.array([1, 1]) / math.sqrt(2)), 1e-3, 0.5, seed=4)
        ref = simulate(base).expectations
        for X in (-3.0, -1.0, 2.0):
            assert np.max(np.abs(simulate(base.replace(feedback_gain=X)).expectations - ref)) <= 1e-12

    @pytest.mark.parametrize("dt", [1e-3, 5e-4, 2.5e-4])
    def test_pure_states_stay_pure(self, dt):
        # The completely positive step keeps eta = 1 trajectories pure to
        # rounding, a stronger statement than first-order convergence in dt.
        t = simulate(qubit_config(omega=8 * math.pi, dt=dt, feedback_gain=-3.0, seed=1))
        assert purity_drift(t) <= 1e-12


class TestPurity:
    def test_fixed_point_trajectory(self):
        assert purity_drift(simulate(qubit_config(T=0.2))) <= 1e-12

    def test_generic_hamiltonian_budget(self):
        t = simulate(qubit_config(omega=8 * math.pi, dt=1 / 2000, seed=3))
        assert purity_drift(t) <= 1e-3

    def test_inefficient_detection_leaves_pure_manifold(self):
        short = purity_drift(simulate(qubit_config(omega=3.0, T=0.1, efficiency=0.5, seed=2)))
        long = purity_drift(simulate(qubit_config(omega=3.0, T=1.0, efficiency=0.5, seed=2)))
        assert 0 < short < long

    def test_needs_states(self):
        with pytest.raises(ValueError):
            purity_drift(simulate(qubit_config(T=0.01), store_states=False))


class TestFeedback:
    def test_delay_uses_old_record(self):
        cfg = qubit_config(feedback_gain=-2.0, delay_steps=3, tau=0.5)
        pulse = default_pulse(cfg)
        rec = np.arange(10.0).reshape(1, 1, 10)
        assert np.array_equal(pulse(2, rec), [[0.0]])
        assert np.array_equal(pulse(7, rec), [[4.0 / 0.5]])

    def test_eta_corrected_pulse(self):
        cfg = qubit_config(feedback_gain=-2.0, efficiency=0.8, eta_corrected_feedback=True)
        rec = np.full((1, 1, 3), 5.0)
        assert default_pulse(cfg)(1, rec)[0, 0] == pytest.approx(0.8 * 5.0)

    def test_no_pulse_without_gain(self):
        assert default_pulse(qubit_config()) is None

    def test_delay_changes_dynamics(self):
        a = simulate(qubit_config(omega=5.0, feedback_gain=-2.0, seed=3))
        b = simulate(qubit_config(omega=5.0, feedback_gain=-2.0, delay_steps=20, seed=3))
        assert np.max(np.abs(a.expectations - b.expectations)) > 1e-3


class TestExport:
    def test_export_layout(self, tmp_path):
        cfg = qubit_config(omega=1.0, T=0.01, seed=2)
        t = simulate(cfg)
        paths = t.export(tmp_path, cfg, prefix="run")
        assert [p.name for p in paths] == ["run_ch0.csv", "run.json"]
        lines = paths[0].read_text().splitlines()
        assert lines[0] == "step,t,r,dW,expectation"
        assert len(lines) == 1 + t.n_steps
        meta = json.loads(paths[1].read_text())
        assert meta["config_hash"] == cfg.config_hash() and meta["seed"] == 2
