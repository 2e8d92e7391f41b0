import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qarrow.operators import (
    PAULI,
    DensityMatrix,
    InvariantError,
    PureState,
    basis_state,
    pauli_on_qubit,
    project_tangent,
    random_density,
    random_hermitian,
)
from qarrow.score_analysis import (
    ScoreOperator,
    TangentVector,
    analytic_score,
    certification_report,
    cross_integrand,
    flow_consistency_check,
    flow_vectors,
    frechet_check,
    frechet_sweep,
    horizontal_sample,
    innovation_derivative,
    kahler_identity_check,
    random_tangent,
    riemannian_flow,
    symplectic_flow,
)
from qarrow.trajectory import ChannelConfig

X, Y, Z, I2 = PAULI["X"], PAULI["Y"], PAULI["Z"], PAULI["I"]
seeds = st.integers(0, 2**31)
PLUS = np.array([1, 1], dtype=complex) / math.sqrt(2)


def z_channel(tau=1.0, q=0, n=1):
    return ChannelConfig(pauli_on_qubit("Z", q, n), tau)


class TestScore:
    def test_single_channel(self):
        assert np.array_equal(analytic_score([1.0], [z_channel()]).mat, Z)

    def test_zero_record(self):
        assert np.array_equal(analytic_score([0.0], [z_channel()]).mat, np.zeros((2, 2)))

    def test_two_channel_sum(self):
        s = analytic_score([1.0, -2.0], [z_channel(1.0, 0, 2), z_channel(2.0, 1, 2)])
        assert np.allclose(s.mat, np.kron(Z, I2) - np.kron(I2, Z), atol=0)
        assert len(s.channel_breakdown) == 2

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            analytic_score([1.0, 2.0], [z_channel()])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            analytic_score([1.0, 1.0], [z_channel(), z_channel(1.0, 0, 2)])

    def test_breakdown_must_sum(self):
        with pytest.raises(InvariantError):
            ScoreOperator(Z, (X,))

    def test_innovation(self):
        assert innovation_derivative(3.0, 1.0, 0.5) == 4.0

    def test_tangent_invariants(self):
        with pytest.raises(InvariantError):
            TangentVector(I2)
        assert np.array_equal(TangentVector.project(X + 2 * I2).mat, X)


class TestFrechet:
    def test_orthogonal_pauli(self):
        rho = DensityMatrix.maximally_mixed(2)
        delta = TangentVector(project_tangent(X))
        assert np.all(frechet_check(rho, delta, [1.0], [z_channel()]) <= 1e-12)
        assert np.trace(analytic_score([1.0], [z_channel()]).mat @ delta.mat).real == 0.0

    def test_parallel_pauli(self):
        rho = DensityMatrix.maximally_mixed(2)
        delta = TangentVector(0.1 * project_tangent(Z))
        lin = np.trace(analytic_score([1.0], [z_channel()]).mat @ delta.mat).real
        # independent dense evaluation of Tr(sigma_z * 0.1 sigma_z)
        assert lin == pytest.approx(0.2, abs=1e-15)
        assert np.all(frechet_check(rho, delta, [1.0], [z_channel()], epsilons=(1.0, 0.1, 1e-3)) <= 1e-12)

    def test_cross_integrand_matches_trace(self, rng):
        rho = random_density(4, rng)
        chans = [z_channel(0.7, 0, 2), ChannelConfig(pauli_on_qubit("X", 1, 2), 1.3)]
        brute = sum(rj / ch.tau * np.trace(ch.observable.mat @ rho).real for rj, ch in zip([0.4, -2.0], chans))
        assert cross_integrand(rho, [0.4, -2.0], chans) == pytest.approx(brute, abs=1e-14)

    def test_psd_violation_rejected(self):
        rho = DensityMatrix.from_pure(basis_state("0"))
        with pytest.raises(InvariantError, match="PSD"):
            frechet_check(rho, TangentVector(Z), [1.0], [z_channel()])

    @pytest.mark.parametrize("n_qubits", [1, 2, 3])
    def test_random_sweep(self, n_qubits):
        assert frechet_sweep(n_qubits, 200, np.random.default_rng(n_qubits)) <= 1e-10

    @pytest.mark.parametrize("n_qubits", [2, 3])
    def test_sum_of_local_z_scores(self, n_qubits, rng):
        chans = [z_channel(0.5 + q, q, n_qubits) for q in range(n_qubits)]
        for _ in range(50):
            rho = random_density(2**n_qubits, rng)
            lam = np.linalg.eigvalsh(rho)[0]
            delta = random_tangent(2**n_qubits, rng, scale=0.9 * lam / 0.1)
            r = rng.standard_normal(n_qubits) * 3
            assert np.max(frechet_check(DensityMatrix(rho), delta, r, chans)) <= 1e-10


class TestFlows:
    def test_symplectic_fixed_point(self):
        out = symplectic_flow(DensityMatrix.from_pure(basis_state("0")), ScoreOperator.from_matrix(Z))
        assert np.array_equal(out, np.zeros((2, 2)))

    def test_symplectic_plus_state(self):
        # worked by hand: -i[sigma_z, |+><+|] = sigma_y
        out = symplectic_flow(DensityMatrix.from_pure(PLUS), ScoreOperator.from_matrix(Z))
        assert np.allclose(out, Y, atol=1e-15)

    def test_riemannian_fixed_point(self):
        out = riemannian_flow(DensityMatrix.from_pure(basis_state("0")), ScoreOperator.from_matrix(Z))
        assert np.array_equal(out, np.zeros((2, 2)))

    def test_riemannian_plus_state(self):
        # {sigma_z, |+><+|} = sigma_z and <sigma_z> = 0
        out = riemannian_flow(DensityMatrix.from_pure(PLUS), ScoreOperator.from_matrix(Z))
        assert np.allclose(out, Z, atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(seed=seeds, d=st.sampled_from([2, 3, 4, 8]))
    def test_flows_traceless_hermitian(self, seed, d):
        rng = np.random.default_rng(seed)
        rho = DensityMatrix(random_density(d, rng))
        S = ScoreOperator.from_matrix(random_hermitian(d, rng))
        for out in (symplectic_flow(rho, S), riemannian_flow(rho, S)):
            assert abs(np.trace(out)) <= 1e-12
            assert np.max(np.abs(out - out.conj().T)) <= 1e-12

    @settings(max_examples=30, deadline=None)
    @given(seed=seeds)
    def test_symplectic_preserves_spectrum_to_first_order(self, seed):
        rng = np.random.default_rng(seed)
        rho = random_density(3, rng)
        S = ScoreOperator.from_matrix(random_hermitian(3, rng))
        lam0 = np.linalg.eigvalsh(rho)
        errs = [np.max(np.abs(np.linalg.eigvalsh(rho + dt * symplectic_flow(rho, S)) - lam0)) for dt in (1e-2, 1e-3)]
        assert errs[1] <= errs[0] / 50 + 1e-14

    def test_riemannian_vanishes_at_eigenstates(self):
        A = pauli_on_qubit("Z", 1, 2)
        for bits in ("00", "01", "10", "11"):
            rho = DensityMatrix.from_pure(basis_state(bits))
            out = riemannian_flow(rho, analytic_score([2.5], [ChannelConfig(A, 0.5)]))
            assert np.max(np.abs(out)) == 0.0

    def test_flow_consistency_eigenstate(self):
        assert flow_consistency_check(PureState(basis_state("0")), ScoreOperator.from_matrix(Z), 1e-4) == (0.0, 0.0)

    def test_flow_consistency_order(self):
        psi, S = PureState(PLUS), ScoreOperator.from_matrix(Z)
        coarse = flow_consistency_check(psi, S, 1e-4)
        fine = flow_consistency_check(psi, S, 1e-5)
        for c, f in zip(coarse, fine):
            assert c / f == pytest.approx(10.0, abs=2.0)

    @settings(max_examples=50, deadline=None)
    @given(seed=seeds, d=st.sampled_from([2, 3, 4]))
    def test_flow_vectors_horizontal(self, seed, d):
        rng = np.random.default_rng(seed)
        psi = PureState.random(d, rng)
        for v in flow_vectors(psi, ScoreOperator.from_matrix(random_hermitian(d, rng))):
            assert abs(np.vdot(psi.amplitudes, v)) <= 1e-12


class TestKahler:
    def test_basis_state(self, rng):
        assert kahler_identity_check(PureState(basis_state("0")), 200, rng) <= 1e-12

    def test_random_d4(self, rng):
        assert kahler_identity_check(PureState.random(4, rng), 1000, rng) <= 1e-12

    def test_samples_are_horizontal(self, rng):
        psi = PureState.random(3, rng)
        for _ in range(200):
            assert abs(np.vdot(psi.amplitudes, horizontal_sample(psi, rng))) <= 1e-12


def test_certification_report_structure():
    rep = certification_report(n_samples=50, seed=3)
    names = [c["check"] for c in rep["checks"]]
    assert names == ["frechet_d2", "frechet_d4", "frechet_d8", "kahler_d2", "kahler_d3", "kahler_d4", "flow_descent"]
    assert rep["passed"]
