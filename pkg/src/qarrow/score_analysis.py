"""Numerical certificates that ``sum_j (r_j / tau_j) A_j`` is the path-measure score.

The checks are all exact-arithmetic identities or first-order expansions,
so their defects are either at rounding level or shrink linearly in a step
size.  :func:`certification_report` bundles them into a JSON-ready dict.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .operators import (
    DensityMatrix,
    InvariantError,
    Observable,
    PureState,
    commutator,
    dagger,
    hermiticity_defect,
    pauli_on_qubit,
    project_tangent,
    random_density,
    random_hermitian,
    trace_norm,
)
from .trajectory import ChannelConfig

FRECHET_TOL = 1e-10
KAHLER_TOL = 1e-12
TANGENT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ScoreOperator:
    mat: np.ndarray
    channel_breakdown: tuple

    def __post_init__(self):
        total = sum(self.channel_breakdown) if self.channel_breakdown else np.zeros_like(self.mat)
        if np.max(np.abs(total - self.mat), initial=0.0) > 1e-12:
            raise InvariantError("score matrix differs from the sum of its channel terms")
        if hermiticity_defect(self.mat) > 1e-12:
            raise InvariantError("score operator is not Hermitian")

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    @classmethod
    def from_matrix(cls, mat) -> "ScoreOperator":
        m = np.asarray(mat, dtype=complex)
        return cls(m, (m,))


@dataclass(frozen=True, eq=False)
class TangentVector:
    mat: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mat, dtype=complex)
        object.__setattr__(self, "mat", m)
        if hermiticity_defect(m) > TANGENT_TOL or abs(np.trace(m)) > TANGENT_TOL:
            raise InvariantError("tangent vector must be Hermitian and traceless")

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    @classmethod
    def project(cls, delta) -> "TangentVector":
        return cls(project_tangent(delta))


def analytic_score(r: Sequence[float], channels: Sequence[ChannelConfig]) -> ScoreOperator:
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if len(r) != len(channels):
        raise ValueError(f"{len(r)} record values for {len(channels)} channels")
    dims = {ch.observable.dim for ch in channels}
    if len(dims) != 1:
        raise ValueError(f"channel observables have mismatched dimensions {sorted(dims)}")
    terms = tuple((rj / ch.tau) * ch.observable.mat for rj, ch in zip(r, channels))
    return ScoreOperator(sum(terms), terms)


def innovation_derivative(r: float, expectation: float, tau: float) -> float:
    """Full derivative of log P_F w.r.t. <A>: stochastic part r/tau plus drift -<A>/tau."""
    return (r - expectation) / tau


def cross_integrand(rho: np.ndarray, r: Sequence[float], channels: Sequence[ChannelConfig]) -> float:
    """``G(rho) = sum_j (r_j/tau_j) Tr(A_j rho)``, evaluated entry by entry."""
    total = 0.0
    for rj, ch in zip(np.atleast_1d(r), channels):
        A = ch.observable.mat
        # Tr(A rho) = sum_ik A_ik rho_ki
        total += (rj / ch.tau) * float(np.sum(A * rho.T).real)
    return total


def frechet_check(
    rho: DensityMatrix,
    delta: TangentVector,
    r: Sequence[float],
    channels: Sequence[ChannelConfig],
    epsilons: Sequence[float] = (1e-1, 1e-2, 1e-3, 1e-4),
) -> np.ndarray:
    """Finite-difference defects of ``G`` against ``Tr(score . delta)``.

    ``G`` is linear in ``rho``, so every defect is at rounding level no matter
    how large ``epsilon`` is.  Also enforces the Holder bound
    ``|G(rho + d) - G(rho)| <= (sum_j |r_j| / tau_j) ||d||_1``.
    """
    if rho.dim != delta.dim:
        raise ValueError("rho and delta dimensions differ")
    score = analytic_score(r, channels)
    lin = float(np.trace(score.mat @ delta.mat).real)
    g0 = cross_integrand(rho.mat, r, channels)
    bound_coef = sum(abs(rj) / ch.tau for rj, ch in zip(np.atleast_1d(r), channels))
    defects = []
    for eps in epsilons:
        moved = rho.mat + eps * delta.mat
        lam = np.linalg.eigvalsh(moved)[0]
        if lam < -1e-12:
            raise InvariantError(f"rho + {eps:g} * delta is not PSD (min eigenvalue {lam:.3e})")
        g1 = cross_integrand(moved, r, channels)
        defects.append(abs(g1 - g0 - eps * lin) / eps)
        if abs(g1 - g0) > bound_coef * trace_norm(eps * delta.mat) * (1 + 1e-12) + 1e-15:
            raise AssertionError(f"Holder bound violated at eps={eps:g}")
    return np.array(defects)


def symplectic_flow(rho, score: ScoreOperator) -> np.ndarray:
    r = rho.mat if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
    return -1j * commutator(score.mat, r)


def riemannian_flow(rho, score: ScoreOperator) -> np.ndarray:
    r = rho.mat if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
    S = score.mat
    if S.shape != r.shape:
        raise ValueError("dimension mismatch")
    s = np.trace(S @ r).real
    return S @ r + r @ S - 2.0 * s * r


def horizontal_sample(psi: PureState, rng: np.random.Generator) -> np.ndarray:
    """Complex-normal vector projected orthogonally to ``psi``."""
    v = rng.standard_normal(psi.dim) + 1j * rng.standard_normal(psi.dim)
    p = psi.amplitudes
    return v - p * np.vdot(p, v)


def fubini_study_metric(phi1: np.ndarray, phi2: np.ndarray) -> float:
    return 2.0 * float(np.vdot(phi1, phi2).real)


def fubini_study_form(phi1: np.ndarray, phi2: np.ndarray) -> float:
    return 2.0 * float(np.vdot(phi1, phi2).imag)


def kahler_identity_check(psi: PureState, n_samples: int, rng: np.random.Generator) -> float:
    """Max ``|omega(phi1, J phi2) - g(phi1, phi2)|`` over sampled horizontal pairs."""
    worst = 0.0
    for _ in range(n_samples):
        phi1 = horizontal_sample(psi, rng)
        phi2 = horizontal_sample(psi, rng)
        worst = max(worst, abs(fubini_study_form(phi1, 1j * phi2) - fubini_study_metric(phi1, phi2)))
    return worst


def flow_vectors(psi: PureState, score: ScoreOperator) -> tuple[np.ndarray, np.ndarray]:
    """Hamiltonian vector ``-i (S - <S>) psi`` and gradient ``(S - <S>) psi``."""
    p = psi.amplitudes
    Sp = score.mat @ p
    centered = Sp - np.vdot(p, Sp).real * p
    return -1j * centered, centered


def _projector(v: np.ndarray) -> np.ndarray:
    v = v / np.linalg.norm(v)
    return np.outer(v, v.conj())


def flow_consistency_check(psi: PureState, score: ScoreOperator, dt: float) -> tuple[float, float]:
    """First-order agreement of state-vector flows with the density-matrix flows.

    Moves ``psi`` by ``dt`` along each vector, re-normalizes, and compares
    the resulting projector with ``rho + dt * flow(rho)``.  Both defects are
    ``O(dt)``.
    """
    rho = np.outer(psi.amplitudes, psi.amplitudes.conj())
    ham, grad = flow_vectors(psi, score)
    p = psi.amplitudes
    sym = np.max(np.abs(_projector(p + dt * ham) - (rho + dt * symplectic_flow(rho, score)))) / dt
    rie = np.max(np.abs(_projector(p + dt * grad) - (rho + dt * riemannian_flow(rho, score)))) / dt
    return float(sym), float(rie)


def random_tangent(dim: int, rng: np.random.Generator, scale: float = 1.0) -> TangentVector:
    t = project_tangent(random_hermitian(dim, rng))
    return TangentVector(scale * t / np.linalg.norm(t, 2))


def _random_channels(n_qubits: int, rng: np.random.Generator, n_channels: int) -> list[ChannelConfig]:
    qubits = rng.choice(n_qubits, size=n_channels, replace=False)
    return [
        ChannelConfig(pauli_on_qubit(str(rng.choice(["X", "Y", "Z"])), int(q), n_qubits), float(rng.uniform(0.2, 3.0)))
        for q in qubits
    ]


def frechet_sweep(n_qubits: int, n_cases: int, rng: np.random.Generator) -> float:
    """Max Frechet defect over random states, tangents, records and channel sets."""
    dim = 2**n_qubits
    worst = 0.0
    eps = (1e-1, 1e-2, 1e-3, 1e-4)
    for _ in range(n_cases):
        rho = random_density(dim, rng)
        lam_min = np.linalg.eigvalsh(rho)[0]
        delta = random_tangent(dim, rng, scale=0.9 * lam_min / max(eps))
        chans = _random_channels(n_qubits, rng, int(rng.integers(1, n_qubits + 1)))
        r = rng.standard_normal(len(chans)) * 3.0
        worst = max(worst, float(np.max(frechet_check(DensityMatrix(rho), delta, r, chans, eps))))
    return worst


def certification_report(n_samples: int = 1000, seed: int = 0, dims: Sequence[int] = (2, 3, 4)) -> dict:
    """Run the Frechet, Kahler and flow certificates; JSON-ready summary."""
    from .rng import stream

    checks = []
    rng = stream(seed, 1)
    for nq in (1, 2, 3):
        worst = frechet_sweep(nq, n_samples, rng)
        checks.append({"check": f"frechet_d{2**nq}", "samples": n_samples, "max_defect": worst,
                       "tolerance": FRECHET_TOL, "passed": worst <= FRECHET_TOL})
    rng = stream(seed, 2)
    for d in dims:
        psi = PureState.random(d, rng)
        worst = kahler_identity_check(psi, n_samples, rng)
        checks.append({"check": f"kahler_d{d}", "samples": n_samples, "max_defect": worst,
                       "tolerance": KAHLER_TOL, "passed": worst <= KAHLER_TOL})
    checks.append(flow_descent_check(min(n_samples, 100), stream(seed, 3)))
    return {"checks": checks, "passed": all(c["passed"] for c in checks)}


def flow_descent_check(n_states: int, rng: np.random.Generator, dims: Sequence[int] = (2, 4),
                       dt_coarse: float = 1e-4, dt_fine: float = 1e-5) -> dict:
    """Ratio of flow defects when dt shrinks 10x; both ratios should be ~10."""
    ratios = []
    for i in range(n_states):
        d = dims[i % len(dims)]
        psi = PureState.random(d, rng)
        score = ScoreOperator.from_matrix(random_hermitian(d, rng))
        coarse = flow_consistency_check(psi, score, dt_coarse)
        fine = flow_consistency_check(psi, score, dt_fine)
        ratios.extend([coarse[0] / fine[0], coarse[1] / fine[1]])
    ratios = np.array(ratios)
    worst = float(np.max(np.abs(ratios - dt_coarse / dt_fine)))
    return {"check": "flow_descent", "samples": n_states, "min_ratio": float(ratios.min()),
            "max_ratio": float(ratios.max()), "max_defect": worst, "tolerance": 2.0, "passed": worst <= 2.0}
