"""Dense operator algebra for small qubit registers.

Everything here works on plain ``numpy`` complex arrays.  The three wrapper
types (:class:`DensityMatrix`, :class:`Observable`, :class:`PureState`) only
exist to validate their invariants once, at construction; inner loops in the
integrator operate on raw arrays.
"""

from __future__ import annotations

from functools import reduce

import numpy as np

MAX_QUBITS = 6

HERMITIAN_TOL_STATE = 1e-10
TRACE_TOL = 1e-10
PSD_TOL = 1e-9
HERMITIAN_TOL_OBS = 1e-12
INVOLUTION_TOL = 1e-10
NORM_TOL = 1e-12

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


class InvariantError(ValueError):
    """A quantum object failed one of its defining invariants."""


def dagger(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


def _as_square(m, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(m, dtype=complex)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InvariantError(f"{name} must be a square 2-D array, got shape {arr.shape}")
    return arr


def _check_same_dim(b: np.ndarray, c: np.ndarray) -> None:
    if b.shape[-2:] != c.shape[-2:]:
        raise ValueError(f"dimension mismatch: {b.shape[-2:]} vs {c.shape[-2:]}")


def hermiticity_defect(m: np.ndarray) -> float:
    return float(np.max(np.abs(m - dagger(m)))) if m.size else 0.0


class DensityMatrix:
    """Hermitian, unit-trace, positive semidefinite ``d x d`` matrix."""

    __slots__ = ("mat",)

    def __init__(self, mat, validate: bool = True):
        arr = _as_square(mat, "density matrix")
        arr.setflags(write=False)
        self.mat = arr
        if validate:
            self.validate()

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    def validate(self) -> None:
        herm = hermiticity_defect(self.mat)
        if herm > HERMITIAN_TOL_STATE:
            raise InvariantError(f"density matrix not Hermitian (defect {herm:.3e})")
        tr = np.trace(self.mat)
        if abs(tr - 1.0) > TRACE_TOL:
            raise InvariantError(f"density matrix trace {tr} differs from 1")
        lam_min = float(np.linalg.eigvalsh(0.5 * (self.mat + dagger(self.mat)))[0])
        if lam_min < -PSD_TOL:
            raise InvariantError(f"density matrix not PSD (min eigenvalue {lam_min:.3e})")

    @classmethod
    def from_pure(cls, psi) -> "DensityMatrix":
        if isinstance(psi, PureState):
            psi = psi.amplitudes
        v = np.asarray(psi, dtype=complex)
        return cls(np.outer(v, v.conj()))

    @classmethod
    def maximally_mixed(cls, dim: int) -> "DensityMatrix":
        return cls(np.eye(dim, dtype=complex) / dim)

    @classmethod
    def from_bloch(cls, x: float, y: float, z: float) -> "DensityMatrix":
        return cls(0.5 * (PAULI["I"] + x * PAULI["X"] + y * PAULI["Y"] + z * PAULI["Z"]))

    def __repr__(self) -> str:
        return f"DensityMatrix(dim={self.dim})"


class Observable:
    """Hermitian involution (``A @ A == I``) with a human-readable label."""

    __slots__ = ("mat", "label")

    def __init__(self, mat, label: str = "", validate: bool = True):
        arr = _as_square(mat, "observable")
        arr.setflags(write=False)
        self.mat = arr
        self.label = label
        if validate:
            self.validate()

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    def validate(self) -> None:
        herm = hermiticity_defect(self.mat)
        if herm > HERMITIAN_TOL_OBS:
            raise InvariantError(f"observable {self.label!r} not Hermitian (defect {herm:.3e})")
        inv = float(np.max(np.abs(self.mat @ self.mat - np.eye(self.dim))))
        if inv > INVOLUTION_TOL:
            raise InvariantError(f"observable {self.label!r} is not an involution (defect {inv:.3e})")

    def __repr__(self) -> str:
        return f"Observable({self.label!r}, dim={self.dim})"


class PureState:
    """Unit-norm state vector."""

    __slots__ = ("amplitudes",)

    def __init__(self, amplitudes, validate: bool = True):
        v = np.asarray(amplitudes, dtype=complex).reshape(-1)
        v.setflags(write=False)
        self.amplitudes = v
        if validate:
            self.validate()

    @property
    def dim(self) -> int:
        return self.amplitudes.shape[0]

    def validate(self) -> None:
        norm2 = float(np.vdot(self.amplitudes, self.amplitudes).real)
        if abs(norm2 - 1.0) > NORM_TOL:
            raise InvariantError(f"state vector norm^2 = {norm2!r}, expected 1")

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator) -> "PureState":
        v = rng.standard_normal(dim) + 1j * rng.standard_normal(dim)
        return cls(v / np.linalg.norm(v))

    def density(self) -> DensityMatrix:
        return DensityMatrix.from_pure(self.amplitudes)


def _raw(x) -> np.ndarray:
    if isinstance(x, (DensityMatrix, Observable)):
        return x.mat
    return np.asarray(x, dtype=complex)


def expectation(A, rho) -> float:
    """Return ``Tr(A rho)`` as a real number."""
    a, r = _raw(A), _raw(rho)
    _check_same_dim(a, r)
    val = np.trace(a @ r)
    if abs(val.imag) > 1e-10:
        raise InvariantError(f"expectation has imaginary part {val.imag:.3e}")
    out = float(val.real)
    if isinstance(A, Observable) and abs(out) > 1.0 + 1e-8:
        raise InvariantError(f"expectation {out} outside [-1, 1] for an involutive observable")
    return out


def commutator(b, c) -> np.ndarray:
    b, c = _raw(b), _raw(c)
    _check_same_dim(b, c)
    return b @ c - c @ b


def anticommutator(b, c) -> np.ndarray:
    b, c = _raw(b), _raw(c)
    _check_same_dim(b, c)
    return b @ c + c @ b


def kron_all(mats) -> np.ndarray:
    return reduce(np.kron, mats)


def pauli_on_qubit(which: str, qubit_index: int, n_qubits: int) -> Observable:
    """Embed a single Pauli on ``qubit_index`` into an ``n_qubits`` register.

    Qubit 0 is the leftmost tensor factor, so ``pauli_on_qubit("Z", 0, 2)`` is
    ``Z (x) I`` with diagonal ``(1, 1, -1, -1)``.
    """
    which = which.upper()
    if which not in ("X", "Y", "Z"):
        raise ValueError(f"unknown Pauli {which!r}")
    if not 1 <= n_qubits <= MAX_QUBITS:
        raise ValueError(f"n_qubits must be in [1, {MAX_QUBITS}], got {n_qubits}")
    if not 0 <= qubit_index < n_qubits:
        raise ValueError(f"qubit index {qubit_index} out of range for {n_qubits} qubits")
    factors = [PAULI["I"]] * n_qubits
    factors[qubit_index] = PAULI[which]
    return Observable(kron_all(factors), label=f"{which}{qubit_index}")


def pauli_string(ops: dict[int, str], n_qubits: int) -> np.ndarray:
    """Tensor product with ``ops[q]`` on qubit ``q`` and identity elsewhere."""
    factors = [PAULI["I"]] * n_qubits
    for q, p in ops.items():
        if not 0 <= q < n_qubits:
            raise ValueError(f"qubit index {q} out of range for {n_qubits} qubits")
        factors[q] = factors[q] @ PAULI[p.upper()]
    return kron_all(factors)


def purity(rho) -> float:
    r = _raw(rho)
    return float(np.real(np.trace(r @ r)))


def project_tangent(delta) -> np.ndarray:
    """Hermitian, traceless part of ``delta``."""
    m = _as_square(delta, "tangent")
    h = 0.5 * (m + dagger(m))
    d = h.shape[0]
    return h - (np.trace(h) / d) * np.eye(d)


def trace_norm(m) -> float:
    return float(np.sum(np.linalg.svd(_raw(m), compute_uv=False)))


def basis_state(bits: str) -> np.ndarray:
    """Computational basis vector for a bitstring, e.g. ``"01"``."""
    idx = int(bits, 2)
    v = np.zeros(2 ** len(bits), dtype=complex)
    v[idx] = 1.0
    return v


def random_density(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    """Random full-rank (by default) density matrix from a Ginibre ensemble."""
    k = dim if rank is None else rank
    g = rng.standard_normal((dim, k)) + 1j * rng.standard_normal((dim, k))
    rho = g @ dagger(g)
    return rho / np.trace(rho).real


def random_hermitian(dim: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
    return 0.5 * (g + dagger(g))


def to_pairs(m: np.ndarray) -> list:
    """Row-major ``[[re, im], ...]`` list used by the JSON outputs."""
    flat = np.asarray(m, dtype=complex).reshape(-1)
    return [[float(z.real), float(z.imag)] for z in flat]


def from_pairs(pairs, dim: int) -> np.ndarray:
    arr = np.asarray(pairs, dtype=float).reshape(dim * dim, 2)
    return (arr[:, 0] + 1j * arr[:, 1]).reshape(dim, dim)
