"""Quantum trajectory integration for continuously monitored observables.

The conditional state obeys the Ito stochastic master equation

    d rho = -i[H_tot, rho] dt + sum_j (1/tau_j)(A_j rho A_j - rho) dt
            + sum_j sqrt(eta/tau_j) (A_j rho + rho A_j - 2<A_j> rho) dW_j

with records ``r_j dt = <A_j> dt + sqrt(tau_j/eta) dW_j`` and the feedback
Hamiltonian ``H_tot = H + X sum_j (r_j / tau_j) A_j``.

Each step is written in completely positive form.  Because ``A_j^2 = I`` the
measurement increment is exactly the congruence ``rho -> M rho M / Tr`` with
``M = I + sqrt(eta/tau) dY A`` and ``dY = dW + 2 sqrt(eta/tau) <A> dt``; its
expansion reproduces the Ito increment above to ``O(dt)``.  Unmonitored
dephasing (``eta < 1``) is applied as the exact dephasing channel and the
Hamiltonian part as a unitary (Strang-split around the feedback pulse,
which is itself ``cos(theta) I - i sin(theta) A``).  The state therefore
never leaves the set of density matrices and, at ``eta = 1``, stays pure to
rounding error.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .operators import (
    DensityMatrix,
    InvariantError,
    Observable,
    dagger,
    hermiticity_defect,
    to_pairs,
)
from .rng import derive_seed, stream

DT_WARN_RATIO = 20.0
REPAIR_TOL = 1e-6
CHUNK_SIZE = 2048


class IntegrationError(RuntimeError):
    """The integrated state left the density-matrix set beyond repair tolerance."""

    def __init__(self, message: str, step: int | None = None, trajectory: int | None = None):
        super().__init__(message)
        self.step = step
        self.trajectory = trajectory


class Diagnostic(NamedTuple):
    level: str  # "error" or "warning"
    key: str
    message: str

    def __str__(self) -> str:
        return f"{self.level}: {self.key}: {self.message}"


@dataclass(frozen=True, eq=False)
class ChannelConfig:
    observable: Observable
    tau: float

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"channel {self.observable.label!r}: tau must be > 0, got {self.tau}")


@dataclass(frozen=True)
class NoiseModel:
    """Standardized (zero mean, unit variance) measurement noise family.

    ``kind`` is one of ``"gaussian"``, ``"student_t"`` (uses ``dof``) or
    ``"mixture"`` (two zero-mean Gaussians; the wide component has
    probability ``weight`` and ``sigma_ratio`` times the narrow width).
    """

    kind: str = "gaussian"
    dof: float = 5.0
    weight: float = 0.1
    sigma_ratio: float = 3.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "student_t", "mixture"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "student_t" and not self.dof > 2:
            raise ValueError(f"student_t noise needs dof > 2, got {self.dof}")
        if self.kind == "mixture":
            if not 0 < self.weight < 1:
                raise ValueError(f"mixture weight must lie in (0, 1), got {self.weight}")
            if not self.sigma_ratio > 1:
                raise ValueError(f"mixture sigma_ratio must be > 1, got {self.sigma_ratio}")

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.standard_normal(size)
        if self.kind == "student_t":
            return rng.standard_t(self.dof, size) * math.sqrt((self.dof - 2.0) / self.dof)
        wide = rng.random(size) < self.weight
        base = 1.0 / math.sqrt(1.0 - self.weight + self.weight * self.sigma_ratio**2)
        return rng.standard_normal(size) * np.where(wide, base * self.sigma_ratio, base)


@dataclass(frozen=True, eq=False)
class TrajectoryConfig:
    hamiltonian: np.ndarray
    channels: tuple
    initial_state: DensityMatrix
    dt: float
    total_time: float
    feedback_gain: float = 0.0
    efficiency: float = 1.0
    delay_steps: int = 0
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0
    eta_corrected_feedback: bool = False
    check_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "hamiltonian", np.asarray(self.hamiltonian, dtype=complex))
        object.__setattr__(self, "channels", tuple(self.channels))
        problems = self.diagnostics()
        errors = [p for p in problems if p.level == "error"]
        if errors:
            raise ValueError("; ".join(str(e) for e in errors))
        for p in problems:
            warnings.warn(str(p), stacklevel=3)

    def diagnostics(self) -> list[Diagnostic]:
        out: list[Diagnostic] = []
        d = self.initial_state.dim
        H = self.hamiltonian
        if H.shape != (d, d):
            out.append(Diagnostic("error", "hamiltonian", f"shape {H.shape} does not match state dim {d}"))
        elif hermiticity_defect(H) > 1e-10:
            out.append(Diagnostic("error", "hamiltonian", "not Hermitian to 1e-10"))
        if not self.channels:
            out.append(Diagnostic("error", "channels", "at least one measurement channel is required"))
        for j, ch in enumerate(self.channels):
            if ch.observable.dim != d:
                out.append(Diagnostic("error", f"channels[{j}]", f"observable dim {ch.observable.dim} != {d}"))
        if not self.dt > 0:
            out.append(Diagnostic("error", "dt", f"dt must be > 0, got {self.dt}"))
        if not self.total_time > 0:
            out.append(Diagnostic("error", "total_time", f"T must be > 0, got {self.total_time}"))
        elif self.dt > self.total_time:
            out.append(Diagnostic("error", "dt", f"dt={self.dt} exceeds T={self.total_time}"))
        if not 0 < self.efficiency <= 1:
            out.append(Diagnostic("error", "efficiency", f"eta must lie in (0, 1], got {self.efficiency}"))
        if self.delay_steps < 0:
            out.append(Diagnostic("error", "delay_steps", "must be >= 0"))
        if self.channels and self.dt > 0:
            tmin = min(ch.tau for ch in self.channels)
            if self.dt > tmin / DT_WARN_RATIO:
                out.append(
                    Diagnostic(
                        "warning",
                        "dt",
                        f"dt={self.dt:g} is coarser than tau/{DT_WARN_RATIO:g} (tau_min={tmin:g}); "
                        "purity/positivity errors will be large",
                    )
                )
        return out

    @property
    def dim(self) -> int:
        return self.initial_state.dim

    @property
    def n_steps(self) -> int:
        return int(round(self.total_time / self.dt))

    @property
    def taus(self) -> np.ndarray:
        return np.array([ch.tau for ch in self.channels], dtype=float)

    def replace(self, **changes) -> "TrajectoryConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "hamiltonian": to_pairs(self.hamiltonian),
            "channels": [
                {"label": ch.observable.label, "observable": to_pairs(ch.observable.mat), "tau": ch.tau}
                for ch in self.channels
            ],
            "initial_state": to_pairs(self.initial_state.mat),
            "dim": self.dim,
            "dt": self.dt,
            "total_time": self.total_time,
            "feedback_gain": self.feedback_gain,
            "efficiency": self.efficiency,
            "delay_steps": self.delay_steps,
            "noise": {
                "kind": self.noise.kind,
                "dof": self.noise.dof,
                "weight": self.noise.weight,
                "sigma_ratio": self.noise.sigma_ratio,
            },
            "seed": int(self.seed),
            "eta_corrected_feedback": self.eta_corrected_feedback,
        }

    def config_hash(self) -> int:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return int(hashlib.sha256(blob).hexdigest()[:16], 16)


@dataclass(eq=False)
class Trajectory:
    """One integrated run.  Per-channel arrays have shape ``(C, M)``.

    ``states`` has shape ``(M + 1, d, d)``; it is ``None`` when the run was
    made without storing the state path (``final_state`` is always kept).
    """

    times: np.ndarray
    states: Optional[np.ndarray]
    final_state: np.ndarray
    records: np.ndarray
    wiener: np.ndarray
    expectations: np.ndarray
    taus: np.ndarray
    dt: float
    efficiency: float
    config_hash: int
    seed: int

    @property
    def n_steps(self) -> int:
        return self.records.shape[1]

    @property
    def n_channels(self) -> int:
        return self.records.shape[0]

    def state(self, k: int) -> DensityMatrix:
        if self.states is None:
            raise ValueError("trajectory was integrated without storing states")
        return DensityMatrix(self.states[k])

    def record_residual(self) -> float:
        """Max violation of ``r dt = <A> dt + sqrt(tau/eta) dW`` over all steps."""
        scale = np.sqrt(self.taus / self.efficiency)[:, None]
        lhs = self.records * self.dt
        rhs = self.expectations * self.dt + scale * self.wiener
        return float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0

    def with_records(self, records: np.ndarray) -> "Trajectory":
        return replace(self, records=np.asarray(records, dtype=float))

    def export(self, directory, cfg: TrajectoryConfig | None = None, prefix: str = "trajectory") -> list[Path]:
        """Write one CSV per channel plus a JSON sidecar; returns the paths."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for j in range(self.n_channels):
            p = directory / f"{prefix}_ch{j}.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["step", "t", "r", "dW", "expectation"])
                for k in range(self.n_steps):
                    w.writerow(
                        [k, repr(float(self.times[k])), repr(float(self.records[j, k])),
                         repr(float(self.wiener[j, k])), repr(float(self.expectations[j, k]))]
                    )
            paths.append(p)
        side = directory / f"{prefix}.json"
        meta = {"config_hash": self.config_hash, "seed": self.seed, "n_steps": self.n_steps,
                "dt": self.dt, "taus": self.taus.tolist(), "efficiency": self.efficiency}
        if cfg is not None:
            meta["config"] = cfg.to_dict()
        side.write_text(json.dumps(meta, indent=2, sort_keys=True))
        paths.append(side)
        return paths


def negate_records(traj: Trajectory) -> Trajectory:
    return traj.with_records(-traj.records)


@dataclass(eq=False)
class TrajectoryBatch:
    """Stacked trajectories; arrays carry a leading trajectory axis."""

    records: np.ndarray  # (n, C, M)
    wiener: np.ndarray
    expectations: np.ndarray
    states: Optional[np.ndarray]  # (n, M+1, d, d) or None
    final_states: np.ndarray  # (n, d, d)
    seeds: np.ndarray
    taus: np.ndarray
    dt: float
    efficiency: float
    config_hash: int

    def __len__(self) -> int:
        return self.records.shape[0]

    def trajectory(self, i: int) -> Trajectory:
        m = self.records.shape[2]
        return Trajectory(
            times=np.arange(m + 1) * self.dt,
            states=None if self.states is None else self.states[i],
            final_state=self.final_states[i],
            records=self.records[i],
            wiener=self.wiener[i],
            expectations=self.expectations[i],
            taus=self.taus,
            dt=self.dt,
            efficiency=self.efficiency,
            config_hash=self.config_hash,
            seed=int(self.seeds[i]),
        )

    def trajectories(self) -> list[Trajectory]:
        return [self.trajectory(i) for i in range(len(self))]


# A pulse function receives the step index ``k`` and the record buffer with
# shape (n, C, M) filled up to and including column ``k``; it returns the
# per-channel pulse amplitude (n, C) that multiplies ``X * A_j`` in H_tot.
PulseFn = Callable[[int, np.ndarray], np.ndarray]


class _Kernel:
    """Precomputed operators for stepping a stack of states."""

    def __init__(self, cfg: TrajectoryConfig):
        self.cfg = cfg
        self.dt = cfg.dt
        self.eta = cfg.efficiency
        self.A = np.stack([ch.observable.mat for ch in cfg.channels])
        self.tau = cfg.taus
        self.d = cfg.dim
        w, V = np.linalg.eigh(cfg.hamiltonian)
        self.u_half = (V * np.exp(-0.5j * w * cfg.dt)) @ dagger(V)
        self.u_full = (V * np.exp(-1j * w * cfg.dt)) @ dagger(V)
        gamma = (1.0 - self.eta) / self.tau
        self.p_dephase = 0.5 * (1.0 - np.exp(-2.0 * gamma * cfg.dt))
        self.record_scale = np.sqrt(self.tau / self.eta)
        self.eye = np.eye(self.d, dtype=complex)

    def expectations(self, rho: np.ndarray) -> np.ndarray:
        return np.einsum("cij,nji->nc", self.A, rho).real

    def advance(self, rho: np.ndarray, a: np.ndarray, dW: np.ndarray, pulse: Optional[np.ndarray]) -> np.ndarray:
        dt, eta = self.dt, self.eta
        for j in range(self.A.shape[0]):
            A = self.A[j]
            s = math.sqrt(eta / self.tau[j])
            k = (s * (dW[:, j] + 2.0 * s * a[:, j] * dt))[:, None, None]
            Ar = A @ rho
            rA = rho @ A
            rho = rho + k * (Ar + rA) + (k * k) * (Ar @ A)
            rho = rho / np.einsum("nii->n", rho).real[:, None, None]
            p = self.p_dephase[j]
            if p > 0.0:
                rho = (1.0 - p) * rho + p * (A @ rho @ A)
        if pulse is None:
            U = self.u_full
            rho = U @ rho @ dagger(U)
        else:
            theta = pulse * dt
            U = None
            for j in range(self.A.shape[0]):
                F = np.cos(theta[:, j])[:, None, None] * self.eye - 1j * np.sin(theta[:, j])[:, None, None] * self.A[j]
                U = F if U is None else F @ U
            U = self.u_half @ U @ self.u_half
            rho = U @ rho @ dagger(U)
        rho = 0.5 * (rho + dagger(rho))
        return rho / np.einsum("nii->n", rho).real[:, None, None]


def _check_batch(rho: np.ndarray, step: int, offset: int = 0) -> None:
    lam = np.linalg.eigvalsh(rho)[:, 0]
    bad = np.nonzero(lam < -REPAIR_TOL)[0]
    if bad.size:
        i = int(bad[0])
        raise IntegrationError(
            f"state left the PSD cone at step {step} (trajectory {offset + i}, min eigenvalue {lam[i]:.3e}); "
            "reduce dt",
            step=step,
            trajectory=offset + i,
        )


def default_pulse(cfg: TrajectoryConfig) -> Optional[PulseFn]:
    """Feedback ``r_j(t - delay) / tau_j`` (times eta when eta-corrected)."""
    if cfg.feedback_gain == 0.0:
        return None
    taus = cfg.taus
    delay = cfg.delay_steps
    gain = cfg.efficiency if cfg.eta_corrected_feedback else 1.0

    def pulse(k: int, rec: np.ndarray) -> np.ndarray:
        if k < delay:
            return np.zeros(rec.shape[:2])
        return gain * rec[:, :, k - delay] / taus

    return pulse


def integrate(
    cfg: TrajectoryConfig,
    n: int,
    noise: Optional[np.ndarray] = None,
    records: Optional[np.ndarray] = None,
    store_states: bool = False,
    pulse: Optional[PulseFn] = None,
    use_default_pulse: bool = True,
    offset: int = 0,
) -> dict:
    """Integrate ``n`` trajectories side by side.

    Exactly one of ``noise`` (standardized draws, shape ``(n, C, M)``) or
    ``records`` (prescribed measurement records, same shape) drives the run.
    With ``records`` the state is the filter conditioned on those records.
    """
    kern = _Kernel(cfg)
    M = cfg.n_steps
    C = len(cfg.channels)
    d = cfg.dim
    if (noise is None) == (records is None):
        raise ValueError("pass exactly one of noise or records")
    if pulse is None and use_default_pulse:
        pulse = default_pulse(cfg)
    X = cfg.feedback_gain
    sqdt = math.sqrt(cfg.dt)

    rho = np.broadcast_to(cfg.initial_state.mat, (n, d, d)).copy()
    rec = np.empty((n, C, M)) if records is None else np.asarray(records, dtype=float)
    wien = np.empty((n, C, M))
    expv = np.empty((n, C, M))
    states = np.empty((n, M + 1, d, d), dtype=complex) if store_states else None
    if store_states:
        states[:, 0] = rho
    check_every = cfg.check_every
    for k in range(M):
        a = kern.expectations(rho)
        expv[:, :, k] = a
        if records is None:
            dW = noise[:, :, k] * sqdt
            rec[:, :, k] = a + kern.record_scale * noise[:, :, k] / sqdt
        else:
            dW = (rec[:, :, k] - a) * cfg.dt / kern.record_scale
        wien[:, :, k] = dW
        amp = None
        if pulse is not None:
            amp = X * pulse(k, rec)
        rho = kern.advance(rho, a, dW, amp)
        if store_states:
            states[:, k + 1] = rho
        if check_every and (k + 1) % check_every == 0:
            _check_batch(rho, k + 1, offset)
    _check_batch(rho, M, offset)
    return {"records": rec, "wiener": wien, "expectations": expv, "states": states, "final_states": rho}


def draw_noise(cfg: TrajectoryConfig, seeds: Sequence[int]) -> np.ndarray:
    """Standardized draws ``(n, C, M)``; one stream per (trajectory, channel)."""
    M, C = cfg.n_steps, len(cfg.channels)
    out = np.empty((len(seeds), C, M))
    for i, s in enumerate(seeds):
        for j in range(C):
            out[i, j] = cfg.noise.draw(stream(s, j), M)
    return out


def step(
    rho: DensityMatrix,
    cfg: TrajectoryConfig,
    dW,
    feedback_records=None,
) -> tuple[DensityMatrix, np.ndarray, np.ndarray]:
    """Advance one state by one time step with prescribed Wiener increments.

    ``feedback_records`` are the (delayed) per-channel record values that
    drive the feedback pulse; by default the current records are used.
    Returns ``(new_state, records, dW)``.
    """
    if rho.dim != cfg.dim:
        raise ValueError(f"state dim {rho.dim} != config dim {cfg.dim}")
    kern = _Kernel(cfg)
    dW = np.atleast_1d(np.asarray(dW, dtype=float))[None, :]
    r_rho = rho.mat[None]
    a = kern.expectations(r_rho)
    r = a + kern.record_scale * dW / cfg.dt
    amp = None
    if cfg.feedback_gain != 0.0:
        fb = r if feedback_records is None else np.atleast_1d(np.asarray(feedback_records, dtype=float))[None, :]
        gain = cfg.efficiency if cfg.eta_corrected_feedback else 1.0
        amp = cfg.feedback_gain * gain * fb / kern.tau
    new = kern.advance(r_rho, a, dW, amp)
    _check_batch(new, 1)
    return DensityMatrix(new[0], validate=False), r[0], dW[0]


def simulate(cfg: TrajectoryConfig, store_states: bool = True, pulse: Optional[PulseFn] = None) -> Trajectory:
    """Integrate one trajectory; deterministic given ``cfg.seed``."""
    noise = draw_noise(cfg, [cfg.seed])
    out = integrate(cfg, 1, noise=noise, store_states=store_states, pulse=pulse)
    batch = _make_batch(cfg, out, np.array([cfg.seed], dtype=np.uint64))
    return batch.trajectory(0)


def _make_batch(cfg: TrajectoryConfig, out: dict, seeds: np.ndarray) -> TrajectoryBatch:
    return TrajectoryBatch(
        records=out["records"],
        wiener=out["wiener"],
        expectations=out["expectations"],
        states=out["states"],
        final_states=out["final_states"],
        seeds=seeds,
        taus=cfg.taus,
        dt=cfg.dt,
        efficiency=cfg.efficiency,
        config_hash=cfg.config_hash(),
    )


def resolve_workers(workers: Optional[int]) -> int:
    if workers is None:
        workers = int(os.environ.get("QARROW_THREADS", "1") or 1)
    return max(1, int(workers))


def iter_ensemble(
    cfg: TrajectoryConfig,
    n_traj: int,
    base_seed: int,
    store_states: bool = False,
    pulse: Optional[PulseFn] = None,
    workers: Optional[int] = None,
    chunk_size: int = CHUNK_SIZE,
    records: Optional[np.ndarray] = None,
) -> Iterator[TrajectoryBatch]:
    """Yield fixed-size chunks of an ensemble in trajectory order.

    Trajectory ``i`` uses seed ``derive_seed(base_seed, i)``; the chunk
    boundaries do not depend on ``workers`` so output is bit-identical for any
    degree of parallelism.  ``records`` switches to filter mode (shape
    ``(n_traj, C, M)``).
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    seeds = np.array([derive_seed(base_seed, i) for i in range(n_traj)], dtype=np.uint64)
    starts = list(range(0, n_traj, chunk_size))

    def run(start: int) -> TrajectoryBatch:
        sl = slice(start, min(start + chunk_size, n_traj))
        cfg_seeds = [int(s) for s in seeds[sl]]
        try:
            if records is None:
                out = integrate(cfg, len(cfg_seeds), noise=draw_noise(cfg, cfg_seeds),
                                store_states=store_states, pulse=pulse, offset=start)
            else:
                out = integrate(cfg, len(cfg_seeds), records=records[sl],
                                store_states=store_states, pulse=pulse, offset=start)
        except IntegrationError as exc:
            raise IntegrationError(f"ensemble member {exc.trajectory}: {exc}", exc.step, exc.trajectory) from exc
        return _make_batch(cfg, out, seeds[sl])

    nw = resolve_workers(workers)
    if nw == 1 or len(starts) == 1:
        for s in starts:
            yield run(s)
    else:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            yield from pool.map(run, starts)


def simulate_ensemble(
    cfg: TrajectoryConfig,
    n_traj: int,
    base_seed: int,
    store_states: bool = True,
    pulse: Optional[PulseFn] = None,
    workers: Optional[int] = None,
) -> list[Trajectory]:
    out: list[Trajectory] = []
    for batch in iter_ensemble(cfg, n_traj, base_seed, store_states, pulse, workers):
        out.extend(batch.trajectories())
    return out


def purity_drift(traj: Trajectory) -> float:
    """Largest departure ``1 - Tr(rho_k^2)`` from the pure-state manifold."""
    if traj.states is None:
        raise ValueError("purity_drift needs the stored state path")
    p = np.einsum("kij,kji->k", traj.states, traj.states).real
    return float(np.max(1.0 - p))


def trace_and_hermiticity_defects(traj: Trajectory) -> tuple[float, float]:
    if traj.states is None:
        raise ValueError("needs the stored state path")
    tr = np.einsum("kii->k", traj.states)
    herm = np.max(np.abs(traj.states - dagger(traj.states)))
    return float(np.max(np.abs(tr - 1.0))), float(herm)
