"""Girsanov path densities and the arrow-of-time statistic.

For records ``r`` and pre-step expectations ``<A>`` (left-endpoint, Ito
convention), per trajectory:

    cross = sum_j (1/tau_j) sum_k r_jk <A_j>_k dt
    quad  = sum_j (1/(2 tau_j)) sum_k <A_j>_k^2 dt

    log dP_F/dP_W =  cross - quad
    log dP_B/dP_W = -cross - quad
    ln R          =  2 cross
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .operators import Observable, commutator, dagger
from .rng import derive_seed, stream
from .trajectory import (
    PulseFn,
    Trajectory,
    TrajectoryBatch,
    TrajectoryConfig,
    iter_ensemble,
)


class DegenerateFamilyWarning(UserWarning):
    """Feedback cannot act on <A>: every channel observable commutes with H."""


class WeightDegeneracyWarning(UserWarning):
    """Importance weights collapsed onto too few trajectories."""


@dataclass(frozen=True)
class PathDensity:
    log_dPF_dPW: float
    log_dPB_dPW: float
    ln_R: float
    cross_term: float
    quad_term: float


def path_terms(records: np.ndarray, expectations: np.ndarray, taus: np.ndarray, dt: float):
    """Cross and quadratic terms for arrays shaped ``(..., C, M)``."""
    inv_tau = 1.0 / np.asarray(taus, dtype=float)
    cross = np.einsum("...cm,...cm->...c", records, expectations) * dt
    quad = np.einsum("...cm,...cm->...c", expectations, expectations) * dt
    return cross @ inv_tau, 0.5 * (quad @ inv_tau)


def girsanov_log_density(traj: Trajectory) -> PathDensity:
    cross, quad = path_terms(traj.records, traj.expectations, traj.taus, traj.dt)
    cross, quad = float(cross), float(quad)
    return PathDensity(
        log_dPF_dPW=cross - quad,
        log_dPB_dPW=-cross - quad,
        ln_R=2.0 * cross,
        cross_term=cross,
        quad_term=quad,
    )


def backward_log_density(traj: Trajectory) -> float:
    """Log density of the record-negated (backward) process w.r.t. Wiener measure."""
    return girsanov_log_density(traj).log_dPB_dPW


def x_family_log_ratio(traj: Trajectory, X: float) -> float:
    """``log dP_X/dP_B = (X + 2) * cross``.

    This is the leading-order (linearized feedback) member of the family; it
    is only meaningful when ``omega * T << 1``.  Realized arrow statistics
    under feedback come from :func:`girsanov_log_density`.
    """
    return (X + 2.0) * girsanov_log_density(traj).cross_term


def batch_ln_R(batch: TrajectoryBatch) -> np.ndarray:
    cross, _ = path_terms(batch.records, batch.expectations, batch.taus, batch.dt)
    return 2.0 * cross


def pairwise_mean(x: np.ndarray) -> float:
    # np.sum uses pairwise summation on contiguous float arrays
    x = np.ascontiguousarray(x, dtype=float)
    return float(np.sum(x) / x.size)


def mean_and_stderr(x: np.ndarray) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    m = pairwise_mean(x)
    if x.size < 2:
        return m, float("nan")
    return m, float(np.std(x, ddof=1) / math.sqrt(x.size))


def feedback_active(cfg: TrajectoryConfig, tol: float = 1e-12) -> bool:
    H = cfg.hamiltonian
    return any(np.max(np.abs(commutator(H, ch.observable.mat))) > tol for ch in cfg.channels)


def zero_crossing(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    """Linear-interpolated root of ``ys(xs)``, scanning down from the largest X.

    Returns ``None`` when the curve never changes sign.
    """
    order = np.argsort(xs)[::-1]
    x = np.asarray(xs, dtype=float)[order]
    y = np.asarray(ys, dtype=float)[order]
    for i in range(len(x) - 1):
        y0, y1 = y[i], y[i + 1]
        if y0 == 0.0:
            return float(x[i])
        if y0 * y1 < 0.0:
            return float(x[i] + (x[i + 1] - x[i]) * y0 / (y0 - y1))
    if len(y) and y[-1] == 0.0:
        return float(x[-1])
    return None


@dataclass
class ArrowScan:
    X_values: np.ndarray
    mean_lnR: np.ndarray
    stderr_lnR: np.ndarray
    zero_crossing_estimate: Optional[float]
    n_traj: int
    crossing_interval: Optional[tuple] = None
    crossing_found_fraction: float = 0.0
    degenerate: bool = False

    def export(self, directory, stem: str = "arrow_scan") -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / f"{stem}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["X", "mean_lnR", "stderr_lnR"])
            for x, m, s in zip(self.X_values, self.mean_lnR, self.stderr_lnR):
                w.writerow([repr(float(x)), repr(float(m)), repr(float(s))])
        json_path = directory / f"{stem}.json"
        json_path.write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        return [csv_path, json_path]

    def summary(self) -> dict:
        return {
            "zero_crossing_estimate": self.zero_crossing_estimate,
            "bootstrap_interval": None if self.crossing_interval is None else list(self.crossing_interval),
            "bootstrap_crossing_fraction": self.crossing_found_fraction,
            "n_traj": self.n_traj,
            "degenerate_family": self.degenerate,
            "X_values": [float(x) for x in self.X_values],
        }


def bootstrap_crossing(
    X_values: np.ndarray,
    samples: Sequence[np.ndarray],
    n_boot: int,
    seed: int,
    level: float = 0.95,
) -> tuple[Optional[tuple], float]:
    """Percentile interval of the zero crossing under per-X resampling.

    Returns ``(interval or None, fraction of resamples that crossed)``.
    """
    if n_boot <= 0:
        return None, 0.0
    rng = stream(seed, 0xB007)
    roots = []
    for _ in range(n_boot):
        means = [pairwise_mean(s[rng.integers(0, s.size, s.size)]) for s in samples]
        z = zero_crossing(X_values, means)
        if z is not None:
            roots.append(z)
    frac = len(roots) / n_boot
    if not roots:
        return None, 0.0
    lo, hi = np.quantile(roots, [(1 - level) / 2, (1 + level) / 2])
    return (float(lo), float(hi)), frac


def arrow_scan(
    cfg_template: TrajectoryConfig,
    X_grid: Sequence[float],
    n_traj: int,
    base_seed: int,
    bootstrap: int = 1000,
    workers: Optional[int] = None,
    pulse: Optional[PulseFn] = None,
    keep_samples: bool = False,
):
    """Mean and standard error of ln R for a fresh ensemble at each gain X.

    Each X gets an independent seed family ``derive_seed(base_seed, index)``.
    With ``keep_samples`` the per-trajectory ln R arrays are returned too.
    """
    X_values = np.asarray(list(X_grid), dtype=float)
    degenerate = not feedback_active(cfg_template)
    if degenerate:
        warnings.warn(
            "[H, A] = 0 for every channel: feedback cannot change <A>_t and the X-family is degenerate",
            DegenerateFamilyWarning,
            stacklevel=2,
        )
    means, errs, samples = [], [], []
    for i, X in enumerate(X_values):
        cfg = cfg_template.replace(feedback_gain=float(X))
        seed_i = derive_seed(base_seed, i)
        lnR = np.concatenate(
            [batch_ln_R(b) for b in iter_ensemble(cfg, n_traj, seed_i, pulse=pulse, workers=workers)]
        )
        m, s = mean_and_stderr(lnR)
        means.append(m)
        errs.append(s)
        samples.append(lnR)
    z = zero_crossing(X_values, means)
    interval, frac = bootstrap_crossing(X_values, samples, bootstrap, base_seed)
    scan = ArrowScan(
        X_values=X_values,
        mean_lnR=np.array(means),
        stderr_lnR=np.array(errs),
        zero_crossing_estimate=z,
        n_traj=n_traj,
        crossing_interval=interval,
        crossing_found_fraction=frac,
        degenerate=degenerate,
    )
    if keep_samples:
        return scan, samples
    return scan


@dataclass(frozen=True)
class ImportanceResult:
    direct: float
    reweighted: float
    direct_stderr: float
    reweighted_stderr: float
    ess: float
    n_traj: int

    def __iter__(self):
        # unpacks as (direct, reweighted)
        return iter((self.direct, self.reweighted))

    @property
    def combined_stderr(self) -> float:
        return math.hypot(self.direct_stderr, self.reweighted_stderr)


def importance_consistency(
    cfg: TrajectoryConfig,
    statistic: Callable[[Trajectory], float],
    n_traj: int,
    base_seed: int = 0,
    workers: Optional[int] = None,
) -> ImportanceResult:
    """Compare ``E_F[f]`` with ``E_W[exp(log dP_F/dP_W) f]``.

    The reference ensemble draws pure-noise records ``r = sqrt(tau/dt) xi``
    and propagates the filter conditioned on them.  Both estimators target
    the same number; their agreement is Girsanov's theorem in discrete time.
    """
    if cfg.efficiency != 1.0 or cfg.noise.kind != "gaussian":
        raise ValueError("importance_consistency needs eta = 1 and Gaussian noise")
    direct_vals = []
    for b in iter_ensemble(cfg, n_traj, derive_seed(base_seed, 0), workers=workers):
        direct_vals.extend(statistic(t) for t in b.trajectories())
    direct_vals = np.asarray(direct_vals, dtype=float)

    ref_seed = derive_seed(base_seed, 1)
    M, C = cfg.n_steps, len(cfg.channels)
    scale = np.sqrt(cfg.taus / cfg.dt)[:, None]
    ref_records = np.empty((n_traj, C, M))
    for i in range(n_traj):
        s = derive_seed(ref_seed, i)
        for j in range(C):
            ref_records[i, j] = stream(s, j).standard_normal(M) * scale[j]
    logw, vals = [], []
    for b in iter_ensemble(cfg, n_traj, ref_seed, workers=workers, records=ref_records):
        cross, quad = path_terms(b.records, b.expectations, b.taus, b.dt)
        logw.append(cross - quad)
        vals.extend(statistic(t) for t in b.trajectories())
    w = np.exp(np.concatenate(logw))
    vals = np.asarray(vals, dtype=float)
    ess = float(w.sum() ** 2 / np.sum(w * w))
    if ess < 0.01 * n_traj:
        warnings.warn(f"importance weights degenerate: ESS = {ess:.1f} of {n_traj}", WeightDegeneracyWarning,
                      stacklevel=2)
    d_mean, d_err = mean_and_stderr(direct_vals)
    r_mean, r_err = mean_and_stderr(w * vals)
    return ImportanceResult(d_mean, r_mean, d_err, r_err, ess, n_traj)


def reverse_drift(rho, A, tau: float) -> np.ndarray:
    """Extra drift ``(2/tau) <A> (A rho + rho A - 2 <A> rho)`` of the reversed SME."""
    r = rho.mat if hasattr(rho, "mat") else np.asarray(rho, dtype=complex)
    a_mat = A.mat if isinstance(A, Observable) else np.asarray(A, dtype=complex)
    a = float(np.trace(a_mat @ r).real)
    return (2.0 / tau) * a * (a_mat @ r + r @ a_mat - 2.0 * a * r)


def reverse_drift_commutator_defect(rho, A, tau: float) -> float:
    """Largest ``|diagonal entry|`` of the reverse drift in the eigenbasis of ``A``.

    The diagonal is population transfer between eigenspaces of ``A``.  It
    vanishes at eigenstates and where ``<A> = 0`` and is nonzero elsewhere,
    which certifies that the drift is not of the form ``-i[B, rho]``.
    """
    a_mat = A.mat if isinstance(A, Observable) else np.asarray(A, dtype=complex)
    D = reverse_drift(rho, a_mat, tau)
    _, V = np.linalg.eigh(a_mat)
    diag = np.diagonal(dagger(V) @ D @ V)
    return float(np.max(np.abs(diag)))
