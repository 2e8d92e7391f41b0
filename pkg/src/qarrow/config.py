"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment, keys are dotted
(``physics.tau``, ``learning.rate``).  Every key has a default except
``experiment``; unknown keys are an error.  Hamiltonians are real linear
combinations of Pauli strings, e.g. ``0.5*w X0 + 0.1 Z0Z1``, with ``w`` bound
to ``physics.omega``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .operators import MAX_QUBITS, DensityMatrix, Observable, pauli_string
from .score_learning import TrainingConfig
from .trajectory import ChannelConfig, Diagnostic, NoiseModel, TrajectoryConfig

EXPERIMENTS = (
    "simulate",
    "arrow-scan",
    "girsanov-check",
    "frechet-cert",
    "kahler-cert",
    "flows-cert",
    "train-score",
    "eval-score",
    "reversal-demo",
)

DEFAULTS: dict[str, str] = {
    "experiment": "",
    "output_dir": "qarrow_out",
    "seed": "0",
    "workers": "0",
    "physics.n_qubits": "1",
    "physics.omega": "1.0",
    "physics.hamiltonian": "0.5*w X0",
    "physics.channels": "Z0",
    "physics.tau": "1.0",
    "physics.initial_state": "0",
    "physics.dt": "0.001",
    "physics.total_time": "1.0",
    "physics.feedback_gain": "0.0",
    "physics.efficiency": "1.0",
    "physics.delay_steps": "0",
    "physics.eta_corrected_feedback": "false",
    "physics.noise": "gaussian",
    "physics.noise_dof": "5",
    "physics.noise_weight": "0.1",
    "physics.noise_sigma_ratio": "3",
    "statistics.n_traj": "1000",
    "statistics.X_grid": "-4:0:0.25",
    "statistics.bootstrap_count": "1000",
    "statistics.n_samples": "1000",
    "statistics.export_trajectories": "1",
    "learning.objective": "DSM",
    "learning.rate": "0.01",
    "learning.batch_size": "256",
    "learning.n_epochs": "20",
    "learning.slice_count": "1",
    "learning.seed": "0",
    "learning.window": "10",
    "learning.n_train": "200",
    "learning.n_eval": "50",
    "learning.model": "",
    "learning.calibration": "1.0",
}

# Experiment-specific defaults, applied beneath file values and overrides.
EXPERIMENT_DEFAULTS: dict[str, dict[str, str]] = {
    "reversal-demo": {"physics.omega": repr(8 * math.pi), "statistics.n_traj": "5000"},
}


class ConfigError(ValueError):
    def __init__(self, message: str, key: str = "", line: Optional[int] = None, column: Optional[int] = None):
        where = ""
        if line is not None:
            where = f"line {line}, column {column or 1}: "
        super().__init__(f"{where}{key + ': ' if key else ''}{message}")
        self.key, self.line, self.column = key, line, column


_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z_][A-Za-z0-9_]*)*$")


def parse_text(text: str) -> dict[str, tuple[str, int, int]]:
    """``{key: (value, line, column)}``; raises ConfigError on malformed lines."""
    out: dict[str, tuple[str, int, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        if "=" not in line:
            col = len(line) - len(line.lstrip()) + 1
            raise ConfigError("expected 'key = value'", line=lineno, column=col)
        key_part, value = line.split("=", 1)
        key = key_part.strip()
        col = len(key_part) - len(key_part.lstrip()) + 1
        if not _KEY_RE.match(key):
            raise ConfigError(f"malformed key {key!r}", line=lineno, column=col)
        if key not in DEFAULTS:
            raise ConfigError("unknown key", key=key, line=lineno, column=col)
        if key in out:
            raise ConfigError(f"duplicate key (first set on line {out[key][1]})", key=key, line=lineno, column=col)
        out[key] = (value.strip(), lineno, col)
    return out


def parse_override(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, value = item.split("=", 1)
    key = key.strip()
    if key not in DEFAULTS:
        raise ConfigError("unknown key", key=key)
    return key, value.strip()


def load(path=None, overrides=(), experiment: Optional[str] = None) -> dict[str, str]:
    """Merged raw settings: defaults < experiment defaults < file < overrides."""
    file_vals: dict[str, str] = {}
    if path is not None:
        file_vals = {k: v for k, (v, _, _) in parse_text(Path(path).read_text()).items()}
    over = dict(parse_override(o) for o in overrides)
    exp = over.get("experiment") or file_vals.get("experiment") or experiment or ""
    if experiment and exp != experiment:
        raise ConfigError(f"config names experiment {exp!r} but subcommand is {experiment!r}", key="experiment")
    merged = dict(DEFAULTS)
    merged.update(EXPERIMENT_DEFAULTS.get(exp, {}))
    merged.update(file_vals)
    merged.update(over)
    merged["experiment"] = exp
    return merged


# -- typed accessors ------------------------------------------------------


def _float(raw: dict, key: str) -> float:
    try:
        return float(raw[key])
    except ValueError:
        raise ConfigError(f"expected a number, got {raw[key]!r}", key=key) from None


def _int(raw: dict, key: str) -> int:
    try:
        return int(raw[key])
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw[key]!r}", key=key) from None


def _bool(raw: dict, key: str) -> bool:
    v = raw[key].lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"expected true/false, got {raw[key]!r}", key=key)


def _float_list(raw: dict, key: str) -> list[float]:
    try:
        return [float(x) for x in raw[key].split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {raw[key]!r}", key=key) from None


def parse_grid(text: str, key: str = "statistics.X_grid") -> np.ndarray:
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, step = (float(x) for x in text.split(":"))
            if step <= 0 or stop < start:
                raise ValueError
            n = int(round((stop - start) / step))
            return start + step * np.arange(n + 1)
        return np.array([float(x) for x in text.split(",") if x.strip()])
    except ValueError:
        raise ConfigError(f"bad grid {text!r}; use start:stop:step or a comma list", key=key) from None


_PAULI_RE = re.compile(r"([IXYZ])(\d+)")


def parse_pauli_label(label: str, n_qubits: int, key: str = "") -> np.ndarray:
    label = label.strip()
    if label == "I":
        return np.eye(2**n_qubits, dtype=complex)
    pos, ops = 0, {}
    for m in _PAULI_RE.finditer(label):
        if m.start() != pos:
            break
        q = int(m.group(2))
        if q >= n_qubits:
            raise ConfigError(f"qubit index {q} out of range for {n_qubits} qubit(s) in {label!r}", key=key)
        if q in ops:
            raise ConfigError(f"qubit {q} repeated in {label!r}", key=key)
        ops[q] = m.group(1)
        pos = m.end()
    if pos != len(label) or not label:
        raise ConfigError(f"cannot parse Pauli string {label!r} (expected e.g. X0, Z0Z1)", key=key)
    return pauli_string(ops, n_qubits)


def _coefficient(text: str, omega: float, key: str) -> float:
    value = 1.0
    for factor in text.split("*"):
        f = factor.strip()
        if f == "w":
            value *= omega
        elif f == "pi":
            value *= math.pi
        else:
            try:
                value *= float(f)
            except ValueError:
                raise ConfigError(f"bad coefficient factor {f!r}", key=key) from None
    return value


def parse_hamiltonian(text: str, omega: float, n_qubits: int, key: str = "physics.hamiltonian") -> np.ndarray:
    d = 2**n_qubits
    H = np.zeros((d, d), dtype=complex)
    src = text.strip()
    if src in ("", "0"):
        return H
    src = re.sub(r"(?<=\S)\s*-\s*(?=[0-9wp.IXYZ])", " + -", src)
    for term in src.split("+"):
        term = term.strip()
        if not term:
            raise ConfigError(f"empty term in {text!r}", key=key)
        parts = term.split()
        if len(parts) == 1:
            coef_txt, label = "1", parts[0]
            if label.startswith("-"):
                coef_txt, label = "-1", label[1:]
        elif len(parts) == 2:
            coef_txt, label = parts
            if coef_txt == "-":
                coef_txt = "-1"
            elif coef_txt.startswith("-"):
                coef_txt = "-1*" + coef_txt[1:]
        else:
            raise ConfigError(f"cannot parse term {term!r}; use 'coef PAULI', e.g. '0.5*w X0'", key=key)
        H += _coefficient(coef_txt, omega, key) * parse_pauli_label(label, n_qubits, key)
    return H


def _initial_state(text: str, n_qubits: int) -> DensityMatrix:
    key = "physics.initial_state"
    if text == "mixed":
        return DensityMatrix.maximally_mixed(2**n_qubits)
    if len(text) != n_qubits or any(c not in "01+-" for c in text):
        raise ConfigError(f"expected {n_qubits} characters from 0,1,+,- or 'mixed', got {text!r}", key=key)
    single = {
        "0": np.array([1, 0], dtype=complex),
        "1": np.array([0, 1], dtype=complex),
        "+": np.array([1, 1], dtype=complex) / math.sqrt(2),
        "-": np.array([1, -1], dtype=complex) / math.sqrt(2),
    }
    psi = np.array([1.0 + 0j])
    for c in text:
        psi = np.kron(psi, single[c])
    return DensityMatrix.from_pure(psi)


@dataclass
class ExperimentConfig:
    experiment: str
    output_dir: Path
    seed: int
    workers: int
    physics: TrajectoryConfig
    n_traj: int
    X_grid: np.ndarray
    bootstrap_count: int
    n_samples: int
    export_trajectories: int
    learning: TrainingConfig
    window: int
    n_train: int
    n_eval: int
    model_path: str
    calibration: float
    raw: dict


def _physics_pieces(raw: dict):
    """Parse physics keys; returns (kwargs, diagnostics) without constructing the config."""
    diags: list[Diagnostic] = []
    nq = _int(raw, "physics.n_qubits")
    if not 1 <= nq <= MAX_QUBITS:
        raise ConfigError(f"must lie in [1, {MAX_QUBITS}]", key="physics.n_qubits")
    omega = _float(raw, "physics.omega")
    H = parse_hamiltonian(raw["physics.hamiltonian"], omega, nq)
    labels = [s.strip() for s in raw["physics.channels"].split(",") if s.strip()]
    if not labels:
        raise ConfigError("at least one channel is required", key="physics.channels")
    taus = _float_list(raw, "physics.tau")
    if len(taus) == 1:
        taus = taus * len(labels)
    if len(taus) != len(labels):
        raise ConfigError(f"{len(taus)} tau values for {len(labels)} channels", key="physics.tau")
    channels = []
    for j, (lab, tau) in enumerate(zip(labels, taus)):
        obs = Observable(parse_pauli_label(lab, nq, "physics.channels"), label=lab)
        if not tau > 0:
            diags.append(Diagnostic("error", f"physics.tau[{j}]", f"channel {lab}: tau must be > 0, got {tau:g}"))
            continue
        channels.append(ChannelConfig(obs, tau))
    noise = NoiseModel(
        kind=raw["physics.noise"],
        dof=_float(raw, "physics.noise_dof"),
        weight=_float(raw, "physics.noise_weight"),
        sigma_ratio=_float(raw, "physics.noise_sigma_ratio"),
    )
    kwargs = dict(
        hamiltonian=H,
        channels=tuple(channels),
        initial_state=_initial_state(raw["physics.initial_state"], nq),
        dt=_float(raw, "physics.dt"),
        total_time=_float(raw, "physics.total_time"),
        feedback_gain=_float(raw, "physics.feedback_gain"),
        efficiency=_float(raw, "physics.efficiency"),
        delay_steps=_int(raw, "physics.delay_steps"),
        noise=noise,
        seed=_int(raw, "seed"),
        eta_corrected_feedback=_bool(raw, "physics.eta_corrected_feedback"),
    )
    return kwargs, diags


def _physics_diagnostics(kwargs: dict) -> list[Diagnostic]:
    """Run TrajectoryConfig's checks without raising or warning."""
    probe = object.__new__(TrajectoryConfig)
    for k, v in kwargs.items():
        object.__setattr__(probe, k, v)
    return [Diagnostic(p.level, f"physics.{p.key}", p.message) for p in TrajectoryConfig.diagnostics(probe)]


def validate_raw(raw: dict) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    if raw.get("experiment") and raw["experiment"] not in EXPERIMENTS:
        diags.append(Diagnostic("error", "experiment", f"unknown experiment {raw['experiment']!r}"))
    try:
        kwargs, d = _physics_pieces(raw)
        diags.extend(d)
        if kwargs["channels"]:
            diags.extend(_physics_diagnostics(kwargs))
    except (ConfigError, ValueError) as exc:
        key = getattr(exc, "key", "") or "physics"
        diags.append(Diagnostic("error", key, str(exc)))
    for key in ("statistics.n_traj", "statistics.bootstrap_count", "statistics.n_samples", "learning.window",
                "learning.n_train", "learning.n_eval", "workers", "statistics.export_trajectories"):
        try:
            v = _int(raw, key)
            if v < 0 or (v == 0 and key in ("statistics.n_traj", "learning.window", "statistics.n_samples")):
                diags.append(Diagnostic("error", key, f"must be positive, got {v}"))
        except ConfigError as exc:
            diags.append(Diagnostic("error", key, str(exc)))
    try:
        parse_grid(raw["statistics.X_grid"])
    except ConfigError as exc:
        diags.append(Diagnostic("error", "statistics.X_grid", str(exc)))
    try:
        _training(raw)
    except (ConfigError, ValueError) as exc:
        diags.append(Diagnostic("error", getattr(exc, "key", "") or "learning", str(exc)))
    return diags


def _training(raw: dict) -> TrainingConfig:
    return TrainingConfig(
        objective=raw["learning.objective"],
        learning_rate=_float(raw, "learning.rate"),
        batch_size=_int(raw, "learning.batch_size"),
        n_epochs=_int(raw, "learning.n_epochs"),
        slice_count=_int(raw, "learning.slice_count"),
        seed=_int(raw, "learning.seed"),
    )


def build(raw: dict) -> ExperimentConfig:
    """Typed configuration; raises ConfigError/ValueError on the first problem."""
    errors = [d for d in validate_raw(raw) if d.level == "error"]
    if errors:
        raise ConfigError("; ".join(str(e) for e in errors), key=errors[0].key)
    if not raw.get("experiment"):
        raise ConfigError("no experiment given", key="experiment")
    kwargs, _ = _physics_pieces(raw)
    return ExperimentConfig(
        experiment=raw["experiment"],
        output_dir=Path(raw["output_dir"]),
        seed=_int(raw, "seed"),
        workers=_int(raw, "workers"),
        physics=TrajectoryConfig(**kwargs),
        n_traj=_int(raw, "statistics.n_traj"),
        X_grid=parse_grid(raw["statistics.X_grid"]),
        bootstrap_count=_int(raw, "statistics.bootstrap_count"),
        n_samples=_int(raw, "statistics.n_samples"),
        export_trajectories=_int(raw, "statistics.export_trajectories"),
        learning=_training(raw),
        window=_int(raw, "learning.window"),
        n_train=_int(raw, "learning.n_train"),
        n_eval=_int(raw, "learning.n_eval"),
        model_path=raw["learning.model"],
        calibration=_float(raw, "learning.calibration"),
        raw=dict(raw),
    )


def render(raw: dict) -> str:
    """Serialize settings back to the file format (sorted, one per line)."""
    return "".join(f"{k} = {raw[k]}\n" for k in sorted(raw))
