"""Data-driven score estimation from measurement records.

A small tanh regressor maps a window of past records to a scalar score.  It
is trained either by denoising score matching (regression onto the
innovation score ``(r - <A>)/tau``) or by sliced score matching, which needs
no targets and only the model's own derivative along the current record.

Units.  The network works in standardized coordinates: inputs are records
times ``input_scale`` (``sqrt(dt/tau)`` for physical data, making them O(1))
and its raw output is multiplied by ``output_scale``.  For DSM the output
scale is ``1/sqrt(tau dt)``, so the model returns the innovation score
directly.  SSM learns ``d/dx log p(x)`` in standardized coordinates, which is
``-sqrt(tau dt) * eta`` times the innovation score; the SSM output scale is
``-1/sqrt(tau dt)`` so both objectives report the same convention (the SSM
model carries the extra factor ``eta``).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .path_measure import batch_ln_R, mean_and_stderr
from .rng import stream
from .trajectory import (
    PulseFn,
    Trajectory,
    TrajectoryConfig,
    iter_ensemble,
    simulate,
)

DIVERGENCE_LOSS = 1e6


class TrainingDivergence(RuntimeError):
    pass


@dataclass(eq=False)
class ScoreModel:
    """Feed-forward tanh network ``input_width -> hidden... -> 1``.

    ``layers`` is a list of ``(W, b)`` with ``W`` shaped ``(out, in)``; every
    layer but the last is followed by ``tanh``.
    """

    layers: list
    activation: str = "tanh"
    input_scale: float = 1.0
    output_scale: float = 1.0

    def __post_init__(self):
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        prev = None
        for W, b in self.layers:
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError("layer weight/bias shapes are inconsistent")
            if prev is not None and W.shape[1] != prev:
                raise ValueError(f"layer input width {W.shape[1]} does not chain from {prev}")
            prev = W.shape[0]
        if prev != 1:
            raise ValueError("the last layer must have a single output")

    @property
    def input_width(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def output_width(self) -> int:
        return 1

    @classmethod
    def init(
        cls,
        input_width: int,
        seed: int = 0,
        hidden: Sequence[int] = (32, 32),
        input_scale: float = 1.0,
        output_scale: float = 1.0,
    ) -> "ScoreModel":
        rng = stream(seed, 0x1417)
        sizes = [input_width, *hidden, 1]
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            W = rng.standard_normal((fan_out, fan_in)) / math.sqrt(fan_in)
            layers.append((W, np.zeros(fan_out)))
        return cls(layers, input_scale=input_scale, output_scale=output_scale)

    @classmethod
    def zero(cls, input_width: int, **kw) -> "ScoreModel":
        m = cls.init(input_width, **kw)
        W, b = m.layers[-1]
        m.layers[-1] = (np.zeros_like(W), np.zeros_like(b))
        return m

    def copy(self) -> "ScoreModel":
        return ScoreModel([(W.copy(), b.copy()) for W, b in self.layers], self.activation,
                          self.input_scale, self.output_scale)

    # -- evaluation --------------------------------------------------------

    def _forward(self, x: np.ndarray):
        hs = [x]
        h = x
        for W, b in self.layers[:-1]:
            h = np.tanh(h @ W.T + b)
            hs.append(h)
        W, b = self.layers[-1]
        return (h @ W.T + b)[:, 0], hs

    def net(self, x: np.ndarray) -> np.ndarray:
        """Raw output on standardized inputs ``x`` of shape ``(n, W)``."""
        return self._forward(np.atleast_2d(x))[0]

    def __call__(self, features) -> np.ndarray:
        f = np.atleast_2d(np.asarray(features, dtype=float))
        return self.output_scale * self.net(self.input_scale * f)

    def net_input_gradient(self, x: np.ndarray) -> np.ndarray:
        """``d net / d x`` by backpropagation, shape ``(n, W)``."""
        _, hs = self._forward(np.atleast_2d(x))
        g = np.broadcast_to(self.layers[-1][0], (hs[-1].shape[0], self.layers[-1][0].shape[1]))
        for (W, _), h in zip(reversed(self.layers[:-1]), reversed(hs[1:])):
            g = (g * (1.0 - h * h)) @ W
        return g

    def input_gradient(self, features) -> np.ndarray:
        f = np.atleast_2d(np.asarray(features, dtype=float))
        return self.output_scale * self.input_scale * self.net_input_gradient(self.input_scale * f)

    # -- parameters --------------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer]

    def set_parameters(self, params: Sequence[np.ndarray]) -> None:
        it = iter(params)
        self.layers = [(next(it), next(it)) for _ in self.layers]

    def to_json(self) -> str:
        return json.dumps(
            {
                "activation": self.activation,
                "input_width": self.input_width,
                "output_width": 1,
                "input_scale": self.input_scale,
                "output_scale": self.output_scale,
                "layers": [
                    {"in": W.shape[1], "out": W.shape[0], "weights": W.reshape(-1).tolist(), "bias": b.tolist()}
                    for W, b in self.layers
                ],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "ScoreModel":
        d = json.loads(text)
        layers = [
            (np.asarray(L["weights"], dtype=float).reshape(L["out"], L["in"]), np.asarray(L["bias"], dtype=float))
            for L in d["layers"]
        ]
        return cls(layers, d.get("activation", "tanh"), d.get("input_scale", 1.0), d.get("output_scale", 1.0))


def loss_and_grads(
    model: ScoreModel,
    x: np.ndarray,
    y_bar_fn,
    tangent: Optional[np.ndarray] = None,
    tangent_bar: Optional[np.ndarray] = None,
):
    """Reverse-mode gradients of a loss of ``y = net(x)`` and ``ydot = J(x) tangent``.

    ``y_bar_fn(y, ydot)`` returns ``(loss, dL/dy, dL/dydot)``; ``tangent`` is
    the input direction for the forward-mode derivative ``ydot``.
    """
    hidden = model.layers[:-1]
    W_out, b_out = model.layers[-1]
    hs, gs, hdots = [x], [], [tangent]
    h, hd = x, tangent
    for W, b in hidden:
        h = np.tanh(h @ W.T + b)
        g = 1.0 - h * h
        hs.append(h)
        gs.append(g)
        if hd is not None:
            hd = g * (hd @ W.T)
            hdots.append(hd)
    y = (h @ W_out.T + b_out)[:, 0]
    yd = None if hd is None else (hd @ W_out.T)[:, 0]
    loss, y_bar, yd_bar = y_bar_fn(y, yd)

    grads_rev = []
    h_bar = y_bar[:, None] * W_out
    dW_out = y_bar[None, :] @ hs[-1]
    db_out = np.array([y_bar.sum()])
    hd_bar = None
    if yd is not None:
        hd_bar = yd_bar[:, None] * W_out
        dW_out = dW_out + yd_bar[None, :] @ hdots[-1]
    grads_rev.append((dW_out, db_out))
    for li in range(len(hidden) - 1, -1, -1):
        W, _ = hidden[li]
        h, g, h_prev = hs[li + 1], gs[li], hs[li]
        if hd_bar is not None:
            zd = hdots[li] @ W.T
            zd_bar = g * hd_bar
            g_bar = zd * hd_bar
            h_bar = h_bar - 2.0 * h * g_bar
        z_bar = g * h_bar
        dW = z_bar.T @ h_prev
        db = z_bar.sum(axis=0)
        new_h_bar = z_bar @ W
        if hd_bar is not None:
            dW = dW + zd_bar.T @ hdots[li]
            hd_bar = zd_bar @ W
        h_bar = new_h_bar
        grads_rev.append((dW, db))
    grads = [p for pair in reversed(grads_rev) for p in pair]
    return loss, grads


def dsm_loss_grads(model: ScoreModel, x: np.ndarray, target: np.ndarray):
    n = x.shape[0]

    def fn(y, _):
        err = y - target
        return float(np.mean(err * err)), 2.0 * err / n, None

    return loss_and_grads(model, x, fn)


def ssm_loss_grads(model: ScoreModel, x: np.ndarray, v: np.ndarray):
    """Sliced score matching for a scalar score of the last input coordinate.

    ``v`` holds one Rademacher sign per (sample, slice); the loss is
    ``mean[v * (d net/d x_last) * v + net^2 / 2]`` averaged over slices.
    """
    n, W = x.shape
    n_slices = v.shape[1]
    total = 0.0
    acc = None
    for s in range(n_slices):
        u = np.zeros_like(x)
        u[:, -1] = v[:, s]

        def fn(y, yd, vs=v[:, s]):
            return (float(np.mean(vs * yd + 0.5 * y * y)), y / n, vs / n)

        loss, grads = loss_and_grads(model, x, fn, tangent=u)
        total += loss / n_slices
        acc = [g / n_slices for g in grads] if acc is None else [a + g / n_slices for a, g in zip(acc, grads)]
    return total, acc


@dataclass(frozen=True)
class TrainingConfig:
    objective: str = "DSM"
    learning_rate: float = 0.01
    batch_size: int = 256
    n_epochs: int = 20
    slice_count: int = 1
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.objective not in ("DSM", "SSM"):
            raise ValueError(f"objective must be DSM or SSM, got {self.objective!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.n_epochs < 0 or self.slice_count < 1:
            raise ValueError("batch_size and slice_count must be >= 1, n_epochs >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass(eq=False)
class Dataset:
    features: np.ndarray  # (N, W) raw records, most recent last
    targets: Optional[np.ndarray]
    regime: str = "ideal"
    channel_index: int = 0
    tau: float = 1.0
    dt: float = 1.0
    efficiency: float = 1.0
    input_scale: float = 1.0
    expectations: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def window(self) -> int:
        return self.features.shape[1]

    def output_scale(self, objective: str) -> float:
        """Output scale that makes a model report the innovation-score convention."""
        base = 1.0 / math.sqrt(self.tau * self.dt)
        return base if objective == "DSM" else -base

    @classmethod
    def from_samples(cls, x, targets=None, regime: str = "synthetic") -> "Dataset":
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        t = None if targets is None else np.asarray(targets, dtype=float)
        return cls(x, t, regime=regime)

    def export_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"f{i}" for i in range(self.window)] + ["target"])
            for i in range(len(self)):
                t = "" if self.targets is None else repr(float(self.targets[i]))
                w.writerow([repr(float(v)) for v in self.features[i]] + [t])
        return path


def record_windows(records: np.ndarray, window: int, end_offset: int = 0) -> np.ndarray:
    """Windows ``(M, window)`` ending at step ``k - end_offset``, zero-padded."""
    M = records.shape[0]
    padded = np.concatenate([np.zeros(window - 1 + end_offset), records])
    idx = np.arange(M)[:, None] + np.arange(window)[None, :]
    return padded[idx]


def build_dataset(
    trajs: Sequence[Trajectory],
    window: int,
    objective: str = "DSM",
    channel_index: int = 0,
    regime: str = "ideal",
    end_offset: int = 0,
) -> Dataset:
    """Windowed record features and (for DSM) innovation-score targets.

    ``end_offset`` makes each window end that many steps before the target
    step, matching what a controller with that latency can see.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if not trajs:
        raise ValueError("no trajectories")
    t0 = trajs[0]
    if window > t0.n_steps:
        raise ValueError(f"window {window} exceeds trajectory length {t0.n_steps}")
    for t in trajs:
        if t.config_hash != t0.config_hash:
            raise ValueError("trajectories come from different configurations")
    tau = float(t0.taus[channel_index])
    feats, targets, expv = [], [], []
    for t in trajs:
        r = t.records[channel_index]
        a = t.expectations[channel_index]
        feats.append(record_windows(r, window, end_offset))
        expv.append(a)
        if objective == "DSM":
            targets.append((r - a) / tau)
    return Dataset(
        features=np.concatenate(feats),
        targets=np.concatenate(targets) if objective == "DSM" else None,
        regime=regime,
        channel_index=channel_index,
        tau=tau,
        dt=t0.dt,
        efficiency=t0.efficiency,
        input_scale=math.sqrt(t0.dt / tau),
        expectations=np.concatenate(expv),
    )


def model_for(dataset: Dataset, objective: str, seed: int = 0, hidden: Sequence[int] = (32, 32)) -> ScoreModel:
    return ScoreModel.init(dataset.window, seed=seed, hidden=hidden, input_scale=dataset.input_scale,
                           output_scale=dataset.output_scale(objective) if dataset.regime != "synthetic" else 1.0)


def train(dataset: Dataset, model_init: ScoreModel, cfg: TrainingConfig) -> tuple[ScoreModel, np.ndarray]:
    """Mini-batch SGD with momentum; returns the trained copy and per-epoch loss."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if cfg.objective == "DSM" and dataset.targets is None:
        raise ValueError("DSM training needs targets")
    if dataset.window != model_init.input_width:
        raise ValueError(f"model input width {model_init.input_width} != dataset window {dataset.window}")
    model = model_init.copy()
    if cfg.n_epochs == 0:
        return model, np.empty(0)
    x_all = dataset.features * model.input_scale
    t_all = None if dataset.targets is None else dataset.targets / model.output_scale
    rng = stream(cfg.seed, 0x7A1)
    params = model.parameters()
    vel = [np.zeros_like(p) for p in params]
    n = len(dataset)
    curve = []
    for epoch in range(cfg.n_epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            x = x_all[idx]
            if cfg.objective == "DSM":
                loss, grads = dsm_loss_grads(model, x, t_all[idx])
            else:
                v = rng.choice([-1.0, 1.0], size=(idx.size, cfg.slice_count))
                loss, grads = ssm_loss_grads(model, x, v)
            if not math.isfinite(loss) or abs(loss) > DIVERGENCE_LOSS:
                raise TrainingDivergence(f"loss {loss!r} at epoch {epoch}, batch offset {start}; lower learning_rate")
            for p, g, vv in zip(params, grads, vel):
                vv *= cfg.momentum
                vv -= cfg.learning_rate * g
                p += vv
            losses.append(loss * idx.size)
        curve.append(sum(losses) / n)
    return model, np.array(curve)


def _innovation(trajs: Sequence[Trajectory], channel_index: int):
    tau = float(trajs[0].taus[channel_index])
    r = np.concatenate([t.records[channel_index] for t in trajs])
    a = np.concatenate([t.expectations[channel_index] for t in trajs])
    return r, a, tau


def evaluate_against_analytic(
    model: ScoreModel,
    trajs: Sequence[Trajectory],
    channel_index: int = 0,
    batch_size: int = 256,
    end_offset: int = 0,
) -> dict:
    """Compare model output with the innovation score and the closed forms.

    ``win_fraction`` is the share of consecutive evaluation batches in which
    the model's MSE to the innovation ``(r - <A>)/tau`` beats the uncorrected
    feedback formula ``r/tau``.
    """
    r, a, tau = _innovation(trajs, channel_index)
    eta = trajs[0].efficiency
    feats = np.concatenate([record_windows(t.records[channel_index], model.input_width, end_offset) for t in trajs])
    pred = model(feats)
    analytic = (r - a) / tau
    uncorrected = r / tau
    eta_corrected = eta * r / tau
    err_model = (pred - analytic) ** 2
    err_unc = (uncorrected - analytic) ** 2
    n_b = max(1, len(r) // batch_size)
    wins = [
        err_model[i * batch_size:(i + 1) * batch_size].mean() < err_unc[i * batch_size:(i + 1) * batch_size].mean()
        for i in range(n_b)
    ]
    denom = float(np.dot(analytic - analytic.mean(), analytic - analytic.mean()))
    slope = float(np.dot(pred - pred.mean(), analytic - analytic.mean()) / denom) if denom > 0 else float("nan")
    return {
        "n_samples": int(len(r)),
        "rms_analytic": float(np.sqrt(np.mean(analytic**2))),
        "rmse_vs_analytic": float(np.sqrt(err_model.mean())),
        "rmse_vs_eta_corrected": float(np.sqrt(np.mean((pred - eta_corrected) ** 2))),
        "rmse_uncorrected_vs_analytic": float(np.sqrt(err_unc.mean())),
        "calibration_slope": slope,
        "n_batches": n_b,
        "win_fraction": float(np.mean(wins)),
    }


def learned_pulse(cfg: TrajectoryConfig, model: ScoreModel, calibration: float = 1.0) -> PulseFn:
    """Pulse amplitude ``calibration * model(window)`` replacing ``r / tau``.

    The window ends ``delay_steps`` before the current step: the controller
    only sees records that have already arrived.
    """
    if len(cfg.channels) != 1:
        raise ValueError("learned feedback supports a single channel")
    W = model.input_width
    delay = cfg.delay_steps

    def pulse(k: int, rec: np.ndarray) -> np.ndarray:
        n = rec.shape[0]
        end = k - delay
        win = np.zeros((n, W))
        if end >= 0:
            lo = max(0, end - W + 1)
            seg = rec[:, 0, lo:end + 1]
            win[:, W - seg.shape[1]:] = seg
        return calibration * model(win)[:, None]

    return pulse


def feedback_with_learned_score(cfg: TrajectoryConfig, model: ScoreModel, calibration: float = 1.0) -> Trajectory:
    return simulate(cfg, pulse=learned_pulse(cfg, model, calibration))


def learned_feedback_lnR(
    cfg: TrajectoryConfig, model: ScoreModel, n_traj: int, base_seed: int, calibration: float = 1.0
) -> tuple[float, float]:
    """Ensemble mean and standard error of ln R under learned feedback."""
    pulse = learned_pulse(cfg, model, calibration)
    lnR = np.concatenate([batch_ln_R(b) for b in iter_ensemble(cfg, n_traj, base_seed, pulse=pulse)])
    return mean_and_stderr(lnR)
