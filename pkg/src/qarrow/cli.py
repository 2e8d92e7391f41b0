"""``qarrow`` command line: one experiment per invocation.

    qarrow <experiment> [--config FILE] [--set key=value ...]
    qarrow run --config FILE [--set key=value ...]
    qarrow validate --config FILE

Exit status: 0 success, 1 invalid configuration, 2 numerical failure,
3 a certificate or check did not pass.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import subprocess
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .operators import PureState
from .path_measure import (
    arrow_scan,
    girsanov_log_density,
    importance_consistency,
)
from .rng import derive_seed, stream
from .score_analysis import (
    FRECHET_TOL,
    KAHLER_TOL,
    flow_descent_check,
    frechet_sweep,
    kahler_identity_check,
)
from .score_learning import (
    ScoreModel,
    TrainingDivergence,
    build_dataset,
    evaluate_against_analytic,
    model_for,
    train,
)
from .trajectory import IntegrationError, iter_ensemble, simulate_ensemble

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """``manifest.json`` written when a run starts and finalized when it ends."""

    def __init__(self, output_dir: Path, raw: dict, seed: int):
        self.dir = output_dir
        self.path = output_dir / "manifest.json"
        self.data = {
            "config": dict(sorted(raw.items())),
            "version": version_string(),
            "seed": seed,
            "started": _now(),
            "finished": None,
            "status": "running",
            "outputs": {},
            "warnings": [],
        }
        self.write()

    def write(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.data, indent=2))

    def finalize(self, outputs, exit_code: int, warning_msgs, error: str | None = None) -> None:
        self.data["outputs"] = {
            str(Path(p).relative_to(self.dir)): sha256_file(Path(p)) for p in sorted(set(map(str, outputs)))
        }
        self.data["warnings"] = list(warning_msgs)
        self.data["finished"] = _now()
        self.data["exit_code"] = exit_code
        self.data["status"] = "ok" if exit_code == EXIT_OK else ("check_failed" if exit_code == EXIT_CHECK else "error")
        if error:
            self.data["error"] = error
        self.write()


def verify_manifest(path) -> list[str]:
    """Files named in a manifest that are missing or fail their checksum."""
    path = Path(path)
    data = json.loads(path.read_text())
    bad = []
    for rel, digest in data["outputs"].items():
        f = path.parent / rel
        if not f.exists() or sha256_file(f) != digest:
            bad.append(rel)
    return bad


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path


def _workers(ec) -> int | None:
    env = os.environ.get("QARROW_THREADS")
    if env:
        return int(env)
    return ec.workers or None


# -- experiments ----------------------------------------------------------
# Each returns (list of output paths, passed flag).


def exp_simulate(ec, out: Path):
    cfg = ec.physics
    summary = out / "ensemble.csv"
    exported = []
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory", "seed", "ln_R", "log_dPF_dPW"] + [f"final_<{ch.observable.label}>" for ch in cfg.channels])
        idx = 0
        for batch in iter_ensemble(cfg, ec.n_traj, ec.seed, workers=_workers(ec)):
            for i in range(len(batch)):
                t = batch.trajectory(i)
                pd = girsanov_log_density(t)
                finals = [
                    np.trace(ch.observable.mat @ t.final_state).real for ch in cfg.channels
                ]
                w.writerow([idx, int(batch.seeds[i]), repr(pd.ln_R), repr(pd.log_dPF_dPW)] + [repr(float(f)) for f in finals])
                if idx < ec.export_trajectories:
                    exported.extend(t.export(out, cfg, prefix=f"trajectory_{idx:05d}"))
                idx += 1
    return [summary, *exported], True


def _scan(ec, out: Path, stem: str):
    scan = arrow_scan(ec.physics, ec.X_grid, ec.n_traj, ec.seed, bootstrap=ec.bootstrap_count, workers=_workers(ec))
    return scan, scan.export(out, stem)


def exp_arrow_scan(ec, out: Path):
    _, files = _scan(ec, out, "arrow_scan")
    return files, True


def exp_reversal_demo(ec, out: Path):
    scan, files = _scan(ec, out, "reversal_demo")
    z = scan.zero_crossing_estimate
    ok = z is not None and z < -2.0
    print(f"zero crossing: {z if z is not None else 'none found'} ({'below' if ok else 'not below'} X = -2)")
    return files, ok


def exp_girsanov_check(ec, out: Path):
    cfg = ec.physics
    norm = importance_consistency(cfg, lambda t: 1.0, ec.n_traj, ec.seed, workers=_workers(ec))
    arrow = importance_consistency(
        cfg, lambda t: girsanov_log_density(t).ln_R, ec.n_traj, derive_seed(ec.seed, 7), workers=_workers(ec)
    )
    norm_ok = abs(norm.reweighted - 1.0) <= 3 * norm.reweighted_stderr
    arrow_ok = abs(arrow.direct - arrow.reweighted) <= 3 * arrow.combined_stderr
    report = {
        "normalization": {**norm.__dict__, "passed": bool(norm_ok)},
        "ln_R": {**arrow.__dict__, "combined_stderr": arrow.combined_stderr, "passed": bool(arrow_ok)},
    }
    return [_write_json(out / "girsanov_check.json", report)], norm_ok and arrow_ok


def exp_frechet_cert(ec, out: Path):
    rng = stream(ec.seed, 1)
    checks = []
    for nq in (1, 2, 3):
        worst = frechet_sweep(nq, ec.n_samples, rng)
        checks.append({"dim": 2**nq, "samples": ec.n_samples, "max_defect": worst, "tolerance": FRECHET_TOL,
                       "passed": worst <= FRECHET_TOL})
    ok = all(c["passed"] for c in checks)
    return [_write_json(out / "frechet_cert.json", {"checks": checks, "passed": ok})], ok


def exp_kahler_cert(ec, out: Path):
    rng = stream(ec.seed, 2)
    checks = []
    for d in (2, 3, 4):
        worst = kahler_identity_check(PureState.random(d, rng), ec.n_samples, rng)
        checks.append({"dim": d, "samples": ec.n_samples, "max_defect": worst, "tolerance": KAHLER_TOL,
                       "passed": worst <= KAHLER_TOL})
    ok = all(c["passed"] for c in checks)
    return [_write_json(out / "kahler_cert.json", {"checks": checks, "passed": ok})], ok


def exp_flows_cert(ec, out: Path):
    rep = flow_descent_check(ec.n_samples, stream(ec.seed, 3))
    return [_write_json(out / "flows_cert.json", rep)], bool(rep["passed"])


def _evaluate(ec, model, out: Path):
    held_out = simulate_ensemble(ec.physics, ec.n_eval, derive_seed(ec.seed, 1), store_states=False,
                                 workers=_workers(ec))
    return _write_json(out / "evaluation.json", evaluate_against_analytic(model, held_out))


def exp_train_score(ec, out: Path):
    trajs = simulate_ensemble(ec.physics, ec.n_train, derive_seed(ec.seed, 0), store_states=False,
                              workers=_workers(ec))
    objective = ec.learning.objective
    ds = build_dataset(trajs, ec.window, objective)
    model, curve = train(ds, model_for(ds, objective, seed=ec.learning.seed), ec.learning)
    model_path = out / "model.json"
    model_path.write_text(model.to_json())
    loss_path = out / "loss_curve.csv"
    with open(loss_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(curve):
            w.writerow([i, repr(float(v))])
    return [model_path, loss_path, _evaluate(ec, model, out)], True


def exp_eval_score(ec, out: Path):
    if not ec.model_path:
        raise cfgmod.ConfigError("eval-score needs a trained model file", key="learning.model")
    try:
        model = ScoreModel.from_json(Path(ec.model_path).read_text())
    except OSError as exc:
        raise cfgmod.ConfigError(f"cannot read model: {exc}", key="learning.model") from None
    if model.input_width != ec.window:
        raise cfgmod.ConfigError(f"model window {model.input_width} != learning.window {ec.window}",
                                 key="learning.window")
    return [_evaluate(ec, model, out)], True


EXPERIMENT_FUNCS = {
    "simulate": exp_simulate,
    "arrow-scan": exp_arrow_scan,
    "girsanov-check": exp_girsanov_check,
    "frechet-cert": exp_frechet_cert,
    "kahler-cert": exp_kahler_cert,
    "flows-cert": exp_flows_cert,
    "train-score": exp_train_score,
    "eval-score": exp_eval_score,
    "reversal-demo": exp_reversal_demo,
}


def validate(config_file, overrides=()) -> list:
    """Diagnostics for a config file without running anything.

    Parse errors come back as a single error diagnostic carrying line and
    column.
    """
    try:
        raw = cfgmod.load(config_file, overrides)
    except cfgmod.ConfigError as exc:
        return [cfgmod.Diagnostic("error", "config", str(exc))]
    return cfgmod.validate_raw(raw)


def run(config_file=None, overrides=(), experiment: str | None = None) -> int:
    try:
        raw = cfgmod.load(config_file, overrides, experiment)
        ec = cfgmod.build(raw)
    except (cfgmod.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = ec.output_dir
    manifest = RunManifest(out, raw, ec.seed)
    files, code, err = [], EXIT_OK, None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            files, passed = EXPERIMENT_FUNCS[ec.experiment](ec, out)
            code = EXIT_OK if passed else EXIT_CHECK
        except (IntegrationError, TrainingDivergence, FloatingPointError, np.linalg.LinAlgError) as exc:
            code, err = EXIT_NUMERIC, f"{type(exc).__name__}: {exc}"
        except (cfgmod.ConfigError, ValueError) as exc:
            code, err = EXIT_CONFIG, f"{type(exc).__name__}: {exc}"
    msgs = [f"{w.category.__name__}: {w.message}" for w in caught]
    manifest.finalize(files, code, msgs, err)
    for m in msgs:
        print(f"warning: {m}", file=sys.stderr)
    if err:
        print(f"error: {err}", file=sys.stderr)
    print(f"{ec.experiment}: {manifest.data['status']} -> {out}")
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qarrow", description="Arrow-of-time and score experiments for monitored qubits")
    p.add_argument("command", choices=["run", "validate", *cfgmod.EXPERIMENTS], help="experiment to run, or run/validate")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        if args.config is None:
            print("error: validate needs --config", file=sys.stderr)
            return EXIT_CONFIG
        diags = validate(args.config, args.overrides)
        for d in diags:
            print(d)
        return EXIT_CONFIG if any(d.level == "error" for d in diags) else EXIT_OK
    if args.command == "run":
        if args.config is None:
            print("error: run needs --config", file=sys.stderr)
            return EXIT_CONFIG
        return run(args.config, args.overrides)
    return run(args.config, args.overrides, experiment=args.command)


if __name__ == "__main__":
    sys.exit(main())
