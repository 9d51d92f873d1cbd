"""Experiment runner: ``pwass simulate | identify | report``.

An experiment config is a YAML mapping::

    model: gripen              # preset name or path to a model file
    noise_reading: variance    # optional override of the model file's switch
    data:
      source: simulate         # simulate | csv
      path: null               # trajectory CSV when source is csv
    simulation: {}             # overrides for the model file's simulation section
    em: {num_trajectories: 100, num_iterations: 60, variant: continuous}
    num_realizations: 10
    perturbation: 0.4
    workers: 1
    master_seed: 1
    out_dir: results

Realization ``k`` draws its data, initialization and EM streams from
``splitmix64(master_seed, k)`` so any realization can be rerun on its own.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .em import EmConfig, run_em
from .model import (ModelStructureError, PwassModel, Theta, eval_pwa, model_from_dict,
                    read_model_file, save_model, theta_of)
from .simulator import (SimConfig, Trajectory, perturb_theta, preset_path, simulate,
                        theta_offset)

log = logging.getLogger("pwass")

OUT_DIR_ENV = "PWASS_OUT_DIR"
EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
_MASK64 = (1 << 64) - 1


class ConfigError(Exception):
    pass


def splitmix64(master_seed: int, k: int) -> int:
    """Seed of realization ``k``: one splitmix64 output at state ``master + (k+1) * golden``."""
    z = (master_seed + (k + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def realization_streams(master_seed: int, k: int):
    """Independent (data, init, em) generators of realization ``k``."""
    ss = np.random.SeedSequence(splitmix64(master_seed, k))
    return [np.random.default_rng(s) for s in ss.spawn(3)]


@dataclass
class ExperimentConfig:
    model: str = "gripen"
    noise_reading: str | None = None
    data: dict = field(default_factory=lambda: {"source": "simulate", "path": None})
    simulation: dict = field(default_factory=dict)
    em: dict = field(default_factory=dict)
    num_realizations: int = 1
    perturbation: float = 0.4
    workers: int = 1
    master_seed: int = 0
    out_dir: str | None = None
    base_dir: str = "."

    def __post_init__(self):
        if self.num_realizations < 1:
            raise ConfigError("num_realizations must be >= 1")
        if self.data.get("source", "simulate") not in ("simulate", "csv"):
            raise ConfigError("data.source must be 'simulate' or 'csv'")
        if self.perturbation < 0:
            raise ConfigError("perturbation must be non-negative")

    def resolve(self, path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def model_path(self) -> Path:
        if self.model.endswith((".yaml", ".yml")) or os.sep in self.model:
            path = self.resolve(self.model)
        else:
            path = preset_path(self.model)
        if not path.exists():
            raise ConfigError(f"model file not found: {path}")
        return path

    def model_dict(self) -> dict:
        try:
            return read_model_file(self.model_path())
        except (OSError, yaml.YAMLError, ModelStructureError) as exc:
            raise ConfigError(str(exc)) from None

    def load_model(self) -> PwassModel:
        try:
            return model_from_dict(self.model_dict(), self.noise_reading)
        except ModelStructureError as exc:
            raise ConfigError(str(exc)) from None

    def sim_config(self) -> SimConfig:
        d = copy.deepcopy(self.model_dict().get("simulation") or {})
        over = copy.deepcopy(self.simulation)
        if "excitation" in over:
            d.setdefault("excitation", {}).update(over.pop("excitation"))
        d.update(over)
        try:
            return SimConfig.from_dict(d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"simulation settings: {exc}") from None

    def em_config(self) -> EmConfig:
        try:
            return EmConfig(**self.em)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"em settings: {exc}") from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


def load_experiment(path, **overrides) -> ExperimentConfig:
    try:
        with open(path) as fh:
            d = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    em_over = {k: overrides.pop(k) for k in ("num_iterations", "num_trajectories")
               if overrides.get(k) is not None}
    d.setdefault("em", {}).update(em_over)
    d.update({k: v for k, v in overrides.items() if v is not None})
    d["base_dir"] = str(Path(path).parent)
    try:
        cfg = ExperimentConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg.em_config()  # validate early
    return cfg


def _sha256(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _write_manifest(out: Path, command: str, cfg: ExperimentConfig, extra: dict) -> None:
    config = cfg.to_dict()
    manifest = {
        "command": command,
        "package_version": __version__,
        "config": config,
        "config_sha256": _sha256(config),
        "master_seed": cfg.master_seed,
        **extra,
    }
    (out / f"manifest_{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True)
                                                  + "\n")


def _write_run_inputs(out: Path, cfg: ExperimentConfig, model: PwassModel) -> None:
    # a self-contained copy of model and config so the outputs can be rerun from out/
    d = cfg.model_dict()
    save_model(model, out / "model.yaml", extra={"simulation": d.get("simulation")})
    conf = cfg.to_dict()
    conf.update(model="model.yaml", noise_reading=None, out_dir=".")
    if cfg.data.get("path"):
        conf["data"] = dict(cfg.data, path=str(cfg.resolve(cfg.data["path"]).resolve()))
    (out / "config.yaml").write_text(yaml.safe_dump(conf, sort_keys=True))


def _out_dir(cfg: ExperimentConfig, cli_out: str | None) -> Path:
    out = cli_out or cfg.out_dir or os.environ.get(OUT_DIR_ENV) or "pwass-out"
    path = cfg.resolve(out) if not cli_out else Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(cfg: ExperimentConfig, out_dir: str | None = None) -> Path:
    """Simulate realization 0 of the experiment and write its trajectory CSV."""
    out = _out_dir(cfg, out_dir)
    model = cfg.load_model()
    data_rng, _, _ = realization_streams(cfg.master_seed, 0)
    traj = simulate(model, theta_of(model), cfg.sim_config(), data_rng)
    path = out / "trajectory.csv"
    traj.to_csv(path)
    _write_run_inputs(out, cfg, model)
    _write_manifest(out, "simulate", cfg, {
        "realization_seed": splitmix64(cfg.master_seed, 0),
        "outputs": ["trajectory.csv"],
    })
    return path


def _run_realization(args) -> tuple[int, np.ndarray | None, list[float], str | None]:
    cfg, k, out = args
    try:
        model = cfg.load_model()
        em_cfg = cfg.em_config()
        theta_true = theta_of(model, em_cfg.variant)
        data_rng, init_rng, em_rng = realization_streams(cfg.master_seed, k)
        if cfg.data.get("source", "simulate") == "csv":
            traj = Trajectory.from_csv(cfg.resolve(cfg.data["path"]))
        else:
            traj = simulate(model, theta_of(model), cfg.sim_config(), data_rng)
        theta0 = perturb_theta(theta_true, cfg.perturbation, init_rng,
                               theta_offset(model, em_cfg.variant))
        trace = run_em(model, theta0, traj.measurements, traj.inputs, em_cfg, em_rng)
        trace.to_csv(Path(out) / f"trace_r{k:03d}.csv", include_timing=False)
        for note in trace.notes:
            log.warning("realization %d: %s", k, note)
        return k, trace.as_array(), trace.elapsed, None
    except Exception as exc:  # recorded per realization; the run continues
        return k, None, [], f"{type(exc).__name__}: {exc}"


def summary_params(model: PwassModel, variant: str) -> list[str]:
    names = Theta.unpack(np.zeros(Theta.size(model.n_regions, model.n_x, variant)),
                         model.n_regions, model.n_x, variant).names()
    names += [f"dPhi{c + 1}" for c in range(model.n_x)]
    names += [f"f_l{i + 1}" for i in range(model.n_regions + 1)]
    return names


def derived_values(model: PwassModel, vec: np.ndarray, variant: str) -> np.ndarray:
    """Flat theta followed by ``Phi - phi_offset`` and the knot values f(l_i)."""
    th = Theta.unpack(vec, model.n_regions, model.n_x, variant)
    knots = eval_pwa(model.boundaries, th.pwa(model.boundaries))
    return np.concatenate([vec, th.phi_row - model.phi_offset, knots])


def write_summary(path: Path, model: PwassModel, variant: str,
                  traces: list[np.ndarray]) -> None:
    """Per-iteration mean/min/max of every parameter across realizations."""
    names = summary_params(model, variant)
    stacked = np.stack([np.vstack([derived_values(model, v, variant) for v in tr])
                        for tr in traces])  # (R, K+1, P)
    mean, lo, hi = stacked.mean(axis=0), stacked.min(axis=0), stacked.max(axis=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration"] + [f"{n}_{s}" for n in names for s in ("mean", "min", "max")])
        for k in range(mean.shape[0]):
            row = [str(k)]
            for p in range(len(names)):
                row += [repr(float(mean[k, p])), repr(float(lo[k, p])), repr(float(hi[k, p]))]
            w.writerow(row)


def cmd_identify(cfg: ExperimentConfig, out_dir: str | None = None) -> int:
    """Run EM on every realization; write traces, a summary and a manifest."""
    out = _out_dir(cfg, out_dir)
    model = cfg.load_model()
    em_cfg = cfg.em_config()
    cfg.sim_config()
    if cfg.data.get("source") == "csv" and not cfg.resolve(cfg.data.get("path") or "").is_file():
        raise ConfigError(f"data file not found: {cfg.data.get('path')}")
    jobs = [(cfg, k, str(out)) for k in range(cfg.num_realizations)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_realization, jobs))
    else:
        results = [_run_realization(j) for j in jobs]
    results.sort(key=lambda r: r[0])
    failures = {k: err for k, _, _, err in results if err is not None}
    traces = [tr for _, tr, _, err in results if err is None]
    for k, err in failures.items():
        log.error("realization %d failed: %s", k, err)
    if traces:
        write_summary(out / "summary.csv", model, em_cfg.variant, traces)
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["realization", "iteration", "elapsed_s"])
        for k, _, elapsed, _ in results:
            w.writerows([k, i, f"{dt:.6f}"] for i, dt in enumerate(elapsed))
    _write_run_inputs(out, cfg, model)
    _write_manifest(out, "identify", cfg, {
        "realization_seeds": [splitmix64(cfg.master_seed, k)
                              for k in range(cfg.num_realizations)],
        "failed_realizations": {str(k): v for k, v in failures.items()},
        "outputs": ["summary.csv"] + [f"trace_r{k:03d}.csv" for k, tr, _, err in results
                                      if err is None],
    })
    return EXIT_FAILED if failures else EXIT_OK


class SummaryParseError(ValueError):
    pass


def read_summary(path) -> tuple[list[str], list[dict[str, float]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SummaryParseError(f"{path}:1: empty summary") from None
        if not header or header[0] != "iteration":
            raise SummaryParseError(f"{path}:1: first column must be 'iteration'")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SummaryParseError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append({h: float(v) for h, v in zip(header, row)})
            except ValueError as exc:
                raise SummaryParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise SummaryParseError(f"{path}:2: summary has no iterations")
    return header, rows


def cmd_report(summary_path, model_path=None, out_path=None,
               variant: str | None = None) -> Path:
    """Final-iteration errors of the across-realization mean against the truth."""
    summary_path = Path(summary_path)
    model_path = Path(model_path) if model_path else summary_path.parent / "model.yaml"
    model = model_from_dict(read_model_file(model_path))
    header, rows = read_summary(summary_path)
    if variant is None:
        variant = "continuous" if "b1_mean" in header and "b2_mean" not in header \
            else "unconstrained"
    P = Theta.size(model.n_regions, model.n_x, variant)
    names = summary_params(model, variant)
    theta_cols = [f"{n}_mean" for n in names[:P]]
    missing = [c for c in theta_cols if c not in header]
    if missing:
        raise SummaryParseError(f"{summary_path}:1: missing column(s) {', '.join(missing)}")
    final = rows[-1]
    est_vec = np.array([final[c] for c in theta_cols])
    est = derived_values(model, est_vec, variant)
    true = derived_values(model, theta_of(model, variant).pack(), variant)
    out_path = Path(out_path) if out_path else summary_path.parent / "metrics.csv"
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "true", "estimate", "abs_error", "rel_error"])
        for n, t, e in zip(names, true, est):
            err = abs(e - t)
            rel = err / abs(t) if t != 0 else float("nan")
            w.writerow([n, repr(float(t)), repr(float(e)), repr(float(err)), repr(float(rel))])
    return out_path


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pwass", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment YAML")
        sp.add_argument("--seed", type=int, help="master seed")
        sp.add_argument("--out", help=f"output directory (default: config, ${OUT_DIR_ENV})")

    sp = sub.add_parser("simulate", help="simulate one trajectory")
    common(sp)
    sp = sub.add_parser("identify", help="run EM over many realizations")
    common(sp)
    sp.add_argument("--realizations", type=int)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--trajectories", type=int)
    sp.add_argument("--workers", type=int)
    sp = sub.add_parser("report", help="final-iteration errors from a summary CSV")
    sp.add_argument("summary")
    sp.add_argument("--model", help="model file with the true parameters "
                                    "(default: model.yaml next to the summary)")
    sp.add_argument("--out", help="metrics CSV (default: metrics.csv next to the summary)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            path = cmd_report(args.summary, args.model, args.out)
            with open(path) as fh:
                sys.stdout.write(fh.read())
            return EXIT_OK
        overrides = {"master_seed": args.seed}
        if args.command == "identify":
            overrides.update(num_realizations=args.realizations, workers=args.workers,
                             num_iterations=args.iterations,
                             num_trajectories=args.trajectories)
        cfg = load_experiment(args.config, **overrides)
        if args.command == "simulate":
            print(cmd_simulate(cfg, args.out))
            return EXIT_OK
        t0 = time.perf_counter()
        code = cmd_identify(cfg, args.out)
        log.info("identify finished in %.1f s", time.perf_counter() - t0)
        return code
    except (ConfigError, ModelStructureError, SummaryParseError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
