"""Command-line entry points: ``partition``, ``simulate``, ``run`` and ``score``.

Every command reads one TOML experiment file::

    scenario = "advdiff"          # spatial | advdiff | advdiff_large | lorenz
    family = "gaussian"           # gaussian | bernoulli | poisson | gamma
    seed = 1
    replicates = 2
    T = 20
    obs_fraction = 0.1
    methods = ["hv", "lr", "dl"]
    preset = "hv"                 # pattern written by ``partition``

    [model]                       # scenario parameters (grid, alpha, beta, tau2, ...)
    grid = 34

    [hierarchy]                   # optional; scenario default otherwise
    M = 7
    J = 2
    set_sizes = [5, 5, 5, 5, 6, 6, 6]
    leaf_cap = 4

    [lr]
    N = 41                        # optional; largest hierarchical set otherwise

    [output]
    dir = "out"
    trajectories = false
    factors = false

Outputs go to the output directory together with ``manifest.txt``, which lists
every file with its SHA-256 hash and the seeds used.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import artifacts
from .evaluation import (
    METHODS,
    SCENARIOS,
    ScenarioConfig,
    ScoreReport,
    build_model,
    build_samplers,
    compare_methods,
    method_setups,
    replicate_seeds,
    simulate,
    write_rows,
)
from .hierarchy import HierarchyConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"scenario", "family", "seed", "replicates", "T", "obs_fraction", "methods", "preset",
             "model", "hierarchy", "lr", "output", "partition"}
_MODEL_KEYS = {f.name for f in fields(ScenarioConfig)} - {"scenario", "family", "T", "obs_fraction",
                                                          "hierarchy", "lr_N"}
_GEOMETRIES = ("grid", "circle", "line")


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig
    seed: int
    replicates: int = 1
    methods: tuple[str, ...] = METHODS
    preset: str = "hv"
    out_dir: str = "out"
    trajectories: bool = False
    factors: bool = False
    geometry: str | None = None
    geometry_n: int | None = None


def _section(raw, name, allowed=None):
    sec = raw.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    if allowed is not None:
        extra = set(sec) - set(allowed)
        if extra:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
    return sec


def parse_config(raw: dict) -> ExperimentConfig:
    extra = set(raw) - _TOP_KEYS
    if extra:
        raise ConfigError(f"unknown keys: {sorted(extra)}")
    if "scenario" not in raw:
        raise ConfigError("scenario is required")
    if raw["scenario"] not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {list(SCENARIOS)}")
    if "seed" not in raw:
        raise ConfigError("seed is required")
    model = _section(raw, "model", _MODEL_KEYS)
    hier = _section(raw, "hierarchy", {"M", "J", "set_sizes", "leaf_cap"})
    lr = _section(raw, "lr", {"N"})
    out = _section(raw, "output", {"dir", "trajectories", "factors"})
    part = _section(raw, "partition", {"geometry", "n"})
    try:
        hierarchy = None
        if hier:
            hierarchy = HierarchyConfig(int(hier["M"]), int(hier.get("J", 2)),
                                        tuple(hier.get("set_sizes", ())), int(hier.get("leaf_cap", 1)))
        scen = ScenarioConfig.create(raw["scenario"], family=raw.get("family", "gaussian"), T=raw.get("T"),
                                     obs_fraction=raw.get("obs_fraction"), hierarchy=hierarchy,
                                     lr_N=lr.get("N"), **model)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    methods = tuple(raw.get("methods", METHODS))
    if not methods or set(methods) - set(METHODS):
        raise ConfigError(f"methods must be a nonempty subset of {list(METHODS)}")
    preset = raw.get("preset", "hv")
    if preset not in METHODS:
        raise ConfigError(f"preset must be one of {list(METHODS)}")
    replicates = raw.get("replicates", 1)
    if not isinstance(replicates, int) or replicates < 0:
        raise ConfigError("replicates must be a nonnegative integer")
    seed = raw["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    geometry = part.get("geometry")
    if geometry is not None and geometry not in _GEOMETRIES:
        raise ConfigError(f"partition.geometry must be one of {list(_GEOMETRIES)}")
    if geometry is not None and "n" not in part:
        raise ConfigError("partition.n is required with partition.geometry")
    return ExperimentConfig(scen, seed, replicates, methods, preset, out.get("dir", "out"),
                            bool(out.get("trajectories", False)), bool(out.get("factors", False)),
                            geometry, part.get("n"))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return parse_config(raw)


def _geometry_locations(cfg: ExperimentConfig):
    n = int(cfg.geometry_n)
    if cfg.geometry == "line":
        return ((np.arange(n) + 0.5) / n)[:, None]
    if cfg.geometry == "circle":
        from .models import circle_locations
        return circle_locations(n)
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ConfigError("grid geometry needs a square n")
    from .models import grid_locations
    return grid_locations(g)


def _manifest_header(command, cfg: ExperimentConfig) -> list[str]:
    lines = [f"# hvfilter {command}", f"seed {cfg.seed}"]
    for k, s in enumerate(replicate_seeds(cfg.seed, cfg.replicates)):
        lines.append(f"replicate {k} entropy={s.entropy} spawn_key={list(s.spawn_key)}")
    return lines


def cmd_partition(cfg: ExperimentConfig) -> list[str]:
    locs = _geometry_locations(cfg) if cfg.geometry else None
    setup = method_setups(cfg.scenario, (cfg.preset,), locs)[cfg.preset]
    artifacts.write_pattern(os.path.join(cfg.out_dir, "pattern.mtx"), setup.pattern)
    with open(os.path.join(cfg.out_dir, "hierarchy.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"preset = {cfg.preset}\nmax conditioning set = {setup.N}\nnnz = {setup.pattern.nnz}\n")
        fh.write(setup.hierarchy.summary())
    write_rows(os.path.join(cfg.out_dir, "order.csv"), ("position", "index"),
               [dict(position=k, index=int(i)) for k, i in enumerate(setup.order)])
    return ["pattern.mtx", "hierarchy.txt", "order.csv"]


def _stream_rows(sim, replicate):
    truth = [dict(replicate=replicate, t=t, index=i, value=float(v))
             for t, x in enumerate(sim.truth) for i, v in enumerate(x)]
    obs = [dict(replicate=replicate, t=b.t, index=int(i), value=float(v))
           for b in sim.observations for i, v in zip(b.indices, b.values)]
    return truth, obs


def cmd_simulate(cfg: ExperimentConfig) -> list[str]:
    truth_rows, obs_rows = [], []
    if cfg.replicates:
        model = build_model(cfg.scenario)
        samplers = build_samplers(cfg.scenario, model)
        for k, seq in enumerate(replicate_seeds(cfg.seed, cfg.replicates)):
            sim = simulate(cfg.scenario, model, samplers, np.random.default_rng(seq))
            tr, ob = _stream_rows(sim, k)
            truth_rows += tr
            obs_rows += ob
    cols = ("replicate", "t", "index", "value")
    write_rows(os.path.join(cfg.out_dir, "truth.csv"), cols, truth_rows)
    write_rows(os.path.join(cfg.out_dir, "observations.csv"), cols, obs_rows)
    return ["truth.csv", "observations.csv"]


_SUMMARY_COLUMNS = ("scenario", "family", "method", "N", "replicates", "log_score", "dLS", "rmspe", "rrmspe")


def cmd_run(cfg: ExperimentConfig, workers: int = 1) -> tuple[list[str], ScoreReport]:
    runs = {}

    def on_run(rep, name, run):
        if cfg.trajectories or cfg.factors:
            runs[(rep, name)] = run

    report = compare_methods(cfg.scenario, cfg.methods, cfg.replicates, cfg.seed, workers=workers,
                             on_run=on_run)
    files = ["scores.csv", "summary.csv", "errors.csv"]
    report.to_csv(os.path.join(cfg.out_dir, "scores.csv"))
    write_rows(os.path.join(cfg.out_dir, "summary.csv"), _SUMMARY_COLUMNS, report.summary())
    write_rows(os.path.join(cfg.out_dir, "errors.csv"), ("replicate", "method", "error", "message"),
               report.errors)
    if cfg.trajectories:
        rows = []
        for (rep, name) in sorted(runs):
            run = runs[(rep, name)]
            rows += artifacts.trajectory_rows(run.states, name, rep, run.setup.order)
        write_rows(os.path.join(cfg.out_dir, "trajectories.csv"),
                   ("method", "replicate", "t", "index", "mean", "sd"), rows)
        files.append("trajectories.csv")
    if cfg.factors:
        os.makedirs(os.path.join(cfg.out_dir, "factors"), exist_ok=True)
        for (rep, name) in sorted(runs):
            final = runs[(rep, name)].states[-1]
            base = f"factors/{name}_r{rep}_t{final.t}"
            artifacts.write_factor(os.path.join(cfg.out_dir, base + "_L.mtx"), final.l)
            artifacts.write_factor(os.path.join(cfg.out_dir, base + "_U.mtx"), final.u)
            files += [base + "_L.mtx", base + "_U.mtx"]
    return files, report


def cmd_score(cfg: ExperimentConfig, scores_path: str | None = None) -> tuple[list[str], ScoreReport]:
    path = scores_path or os.path.join(cfg.out_dir, "scores.csv")
    try:
        report = ScoreReport.from_csv(path)
    except OSError as exc:
        raise ConfigError(f"cannot read scores: {exc}") from exc
    write_rows(os.path.join(cfg.out_dir, "summary.csv"), _SUMMARY_COLUMNS, report.summary())
    rows = []
    for m in report.methods:
        for metric in ("log_score", "dLS", "rmspe", "rrmspe"):
            for t, v in report.per_time(metric, m).items():
                rows.append(dict(method=m, metric=metric, t=t, value=v))
    write_rows(os.path.join(cfg.out_dir, "per_time.csv"), ("method", "metric", "t", "value"), rows)
    return ["summary.csv", "per_time.csv"], report


def _workers(arg) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("HVFILTER_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("HVFILTER_WORKERS must be an integer") from None
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hvfilter", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("partition", "build a hierarchy and write its pattern"),
                            ("simulate", "simulate truth and observation streams"),
                            ("run", "simulate, filter and score every method"),
                            ("score", "aggregate a score table")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML experiment file")
        p.add_argument("--seed", type=int, help="root seed (overrides the config)")
        p.add_argument("--workers", type=int, help="replicates run concurrently (default HVFILTER_WORKERS or 1)")
        p.add_argument("--out", help="output directory (overrides the config)")
        if name == "score":
            p.add_argument("--scores", help="score table to read (default OUT/scores.csv)")
    return parser


def _fail(message, code, out_dir=None):
    record = {"status": "error", "message": message}
    print(json.dumps(record), file=sys.stderr)
    if out_dir and os.path.isdir(out_dir):
        with open(os.path.join(out_dir, "error.json"), "w", encoding="utf-8") as fh:
            json.dump(record, fh)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be nonnegative")
            cfg.seed = args.seed
        if args.out:
            cfg.out_dir = args.out
        workers = _workers(args.workers)
    except ConfigError as exc:
        return _fail(str(exc), 2)
    os.makedirs(cfg.out_dir, exist_ok=True)
    status = 0
    try:
        if args.command == "partition":
            files = cmd_partition(cfg)
        elif args.command == "simulate":
            files = cmd_simulate(cfg)
        elif args.command == "run":
            files, report = cmd_run(cfg, workers)
            status = 1 if report.errors else 0
        else:
            files, report = cmd_score(cfg, args.scores)
    except ConfigError as exc:
        return _fail(str(exc), 2, cfg.out_dir)
    except Exception as exc:
        return _fail(f"{type(exc).__name__}: {exc}", 1, cfg.out_dir)
    artifacts.write_manifest(cfg.out_dir, files, _manifest_header(args.command, cfg))
    if args.command in ("run", "score"):
        for row in report.summary():
            print(" ".join(f"{k}={_fmt(v)}" for k, v in row.items()))
    return status


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


if __name__ == "__main__":
    sys.exit(main())
