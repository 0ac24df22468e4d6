"""Scores and head-to-head comparisons of hierarchical, low-rank and dense patterns.

A scenario fixes locations, a state-space model and an observation family.
Each replicate draws one dataset from a seeded stream and runs every method
on the same data, each in the variable ordering its hierarchy prescribes.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .filters import FilterState, init_state, run_filter
from .hierarchy import HierarchyConfig, HierarchyError, dl_config, hierarchy_pattern, lr_config
from .inference import hv_prior
from .likelihoods import hvl_from_prior, make_family
from .models import (
    AdvDiffConfig,
    DenseGaussianSampler,
    ExpCovariance,
    ExpKernel,
    LinearEvolution,
    Lorenz05Config,
    StateSpaceModel,
    advection_diffusion_matrix,
    circle_locations,
    grid_locations,
    lorenz05_evolution,
    lorenz05_moments,
    simulate_field,
    simulate_ssm,
)
from .sparse import DenseOracle, factor_logpdf

SCENARIOS = ("spatial", "advdiff", "advdiff_large", "lorenz")
METHODS = ("hv", "lr", "dl")
SCORE_COLUMNS = ("scenario", "family", "method", "N", "t", "replicate", "log_score", "dLS", "rmspe", "rrmspe")

# 7 levels of 5,5,5,5,6,6,6 knots; the leaf caps are the smallest feasible on each grid
_SEVEN_LEVELS = (5, 5, 5, 5, 6, 6, 6)

_DEFAULTS = {
    "spatial": dict(grid=34, T=0, obs_fraction=1.0, tau2=0.2,
                    hierarchy=HierarchyConfig(7, 2, _SEVEN_LEVELS, 4)),
    "advdiff": dict(grid=34, T=20, obs_fraction=0.1, tau2=0.25, alpha=4e-5, beta=1e-2,
                    hierarchy=HierarchyConfig(7, 2, _SEVEN_LEVELS, 4)),
    "advdiff_large": dict(grid=100, T=20, obs_fraction=0.1, tau2=0.25, alpha=1e-7, beta=1e-3,
                          hierarchy=HierarchyConfig(14, 2, (3,) * 14, 2)),
    "lorenz": dict(n=960, T=20, obs_fraction=0.1, tau2=0.2, q_variance=0.2,
                   hierarchy=HierarchyConfig(7, 2, _SEVEN_LEVELS, 2)),
}


# --- scores ---


def log_score(truth, state) -> float:
    """Negative log-density of ``truth`` under ``N(state.mean, (U U^T)^{-1})``; lower is better."""
    val = -factor_logpdf(truth, state.mean, state.u)
    if not math.isfinite(val):
        raise ValueError("nonfinite log score")
    return val


def rmspe(truth, mean) -> float:
    truth = np.asarray(truth, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if truth.shape != mean.shape:
        raise ValueError("truth and mean differ in shape")
    return float(np.sqrt(np.mean((truth - mean) ** 2)))


def rrmspe(method_rmspe: float, dl_rmspe: float) -> float:
    if dl_rmspe == 0:
        raise ZeroDivisionError("reference RMSPE is zero")
    return method_rmspe / dl_rmspe


# --- scenarios ---


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    family: str = "gaussian"
    tau2: float = 0.2
    shape: float = 2.0
    T: int = 20
    obs_fraction: float = 0.1
    grid: int = 34
    n: int = 960
    kernel_variance: float = 1.0
    kernel_range: float = 0.15
    alpha: float = 4e-5
    beta: float = 1e-2
    q_variance: float = 1.0
    K: int = 32
    F: float = 10.0
    dt: float = 0.005
    substeps: int = 5
    b: float = 0.2
    spinup_steps: int = 10_000
    hierarchy: HierarchyConfig | None = None
    lr_N: int | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        make_family(self.family, self.tau2, self.shape)
        if not 0 <= self.obs_fraction <= 1:
            raise ValueError("obs_fraction must lie in [0, 1]")
        if self.T < 0:
            raise ValueError("T must be nonnegative")

    @classmethod
    def create(cls, scenario: str, **overrides) -> "ScenarioConfig":
        """Configuration with the scenario's defaults, updated by ``overrides``."""
        if scenario not in _DEFAULTS:
            raise ValueError(f"unknown scenario {scenario!r}")
        kw = dict(_DEFAULTS[scenario])
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(scenario, **kw)

    @property
    def families(self):
        return make_family(self.family, self.tau2, self.shape)


def scenario_locations(cfg: ScenarioConfig) -> np.ndarray:
    if cfg.scenario == "lorenz":
        return circle_locations(cfg.n)
    return grid_locations(cfg.grid)


def build_model(cfg: ScenarioConfig) -> StateSpaceModel:
    locs = scenario_locations(cfg)
    n = locs.shape[0]
    kernel = ExpCovariance(locs, ExpKernel(cfg.kernel_variance, cfg.kernel_range))
    if cfg.scenario == "spatial":
        return StateSpaceModel(locs, np.zeros(n), kernel)
    if cfg.scenario in ("advdiff", "advdiff_large"):
        q = ExpCovariance(locs, ExpKernel(cfg.q_variance, cfg.kernel_range))
        e = advection_diffusion_matrix(AdvDiffConfig(cfg.grid, cfg.alpha, cfg.beta))
        return StateSpaceModel(locs, np.zeros(n), kernel, LinearEvolution(e, q))
    lcfg = Lorenz05Config(cfg.n, cfg.K, cfg.F, cfg.dt, cfg.substeps, cfg.b)
    q_kernel = ExpKernel(cfg.q_variance, cfg.kernel_range)
    mu0, sigma0 = lorenz05_moments(lcfg, q_kernel, steps=cfg.spinup_steps)
    q = ExpCovariance(locs, q_kernel)
    return StateSpaceModel(locs, np.array(mu0), DenseOracle(sigma0), lorenz05_evolution(lcfg, q))


def _fit_hierarchy(locs, config: HierarchyConfig):
    # grow the leaf cap until the partition is deep enough for these locations
    cap = config.leaf_cap
    while True:
        try:
            return hierarchy_pattern(locs, replace(config, leaf_cap=cap))
        except HierarchyError:
            if cap >= locs.shape[0]:
                raise
            cap += 1


@dataclass
class MethodSetup:
    method: str
    hierarchy: object
    pattern: object

    @property
    def N(self) -> int:
        """Largest conditioning-set size in the pattern."""
        return int(self.pattern.row_lengths().max()) - 1

    @property
    def order(self):
        return self.hierarchy.global_order

    @property
    def position(self):
        return self.hierarchy.position


def method_setups(cfg: ScenarioConfig, methods=METHODS, locations=None) -> dict[str, MethodSetup]:
    """Hierarchies and patterns for each method.

    The low-rank pattern gets as many knots as the largest conditioning set
    in the hierarchical pattern unless ``cfg.lr_N`` is given.
    """
    locs = scenario_locations(cfg) if locations is None else locations
    n = locs.shape[0]
    out = {}
    hv_cfg = cfg.hierarchy or _DEFAULTS[cfg.scenario]["hierarchy"]
    hv = None
    if "hv" in methods or ("lr" in methods and cfg.lr_N is None):
        h, s = _fit_hierarchy(locs, hv_cfg)
        hv = MethodSetup("hv", h, s)
        if "hv" in methods:
            out["hv"] = hv
    if "lr" in methods:
        N = cfg.lr_N if cfg.lr_N is not None else hv.N
        h, s = hierarchy_pattern(locs, lr_config(n, N))
        out["lr"] = MethodSetup("lr", h, s)
    if "dl" in methods:
        h, s = hierarchy_pattern(locs, dl_config(n))
        out["dl"] = MethodSetup("dl", h, s)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    return {m: out[m] for m in methods}


@dataclass
class Samplers:
    initial: DenseGaussianSampler
    innovation: DenseGaussianSampler | None


def build_samplers(cfg: ScenarioConfig, model: StateSpaceModel) -> Samplers:
    initial = DenseGaussianSampler(model.sigma0)
    if model.evolution is None or model.evolution.q is None:
        return Samplers(initial, None)
    if cfg.scenario in ("advdiff", "advdiff_large") and cfg.q_variance == cfg.kernel_variance:
        return Samplers(initial, initial)
    return Samplers(initial, DenseGaussianSampler(model.evolution.q))


def simulate(cfg: ScenarioConfig, model: StateSpaceModel, samplers: Samplers, rng):
    if cfg.scenario == "spatial":
        return simulate_field(model, cfg.obs_fraction, cfg.families, rng, samplers.initial)
    return simulate_ssm(model, cfg.T, cfg.obs_fraction, cfg.families, rng,
                        samplers.initial, samplers.innovation)


@dataclass
class MethodRun:
    """Filtering (or posterior) states of one method, in that method's ordering."""

    setup: MethodSetup
    states: list[FilterState]
    truth: np.ndarray

    def scores(self):
        out = []
        for state, x in zip(self.states, self.truth):
            out.append((state.t, log_score(x, state), rmspe(x, state.mean)))
        return out


def run_method(cfg: ScenarioConfig, model: StateSpaceModel, sim, setup: MethodSetup, **hvl_kw) -> MethodRun:
    order, pos = setup.order, setup.position
    pm = model.permuted(order)
    batches = [b.permuted(pos) for b in sim.observations]
    truth = sim.truth[:, order]
    fam = cfg.families
    if cfg.scenario == "spatial":
        prior = hv_prior(setup.pattern, pm.mu0, pm.sigma0)
        b = batches[0]
        post = hvl_from_prior(prior, b.indices, b.values, fam, **hvl_kw)
        states = [FilterState(0, post.mean, post.l, post.u, iterations=post.iterations)]
        return MethodRun(setup, states, truth)
    state0 = init_state(setup.pattern, pm.mu0, pm.sigma0)
    states = run_filter(state0, pm.evolution, batches, fam, setup.pattern, **hvl_kw)
    return MethodRun(setup, states, truth[1:])


# --- reports ---


@dataclass
class ScoreRow:
    scenario: str
    family: str
    method: str
    N: int
    t: int
    replicate: int
    log_score: float
    dLS: float | None
    rmspe: float
    rrmspe: float | None


@dataclass
class ScoreReport:
    rows: list[ScoreRow] = field(default_factory=list)
    seeds: list[dict] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    @property
    def replicates(self) -> int:
        return len({r.replicate for r in self.rows})

    def _select(self, method, metric):
        by_rep: dict[int, dict[int, float]] = {}
        for r in self.rows:
            v = getattr(r, metric)
            if r.method == method and v is not None:
                by_rep.setdefault(r.replicate, {})[r.t] = v
        return by_rep

    def mean(self, metric: str, method: str) -> float:
        """Mean over time points, then over replicates."""
        by_rep = self._select(method, metric)
        if not by_rep:
            return float("nan")
        return float(np.mean([np.mean(list(v.values())) for v in by_rep.values()]))

    def per_time(self, metric: str, method: str) -> dict[int, float]:
        """Mean over replicates at each time point."""
        acc: dict[int, list[float]] = {}
        for v in self._select(method, metric).values():
            for t, x in v.items():
                acc.setdefault(t, []).append(x)
        return {t: float(np.mean(acc[t])) for t in sorted(acc)}

    def summary(self) -> list[dict]:
        out = []
        for m in self.methods:
            first = next(r for r in self.rows if r.method == m)
            out.append(dict(scenario=first.scenario, family=first.family, method=m, N=first.N,
                            replicates=len(self._select(m, "rmspe")),
                            log_score=self.mean("log_score", m), dLS=self.mean("dLS", m),
                            rmspe=self.mean("rmspe", m), rrmspe=self.mean("rrmspe", m)))
        return out

    def to_csv(self, path) -> None:
        write_rows(path, SCORE_COLUMNS, [asdict(r) for r in self.rows])

    @classmethod
    def from_csv(cls, path) -> "ScoreReport":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                def num(key):
                    return float(rec[key]) if rec[key] != "" else None
                rows.append(ScoreRow(rec["scenario"], rec["family"], rec["method"], int(rec["N"]),
                                     int(rec["t"]), int(rec["replicate"]), num("log_score"), num("dLS"),
                                     num("rmspe"), num("rrmspe")))
        return cls(rows)


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([format_value(r[c]) for c in columns])


def replicate_seeds(seed: int, replicates: int) -> list[np.random.SeedSequence]:
    """Independent child streams of one root seed, one per replicate."""
    return np.random.SeedSequence(seed).spawn(replicates)


def _score_replicate(cfg, model, samplers, setups, rep, seq, on_run, hvl_kw):
    rng = np.random.default_rng(seq)
    sim = simulate(cfg, model, samplers, rng)
    results, errors = {}, []
    for name, setup in setups.items():
        try:
            run = run_method(cfg, model, sim, setup, **hvl_kw)
            results[name] = run.scores()
            if on_run is not None:
                on_run(rep, name, run)
        except Exception as exc:  # recorded per replicate, the batch goes on
            errors.append(dict(replicate=rep, method=name, error=type(exc).__name__, message=str(exc)))
    ref = {t: (ls, rm) for t, ls, rm in results.get("dl", [])}
    rows = []
    for name, scores in results.items():
        for t, ls, rm in scores:
            dls = rr = None
            if t in ref:
                dls = ls - ref[t][0]
                rr = rm / ref[t][1] if ref[t][1] > 0 else None
            rows.append(ScoreRow(cfg.scenario, cfg.family, name, setups[name].N, t, rep, ls, dls, rm, rr))
    return rows, errors, sim


def compare_methods(cfg: ScenarioConfig, methods=METHODS, replicates: int = 1, seed: int = 0,
                    workers: int = 1, keep=None, on_run=None, **hvl_kw) -> ScoreReport:
    """Run every method on the same simulated data for each replicate and score it.

    ``dLS`` and ``rrmspe`` are filled in only when ``"dl"`` is among the methods.
    ``keep`` may be a list that receives each replicate's simulation and
    ``on_run(replicate, method, run)`` is called with every finished run.
    """
    methods = tuple(methods)
    report = ScoreReport()
    seqs = replicate_seeds(seed, replicates)
    report.seeds = [dict(replicate=k, entropy=s.entropy, spawn_key=list(s.spawn_key)) for k, s in enumerate(seqs)]
    if replicates == 0:
        return report
    model = build_model(cfg)
    samplers = build_samplers(cfg, model)
    setups = method_setups(cfg, methods, model.locations)

    def job(k):
        return _score_replicate(cfg, model, samplers, setups, k, seqs[k], on_run, hvl_kw)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, range(replicates)))
    else:
        results = [job(k) for k in range(replicates)]
    for rows, errors, sim in results:
        report.rows.extend(rows)
        report.errors.extend(errors)
        if keep is not None:
            keep.append(sim)
    return report


__all__ = [
    "log_score",
    "rmspe",
    "rrmspe",
    "ScenarioConfig",
    "build_model",
    "method_setups",
    "run_method",
    "compare_methods",
    "ScoreReport",
    "ScoreRow",
]
