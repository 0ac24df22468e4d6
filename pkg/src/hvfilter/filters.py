"""Kalman-Vecchia-Laplace filtering for linear and nonlinear state-space models.

Every step runs a forecast on the fixed pattern ``S`` (exact propagation of
the factor, then covariance entries on ``S`` only) and a Vecchia-Laplace
update.  The particle variant carries one filter per parameter value and
weights it by the integrated likelihood.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .inference import HVPrior, hv_prior
from .likelihoods import hvl_from_prior, observation_loglik
from .sparse import (
    EntryOracle,
    SparseLowerTri,
    SparseUpperTri,
    SparsityPattern,
    factor_logpdf,
    pattern_restricted_forecast_cov,
)


class FilterError(RuntimeError):
    pass


class ParticleDegeneracyError(FilterError):
    pass


@dataclass(frozen=True)
class ObservationBatch:
    """Observations at one time point: values at ``indices`` of the state."""

    t: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        vals = np.asarray(self.values, dtype=float).ravel()
        if idx.shape != vals.shape:
            raise ValueError("one value per observed index is required")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)

    @classmethod
    def empty(cls, t: int = 0):
        return cls(t, np.empty(0, dtype=np.int64), np.empty(0))

    def __len__(self):
        return self.indices.size

    def permuted(self, position) -> "ObservationBatch":
        """Same observations with state indices mapped through ``position``."""
        idx = np.asarray(position)[self.indices]
        srt = np.argsort(idx, kind="stable")
        return ObservationBatch(self.t, idx[srt], self.values[srt])


@dataclass(frozen=True)
class FilterState:
    """Gaussian filtering distribution ``N(mean, L L^T)`` with precision ``U U^T``.

    ``forecast`` holds the forecast distribution this state was updated from.
    """

    t: int
    mean: np.ndarray
    l: SparseLowerTri
    u: SparseUpperTri
    forecast: "FilterState | None" = None
    iterations: int = 0

    @property
    def pattern(self) -> SparsityPattern:
        return self.l.pattern

    def marginal_variances(self) -> np.ndarray:
        lt = self.l.to_scipy()
        return np.asarray(lt.multiply(lt).sum(axis=1)).ravel()

    def covariance(self) -> np.ndarray:
        ld = self.l.to_dense()
        return ld @ ld.T

    def logpdf(self, x) -> float:
        return factor_logpdf(x, self.mean, self.u)


@dataclass(frozen=True)
class LinearEvolution:
    """``x_t = E x_{t-1} + N(0, Q)`` with sparse ``E``."""

    matrix: sp.csr_matrix
    q: EntryOracle | None = None

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix, dtype=float)
        m.sort_indices()
        object.__setattr__(self, "matrix", m)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def max_row_support(self) -> int:
        return int(np.diff(self.matrix.indptr).max(initial=0))

    def propagate(self, x) -> np.ndarray:
        return self.matrix @ x

    def jacobian(self, x):
        return self.matrix

    def permuted(self, order) -> "LinearEvolution":
        order = np.asarray(order)
        q = None if self.q is None else self.q.permuted(order)
        return LinearEvolution(self.matrix[order][:, order], q)


@dataclass(frozen=True)
class NonlinearEvolution:
    """``x_t = f(x_{t-1}) + N(0, Q)`` with Jacobian map ``jac``."""

    f: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]
    q: EntryOracle | None = None
    order: np.ndarray | None = None

    def propagate(self, x) -> np.ndarray:
        if self.order is None:
            return self.f(x)
        out = np.empty_like(x)
        out[self.order] = x
        return self.f(out)[self.order]

    def jacobian(self, x):
        if self.order is None:
            return self.jac(x)
        out = np.empty_like(x)
        out[self.order] = x
        j = self.jac(out)
        return j[np.ix_(self.order, self.order)]

    def permuted(self, order) -> "NonlinearEvolution":
        order = np.asarray(order)
        combined = order if self.order is None else self.order[order]
        q = None if self.q is None else self.q.permuted(order)
        return NonlinearEvolution(self.f, self.jac, q, combined)


def init_state(s: SparsityPattern, mu0, sigma0: EntryOracle) -> FilterState:
    prior = hv_prior(s, mu0, sigma0)
    return FilterState(0, prior.mean, prior.l, prior.u)


def _forecast_prior(prev: FilterState, mean_evo, jac_evo, s: SparsityPattern) -> HVPrior:
    t = prev.t + 1
    with np.errstate(over="ignore", invalid="ignore"):
        mean = np.asarray(mean_evo.propagate(prev.mean), dtype=float)
    if not np.all(np.isfinite(mean)):
        raise FilterError(f"nonfinite forecast mean at t={t}")
    jac = jac_evo.jacobian(prev.mean)
    l_prev = prev.l.to_scipy()
    if sp.issparse(jac):
        m = sp.csr_matrix(jac) @ l_prev
    else:
        m = np.asarray((l_prev.T @ np.asarray(jac).T).T)
        if not np.all(np.isfinite(m)):
            raise FilterError(f"nonfinite Jacobian at t={t}")
    sigma = pattern_restricted_forecast_cov(m, jac_evo.q, s)
    return hv_prior(s, mean, sigma)


def _update(prior: HVPrior, t: int, obs: ObservationBatch, families, **hvl_kw) -> FilterState:
    post = hvl_from_prior(prior, obs.indices, obs.values, families, **hvl_kw)
    forecast = FilterState(t, prior.mean, prior.l, prior.u)
    return FilterState(t, post.mean, post.l, post.u, forecast=forecast, iterations=post.iterations)


def kvl_step(prev: FilterState, evo, obs: ObservationBatch, families, s: SparsityPattern, **hvl_kw) -> FilterState:
    """One forecast and update with a linear evolution.

    The forecast factor ``E L`` is exact; its covariance is evaluated only on
    ``s`` and refactored there before the Vecchia-Laplace update.
    """
    if isinstance(evo, NonlinearEvolution):
        raise TypeError("kvl_step needs a linear evolution; use ekvl_step")
    return _update(_forecast_prior(prev, evo, evo, s), prev.t + 1, obs, families, **hvl_kw)


def ekvl_step(prev: FilterState, evo, obs: ObservationBatch, families, s: SparsityPattern,
              jacobian_evo=None, **hvl_kw) -> FilterState:
    """One forecast and update with a nonlinear evolution linearized at the previous mean.

    ``jacobian_evo`` supplies the Jacobian and innovation covariance when they
    come from a different model than the mean map (as in the particle filter).
    """
    jac_evo = evo if jacobian_evo is None else jacobian_evo
    return _update(_forecast_prior(prev, evo, jac_evo, s), prev.t + 1, obs, families, **hvl_kw)


def integrated_likelihood_term(obs: ObservationBatch, state: FilterState, families) -> float:
    """Log of the one-step predictive density of the observations at ``state.t``.

    Evaluated at the updated mean as
    ``log p(y | x) + log p(x | forecast) - log p(x | updated)``.
    """
    if state.forecast is None:
        raise FilterError("state carries no forecast distribution")
    x = state.mean
    val = (observation_loglik(families, obs.indices, obs.values, x)
           + state.forecast.logpdf(x) - state.logpdf(x))
    if not np.isfinite(val):
        raise FilterError(f"nonfinite integrated likelihood at t={state.t}")
    return float(val)


def run_filter(init: FilterState, evo, batches, families, s: SparsityPattern, **hvl_kw) -> list[FilterState]:
    step = kvl_step if isinstance(evo, LinearEvolution) else ekvl_step
    states = []
    state = init
    for obs in batches:
        state = step(state, evo, obs, families, s, **hvl_kw)
        states.append(state)
    return states


# --- particle filter ---


@dataclass(frozen=True)
class ParameterKernel:
    """Transition ``theta_t | theta_{t-1}``: a sampler and its log-density."""

    sample: Callable
    logpdf: Callable


def static_parameter() -> ParameterKernel:
    """Parameters that stay fixed over time."""
    return ParameterKernel(lambda theta, rng: theta, lambda new, old: 0.0)


@dataclass(frozen=True)
class ParticleModel:
    evolution: object
    families: object
    mu0: np.ndarray | None = None
    sigma0: EntryOracle | None = None


@dataclass
class Particle:
    theta: object
    weight: float
    state: FilterState
    log_likelihood: float = 0.0


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w ** 2))


def systematic_resample(weights, rng=None, offset: float | None = None) -> np.ndarray:
    """Indices selected by systematic resampling.

    One uniform offset in ``[0, 1/N)`` places ``N`` evenly spaced points on the
    cumulative weights; particle ``l`` is copied ``N w_l`` times in expectation.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)) or not w.sum() > 0:
        raise ParticleDegeneracyError("particle degeneracy: weights must be nonnegative with positive sum")
    n = w.size
    if offset is None:
        offset = rng.uniform(0.0, 1.0 / n)
    if not 0 <= offset < 1.0 / n:
        raise ValueError("offset must lie in [0, 1/N)")
    cum = np.cumsum(w / w.sum())
    cum[-1] = 1.0
    points = offset + np.arange(n) / n
    return np.minimum(np.searchsorted(cum, points, side="right"), n - 1)


def init_particles(thetas, build_model: Callable[[object], ParticleModel], s: SparsityPattern) -> list[Particle]:
    thetas = list(thetas)
    out = []
    for theta in thetas:
        pm = build_model(theta)
        out.append(Particle(theta, 1.0 / len(thetas), init_state(s, pm.mu0, pm.sigma0)))
    return out


def particle_ekvl_step(
    particles: list[Particle],
    obs: ObservationBatch,
    build_model: Callable[[object], ParticleModel],
    s: SparsityPattern,
    rng: np.random.Generator,
    prior: ParameterKernel | None = None,
    proposal: ParameterKernel | None = None,
    resample: str = "always",
    workers: int = 1,
    **hvl_kw,
) -> list[Particle]:
    """Advance every particle one step and reweight by the integrated likelihood.

    With ``proposal=None`` new parameters are drawn from ``prior`` (bootstrap)
    and the prior/proposal ratio cancels.  The mean is propagated with the
    previous parameter value and the Jacobian and innovation covariance with
    the new one.  ``resample`` is ``"always"``, ``"ess"`` (when the effective
    sample size drops below half the particle count) or ``"never"``.
    """
    if not particles:
        raise ValueError("need at least one particle")
    if resample not in ("always", "ess", "never"):
        raise ValueError(f"unknown resampling mode {resample!r}")
    prior = prior or static_parameter()
    q = proposal or prior
    # draws happen up front so results do not depend on scheduling
    new_thetas = [q.sample(p.theta, rng) for p in particles]

    def advance(k):
        p = particles[k]
        theta = new_thetas[k]
        old_model = build_model(p.theta)
        new_model = build_model(theta)
        state = ekvl_step(p.state, old_model.evolution, obs, new_model.families, s,
                          jacobian_evo=new_model.evolution, **hvl_kw)
        ll = integrated_likelihood_term(obs, state, new_model.families)
        log_ratio = 0.0
        if proposal is not None:
            log_ratio = prior.logpdf(theta, p.theta) - proposal.logpdf(theta, p.theta)
        return state, ll, log_ratio

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(advance, range(len(particles))))
    else:
        results = [advance(k) for k in range(len(particles))]

    logw = np.array([np.log(p.weight) if p.weight > 0 else -np.inf for p in particles])
    logw += np.array([ll + lr for _, ll, lr in results])
    if not np.any(np.isfinite(logw)) or np.any(np.isnan(logw)):
        raise ParticleDegeneracyError("particle degeneracy: no particle has finite weight")
    w = np.exp(logw - logw.max())
    w /= w.sum()
    out = [Particle(th, float(wk), st, p.log_likelihood + ll)
           for p, th, wk, (st, ll, _) in zip(particles, new_thetas, w, results)]
    if resample == "always" or (resample == "ess" and effective_sample_size(w) < len(w) / 2):
        idx = systematic_resample(w, rng)
        out = [Particle(out[i].theta, 1.0 / len(w), out[i].state, out[i].log_likelihood) for i in idx]
    return out


def parameter_posterior(particles: list[Particle]) -> dict:
    """Total weight per distinct parameter value."""
    mass: dict = {}
    for p in particles:
        mass[p.theta] = mass.get(p.theta, 0.0) + p.weight
    return mass
