"""Exponential-family observation models and Vecchia-Laplace inference.

Each family provides the log-density ``log g(y | x)`` in the latent ``x``,
its first derivative ``u`` and the pseudo-variance ``d = -1 / (d^2/dx^2 log g)``.
:func:`hvl` runs Newton's method on the HV log-posterior by repeatedly
conditioning the prior on Gaussian pseudo-data ``t = x + d u``.
"""
from __future__ import annotations

from dataclasses import dataclass
import numpy as np
from scipy.special import gammaln, log_expit, expit

from .inference import GaussianObsModel, HVPrior, PosteriorResult, hv_prior, hv_update
from .sparse import EntryOracle, SparsityPattern, invert_transpose_upper

P_CLAMP = 1e-12


class LikelihoodError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, last_step):
        super().__init__(message)
        self.last_step = last_step


class LikelihoodFamily:
    """Base class; ``x`` and ``y`` are arrays over the observed indices."""

    name = "family"
    gaussian = False

    def check(self, y):
        pass

    def loglik(self, y, x):
        raise NotImplementedError

    def derivatives(self, y, x):
        """Return ``(loglik, u, d)`` elementwise."""
        raise NotImplementedError

    def sample(self, x, rng):
        raise NotImplementedError

    def pseudo_data(self, y, x):
        """Pseudo-observations ``t = x + d u`` and pseudo-variances ``d``."""
        _, u, d = self.derivatives(y, x)
        return x + d * u, d


@dataclass(frozen=True)
class Gaussian(LikelihoodFamily):
    tau2: float = 0.2
    name = "gaussian"
    gaussian = True

    def __post_init__(self):
        if not np.all(np.asarray(self.tau2) > 0):
            raise LikelihoodError("gaussian: tau2 must be positive")

    def loglik(self, y, x):
        return -0.5 * np.log(2 * np.pi * self.tau2) - 0.5 * (y - x) ** 2 / self.tau2

    def derivatives(self, y, x):
        tau2 = np.broadcast_to(np.asarray(self.tau2, dtype=float), np.shape(x))
        return self.loglik(y, x), (y - x) / tau2, tau2.copy()

    def sample(self, x, rng):
        return x + np.sqrt(self.tau2) * rng.standard_normal(np.shape(x))

    def pseudo_data(self, y, x):
        # exact: t = y and d = tau2 whatever the current state
        tau2 = np.broadcast_to(np.asarray(self.tau2, dtype=float), np.shape(x))
        return np.array(y, dtype=float), tau2.copy()


@dataclass(frozen=True)
class BernoulliLogit(LikelihoodFamily):
    name = "bernoulli"

    def check(self, y):
        if not np.all((y == 0) | (y == 1)):
            raise LikelihoodError("bernoulli: observations must be 0 or 1")

    def loglik(self, y, x):
        return y * log_expit(x) + (1 - y) * log_expit(-x)

    def derivatives(self, y, x):
        p = np.clip(expit(x), P_CLAMP, 1 - P_CLAMP)
        return self.loglik(y, x), y - p, 1.0 / (p * (1 - p))

    def sample(self, x, rng):
        return (rng.random(np.shape(x)) < expit(x)).astype(float)


@dataclass(frozen=True)
class PoissonLog(LikelihoodFamily):
    name = "poisson"

    def check(self, y):
        if not np.all((y >= 0) & (y == np.floor(y))):
            raise LikelihoodError("poisson: observations must be nonnegative integers")

    def loglik(self, y, x):
        return y * x - np.exp(x) - gammaln(y + 1)

    def derivatives(self, y, x):
        return self.loglik(y, x), y - np.exp(x), np.exp(-x)

    def sample(self, x, rng):
        return rng.poisson(np.exp(x)).astype(float)


@dataclass(frozen=True)
class GammaLog(LikelihoodFamily):
    """Gamma with shape ``a`` and rate ``a exp(-x)``, so the mean is ``exp(x)``."""

    shape: float = 2.0
    name = "gamma"

    def __post_init__(self):
        if not self.shape > 0:
            raise LikelihoodError("gamma: shape must be positive")

    def check(self, y):
        if not np.all(y > 0):
            raise LikelihoodError("gamma: observations must be positive")

    def loglik(self, y, x):
        a = self.shape
        return a * np.log(a) - a * x + (a - 1) * np.log(y) - a * y * np.exp(-x) - gammaln(a)

    def derivatives(self, y, x):
        a = self.shape
        return self.loglik(y, x), -a + a * y * np.exp(-x), np.exp(x) / (a * y)

    def sample(self, x, rng):
        return rng.gamma(self.shape, np.exp(x) / self.shape)


FAMILIES = {
    "gaussian": Gaussian,
    "bernoulli": BernoulliLogit,
    "poisson": PoissonLog,
    "gamma": GammaLog,
}


def make_family(name: str, tau2: float = 0.2, shape: float = 2.0) -> LikelihoodFamily:
    if name == "gaussian":
        return Gaussian(tau2)
    if name == "gamma":
        return GammaLog(shape)
    try:
        return FAMILIES[name]()
    except KeyError:
        raise LikelihoodError(f"unknown family {name!r}") from None


def family_derivatives(fam: LikelihoodFamily, y, x):
    """``(loglik, u, d)`` for observations ``y`` at latent values ``x``."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    fam.check(y)
    return fam.derivatives(y, x)


def _per_index(families, n_obs):
    if isinstance(families, LikelihoodFamily):
        return [(families, np.arange(n_obs))]
    families = list(families)
    if len(families) != n_obs:
        raise LikelihoodError("need one family per observation")
    groups = {}
    for k, f in enumerate(families):
        groups.setdefault(id(f), (f, []))[1].append(k)
    return [(f, np.asarray(ix)) for f, ix in groups.values()]


def pseudo_data(families, y, x):
    """``(t, d)`` for every observation, grouped by family."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    return _pseudo(_per_index(families, y.size), y, x)


def _pseudo(groups, y, x):
    t = np.empty_like(x)
    d = np.empty_like(x)
    for fam, ix in groups:
        fam.check(y[ix])
        t[ix], d[ix] = fam.pseudo_data(y[ix], x[ix])
    return t, d


def _derivs(groups, y, x):
    ll = np.empty_like(x)
    u = np.empty_like(x)
    d = np.empty_like(x)
    for fam, ix in groups:
        ll[ix], u[ix], d[ix] = family_derivatives(fam, y[ix], x[ix])
    return ll, u, d


def all_gaussian(families) -> bool:
    if isinstance(families, LikelihoodFamily):
        return families.gaussian
    return all(f.gaussian for f in families)


def observation_loglik(families, indices, y, x) -> float:
    """``log p(y | x)`` summed over the observed indices."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        return 0.0
    groups = _per_index(families, indices.size)
    ll, _, _ = _derivs(groups, np.asarray(y, dtype=float), np.asarray(x, dtype=float)[indices])
    return float(ll.sum())


def hv_log_posterior(prior: HVPrior, families, indices, y, x) -> float:
    """Unnormalized HV log-posterior ``log p(y | x) + log N(x; mu, Sigma_hat)``."""
    return observation_loglik(families, indices, y, x) + prior.logpdf(x)


def hvl_from_prior(
    prior: HVPrior,
    indices,
    y,
    families,
    eps: float = 1e-8,
    max_iter: int = 50,
    step_halving: bool = True,
    trace: list | None = None,
) -> PosteriorResult:
    """Vecchia-Laplace iterations on a prepared prior; see :func:`hvl`."""
    indices = np.asarray(indices, dtype=np.int64)
    y = np.asarray(y, dtype=float)
    if y.shape != indices.shape:
        raise LikelihoodError("one observation per index is required")
    groups = _per_index(families, indices.size)
    x = prior.mean.copy()
    objective = None
    if trace is not None:
        trace.append(x.copy())
    if indices.size == 0:
        return PosteriorResult(x, prior.l, prior.u, iterations=1)

    last_step = np.inf
    for it in range(1, max_iter + 1):
        t, d = _pseudo(groups, y, x[indices])
        if not np.all(np.isfinite(t)) or not np.all(np.isfinite(d)) or np.any(d <= 0):
            bad = indices[np.flatnonzero(~(np.isfinite(t) & np.isfinite(d) & (d > 0)))[0]]
            raise LikelihoodError(f"nonfinite pseudo-data at index {bad}")
        post = hv_update(prior, GaussianObsModel(indices, t, d), with_l=False)
        x_new = post.mean
        if step_halving and not all_gaussian(families):
            if objective is None:
                objective = hv_log_posterior(prior, families, indices, y, x)
            new_obj = hv_log_posterior(prior, families, indices, y, x_new)
            step = x_new - x
            halvings = 0
            while not new_obj >= objective and halvings < 30:
                step = 0.5 * step
                x_new = x + step
                new_obj = hv_log_posterior(prior, families, indices, y, x_new)
                halvings += 1
            objective = max(new_obj, objective)
        if trace is not None:
            trace.append(x_new.copy())
        diff = np.linalg.norm(x_new - x)
        last_step = diff / np.linalg.norm(x) if np.linalg.norm(x) > 0 else np.inf
        converged = diff <= eps * np.linalg.norm(x)
        x = x_new
        if all_gaussian(families) or converged:
            return PosteriorResult(x, invert_transpose_upper(post.u), post.u, iterations=it)
    raise ConvergenceError(f"hvl did not converge in {max_iter} iterations (last relative step {last_step:.3e})",
                           last_step)


def hvl(
    obs_indices,
    obs_values,
    families,
    s: SparsityPattern,
    mu,
    sigma: EntryOracle,
    eps: float = 1e-8,
    max_iter: int = 50,
    step_halving: bool = True,
) -> PosteriorResult:
    """Hierarchical-Vecchia-Laplace approximation of ``x | y``.

    Starting at the prior mean, each iteration forms pseudo-data ``t`` and
    pseudo-variances ``d`` at the current state and sets the next state to
    the HV posterior mean given ``t``.  Iteration stops once the relative step
    falls below ``eps``; all-Gaussian data stop after the first update, which
    is already exact.

    Parameters
    ----------
    obs_indices, obs_values : array_like
        Observed positions and their observations.
    families : LikelihoodFamily or sequence of LikelihoodFamily
        One family shared by all observations, or one per observation.
    step_halving : bool
        Halve a Newton step while it would lower the HV log-posterior.

    Returns
    -------
    PosteriorResult
        Posterior mode and the factors of the Laplace approximation.
    """
    prior = hv_prior(s, mu, sigma)
    return hvl_from_prior(prior, obs_indices, obs_values, families, eps=eps, max_iter=max_iter,
                          step_halving=step_halving)


__all__ = [
    "LikelihoodFamily",
    "Gaussian",
    "BernoulliLogit",
    "PoissonLog",
    "GammaLog",
    "make_family",
    "family_derivatives",
    "pseudo_data",
    "hvl",
    "hvl_from_prior",
    "hv_log_posterior",
    "observation_loglik",
]
