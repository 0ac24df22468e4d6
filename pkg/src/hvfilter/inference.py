"""Posterior inference for Gaussian observations under a hierarchical Vecchia prior."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparse import (
    EntryOracle,
    NotPositiveDefiniteError,
    SparseLowerTri,
    SparseUpperTri,
    SparsityPattern,
    SymmetricPatternMatrix,
    factor_logpdf,
    ichol,
    invert_transpose_lower,
    invert_transpose_upper,
    pattern_restricted_gram,
    reverse_cholesky,
)


class InferenceError(RuntimeError):
    """A factorization failed; ``stage`` names the step that failed."""

    def __init__(self, stage, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class GaussianObsModel:
    """Observations ``y_i ~ N(x_i, noise_vars_i)`` at ``indices``."""

    indices: np.ndarray
    values: np.ndarray
    noise_vars: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        vals = np.asarray(self.values, dtype=float).ravel()
        noise = np.broadcast_to(np.asarray(self.noise_vars, dtype=float), idx.shape).copy()
        if vals.shape != idx.shape:
            raise ValueError("one value per observed index is required")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("observation indices must be distinct")
        if np.any(noise <= 0) or not np.all(np.isfinite(noise)):
            raise ValueError("noise variances must be positive and finite")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "noise_vars", noise)

    @classmethod
    def empty(cls):
        return cls(np.empty(0, dtype=np.int64), np.empty(0), np.empty(0))


@dataclass(frozen=True)
class PosteriorResult:
    mean: np.ndarray
    l: SparseLowerTri
    u: SparseUpperTri
    iterations: int = 1

    def marginal_variances(self) -> np.ndarray:
        lt = self.l.to_scipy()
        return np.asarray(lt.multiply(lt).sum(axis=1)).ravel()


@dataclass(frozen=True)
class HVPrior:
    """Prior factors reused across updates: ``L = ichol(Sigma, S)``, ``U = L^{-T}``, ``U U^T``."""

    mean: np.ndarray
    l: SparseLowerTri
    u: SparseUpperTri
    precision: SymmetricPatternMatrix

    @property
    def pattern(self) -> SparsityPattern:
        return self.l.pattern

    def logpdf(self, x) -> float:
        return factor_logpdf(x, self.mean, self.u)


def hv_prior(s: SparsityPattern, mu, sigma: EntryOracle, shift: float = 0.0) -> HVPrior:
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (s.n,):
        raise ValueError("prior mean has the wrong length")
    try:
        l = ichol(sigma, s, shift=shift)
    except NotPositiveDefiniteError as exc:
        raise InferenceError("ichol", exc) from exc
    u = invert_transpose_lower(l)
    return HVPrior(mu, l, u, pattern_restricted_gram(u))


def hv_update(prior: HVPrior, obs: GaussianObsModel, with_l: bool = True) -> PosteriorResult:
    """Condition an HV prior on Gaussian observations.

    With ``with_l=False`` the covariance factor is left as ``None``; callers
    that only need the mean skip one triangular inversion.
    """
    n = prior.pattern.n
    if obs.indices.size == 0:
        return PosteriorResult(prior.mean.copy(), prior.l, prior.u)
    if obs.indices.min() < 0 or obs.indices.max() >= n:
        raise ValueError("observation index out of range")
    info = np.zeros(n)
    info[obs.indices] = 1.0 / obs.noise_vars
    lam_vals = prior.precision.values.copy()
    lam_vals[prior.pattern.diag_positions] += info
    try:
        u_post = reverse_cholesky(SymmetricPatternMatrix(prior.pattern, lam_vals))
    except NotPositiveDefiniteError as exc:
        raise InferenceError("reverse_cholesky", exc) from exc
    l_post = invert_transpose_upper(u_post) if with_l else None
    rhs = np.zeros(n)
    rhs[obs.indices] = (obs.values - prior.mean[obs.indices]) / obs.noise_vars
    # Lambda^{-1} rhs with Lambda = U U^T: two triangular solves
    mean = prior.mean + u_post.solve_transpose(u_post.solve(rhs))
    return PosteriorResult(mean, l_post, u_post)


def hv_posterior(obs: GaussianObsModel, s: SparsityPattern, mu, sigma: EntryOracle) -> PosteriorResult:
    """Posterior mean and sparse factors of ``x | y`` under the HV approximation.

    Computes ``L = ichol(Sigma, S)``, ``U = L^{-T}``, ``Lambda = U U^T + H^T R^{-1} H``,
    the reverse-ordered factor of ``Lambda`` and its inverse transpose.
    """
    return hv_update(hv_prior(s, mu, sigma), obs)


def prior_density(x, mu, l: SparseLowerTri) -> float:
    """Log-density of ``N(mu, L L^T)`` at ``x``."""
    return factor_logpdf(x, mu, invert_transpose_lower(l))
