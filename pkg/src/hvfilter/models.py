"""Covariance kernels, evolution operators and state-space simulation."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .filters import LinearEvolution, NonlinearEvolution, ObservationBatch
from .sparse import DenseOracle, EntryOracle


# --- locations and kernels ---


def grid_locations(g: int) -> np.ndarray:
    """Cell centers of a ``g x g`` grid on the unit square; index ``i * g + j``."""
    c = (np.arange(g) + 0.5) / g
    xx, yy = np.meshgrid(c, c, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


def circle_locations(n: int) -> np.ndarray:
    """``n`` equally spaced points on a circle of unit circumference, embedded in the plane.

    Euclidean distances between the embedded points are chord lengths.
    """
    a = 2 * np.pi * np.arange(n) / n
    return np.column_stack([np.cos(a), np.sin(a)]) / (2 * np.pi)


@dataclass(frozen=True)
class ExpKernel:
    variance: float = 1.0
    range: float = 0.15

    def __post_init__(self):
        if not (self.variance > 0 and self.range > 0):
            raise ValueError("kernel variance and range must be positive")


class ExpCovariance(EntryOracle):
    """Exponential covariance ``variance * exp(-|s_i - s_j| / range)`` between locations."""

    def __init__(self, locations, kernel: ExpKernel = ExpKernel()):
        self.locations = np.atleast_2d(np.asarray(locations, dtype=float))
        if self.locations.shape[0] == 1 and np.ndim(locations) == 1:
            self.locations = self.locations.T
        self.kernel = kernel
        self.n = self.locations.shape[0]

    def entries(self, rows, cols):
        d = np.sqrt(((self.locations[rows] - self.locations[cols]) ** 2).sum(axis=-1))
        return self.kernel.variance * np.exp(-d / self.kernel.range)

    def to_dense(self):
        d = cdist(self.locations, self.locations)
        np.divide(d, -self.kernel.range, out=d)
        np.exp(d, out=d)
        d *= self.kernel.variance
        return d

    def permuted(self, order):
        return ExpCovariance(self.locations[np.asarray(order)], self.kernel)


def exp_covariance(locations, kernel: ExpKernel = ExpKernel()) -> ExpCovariance:
    return ExpCovariance(locations, kernel)


# --- advection-diffusion ---


@dataclass(frozen=True)
class AdvDiffConfig:
    g: int = 34
    alpha: float = 4e-5
    beta: float = 1e-2

    def __post_init__(self):
        if self.g < 3:
            raise ValueError("grid side must be at least 3")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")


def advection_diffusion_matrix(cfg: AdvDiffConfig) -> sp.csr_matrix:
    """``I + alpha * Laplacian + beta * (d/dx + d/dy)`` with periodic centered differences.

    Grid index ``i * g + j`` has first coordinate ``i`` and second coordinate ``j``.
    """
    g = cfg.g
    h = 1.0 / g
    idx = np.arange(g * g).reshape(g, g)
    lap = cfg.alpha / h ** 2
    adv = cfg.beta / (2 * h)
    rows, cols, vals = [idx.ravel()], [idx.ravel()], [np.full(g * g, 1.0 - 4 * lap)]
    for axis in (0, 1):
        for shift, sign in ((-1, 1.0), (1, -1.0)):
            # np.roll by -1 brings the +1 neighbour into place
            nb = np.roll(idx, shift, axis=axis)
            rows.append(idx.ravel())
            cols.append(nb.ravel())
            vals.append(np.full(g * g, lap + sign * adv))
    e = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(g * g, g * g)
    )
    e.sum_duplicates()
    e.eliminate_zeros()
    e.sort_indices()
    return e


# --- Lorenz 2005 ---


@dataclass(frozen=True)
class Lorenz05Config:
    n: int = 960
    K: int = 32
    F: float = 10.0
    dt: float = 0.005
    substeps: int = 5
    b: float = 0.2

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.n < 4 * self.K + 1:
            raise ValueError("n too small for the circular index arithmetic")
        if self.dt <= 0 or self.substeps < 1 or self.b <= 0:
            raise ValueError("dt, substeps and b must be positive")


def _window_sum(x, h):
    """``S[m] = sum_{k=m-h}^{m+h} x[k]`` with circular indices."""
    n = x.size
    c = np.concatenate([[0.0], np.cumsum(np.concatenate([x[n - h:], x, x[:h]]))])
    return c[2 * h + 1:] - c[:n]


def lorenz05_rhs(x, K: int, F: float) -> np.ndarray:
    """Time derivative of the unscaled state, with plain sums over offsets in ``[-K//2, K//2]``."""
    x = np.asarray(x, dtype=float)
    h = K // 2
    s = _window_sum(x, h)
    # sum_j S(i-K+j) x(i+K+j) is the window sum of c(m) = S(m-K) x(m+K)
    c = np.roll(s, K) * np.roll(x, -K)
    acc = _window_sum(c, h) - np.roll(s, 2 * K) * np.roll(s, K)
    return acc / K ** 2 - x + F


@lru_cache(maxsize=8)
def _rhs_jacobian_structure(n: int, K: int):
    """Flat ``row * n + col`` slots of the four bilinear terms, in a fixed order."""
    h = K // 2
    offs = np.arange(-h, h + 1)
    r = np.arange(n)[:, None]
    w = offs.size
    slots = [
        (r * n + (r - 2 * K + offs) % n).ravel(),
        (r * n + (r - K + offs) % n).ravel(),
        (r * n + (r + K + offs) % n).ravel(),
        (r[:, :, None] * n + (r[:, :, None] - K + offs[:, None] + offs[None, :]) % n).ravel(),
    ]
    flat = np.concatenate(slots)
    flat.setflags(write=False)
    return flat, w


def _rhs_jacobian(x, K: int) -> np.ndarray:
    """Dense Jacobian of :func:`lorenz05_rhs` (the forcing drops out)."""
    n = x.size
    h = K // 2
    flat, w = _rhs_jacobian_structure(n, K)
    s = _window_sum(x, h)
    i = np.arange(n)
    offs = np.arange(-h, h + 1)
    r = i[:, None]
    vals = np.concatenate([
        np.repeat(-s[(i - K) % n], w),
        np.repeat(-s[(i - 2 * K) % n], w),
        s[(r - K + offs) % n].ravel(),
        np.repeat(x[(r + K + offs) % n].ravel(), w),
    ])
    jac = np.bincount(flat, weights=vals / K ** 2, minlength=n * n).reshape(n, n)
    jac[i, i] -= 1.0
    return jac


def lorenz05_step(x, cfg: Lorenz05Config, jacobian: bool = True):
    """Advance the scaled state by ``cfg.substeps`` RK4 steps.

    Returns ``(x_next, jac)`` where ``jac`` is the derivative of the step map
    (``None`` when ``jacobian`` is false).  The scale ``b`` cancels in ``jac``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (cfg.n,) or not np.all(np.isfinite(x)):
        raise ValueError("state must be a finite vector of length n")
    z = x / cfg.b
    dt, K, F = cfg.dt, cfg.K, cfg.F
    total = np.eye(cfg.n) if jacobian else None
    eye = np.eye(cfg.n) if jacobian else None
    for _ in range(cfg.substeps):
        k1 = lorenz05_rhs(z, K, F)
        z2 = z + 0.5 * dt * k1
        k2 = lorenz05_rhs(z2, K, F)
        z3 = z + 0.5 * dt * k2
        k3 = lorenz05_rhs(z3, K, F)
        z4 = z + dt * k3
        k4 = lorenz05_rhs(z4, K, F)
        if jacobian:
            d1 = _rhs_jacobian(z, K)
            d2 = _rhs_jacobian(z2, K) @ (eye + 0.5 * dt * d1)
            d3 = _rhs_jacobian(z3, K) @ (eye + 0.5 * dt * d2)
            d4 = _rhs_jacobian(z4, K) @ (eye + dt * d3)
            g = eye + dt / 6 * (d1 + 2 * d2 + 2 * d3 + d4)
            total = g @ total
        z = z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("Lorenz integration produced nonfinite values")
    return cfg.b * z, total


def lorenz05_evolution(cfg: Lorenz05Config, q: EntryOracle | None) -> NonlinearEvolution:
    return NonlinearEvolution(
        lambda x: lorenz05_step(x, cfg, jacobian=False)[0],
        lambda x: lorenz05_step(x, cfg)[1],
        q,
    )


@lru_cache(maxsize=4)
def _lorenz_moments(cfg: Lorenz05Config, q_kernel: ExpKernel | None, burn_in: int, steps: int, seed: int):
    rng = np.random.default_rng(seed)
    noise = None
    if q_kernel is not None:
        noise = DenseGaussianSampler(ExpCovariance(circle_locations(cfg.n), q_kernel))
    x = cfg.b * (cfg.F + 0.01 * rng.standard_normal(cfg.n))
    total = np.zeros(cfg.n)
    cross = np.zeros((cfg.n, cfg.n))
    chunk = []
    for k in range(burn_in + steps):
        x = lorenz05_step(x, cfg, jacobian=False)[0]
        if noise is not None:
            x = x + noise.sample(rng)
        if k < burn_in:
            continue
        chunk.append(x)
        if len(chunk) == 500 or k == burn_in + steps - 1:
            c = np.array(chunk)
            total += c.sum(axis=0)
            cross += c.T @ c
            chunk = []
    mean = total / steps
    cov = (cross - steps * np.outer(mean, mean)) / (steps - 1)
    mean.setflags(write=False)
    cov.setflags(write=False)
    return mean, cov


def lorenz05_moments(cfg: Lorenz05Config, q_kernel: ExpKernel | None = None, burn_in: int = 1000,
                     steps: int = 10_000, seed: int = 0):
    """Sample mean and covariance of the scaled state along a long run.

    With ``q_kernel`` the run adds exponential-kernel innovations after every
    step.  The deterministic run alone has a singular covariance: the window
    sums annihilate short-wavelength modes, which then decay like ``exp(-t)``.
    """
    return _lorenz_moments(cfg, q_kernel, burn_in, steps, seed)


# --- state-space models and simulation ---


@dataclass(frozen=True)
class StateSpaceModel:
    """Initial moments, evolution and innovation covariance on a set of locations."""

    locations: np.ndarray
    mu0: np.ndarray
    sigma0: EntryOracle
    evolution: LinearEvolution | NonlinearEvolution | None = None

    @property
    def n(self) -> int:
        return self.mu0.size

    def permuted(self, order) -> "StateSpaceModel":
        order = np.asarray(order)
        evo = None if self.evolution is None else self.evolution.permuted(order)
        return StateSpaceModel(self.locations[order], self.mu0[order], self.sigma0.permuted(order), evo)


class DenseGaussianSampler:
    """Draws from ``N(0, C)`` through a dense Cholesky factor of ``C``."""

    def __init__(self, cov: EntryOracle | np.ndarray):
        c = cov.to_dense() if isinstance(cov, EntryOracle) else np.array(cov, dtype=float)
        self.n = c.shape[0]
        self.factor = scipy.linalg.cholesky(c, lower=True, overwrite_a=True, check_finite=False)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.factor @ rng.standard_normal(self.n)


@dataclass
class Simulation:
    truth: np.ndarray
    observations: list[ObservationBatch]


def _observe(x, obs_fraction, families, rng, t):
    n = x.size
    n_obs = int(round(obs_fraction * n))
    idx = np.sort(rng.choice(n, size=n_obs, replace=False))
    if n_obs == 0:
        return ObservationBatch.empty(t)
    return ObservationBatch(t, idx, families.sample(x[idx], rng))


def simulate_field(model: StateSpaceModel, obs_fraction: float, families, rng: np.random.Generator,
                   sampler: DenseGaussianSampler | None = None) -> Simulation:
    """One draw ``x ~ N(mu0, Sigma0)`` and its observations (stored at ``t = 0``)."""
    sampler = sampler or DenseGaussianSampler(model.sigma0)
    x = model.mu0 + sampler.sample(rng)
    return Simulation(x[None, :], [_observe(x, obs_fraction, families, rng, 0)])


def simulate_ssm(model: StateSpaceModel, T: int, obs_fraction: float, families, rng: np.random.Generator,
                 initial_sampler: DenseGaussianSampler | None = None,
                 innovation_sampler: DenseGaussianSampler | None = None) -> Simulation:
    """Truth ``x_0..x_T`` and observation batches for ``t = 1..T``.

    Innovations are skipped when the evolution has no ``q``.
    """
    if not 0 <= obs_fraction <= 1:
        raise ValueError("obs_fraction must lie in [0, 1]")
    evo = model.evolution
    initial_sampler = initial_sampler or DenseGaussianSampler(model.sigma0)
    if evo.q is not None and innovation_sampler is None:
        innovation_sampler = DenseGaussianSampler(evo.q)
    x = model.mu0 + initial_sampler.sample(rng)
    truth = [x]
    batches = []
    for t in range(1, T + 1):
        x = evo.propagate(x)
        if innovation_sampler is not None:
            x = x + innovation_sampler.sample(rng)
        truth.append(x)
        batches.append(_observe(x, obs_fraction, families, rng, t))
    return Simulation(np.array(truth), batches)


__all__ = [
    "grid_locations",
    "circle_locations",
    "ExpKernel",
    "ExpCovariance",
    "exp_covariance",
    "AdvDiffConfig",
    "advection_diffusion_matrix",
    "Lorenz05Config",
    "lorenz05_rhs",
    "lorenz05_step",
    "lorenz05_evolution",
    "lorenz05_moments",
    "StateSpaceModel",
    "DenseGaussianSampler",
    "Simulation",
    "simulate_field",
    "simulate_ssm",
    "DenseOracle",
]
