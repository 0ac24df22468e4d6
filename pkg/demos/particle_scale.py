"""Learning an innovation scale with particle-EKVL

The innovation covariance of an advection-diffusion model is scaled by an
unknown factor theta in {0.5, 1, 2}; the data come from theta = 1.  Each
particle carries one value of theta and its own EKVL filter, and is weighted
by the integrated likelihood of each new batch of observations.
"""
import math

import numpy as np

from hvfilter.filters import (
    LinearEvolution,
    ObservationBatch,
    ParticleModel,
    init_particles,
    parameter_posterior,
    particle_ekvl_step,
)
from hvfilter.hierarchy import HierarchyConfig, hierarchy_pattern
from hvfilter.likelihoods import Gaussian
from hvfilter.models import AdvDiffConfig, ExpCovariance, ExpKernel, advection_diffusion_matrix, grid_locations

g, T, tau2 = 10, 20, 0.1
n = g * g
rng = np.random.default_rng(5)

#-- model and data

locs = grid_locations(g)
h, s = hierarchy_pattern(locs, HierarchyConfig(4, 2, (4, 4, 4, 4), 4))
e = advection_diffusion_matrix(AdvDiffConfig(g, 1e-3, 1e-2))
sigma0 = ExpCovariance(locs, ExpKernel(1.0, 0.15))
q1 = ExpCovariance(locs, ExpKernel(0.2, 0.15))

x = np.linalg.cholesky(sigma0.to_dense()) @ rng.standard_normal(n)
lq = np.linalg.cholesky(q1.to_dense())
batches = []
for t in range(1, T + 1):
    x = e @ x + lq @ rng.standard_normal(n)
    idx = np.sort(rng.choice(n, 30, replace=False))
    y = x[idx] + math.sqrt(tau2) * rng.standard_normal(30)
    batches.append(ObservationBatch(t, idx, y).permuted(h.position))

#-- particles

scales = (0.5, 1.0, 2.0)
evolutions = {th: LinearEvolution(e, ExpCovariance(locs, ExpKernel(0.2 * th, 0.15))).permuted(h.global_order)
              for th in scales}


def build(theta):
    return ParticleModel(evolutions[theta], Gaussian(tau2), np.zeros(n), sigma0.permuted(h.global_order))


particles = init_particles([float(v) for v in rng.choice(scales, 30)], build, s)
for b in batches:
    particles = particle_ekvl_step(particles, b, build, s, rng)
    post = parameter_posterior(particles)
    print(f"t={b.t:2d}  " + "  ".join(f"theta={th}: {post.get(th, 0.0):.2f}" for th in scales))
