"""Hierarchical Vecchia factors on a grid

Build a two-way partition of a 34 x 34 grid, look at the conditioning
pattern it induces, and compare the implied covariance with the exact one.

The Cholesky factor L of the implied covariance and the factor U of its
precision share one sparsity pattern, so both cost O(nN) memory.  Entries of
the implied covariance on the pattern are exact; off the pattern they are
approximations whose error shrinks with the conditioning-set size N.
"""
import numpy as np

from hvfilter.hierarchy import HierarchyConfig, hierarchy_pattern
from hvfilter.models import ExpCovariance, ExpKernel, grid_locations
from hvfilter.sparse import ichol, invert_transpose_lower

#-- partition

locs = grid_locations(34)
config = HierarchyConfig(M=7, J=2, set_sizes=(5, 5, 5, 5, 6, 6, 6), leaf_cap=4)
h, s = hierarchy_pattern(locs, config)
print(h.summary())
print(f"n = {s.n}, nnz = {s.nnz}, largest conditioning set = {s.row_lengths().max() - 1}")

#-- factors

sigma = ExpCovariance(locs[h.global_order], ExpKernel(1.0, 0.15))
l = ichol(sigma, s)
u = invert_transpose_lower(l)
ld, ud = l.to_dense(), u.to_dense()
print(f"max |L'U - I| = {np.max(np.abs(ld.T @ ud - np.eye(s.n))):.2e}")

#-- accuracy of the implied covariance

exact = sigma.to_dense()
implied = ld @ ld.T
on = np.zeros_like(exact, dtype=bool)
on[s.row_ids, s.indices] = True
on |= on.T
print(f"max error on the pattern  = {np.max(np.abs(implied - exact)[on]):.2e}")
print(f"max error off the pattern = {np.max(np.abs(implied - exact)[~on]):.2e}")
