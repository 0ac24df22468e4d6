"""Hierarchical Vecchia approximations on fixed sparse Cholesky patterns.

Modules: ``hierarchy`` (partitions and patterns), ``sparse`` (fixed-pattern
factor kernels), ``inference`` (Gaussian posteriors), ``likelihoods``
(Vecchia-Laplace), ``filters`` (KVL, EKVL, particle-EKVL), ``models``,
``evaluation`` and ``cli``.
"""
__version__ = "0.1.0"
