"""Vecchia-Laplace for a non-Gaussian spatial field

Simulate a latent Gaussian field on a 34 x 34 grid, observe 10% of it through
Poisson counts, and approximate the posterior with three patterns of the same
inferential machinery:

    hv  hierarchical pattern, N about 41
    lr  one root set of the same size (modified predictive process)
    dl  the full pattern, i.e. the dense Laplace approximation

dLS is the log-score difference to dl.  Small is good; the hierarchical
pattern keeps fine-scale structure that the low-rank one throws away.
"""
from hvfilter.evaluation import ScenarioConfig, compare_methods

cfg = ScenarioConfig.create("spatial", family="poisson")
report = compare_methods(cfg, replicates=3, seed=2)

for row in report.summary():
    print(f"{row['method']:>3}  N={row['N']:<5} log score {row['log_score']:9.2f}  "
          f"dLS {row['dLS']:8.2f}  RMSPE {row['rmspe']:.4f}")
