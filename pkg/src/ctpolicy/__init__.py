"""Personalized continuous-treatment policy learning from discrete-arm experiments.

Three-stage pipeline: structured nuisance estimation (nets), orthogonal
policy-value and effect estimation (orthogonal), and in-class policy search
(policy); plus synthetic ground truths (dgp), comparison baselines
(benchmarks), experiment protocols (evaluation), and a batch CLI (cli).
"""

__version__ = "0.1.0"
