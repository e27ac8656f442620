"""Stochastic segmentation with flow-based logit distributions.

Modules:
    datagen           synthetic benchmarks and the on-disk dataset format
    distributions     softmax, categorical likelihood, Gaussian fields
    rank_analysis     effective/numerical rank of pushforward covariances
    flows_discrete    affine autoregressive flows and cached self-scoring
    flows_continuous  interpolation path, projected velocity, ODE solvers
    networks          prior/flow networks, EMA, checkpoint container
    objectives        training losses and bits-per-dim reporting
    metrics           IoU, Dice, energy distance, matched IoU, uncertainty
    training          run config, optimisation loop, evaluation
    cli               command-line driver
"""

__version__ = "0.1.0"

__all__ = [
    "cli",
    "datagen",
    "distributions",
    "flows_continuous",
    "flows_discrete",
    "metrics",
    "networks",
    "objectives",
    "ppm",
    "rank_analysis",
    "training",
]
