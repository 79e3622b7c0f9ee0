"""Minimax Pareto fairness: APStar weight search, closed-form synthetic oracles, star-set benchmarks, models and metrics."""

__version__ = "0.1.0"
