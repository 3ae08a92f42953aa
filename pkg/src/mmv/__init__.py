"""Constrained multi-period mean-variance portfolio selection under dynamic
factor models: opportunity-process fitting, pre-committed policies,
efficient frontiers, supermartingale-measure diagnostics, and backtests."""

from . import approximator, backtest, cli, cones, fio, market, policy, vssm

__version__ = "0.1.0"

__all__ = [
    "approximator",
    "backtest",
    "cli",
    "cones",
    "fio",
    "market",
    "policy",
    "vssm",
    "__version__",
]
