"""Doubly reflected BSDEs with logarithmic generators.

Least-squares Monte Carlo solvers, finite-difference obstacle-problem oracles
and a mixed zero-sum stochastic game engine.
"""
from .core import (BarrierPair, DiagnosticsConfig, DrbsdeError, GeneratorSpec,
                   SolutionQuadruple, TerminalCondition, TimeGrid, check_log_growth,
                   eval_generator)
from .forward_sde import PathEnsemble, SdeSpec, brownian, simulate_paths

__version__ = "0.1.0"

__all__ = ["BarrierPair", "DiagnosticsConfig", "DrbsdeError", "GeneratorSpec",
           "SolutionQuadruple", "TerminalCondition", "TimeGrid", "check_log_growth",
           "eval_generator", "PathEnsemble", "SdeSpec", "brownian", "simulate_paths"]
