"""Smoothed approximate linear programming for approximate dynamic programming.

Submodules: ``mdp`` (exact oracles), ``lp``/``ipm``/``structured`` (solvers),
``formulations``, ``sampling``, ``bounds``, ``tetris`` and ``harness``.
Kept import-light; the numba-backed Tetris engine loads on first use.
"""

__version__ = "0.1.0"
