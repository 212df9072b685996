"""Distributed stochastic generalized Nash equilibrium seeking.

Douglas-Rachford splitting over a communication graph, with best responses
computed inexactly by projected stochastic subgradient steps.
"""

__version__ = "0.1.0"
