"""Distributed and subspace-constrained stochastic gradient descent at desk scale.

Simulation of the penalized stochastic recursion and its agentwise consensus
form, the underlying nonautonomous gradient flow, stable-manifold machinery
near regular saddle points, and seeded experiment campaigns.
"""

__version__ = "0.1.0"
