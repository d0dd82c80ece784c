"""Deterministic simulator and analysis harness for cluster-cycling federated learning.

Devices are grouped into clusters that take turns running federated averaging
within each learning round, giving several global updates per round; classic
federated averaging is the single-cluster special case. The package simulates
both at desk scale, estimates the heterogeneity and smoothness constants its
convergence guarantees depend on, and checks measured trajectories against
the theoretical bounds.
"""

from ._kernels import HAVE_EXT, backend_name

__version__ = "0.1.0"

__all__ = ["HAVE_EXT", "backend_name", "__version__"]
