"""Adaptive boundary control of linearized ARZ traffic flow.

Subpackages cover the plant model, hyperbolic simulation, backstepping
gain kernels, the adaptive controller, a neural-operator kernel
surrogate, dataset generation, Lyapunov diagnostics, and a CLI.
"""

from arzno.model import TrafficParams, LinearizedParams, derive_linearized

__all__ = ["TrafficParams", "LinearizedParams", "derive_linearized"]
__version__ = "0.1.0"
