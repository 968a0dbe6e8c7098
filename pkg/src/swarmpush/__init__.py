"""swarmpush: cooperative multi-robot push manipulation at desk scale.

Differentiable planar soft-body simulator, gradient-based and MPPI motion
planners, and distillation of the planner into a masked self-attention
policy that generalizes across robot counts and physics parameters.
"""

from .backend import BACKEND_NAME, COMPILED

__version__ = "0.1.0"
__all__ = ["BACKEND_NAME", "COMPILED", "__version__"]
