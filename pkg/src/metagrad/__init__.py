"""metagrad: a meta-learning numerical-optimization laboratory.

Implements MAML with differentiable inner loops, a family of learnable
meta-optimizers (Meta-SGD, Meta-Curvature, Kronecker-factored), seeded
synthetic task generators, a closed-form oracle for the 1D regression
landscape, and a CLI experiment harness.
"""

from .backend import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
