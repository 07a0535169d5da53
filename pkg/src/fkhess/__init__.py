"""Monte Carlo gradients and Hessians of heat semigroups and kernels on model manifolds."""

__version__ = "0.1.0"

from fkhess.geometry import (  # noqa: F401
    ModelManifold,
    euclidean,
    hyperbolic,
    sphere,
    warped,
)
