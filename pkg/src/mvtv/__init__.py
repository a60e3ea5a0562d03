"""Total-variation regularization of measure-valued images.

Images map voxels of a d-dimensional grid to probability measures on a
discretized compact metric space (sphere, circle, or explicit finite
space).  The TV seminorm is the Kantorovich-Rubinstein-norm variant, the
data term is either exact Wasserstein-1 or squared L2, and both models are
solved as saddle-point problems with a primal-dual first-order method.
"""

from .metric_space import (
    MetricSpaceDiscretization,
    build_circle,
    build_finite,
    build_icosphere,
    space_from_tag,
)
from .image_grid import GridSpec, grad, neg_div
from .transport import w1_dual, w1_lp, wasserstein_median_bruteforce

__all__ = [
    "MetricSpaceDiscretization",
    "build_icosphere",
    "build_circle",
    "build_finite",
    "space_from_tag",
    "GridSpec",
    "grad",
    "neg_div",
    "w1_lp",
    "w1_dual",
    "wasserstein_median_bruteforce",
]

__version__ = "0.1.0"
