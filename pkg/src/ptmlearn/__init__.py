"""Learning smooth pattern transformation manifolds.

A pattern is a sparse sum of geometrically transformed atoms from a
parametric dictionary; transforming the pattern sweeps out a manifold in
image space.  This package learns such patterns greedily from example
images, either for a single image class or jointly for several classes so
that the manifolds double as a transformation-invariant classifier.
"""

from .dc_calculus import DcFunction, dc_approx_error, dc_joint_error
from .dictionary import Atom, AtomParams, Gaussian, InverseMultiquadric, Pattern, make_mother
from .geometry import (
    ParamDomain,
    TransformModel,
    TransformParams,
    default_lambda_domain,
    forward_map,
    inverse_map,
)
from .jpats import (
    OUTLIER,
    AlphaSchedule,
    BetaPolicy,
    ClassModel,
    JpatsConfig,
    classify,
    estimate_beta,
    from_pats_result,
    run_jpats,
)
from .manifold import (
    Image,
    InterpolatedPattern,
    Projection,
    SamplingGrid,
    project,
    project_many,
    render,
    render_values,
    tangent_matrix,
    tangent_residual,
)
from .optimize import SolverOptions, coarse_search, cutting_plane_min, golden_section_min, gradient_descent
from .pats import AtomChoice, PatsConfig, PatsResult, default_gamma_domain, run_pats, select_atom

__version__ = "0.1.0"

__all__ = [
    "Atom",
    "AtomChoice",
    "AtomParams",
    "AlphaSchedule",
    "BetaPolicy",
    "ClassModel",
    "DcFunction",
    "Gaussian",
    "Image",
    "InterpolatedPattern",
    "InverseMultiquadric",
    "JpatsConfig",
    "OUTLIER",
    "ParamDomain",
    "PatsConfig",
    "PatsResult",
    "Pattern",
    "Projection",
    "SamplingGrid",
    "SolverOptions",
    "TransformModel",
    "TransformParams",
    "classify",
    "coarse_search",
    "cutting_plane_min",
    "dc_approx_error",
    "dc_joint_error",
    "default_gamma_domain",
    "default_lambda_domain",
    "estimate_beta",
    "forward_map",
    "from_pats_result",
    "golden_section_min",
    "gradient_descent",
    "inverse_map",
    "make_mother",
    "project",
    "project_many",
    "render",
    "render_values",
    "run_jpats",
    "run_pats",
    "select_atom",
    "tangent_matrix",
    "tangent_residual",
]
