"""Greedy learning of one smooth pattern transformation manifold.

The learner alternates between adding one parametric atom to the pattern
and re-estimating the transformation of every training image.  Atom
selection runs in three stages of increasing fidelity: a coarse scan of
the atom parameter box with the closed-form best coefficient, convex
refinement of the residual approximation objective through its
difference-of-convex decomposition, and plain gradient descent on the
exact tangent-distance objective jointly over parameters and coefficient.
An atom that fails to lower the exact projection error is rejected and
the learning stops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dc_calculus import ResidualStack
from .dictionary import Atom, AtomParams, Pattern
from .geometry import TWO_PI, ParamDomain, TransformModel, default_lambda_domain
from .manifold import (
    InterpolatedPattern,
    SamplingGrid,
    fd_stencil,
    project,
    project_many,
    render_batch,
    tangent_residual_from_matrix,
)
from .optimize import SolverOptions, cutting_plane_min, gradient_descent


def default_gamma_domain(grid: SamplingGrid) -> ParamDomain:
    """Atom parameter box: any orientation, centers over the central half
    of the window, widths between 1/32 and 1/8 of the window size."""
    lows = np.array(
        [0.0, grid.x0 + 0.25 * grid.width, grid.y0 + 0.25 * grid.height, grid.width / 32.0, grid.height / 32.0]
    )
    highs = np.array(
        [TWO_PI, grid.x0 + 0.75 * grid.width, grid.y0 + 0.75 * grid.height, grid.width / 8.0, grid.height / 8.0]
    )
    return ParamDomain(lows, highs)


@dataclass(frozen=True)
class PatsConfig:
    model: TransformModel = TransformModel.FULL5
    lambda_domain: ParamDomain | None = None
    gamma_domain: ParamDomain | None = None
    max_atoms: int = 10
    error_tol: float = 1e-3
    coef_limit: float | None = None
    coarse_points: int = 5
    projection_points: int = 7
    projection_cycles: int = 8
    reference: int | str = "centroid"
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self):
        if self.max_atoms < 1:
            raise ValueError("max_atoms must be at least 1")
        if self.error_tol < 0.0:
            raise ValueError("error_tol must be nonnegative")
        if self.coarse_points < 2 or self.projection_points < 2:
            raise ValueError("grid scans need at least 2 points per dimension")
        if isinstance(self.reference, str) and self.reference not in ("centroid", "first"):
            raise ValueError("reference must be 'centroid', 'first', or an image index")


@dataclass(frozen=True)
class AtomChoice:
    params: AtomParams
    coef: float
    approx_error: float
    tangent_error: float


@dataclass(eq=False)
class PatsResult:
    pattern: Pattern
    projections: tuple
    error_trace: tuple          # (atom count, exact error / base error)
    stop_reason: str
    reference_index: int
    base_error: float

    @property
    def lambdas(self):
        return tuple(p.params for p in self.projections)

    @property
    def final_error(self) -> float:
        normalizer = self.base_error if self.base_error > 0.0 else 1.0
        return self.error_trace[-1][1] * normalizer


class _TangentWorkspace:
    """Per-selection cache for the exact tangent-distance objective.

    Tangent columns of pattern + c*atom split linearly into a pattern part
    and an atom part sharing one finite-difference plan, so the pattern
    renders happen once and each candidate costs a single batched render
    of the atom over every stencil point.
    """

    def __init__(self, images, pattern: Pattern, lambdas, model, lambda_domain, grid, mother, weights=None):
        self.grid = grid
        self.mother = mother
        self.weights = np.ones(len(images)) if weights is None else np.asarray(weights, dtype=float)
        stencils = [fd_stencil(model.to_vector(lam), model, lambda_domain) for lam in lambdas]
        self._combs = [st.comb for st in stencils]
        flat_params = []
        slices = []
        start = 0
        for st in stencils:
            flat_params.extend(model.from_vector(v) for v in st.points)
            slices.append(slice(start, start + st.points.shape[0]))
            start += st.points.shape[0]
        self._params = flat_params
        self._slices = slices
        if pattern.atom_count:
            prenders = render_batch(pattern, flat_params, grid)
        else:
            prenders = np.zeros((len(flat_params), grid.n))
        self._pattern_cols = [self._combs[i].T @ prenders[slices[i]] for i in range(len(images))]
        self.residuals = [images[i].values - prenders[slices[i]][0] for i in range(len(images))]

    def error(self, x) -> float:
        """Weighted sum of squared tangent distances with the atom added."""
        gamma, c = x[:5], float(x[5])
        atom = Pattern(self.mother, (Atom(AtomParams.from_vector(gamma), 1.0),))
        arenders = render_batch(atom, self._params, self.grid)
        total = 0.0
        for i, sl in enumerate(self._slices):
            block = arenders[sl]
            cols = (self._pattern_cols[i] + c * (self._combs[i].T @ block)).T
            w = self.residuals[i] - c * block[0]
            _, dist = tangent_residual_from_matrix(w, cols)
            total += self.weights[i] * dist * dist
        return total


def select_atom(
    images,
    pattern: Pattern,
    lambdas,
    model: TransformModel,
    lambda_domain: ParamDomain,
    gamma_domain: ParamDomain,
    coef_range,
    mother,
    grid: SamplingGrid,
    solver: SolverOptions | None = None,
    coarse_points: int = 5,
) -> AtomChoice:
    """Pick the next atom and coefficient for the current residuals."""
    solver = solver or SolverOptions()
    ws = _TangentWorkspace(images, pattern, lambdas, model, lambda_domain, grid, mother)
    stack = ResidualStack(mother, grid, lambdas, ws.residuals)

    # stage 1: coarse scan; the objective is quadratic in c, so each grid
    # point gets its exact best coefficient for free
    gammas = gamma_domain.grid_points(coarse_points)
    c_star, vals = stack.best_coefficients(gammas, coef_range)
    best = int(np.argmin(vals))
    x0 = np.append(gammas[best], c_star[best])

    # stage 2: convex refinement of the approximation objective
    dcf = stack.dc_function(gamma_domain, coef_range)
    x1, _ = cutting_plane_min(dcf, dcf.domain, x0, solver)

    # stage 3: gradient descent on the exact tangent objective
    x2 = gradient_descent(ws.error, x1, dcf.domain, solver)

    # The tangent objective extrapolates the manifold linearly, which can
    # flatter a candidate whose fixed-pose error got worse than having no
    # atom at all; such a candidate would be rejected downstream, so fall
    # back to the convex-stage point, whose fixed-pose error never exceeds
    # the no-atom level.
    if stack.value(x2[:5], x2[5]) > stack.const:
        x2 = x1
    return AtomChoice(
        params=AtomParams.from_vector(x2[:5]),
        coef=float(x2[5]),
        approx_error=stack.value(x2[:5], x2[5]),
        tangent_error=ws.error(x2),
    )


def initialize_projections(images, model, domain, pts_per_dim=7, reference="centroid"):
    """Bootstrap per-image transformations from one reference image.

    The reference's bilinear interpolant stands in for the still-unknown
    pattern and every image is projected onto its manifold.  By default the
    reference is the image closest to the set average.
    """
    if reference == "centroid":
        stack = np.stack([u.values for u in images])
        mean = stack.mean(axis=0)
        ref = int(np.argmin(np.linalg.norm(stack - mean, axis=1)))
    elif reference == "first":
        ref = 0
    else:
        ref = int(reference)
        if not 0 <= ref < len(images):
            raise ValueError("reference index out of range")
    interp = InterpolatedPattern(images[ref])
    return project_many(images, interp, model, domain, pts_per_dim=pts_per_dim), ref


def run_pats(images, mother, config: PatsConfig | None = None) -> PatsResult:
    """Learn a pattern whose transformation manifold fits the images.

    Returns the learned pattern, the final projections, the relative exact
    error after each accepted atom (starting from (0, 1.0)), and why the
    loop stopped.
    """
    config = config or PatsConfig()
    images = list(images)
    if not images:
        raise ValueError("need at least one image")
    grid = images[0].grid
    if any(u.grid != grid for u in images[1:]):
        raise ValueError("images must share one sampling grid")

    model = config.model
    lam_domain = config.lambda_domain
    if lam_domain is None:
        lam_domain = default_lambda_domain(model, grid.width)
    gamma_domain = config.gamma_domain
    if gamma_domain is None:
        gamma_domain = default_gamma_domain(grid)
    if config.coef_limit is not None:
        c_max = float(config.coef_limit)
    else:
        c_max = 3.0 * max(u.norm for u in images) / mother.peak
    coef_range = (-c_max, c_max)

    base_error = sum(u.norm**2 for u in images)
    normalizer = base_error if base_error > 0.0 else 1.0
    projections, ref = initialize_projections(
        images, model, lam_domain, config.projection_points, config.reference
    )
    lambdas = [p.params for p in projections]
    pattern = Pattern(mother)
    error = base_error
    trace = [(0, 1.0)]
    stop_reason = "atom budget"
    for j in range(1, config.max_atoms + 1):
        choice = select_atom(
            images,
            pattern,
            lambdas,
            model,
            lam_domain,
            gamma_domain,
            coef_range,
            mother,
            grid,
            config.solver,
            config.coarse_points,
        )
        candidate = pattern.with_atom(choice.params, choice.coef)
        if candidate.atom_count == pattern.atom_count:
            stop_reason = "zero coefficient"
            break
        new_projs = [
            project(
                u,
                candidate,
                model,
                lam_domain,
                hint=lam,
                pts_per_dim=config.projection_points,
                max_cycles=config.projection_cycles,
            )
            for u, lam in zip(images, lambdas)
        ]
        new_error = sum(p.distance**2 for p in new_projs)
        if new_error > error:
            stop_reason = "rejected non-improving atom"
            break
        gain = (error - new_error) / error if error > 0.0 else 0.0
        pattern = candidate
        projections = new_projs
        lambdas = [p.params for p in new_projs]
        trace.append((j, new_error / normalizer))
        error = new_error
        if gain < config.error_tol:
            stop_reason = "error tolerance"
            break
    return PatsResult(
        pattern=pattern,
        projections=tuple(projections),
        error_trace=tuple(trace),
        stop_reason=stop_reason,
        reference_index=ref,
        base_error=base_error,
    )
