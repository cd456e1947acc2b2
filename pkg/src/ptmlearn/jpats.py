"""Joint multi-class manifold learning and nearest-manifold classification.

Each class keeps its own pattern; the per-iteration objective augments the
approximation error with a sigmoid-relaxed classification penalty whose
linearization yields signed per-image weights.  Atoms for all classes are
selected jointly: one convex-refinement pass per class block followed by a
gradient descent over every block at once, and the whole iteration is rolled
back whenever the misclassification count would grow.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .dc_calculus import ResidualStack, append_coef_dim
from .dictionary import AtomParams, Pattern
from .geometry import ParamDomain, TransformModel, default_lambda_domain
from .manifold import InterpolatedPattern, Projection, project, project_many, render_batch
from .optimize import SolverOptions, cutting_plane_min, golden_section_min, gradient_descent
from .pats import PatsConfig, _TangentWorkspace, default_gamma_domain, run_pats

OUTLIER = "outlier"

BETA_GRID_LOW = 1e-2
BETA_GRID_HIGH = 1e4
BETA_GRID_POINTS = 60


@dataclass(frozen=True)
class AlphaSchedule:
    """Classification weight as a logistic ramp over the iteration count."""

    start: float = 0.5
    end: float = 10.0
    center: float = 6.0
    slope: float = 1.0

    def __post_init__(self):
        if self.start < 0.0 or self.end < 0.0:
            raise ValueError("alpha values must be nonnegative")

    def value(self, iteration: int) -> float:
        return self.start + (self.end - self.start) * float(expit(self.slope * (iteration - self.center)))

    @property
    def is_zero(self) -> bool:
        return self.start == 0.0 and self.end == 0.0


@dataclass(frozen=True)
class BetaPolicy:
    """Sigmoid sharpness: refitted each iteration or pinned to a value."""

    mode: str = "fitted"
    value: float = 1.0

    def __post_init__(self):
        if self.mode not in ("fitted", "fixed"):
            raise ValueError("beta mode must be 'fitted' or 'fixed'")
        if not self.value > 0.0:
            raise ValueError("beta must be positive")


@dataclass(frozen=True)
class JpatsConfig:
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
    alpha: AlphaSchedule = field(default_factory=AlphaSchedule)
    beta: BetaPolicy = field(default_factory=BetaPolicy)
    coef_significance: float = 0.05
    patience: int = 3
    block_order: str = "error"

    def __post_init__(self):
        if self.max_atoms < 1:
            raise ValueError("max_atoms must be at least 1")
        if self.coef_significance < 0.0:
            raise ValueError("coef_significance must be nonnegative")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.block_order not in ("error", "index"):
            raise ValueError("block_order must be 'error' or 'index'")

    def to_pats_config(self) -> PatsConfig:
        return PatsConfig(
            model=self.model,
            lambda_domain=self.lambda_domain,
            gamma_domain=self.gamma_domain,
            max_atoms=self.max_atoms,
            error_tol=self.error_tol,
            coef_limit=self.coef_limit,
            coarse_points=self.coarse_points,
            projection_points=self.projection_points,
            projection_cycles=self.projection_cycles,
            reference=self.reference,
            solver=self.solver,
        )


@dataclass(eq=False)
class WeightState:
    """Rivals and linearization weights of the classification penalty."""

    beta: float
    f0: np.ndarray        # squared own-distance minus squared rival-distance
    eta: np.ndarray       # sigmoid slope at f0, strictly positive
    rivals: np.ndarray    # nearest non-own class per image

    def rival_rows(self, class_index: int) -> np.ndarray:
        return np.flatnonzero(self.rivals == class_index)


@dataclass(eq=False)
class ClassModel:
    """Learned per-class patterns with the full cross-projection table."""

    patterns: tuple
    projections: tuple           # row per image: tuple over classes of Projection
    labels: np.ndarray
    class_slices: tuple
    error_trace: tuple           # (iteration, E_a, E_c count, E_a + alpha*E_c)
    beta: float
    stop_reason: str
    reference_indices: tuple
    transform_model: TransformModel
    lambda_domain: ParamDomain
    gamma_domain: ParamDomain
    mother: object
    grid: object

    @property
    def class_count(self) -> int:
        return len(self.patterns)


def sigmoid(f: float, beta: float):
    """Smoothed misclassification indicator S(f) = 1/(1 + e^(-beta f))."""
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    return expit(beta * np.asarray(f, dtype=float))


def eta(f0: float, beta: float):
    """Slope of the sigmoid at f0; the linearization weight."""
    s = sigmoid(f0, beta)
    return np.maximum(beta * s * (1.0 - s), 1e-300)


def estimate_beta(f0_values, misclassified, previous: float = 1.0) -> float:
    """Least-squares logistic slope matching S(beta*f0) to the 0/1 flags.

    Scans a logarithmic grid and refines the winner by golden section in
    log space.  All-0 or all-1 flags carry no slope information and return
    the previous value.
    """
    f0 = np.asarray(f0_values, dtype=float)
    flags = np.asarray(misclassified, dtype=float)
    if f0.size == 0:
        raise ValueError("need at least one sample")
    if np.all(flags == flags[0]):
        return float(previous)

    def loss(b):
        return float(np.sum((expit(b * f0) - flags) ** 2))

    grid = np.logspace(np.log10(BETA_GRID_LOW), np.log10(BETA_GRID_HIGH), BETA_GRID_POINTS)
    losses = np.array([loss(b) for b in grid])
    k = int(np.argmin(losses))
    lo = np.log10(grid[max(k - 1, 0)])
    hi = np.log10(grid[min(k + 1, grid.size - 1)])
    t_best, refined = golden_section_min(lambda t: loss(10.0**t), lo, hi, tol=1e-4)
    if refined < losses[k]:
        return float(10.0**t_best)
    return float(grid[k])


def update_rivals_and_weights(distances, labels, beta: float) -> WeightState:
    """Nearest rival class, margin f0, and sigmoid weights per image.

    ``distances`` holds the (unsquared) distance of every image to every
    class manifold; rival ties break toward the lowest class index.
    """
    d = np.asarray(distances, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if d.ndim != 2 or d.shape[1] < 2:
        raise ValueError("need distances to at least two classes")
    if beta <= 0.0:
        raise ValueError("beta must be positive")
    n = d.shape[0]
    d2 = d * d
    own = d2[np.arange(n), labels]
    masked = d2.copy()
    masked[np.arange(n), labels] = np.inf
    rivals = np.argmin(masked, axis=1)
    f0 = own - masked[np.arange(n), rivals]
    return WeightState(beta=float(beta), f0=f0, eta=np.asarray(eta(f0, beta)), rivals=rivals)


def misclassified_flags(distances, labels) -> np.ndarray:
    """1 where nearest-manifold assignment disagrees with the true label."""
    predicted = np.argmin(np.asarray(distances, dtype=float), axis=1)
    return (predicted != np.asarray(labels, dtype=int)).astype(int)


def joint_select_atoms(
    images,
    labels,
    patterns,
    proj_params,
    weight_state: WeightState,
    alpha: float,
    mother,
    grid,
    model: TransformModel,
    lambda_domain: ParamDomain,
    gamma_domain: ParamDomain,
    coef_range,
    solver: SolverOptions | None = None,
    coarse_points: int = 5,
    block_order=None,
):
    """One candidate atom (parameters, coefficient) per class.

    Per class block, in the given order: coarse scan with the closed-form
    coefficient, then convex refinement of the block's signed-weight
    objective.  The margins and weights are refreshed once against the
    candidate patterns before a joint gradient descent over all blocks of
    the weighted tangent objective.
    """
    solver = solver or SolverOptions()
    labels = np.asarray(labels, dtype=int)
    n_images = len(images)
    n_classes = len(patterns)
    order = list(block_order) if block_order is not None else list(range(n_classes))
    gammas = gamma_domain.grid_points(coarse_points)
    candidates = [None] * n_classes

    def block_rows(m, state):
        return np.flatnonzero(labels == m), state.rival_rows(m)

    def residuals_for(m, rows):
        lams = [proj_params[i][m] for i in rows]
        if patterns[m].atom_count:
            renders = render_batch(patterns[m], lams, grid)
        else:
            renders = np.zeros((len(rows), grid.n))
        return lams, [images[i].values - renders[j] for j, i in enumerate(rows)]

    for m in order:
        own, riv = block_rows(m, weight_state)
        rows = np.concatenate([own, riv])
        lams, resids = residuals_for(m, rows)
        weights = np.concatenate([1.0 + alpha * weight_state.eta[own], -alpha * weight_state.eta[riv]])
        stack = ResidualStack(mother, grid, lams, resids, weights)
        c_star, vals = stack.best_coefficients(gammas, coef_range)
        best = int(np.argmin(vals))
        x0 = np.append(gammas[best], c_star[best])
        dcf = stack.dc_function(gamma_domain, coef_range)
        x1, _ = cutting_plane_min(dcf, dcf.domain, x0, solver)
        candidates[m] = x1

    # refresh the margins once against the candidate patterns, at the
    # current transformations, before the exact-objective descent
    refreshed_d = np.empty((n_images, n_classes))
    values = np.stack([u.values for u in images])
    for m in range(n_classes):
        cand = patterns[m].with_atom(AtomParams.from_vector(candidates[m][:5]), float(candidates[m][5]))
        lams = [proj_params[i][m] for i in range(n_images)]
        if cand.atom_count:
            renders = render_batch(cand, lams, grid)
        else:
            renders = np.zeros((n_images, grid.n))
        refreshed_d[:, m] = np.linalg.norm(values - renders, axis=1)
    refreshed = update_rivals_and_weights(refreshed_d, labels, weight_state.beta)

    workspaces = []
    for m in range(n_classes):
        own, riv = block_rows(m, refreshed)
        rows = np.concatenate([own, riv])
        lams = [proj_params[i][m] for i in rows]
        weights = np.concatenate([1.0 + alpha * refreshed.eta[own], -alpha * refreshed.eta[riv]])
        workspaces.append(
            _TangentWorkspace([images[i] for i in rows], patterns[m], lams, model, lambda_domain, grid, mother, weights)
        )

    block_domain = append_coef_dim(gamma_domain, coef_range)
    joint_domain = ParamDomain(
        np.tile(block_domain.lows, n_classes), np.tile(block_domain.highs, n_classes)
    )
    x0_joint = np.concatenate(candidates)

    def objective(x):
        return sum(workspaces[m].error(x[6 * m : 6 * m + 6]) for m in range(n_classes))

    x_joint = gradient_descent(objective, x0_joint, joint_domain, solver)
    return [
        (AtomParams.from_vector(x_joint[6 * m : 6 * m + 5]), float(x_joint[6 * m + 5]))
        for m in range(n_classes)
    ]


def _class_reference(class_values: np.ndarray, reference) -> int:
    if reference == "centroid":
        mean = class_values.mean(axis=0)
        return int(np.argmin(np.linalg.norm(class_values - mean, axis=1)))
    if reference == "first":
        return 0
    ref = int(reference)
    if not 0 <= ref < class_values.shape[0]:
        raise ValueError("reference index out of range")
    return ref


def run_jpats(class_images, mother, config: JpatsConfig | None = None) -> ClassModel:
    """Learn one pattern per class with the joint classification objective.

    Images arrive grouped by class.  Every iteration proposes one atom per
    class, keeps those with significant coefficients, re-estimates all
    own- and cross-class transformations locally, and accepts the
    iteration only if the misclassification count does not grow; a
    rejected iteration restores patterns and projections exactly.  The
    sigmoid weight updates survive either way.
    """
    config = config or JpatsConfig()
    class_images = [list(cls) for cls in class_images]
    if not class_images:
        raise ValueError("need at least one class")
    if any(len(cls) == 0 for cls in class_images):
        raise ValueError("every class needs at least one image")
    n_classes = len(class_images)
    if n_classes == 1:
        if config.alpha.is_zero:
            result = run_pats(class_images[0], mother, config.to_pats_config())
            return from_pats_result(result, mother, config, class_images[0][0].grid)
        raise ValueError("joint learning needs at least two classes")

    flat_images = [u for cls in class_images for u in cls]
    grid = flat_images[0].grid
    if any(u.grid != grid for u in flat_images[1:]):
        raise ValueError("images must share one sampling grid")
    labels = np.concatenate([np.full(len(cls), m, dtype=int) for m, cls in enumerate(class_images)])
    slices = []
    start = 0
    for cls in class_images:
        slices.append(slice(start, start + len(cls)))
        start += len(cls)
    n_images = len(flat_images)

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
        c_max = 3.0 * max(u.norm for u in flat_images) / mother.peak
    coef_range = (-c_max, c_max)

    # line-3 initialization: project every image onto every class
    # reference-interpolant manifold; distances then reflect the still
    # empty patterns while the transformation estimates are kept
    references = []
    table = [[None] * n_classes for _ in range(n_images)]
    for m, cls in enumerate(class_images):
        ref = _class_reference(np.stack([u.values for u in cls]), config.reference)
        references.append(ref)
        interp = InterpolatedPattern(cls[ref])
        projs = project_many(flat_images, interp, model, lam_domain, pts_per_dim=config.projection_points)
        for i, p in enumerate(projs):
            table[i][m] = Projection(p.params, flat_images[i].norm, flat_images[i].values.copy())
    dists = np.array([[table[i][m].distance for m in range(n_classes)] for i in range(n_images)])

    patterns = [Pattern(mother) for _ in range(n_classes)]
    beta = config.beta.value
    accepted_coefs: list[float] = []
    count = int(np.sum(misclassified_flags(dists, labels)))
    error_a = float(np.sum(dists[np.arange(n_images), labels] ** 2))
    trace = [(0, error_a, count, error_a + config.alpha.value(0) * count)]
    streak = 0
    stop_reason = "atom budget"

    for j in range(1, config.max_atoms + 1):
        alpha_j = config.alpha.value(j)
        state = update_rivals_and_weights(dists, labels, beta)
        if config.block_order == "error":
            per_class = [int(np.sum(misclassified_flags(dists, labels)[slices[m]])) for m in range(n_classes)]
            order = list(np.argsort(-np.asarray(per_class), kind="stable"))
        else:
            order = list(range(n_classes))
        proj_params = [[table[i][m].params for m in range(n_classes)] for i in range(n_images)]
        chosen = joint_select_atoms(
            flat_images,
            labels,
            patterns,
            proj_params,
            state,
            alpha_j,
            mother,
            grid,
            model,
            lam_domain,
            gamma_domain,
            coef_range,
            config.solver,
            config.coarse_points,
            order,
        )

        median = float(np.median(np.abs(accepted_coefs))) if accepted_coefs else None
        new_patterns = []
        changed = []
        for m, (params, coef) in enumerate(chosen):
            significant = coef != 0.0 if median is None else abs(coef) >= config.coef_significance * median
            cand = patterns[m].with_atom(params, coef) if significant else patterns[m]
            new_patterns.append(cand)
            changed.append(cand.atom_count != patterns[m].atom_count)

        if any(changed):
            new_cols = {}
            for m in range(n_classes):
                if not changed[m]:
                    continue
                new_cols[m] = [
                    project(
                        flat_images[i],
                        new_patterns[m],
                        model,
                        lam_domain,
                        hint=table[i][m].params,
                        pts_per_dim=config.projection_points,
                        max_cycles=config.projection_cycles,
                    )
                    for i in range(n_images)
                ]
            new_dists = dists.copy()
            for m, col in new_cols.items():
                new_dists[:, m] = [p.distance for p in col]
        else:
            new_cols = {}
            new_dists = dists

        new_count = int(np.sum(misclassified_flags(new_dists, labels)))
        if config.beta.mode == "fitted":
            new_state = update_rivals_and_weights(new_dists, labels, beta)
            beta = estimate_beta(new_state.f0, misclassified_flags(new_dists, labels), previous=beta)

        if new_count <= count and any(changed):
            for m, col in new_cols.items():
                for i in range(n_images):
                    table[i][m] = col[i]
            patterns = new_patterns
            dists = new_dists
            accepted_coefs.extend(abs(chosen[m][1]) for m in range(n_classes) if changed[m])
            streak = streak + 1 if new_count == count else 0
            count = new_count
        else:
            streak += 1
        error_a = float(np.sum(dists[np.arange(n_images), labels] ** 2))
        trace.append((j, error_a, count, error_a + alpha_j * count))
        if streak >= config.patience:
            stop_reason = "classification error converged"
            break

    return ClassModel(
        patterns=tuple(patterns),
        projections=tuple(tuple(row) for row in table),
        labels=labels,
        class_slices=tuple(slices),
        error_trace=tuple(trace),
        beta=float(beta),
        stop_reason=stop_reason,
        reference_indices=tuple(references),
        transform_model=model,
        lambda_domain=lam_domain,
        gamma_domain=gamma_domain,
        mother=mother,
        grid=grid,
    )


def from_pats_result(result, mother, config, grid) -> ClassModel:
    """Wrap a single-class greedy result in the joint model layout.

    Accepts either config flavour; only the shared geometry fields are used.
    """
    normalizer = result.base_error if result.base_error > 0.0 else 1.0
    trace = tuple((j, rel * normalizer, 0, rel * normalizer) for j, rel in result.error_trace)
    n = len(result.projections)
    lam_domain = config.lambda_domain
    if lam_domain is None:
        lam_domain = default_lambda_domain(config.model, grid.width)
    gamma_domain = config.gamma_domain
    if gamma_domain is None:
        gamma_domain = default_gamma_domain(grid)
    return ClassModel(
        patterns=(result.pattern,),
        projections=tuple((p,) for p in result.projections),
        labels=np.zeros(n, dtype=int),
        class_slices=(slice(0, n),),
        error_trace=trace,
        beta=config.beta.value if isinstance(config, JpatsConfig) else 1.0,
        stop_reason=result.stop_reason,
        reference_indices=(result.reference_index,),
        transform_model=config.model,
        lambda_domain=lam_domain,
        gamma_domain=gamma_domain,
        mother=mother,
        grid=grid,
    )


def classify(
    u,
    model: ClassModel,
    reject_threshold: float | None = None,
    distance_fn=None,
    pts_per_dim: int = 7,
):
    """Nearest-manifold label of an image, or OUTLIER beyond the threshold.

    Unseen images get a full coarse projection onto every class manifold;
    ``distance_fn(u, pattern, transform_model, domain) -> distance``
    replaces the projection when supplied.
    """
    dists = np.empty(model.class_count)
    for m, pattern in enumerate(model.patterns):
        if distance_fn is not None:
            dists[m] = float(distance_fn(u, pattern, model.transform_model, model.lambda_domain))
        else:
            proj = project(u, pattern, model.transform_model, model.lambda_domain, pts_per_dim=pts_per_dim)
            dists[m] = proj.distance
    label = int(np.argmin(dists))
    if reject_threshold is not None and dists[label] > reject_threshold:
        return OUTLIER
    return label
