"""Discretized transformation manifolds of a pattern.

Rendering evaluates a pattern analytically at inversely mapped grid
coordinates, so a rendered image is linear in the pattern's coefficients and
no resampling of pixel data ever happens.  Projection searches the
transformation box for the closest rendered view of a pattern; the tangent
machinery linearizes the manifold around a point to give a cheap distance
estimate used inside the optimization stages.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import ParamDomain, TransformModel, TransformParams, inverse_map
from .optimize import golden_section_min

TANGENT_REL_STEP = 1e-3
TANGENT_REGULARIZATION = 1e-10
PROJECTION_TOL = 1e-6
NEIGHBORHOOD_FRACTION = 0.1


@dataclass(frozen=True)
class SamplingGrid:
    """Regular raster lattice over a rectangular window.

    Sample point (r, c) sits at (x0 + c*width/cols, y0 + r*height/rows),
    row-major, so a grid with width == cols has unit pixel spacing.
    """

    x0: float = 0.0
    y0: float = 0.0
    width: float = 32.0
    height: float = 32.0
    rows: int = 32
    cols: int = 32

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one row and column")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("window dimensions must be positive")

    @property
    def n(self) -> int:
        return self.rows * self.cols

    @property
    def dx(self) -> float:
        return self.width / self.cols

    @property
    def dy(self) -> float:
        return self.height / self.rows

    def coords(self):
        """Flat row-major coordinate arrays (x, y), each of length n."""
        return _grid_coords(self)


@lru_cache(maxsize=64)
def _grid_coords(grid: SamplingGrid):
    xs = grid.x0 + np.arange(grid.cols) * grid.dx
    ys = grid.y0 + np.arange(grid.rows) * grid.dy
    xg, yg = np.meshgrid(xs, ys)
    x = xg.ravel()
    y = yg.ravel()
    x.setflags(write=False)
    y.setflags(write=False)
    return x, y


@dataclass(eq=False)
class Image:
    grid: SamplingGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size != self.grid.n:
            raise ValueError(f"expected {self.grid.n} values, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise ValueError("image values must be finite")
        self.values = v

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


class InterpolatedPattern:
    """Bilinear-interpolant view of a discrete image, zero outside the window.

    Only used to bootstrap projections from a reference image; learned
    patterns are always analytic.
    """

    def __init__(self, image: Image):
        self.grid = image.grid
        self._matrix = image.values.reshape(image.grid.rows, image.grid.cols)

    def evaluate(self, x, y):
        g = self.grid
        cx = (np.asarray(x, dtype=float) - g.x0) / g.dx
        cy = (np.asarray(y, dtype=float) - g.y0) / g.dy
        inside = (cx >= 0) & (cx <= g.cols - 1) & (cy >= 0) & (cy <= g.rows - 1)
        cx = np.clip(cx, 0, g.cols - 1)
        cy = np.clip(cy, 0, g.rows - 1)
        c0 = np.minimum(np.floor(cx).astype(int), g.cols - 2) if g.cols > 1 else np.zeros_like(cx, int)
        r0 = np.minimum(np.floor(cy).astype(int), g.rows - 2) if g.rows > 1 else np.zeros_like(cy, int)
        fx = cx - c0
        fy = cy - r0
        m = self._matrix
        if g.cols > 1 and g.rows > 1:
            val = (
                m[r0, c0] * (1 - fx) * (1 - fy)
                + m[r0, c0 + 1] * fx * (1 - fy)
                + m[r0 + 1, c0] * (1 - fx) * fy
                + m[r0 + 1, c0 + 1] * fx * fy
            )
        else:
            val = m[r0, c0]
        return np.where(inside, val, 0.0)


def render(pattern, params: TransformParams, grid: SamplingGrid) -> Image:
    """Discretized transformed view of a pattern on the grid."""
    return Image(grid, render_values(pattern, params, grid))


def render_values(pattern, params: TransformParams, grid: SamplingGrid) -> np.ndarray:
    x, y = grid.coords()
    xp, yp = inverse_map(params, x, y)
    return pattern.evaluate(xp, yp)


def render_batch(pattern, params_list, grid: SamplingGrid) -> np.ndarray:
    """Stacked renders for several transformations, shape (len(list), n)."""
    if len(params_list) == 0:
        return np.empty((0, grid.n))
    x, y = grid.coords()
    ang = np.array([p.angle for p in params_list])[:, None]
    tx = np.array([p.tx for p in params_list])[:, None]
    ty = np.array([p.ty for p in params_list])[:, None]
    sx = np.array([p.sx for p in params_list])[:, None]
    sy = np.array([p.sy for p in params_list])[:, None]
    ca, sa = np.cos(ang), np.sin(ang)
    dx = x[None, :] - tx
    dy = y[None, :] - ty
    xp = (ca * dx + sa * dy) / sx
    yp = (ca * dy - sa * dx) / sy
    return pattern.evaluate(xp, yp)


@dataclass(eq=False)
class Projection:
    params: TransformParams
    distance: float
    residual: np.ndarray


def project(
    u: Image,
    pattern,
    model: TransformModel,
    domain: ParamDomain,
    hint: TransformParams | None = None,
    pts_per_dim: int = 7,
    tol: float = PROJECTION_TOL,
    max_cycles: int = 8,
) -> Projection:
    """Approximate closest point of the pattern's manifold to an image.

    Without a hint the whole box is scanned on a coarse grid; with a hint only
    a neighborhood of 10% of each dimension's width around it.  The scan
    winner is refined by cyclic per-dimension golden-section line searches
    until the relative distance improvement of a full cycle drops below
    ``tol``.  The returned distance never exceeds the distance at the hint or
    at any scanned candidate.
    """
    values = u.values
    if getattr(pattern, "atoms", None) == ():
        params = hint if hint is not None else model.from_vector(domain.center())
        return Projection(params, float(np.linalg.norm(values)), values.copy())

    def distance_at(vec):
        resid = values - render_values(pattern, model.from_vector(vec), u.grid)
        return float(np.linalg.norm(resid))

    widths = domain.widths()
    if hint is None:
        candidates = domain.grid_points(pts_per_dim)
        axes = domain.grid_axes(pts_per_dim)
        spans = np.array([(ax[1] - ax[0]) if ax.size > 1 else 0.0 for ax in axes])
    else:
        center = domain.clip(model.to_vector(hint))
        offsets = np.array([-NEIGHBORHOOD_FRACTION, 0.0, NEIGHBORHOOD_FRACTION])
        axes = []
        for k in range(domain.dim):
            if widths[k] <= 0.0:
                axes.append(np.array([center[k]]))
            else:
                pts = np.clip(center[k] + offsets * widths[k], domain.lows[k], domain.highs[k])
                axes.append(np.unique(pts))
        mesh = np.meshgrid(*axes, indexing="ij")
        candidates = np.stack([m.ravel() for m in mesh], axis=-1)
        spans = np.where(widths > 0.0, NEIGHBORHOOD_FRACTION * widths, 0.0)

    dists = _batch_distances(values, pattern, model, candidates, u.grid)
    best_idx = int(np.argmin(dists))
    best_vec = candidates[best_idx].copy()
    best_dist = float(dists[best_idx])

    best_vec, _ = _refine_projection(
        distance_at, domain, best_vec, best_dist, spans, tol, max_cycles
    )
    params = model.from_vector(best_vec)
    resid = values - render_values(pattern, params, u.grid)
    return Projection(params, float(np.linalg.norm(resid)), resid)


def _refine_projection(distance_at, domain, best_vec, best_dist, spans, tol, max_cycles):
    """Cyclic per-dimension golden-section polish of a scan winner."""
    widths = domain.widths()
    free = np.flatnonzero(widths > 0.0)
    for _ in range(max_cycles):
        start_dist = best_dist
        for k in free:
            span = spans[k] if spans[k] > 0.0 else widths[k] * NEIGHBORHOOD_FRACTION
            lo = max(domain.lows[k], best_vec[k] - span)
            hi = min(domain.highs[k], best_vec[k] + span)
            if hi <= lo:
                continue

            def line_obj(t, k=k):
                vec = best_vec.copy()
                vec[k] = t
                return distance_at(vec)

            t_best, d_best = golden_section_min(line_obj, lo, hi, tol=1e-3 * (hi - lo))
            if d_best < best_dist:
                best_vec[k] = t_best
                best_dist = d_best
        if start_dist - best_dist < tol * max(start_dist, 1e-300):
            break
    return best_vec, best_dist


def project_many(
    images,
    pattern,
    model: TransformModel,
    domain: ParamDomain,
    pts_per_dim: int = 7,
    tol: float = PROJECTION_TOL,
    max_cycles: int = 8,
    chunk: int = 512,
):
    """Project several images onto one manifold, sharing the grid renders.

    Equivalent to hintless project() per image, but each scanned candidate
    is rendered once for the whole set instead of once per image.
    """
    if not images:
        return []
    grid = images[0].grid
    stack = np.stack([u.values for u in images])
    if getattr(pattern, "atoms", None) == ():
        params = model.from_vector(domain.center())
        return [Projection(params, float(np.linalg.norm(u.values)), u.values.copy()) for u in images]

    candidates = domain.grid_points(pts_per_dim)
    axes = domain.grid_axes(pts_per_dim)
    spans = np.array([(ax[1] - ax[0]) if ax.size > 1 else 0.0 for ax in axes])

    sq_norms = np.sum(stack * stack, axis=1)
    best_d2 = np.full(len(images), np.inf)
    best_idx = np.zeros(len(images), dtype=int)
    for start in range(0, candidates.shape[0], chunk):
        block = candidates[start : start + chunk]
        renders = render_batch(pattern, [model.from_vector(v) for v in block], grid)
        d2 = sq_norms[:, None] - 2.0 * stack @ renders.T + np.sum(renders * renders, axis=1)[None, :]
        block_best = np.argmin(d2, axis=1)
        block_d2 = d2[np.arange(len(images)), block_best]
        better = block_d2 < best_d2
        best_d2[better] = block_d2[better]
        best_idx[better] = start + block_best[better]

    out = []
    for i, u in enumerate(images):
        values = u.values

        def distance_at(vec, values=values):
            resid = values - render_values(pattern, model.from_vector(vec), grid)
            return float(np.linalg.norm(resid))

        vec = candidates[best_idx[i]].copy()
        vec, _ = _refine_projection(
            distance_at, domain, vec, float(np.sqrt(max(best_d2[i], 0.0))), spans, tol, max_cycles
        )
        params = model.from_vector(vec)
        resid = values - render_values(pattern, params, grid)
        out.append(Projection(params, float(np.linalg.norm(resid)), resid))
    return out


def _batch_distances(values, pattern, model, vecs, grid, chunk=512):
    dists = np.empty(vecs.shape[0])
    for start in range(0, vecs.shape[0], chunk):
        block = vecs[start : start + chunk]
        renders = render_batch(pattern, [model.from_vector(v) for v in block], grid)
        dists[start : start + block.shape[0]] = np.linalg.norm(values[None, :] - renders, axis=1)
    return dists


@dataclass(eq=False)
class TangentMatrix:
    matrix: np.ndarray        # n x d, column k = d(render)/d(param k)
    one_sided: np.ndarray     # bool per column: boundary forced one-sided FD


def tangent_matrix(
    pattern,
    params: TransformParams,
    model: TransformModel,
    domain: ParamDomain,
    grid: SamplingGrid,
    rel_step: float = TANGENT_REL_STEP,
) -> TangentMatrix:
    """Finite-difference manifold tangent columns at a transformation.

    Steps are rel_step times the domain width per dimension, central where
    the point is at least one step inside the box and one-sided otherwise.
    """
    vec = model.to_vector(params)
    widths = domain.widths()
    d = domain.dim
    cols = np.zeros((grid.n, d))
    one_sided = np.zeros(d, dtype=bool)
    base = None
    for k in range(d):
        if widths[k] <= 0.0:
            continue
        h = rel_step * widths[k]
        lo_ok = vec[k] - h >= domain.lows[k]
        hi_ok = vec[k] + h <= domain.highs[k]
        if lo_ok and hi_ok:
            vp, vm = vec.copy(), vec.copy()
            vp[k] += h
            vm[k] -= h
            cols[:, k] = (
                render_values(pattern, model.from_vector(vp), grid)
                - render_values(pattern, model.from_vector(vm), grid)
            ) / (2.0 * h)
        else:
            one_sided[k] = True
            if base is None:
                base = render_values(pattern, params, grid)
            v2 = vec.copy()
            if hi_ok:
                v2[k] += h
                cols[:, k] = (render_values(pattern, model.from_vector(v2), grid) - base) / h
            else:
                v2[k] -= h
                cols[:, k] = (base - render_values(pattern, model.from_vector(v2), grid)) / h
    return TangentMatrix(cols, one_sided)


@dataclass(eq=False)
class FdStencil:
    """Evaluation plan for tangent columns at one transformation.

    ``points`` stacks the base vector (row 0) and the perturbed vectors;
    given renders R at those points, ``comb.T @ R`` reproduces the columns
    of ``tangent_matrix`` at the same transformation.  Because rendering is
    linear in the pattern, the plan applies unchanged to any pattern or
    single atom, which is what makes incremental tangent updates cheap.
    """

    points: np.ndarray       # (s, dim) parameter vectors, row 0 = base
    comb: np.ndarray         # (s, d) FD combination coefficients
    one_sided: np.ndarray    # bool per column


def fd_stencil(
    vec: np.ndarray,
    model: TransformModel,
    domain: ParamDomain,
    rel_step: float = TANGENT_REL_STEP,
) -> FdStencil:
    """The finite-difference plan matching ``tangent_matrix`` step choices."""
    vec = np.asarray(vec, dtype=float)
    widths = domain.widths()
    d = domain.dim
    points = [vec.copy()]
    rows = [np.zeros(d)]
    one_sided = np.zeros(d, dtype=bool)
    for k in range(d):
        if widths[k] <= 0.0:
            continue
        h = rel_step * widths[k]
        lo_ok = vec[k] - h >= domain.lows[k]
        hi_ok = vec[k] + h <= domain.highs[k]
        if lo_ok and hi_ok:
            for sign in (1.0, -1.0):
                v2 = vec.copy()
                v2[k] += sign * h
                points.append(v2)
                row = np.zeros(d)
                row[k] = sign / (2.0 * h)
                rows.append(row)
        else:
            one_sided[k] = True
            v2 = vec.copy()
            v2[k] += h if hi_ok else -h
            points.append(v2)
            row = np.zeros(d)
            row[k] = 1.0 / h if hi_ok else -1.0 / h
            rows.append(row)
            rows[0][k] = -row[k]
    return FdStencil(np.stack(points), np.stack(rows), one_sided)


def tangent_residual_from_matrix(w: np.ndarray, tangent: np.ndarray):
    """Residual of w after removing its regularized tangent-plane component."""
    d = tangent.shape[1]
    gram = tangent.T @ tangent
    trace = float(np.trace(gram))
    if trace <= 0.0:
        return w.copy(), float(np.linalg.norm(w))
    eps = TANGENT_REGULARIZATION * trace / d
    coefs = np.linalg.solve(gram + eps * np.eye(d), tangent.T @ w)
    resid = w - tangent @ coefs
    return resid, float(np.linalg.norm(resid))


def tangent_residual(
    u: Image,
    pattern,
    params: TransformParams,
    model: TransformModel,
    domain: ParamDomain,
):
    """First-order (tangent-plane) distance estimate of u to the manifold."""
    w = u.values - render_values(pattern, params, u.grid)
    t = tangent_matrix(pattern, params, model, domain, u.grid)
    return tangent_residual_from_matrix(w, t.matrix)


def total_sq_tangent_error(images, pattern, params_list, model: TransformModel, domain: ParamDomain) -> float:
    """Sum of squared tangent distances over an image set, in index order."""
    total = 0.0
    for u, params in zip(images, params_list):
        _, dist = tangent_residual(u, pattern, params, model, domain)
        total += dist * dist
    return total
