"""Deterministic box-constrained solvers.

Three stages of the learning pipeline use these: an exhaustive coarse grid
scan, a cutting-plane scheme for objectives given as a difference of two
convex parts, and a projected gradient descent with backtracking.  All
solvers are free of internal randomness; identical inputs give identical
outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .geometry import ParamDomain

GOLDEN_RATIO = (math.sqrt(5.0) - 1.0) / 2.0
ARMIJO_SLOPE = 1e-4


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 60
    vertex_budget: int = 500
    tol_f: float = 1e-8
    fd_step: float = 1e-4
    max_ls_steps: int = 30

    def __post_init__(self):
        if self.max_iters < 1 or self.vertex_budget < 1 or self.max_ls_steps < 1:
            raise ValueError("iteration budgets must be positive")
        if not (self.tol_f > 0.0 and self.fd_step > 0.0):
            raise ValueError("tolerances must be positive")


def golden_section_min(fn, lo: float, hi: float, tol: float, max_iters: int = 80):
    """Golden-section scan of [lo, hi]; returns the best point evaluated."""
    if hi <= lo:
        return lo, fn(lo)
    a, b = lo, hi
    c = b - GOLDEN_RATIO * (b - a)
    d = a + GOLDEN_RATIO * (b - a)
    fc, fd = fn(c), fn(d)
    best_x, best_f = (c, fc) if fc <= fd else (d, fd)
    for _ in range(max_iters):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN_RATIO * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN_RATIO * (b - a)
            fd = fn(d)
        if fc < best_f:
            best_x, best_f = c, fc
        if fd < best_f:
            best_x, best_f = d, fd
    return best_x, best_f


def coarse_search(objective, domain: ParamDomain, pts_per_dim: int, vectorized: bool = False):
    """Best point of a regular grid; ties go to the first point in
    lexicographic grid order (dimension 0 most significant)."""
    if pts_per_dim < 1:
        raise ValueError("pts_per_dim must be positive")
    pts = domain.grid_points(pts_per_dim)
    if vectorized:
        vals = np.asarray(objective(pts), dtype=float)
    else:
        vals = np.array([float(objective(p)) for p in pts])
    if vals.shape != (pts.shape[0],):
        raise ValueError("objective returned wrong number of values")
    return pts[int(np.argmin(vals))].copy()


def _free_dims(domain: ParamDomain) -> np.ndarray:
    return np.flatnonzero(domain.widths() > 0.0)


def _fd_gradient(fn, x: np.ndarray, steps: np.ndarray, free: np.ndarray) -> np.ndarray:
    """Central finite-difference gradient over the free dimensions."""
    grad = np.zeros_like(x)
    for k in free:
        e = np.zeros_like(x)
        e[k] = steps[k]
        grad[k] = (fn(x + e) - fn(x - e)) / (2.0 * steps[k])
    return grad


def cutting_plane_min(dc_fn, domain: ParamDomain, x0, opts: SolverOptions = SolverOptions()):
    """Minimize g - h over a box by accumulating linearizations of h.

    Each stored linearization (a supporting hyperplane of the convex part h,
    built from a finite-difference gradient) defines one convex cell problem
    min g(x) - lin(x); the polyhedral under-approximation of h is the upper
    envelope of the accumulated planes, and the surrogate minimum is the best
    cell minimum.  The first cells come from fixed seed points (start, box
    center, and axis extremes in low dimension), later cells from linearizing
    h at the current surrogate minimizer.  Never returns a point worse than
    the start.
    """
    x0 = domain.clip(np.asarray(x0, dtype=float))
    free = _free_dims(domain)
    f0 = float(dc_fn.f(x0))
    if free.size == 0:
        return x0, f0
    widths = domain.widths()
    steps = np.where(widths > 0.0, opts.fd_step * widths, 1.0)
    lo = domain.lows[free]
    hi = domain.highs[free]

    seeds = [x0, domain.center()]
    if free.size <= 2:
        for k in free:
            for edge in (domain.lows[k], domain.highs[k]):
                s = domain.center()
                s[k] = edge
                seeds.append(s)
    seen = set()
    seed_queue = []
    for s in seeds:
        key = s.tobytes()
        if key not in seen:
            seen.add(key)
            seed_queue.append(s)

    best_x, best_f = x0.copy(), f0
    n_planes = 0
    prev_best = best_f
    adaptive_candidate = None

    def solve_cell(point):
        """Convex cell problem min_box g(x) - (h(p) + grad_h(p).(x - p))."""
        h_p = float(dc_fn.h(point))
        grad_h = _fd_gradient(dc_fn.h, point, steps, free)

        def cell_obj(z):
            x = x0.copy()
            x[free] = z
            return float(dc_fn.g(x)) - (h_p + float(grad_h @ (x - point)))

        res = minimize(
            cell_obj,
            np.clip(point[free], lo, hi),
            method="L-BFGS-B",
            bounds=list(zip(lo, hi)),
            options={
                "maxiter": 3 * opts.max_iters,
                "ftol": max(1e-15, 0.01 * opts.tol_f),
                "gtol": 1e-9,
            },
        )
        x = x0.copy()
        x[free] = np.clip(res.x, lo, hi)
        return x

    for it in range(opts.max_iters):
        if n_planes >= opts.vertex_budget:
            break
        if seed_queue:
            point = seed_queue.pop(0)
            in_seed_phase = True
        elif adaptive_candidate is not None:
            point = adaptive_candidate
            in_seed_phase = False
        else:
            break
        n_planes += 1
        cand = solve_cell(point)
        f_cand = float(dc_fn.f(cand))
        moved = not np.array_equal(cand, point)
        if f_cand < best_f:
            best_x, best_f = cand, f_cand
        adaptive_candidate = cand if moved else None
        if not seed_queue and not in_seed_phase:
            if prev_best - best_f < opts.tol_f * (1.0 + abs(best_f)):
                break
            prev_best = best_f
        if not moved and not seed_queue:
            break
    return best_x, best_f


def gradient_descent(objective, x0, domain: ParamDomain, opts: SolverOptions = SolverOptions()):
    """Projected gradient descent with halving backtracking line search."""
    x = domain.clip(np.asarray(x0, dtype=float))
    free = _free_dims(domain)
    if free.size == 0:
        return x
    widths = domain.widths()
    steps = np.where(widths > 0.0, opts.fd_step * widths, 1.0)
    fx = float(objective(x))
    alpha_prev = None
    for _ in range(opts.max_iters):
        grad = _fd_gradient(objective, x, steps, free)
        gnorm = float(np.max(np.abs(grad[free])))
        if gnorm == 0.0 or not np.isfinite(gnorm):
            break
        direction = -grad
        # a trial never moves more than a quarter of any dimension's width;
        # within that cap, start from twice the last accepted step so the
        # search does not pay the full backtracking cost every iteration
        cap = 0.25 / np.max(np.abs(direction[free]) / widths[free])
        alpha = cap if alpha_prev is None else min(cap, 2.0 * alpha_prev)
        improved = False
        for _ in range(opts.max_ls_steps):
            x_try = domain.clip(x + alpha * direction)
            f_try = float(objective(x_try))
            if f_try < fx and f_try <= fx + ARMIJO_SLOPE * float(grad @ (x_try - x)):
                improved = True
                break
            alpha *= 0.5
        if not improved:
            break
        alpha_prev = alpha
        gain = fx - f_try
        x, fx = x_try, f_try
        if gain < opts.tol_f * (1.0 + abs(fx)):
            break
    return x
