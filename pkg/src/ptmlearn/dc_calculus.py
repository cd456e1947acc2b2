"""Difference-of-convex decompositions of the approximation objectives.

Every function here represents f = g - h with g, h convex on a box.  The
combination rules mirror the standard DC calculus: linear combinations swap
parts under negative weights, products of nonnegative-part functions expand
into squared sums, and composition with a convex decreasing profile adds a
multiple of g + h to both sides.  Decompositions of the transformed-atom
pixel values and of the weighted residual objectives are assembled from
these rules in closed form, vectorized over pixels.

The identity g - h = f is algebraic.  In floating point the parts produced
by nested products and compositions are many orders of magnitude larger
than the function they represent, so numerical agreement of g - h with f
holds relative to the parts' scale, not to |f|.
"""

from __future__ import annotations

import numpy as np

from .geometry import ParamDomain, atom_inverse_map, inverse_map
from .dictionary import AtomParams

SAFETY_CURVATURE = 1.5
SAFETY_SLOPE = 1.1
NONNEG_MARGIN = 1e-6
_CACHE_LIMIT = 16384

# gamma vector layout: (angle, tx, ty, sx, sy)
_ANGLE, _TX, _TY, _SX, _SY = range(5)


class DcFunction:
    """A function on a box together with one convex decomposition of it.

    ``parts_fn(x) -> (g, h)`` evaluates both convex parts; ``f_fn`` is an
    independent direct evaluator of the represented function (defaults to
    g - h).  Part evaluations are memoized per point.
    """

    def __init__(self, domain: ParamDomain, parts_fn, f_fn=None, parts_nonnegative=False):
        self.domain = domain
        self._parts_fn = parts_fn
        self._f_fn = f_fn
        self.parts_nonnegative = bool(parts_nonnegative)
        self._cache = {}

    def value_parts(self, x):
        x = np.asarray(x, dtype=float)
        key = x.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            if len(self._cache) >= _CACHE_LIMIT:
                self._cache.clear()
            hit = self._parts_fn(x)
            self._cache[key] = (float(hit[0]), float(hit[1]))
        return hit

    def g(self, x) -> float:
        return self.value_parts(x)[0]

    def h(self, x) -> float:
        return self.value_parts(x)[1]

    def f(self, x) -> float:
        if self._f_fn is None:
            gv, hv = self.value_parts(x)
            return gv - hv
        return float(self._f_fn(np.asarray(x, dtype=float)))


def _same_domain(a: ParamDomain, b: ParamDomain):
    if a != b:
        raise ValueError("DC terms must share one domain")


def dc_linear_combination(terms) -> DcFunction:
    """Weighted sum of DC functions; negative weights swap the parts."""
    terms = [(float(w), fn) for w, fn in terms if w != 0.0]
    if not terms:
        raise ValueError("need at least one term with nonzero weight")
    domain = terms[0][1].domain
    for _, fn in terms[1:]:
        _same_domain(domain, fn.domain)

    def parts(x):
        g = 0.0
        h = 0.0
        for w, fn in terms:
            gi, hi = fn.value_parts(x)
            if w > 0.0:
                g += w * gi
                h += w * hi
            else:
                g += (-w) * hi
                h += (-w) * gi
        return g, h

    def direct(x):
        return sum(w * fn.f(x) for w, fn in terms)

    flag = all(fn.parts_nonnegative for _, fn in terms)
    return DcFunction(domain, parts, direct, parts_nonnegative=flag)


def dc_product(f1: DcFunction, f2: DcFunction) -> DcFunction:
    """Product rule; both inputs must carry nonnegative parts."""
    _same_domain(f1.domain, f2.domain)
    if not (f1.parts_nonnegative and f2.parts_nonnegative):
        raise ValueError("dc_product requires parts_nonnegative inputs; shift them first")

    def parts(x):
        g1, h1 = f1.value_parts(x)
        g2, h2 = f2.value_parts(x)
        g = 0.5 * ((g1 + g2) ** 2 + (h1 + h2) ** 2)
        h = 0.5 * ((g1 + h2) ** 2 + (g2 + h1) ** 2)
        return g, h

    def direct(x):
        return f1.f(x) * f2.f(x)

    return DcFunction(f1.domain, parts, direct, parts_nonnegative=True)


def _sample_grid_points(domain: ParamDomain, samples_per_dim: int) -> np.ndarray:
    """Grid over the box, with the per-dimension count capped so the total
    stays tractable for more than two free dimensions."""
    free = int(np.count_nonzero(domain.widths() > 0.0))
    if free <= 2:
        pts = samples_per_dim
    else:
        pts = max(3, min(samples_per_dim, int(round(5000.0 ** (1.0 / free)))))
    return domain.grid_points(pts)


def dc_compose_convex(
    outer,
    inner: DcFunction,
    slope_bound: float | None = None,
    outer_derivative=None,
    outer_nonnegative: bool = False,
    samples_per_dim: int = 50,
) -> DcFunction:
    """Composition q(f) with ``outer`` q convex on the range of f.

    ``slope_bound`` is the constant K added as K*(g + h); when omitted it is
    estimated as 1.1 times the largest sampled |q'(f(x))| over a grid.
    """
    if slope_bound is not None:
        big_k = float(slope_bound)
    else:
        pts = _sample_grid_points(inner.domain, samples_per_dim)
        fvals = np.array([inner.f(p) for p in pts])
        if outer_derivative is not None:
            slopes = np.abs(np.asarray(outer_derivative(fvals), dtype=float))
        else:
            step = 1e-6 * (1.0 + np.abs(fvals))
            slopes = np.abs(
                (np.asarray(outer(fvals + step), dtype=float) - np.asarray(outer(fvals - step), dtype=float))
                / (2.0 * step)
            )
        big_k = SAFETY_SLOPE * float(np.max(slopes))
    if not big_k > 0.0:
        raise ValueError("slope bound must be positive")

    def parts(x):
        gi, hi = inner.value_parts(x)
        s = big_k * (gi + hi)
        return float(outer(gi - hi)) + s, s

    def direct(x):
        return float(outer(inner.f(x)))

    flag = outer_nonnegative and inner.parts_nonnegative
    return DcFunction(inner.domain, parts, direct, parts_nonnegative=flag)


def _hessian_norms(fn_vec, pts: np.ndarray, free: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Spectral norms of finite-difference Hessians at each sample point."""
    m = free.size
    n = pts.shape[0]
    hess = np.zeros((n, m, m))
    f0 = np.asarray(fn_vec(pts), dtype=float)
    for a in range(m):
        ia, ha = free[a], steps[free[a]]
        up, dn = pts.copy(), pts.copy()
        up[:, ia] += ha
        dn[:, ia] -= ha
        hess[:, a, a] = (np.asarray(fn_vec(up)) - 2.0 * f0 + np.asarray(fn_vec(dn))) / ha**2
        for b in range(a + 1, m):
            ib, hb = free[b], steps[free[b]]
            pp, pm, mp, mm = pts.copy(), pts.copy(), pts.copy(), pts.copy()
            pp[:, ia] += ha
            pp[:, ib] += hb
            pm[:, ia] += ha
            pm[:, ib] -= hb
            mp[:, ia] -= ha
            mp[:, ib] += hb
            mm[:, ia] -= ha
            mm[:, ib] -= hb
            mixed = (
                np.asarray(fn_vec(pp)) - np.asarray(fn_vec(pm)) - np.asarray(fn_vec(mp)) + np.asarray(fn_vec(mm))
            ) / (4.0 * ha * hb)
            hess[:, a, b] = mixed
            hess[:, b, a] = mixed
    eigs = np.linalg.eigvalsh(hess)
    return np.max(np.abs(eigs), axis=1)


def sampled_curvature_bound(fn_vec, domain: ParamDomain, samples_per_dim: int = 50) -> float:
    """Safety-scaled bound on the Hessian spectral norm over the box.

    ``fn_vec`` must accept an (n, dim) array of points and return n values.
    """
    widths = domain.widths()
    free = np.flatnonzero(widths > 0.0)
    if free.size == 0:
        return 0.0
    steps = np.where(widths > 0.0, 1e-4 * widths, 1.0)
    inner = ParamDomain(domain.lows + 2.0 * steps * (widths > 0.0), domain.highs - 2.0 * steps * (widths > 0.0))
    pts = _sample_grid_points(inner, samples_per_dim)
    return SAFETY_CURVATURE * float(np.max(_hessian_norms(fn_vec, pts, free, steps)))


def dc_smooth_quadratic_split(
    fn,
    domain: ParamDomain,
    curvature: float | None = None,
    samples_per_dim: int = 50,
    make_nonnegative: bool = False,
) -> DcFunction:
    """Split a smooth function as (f + rho/2 |x - xc|^2) - (rho/2 |x - xc|^2).

    ``curvature`` is rho; when omitted it is estimated from sampled
    finite-difference Hessians times a 1.5 safety factor.  With
    ``make_nonnegative`` both parts are lifted by a sampled-minimum shift
    plus a small margin so they can feed the product rule.
    """

    def fn_vec(pts):
        return np.array([float(fn(p)) for p in pts])

    if curvature is None:
        rho = sampled_curvature_bound(fn_vec, domain, samples_per_dim)
        if rho == 0.0:
            rho = 1e-12
    else:
        rho = float(curvature)
    if rho <= 0.0:
        raise ValueError("curvature bound must be positive")
    center = domain.center()

    shift = 0.0
    if make_nonnegative:
        pts = _sample_grid_points(domain, samples_per_dim)
        quad = 0.5 * rho * np.sum((pts - center) ** 2, axis=1)
        g_min = float(np.min(fn_vec(pts) + quad))
        shift = max(0.0, -g_min) + NONNEG_MARGIN

    def parts(x):
        q = 0.5 * rho * float(np.sum((x - center) ** 2))
        return float(fn(x)) + q + shift, q + shift

    return DcFunction(domain, parts, lambda x: float(fn(x)), parts_nonnegative=make_nonnegative)


def dc_scalar_square_split(domain: ParamDomain, index: int = -1) -> DcFunction:
    """The coordinate x[index] split as 0.5(t+1)^2 - 0.5(t^2+1)."""
    index = range(domain.dim)[index]

    def parts(x):
        t = float(x[index])
        return 0.5 * (t + 1.0) ** 2, 0.5 * (t * t + 1.0)

    return DcFunction(domain, parts, lambda x: float(x[index]), parts_nonnegative=True)


def shift_nonnegative(fn: DcFunction, samples_per_dim: int = 50) -> DcFunction:
    """Add one sampled constant to both parts so they become nonnegative."""
    if fn.parts_nonnegative:
        return fn
    pts = _sample_grid_points(fn.domain, samples_per_dim)
    lowest = min(min(fn.value_parts(p)) for p in pts)
    shift = max(0.0, -lowest) + NONNEG_MARGIN

    def parts(x):
        g, h = fn.value_parts(x)
        return g + shift, h + shift

    return DcFunction(fn.domain, parts, fn.f, parts_nonnegative=True)


def append_coef_dim(gamma_domain: ParamDomain, coef_range) -> ParamDomain:
    lo, hi = float(coef_range[0]), float(coef_range[1])
    return ParamDomain(np.append(gamma_domain.lows, lo), np.append(gamma_domain.highs, hi))


# ---------------------------------------------------------------------------
# Transformed-atom pixel decompositions.
#
# With (nu, xi) the inversely mapped coordinates of a grid point, the
# atom-local coordinates expand as
#   xt = nu*cos(a)/sx + xi*sin(a)/sx - tx*cos(a)/sx - ty*sin(a)/sx
#   yt = xi*cos(a)/sy - nu*sin(a)/sy - ty*cos(a)/sy + tx*sin(a)/sy
# and the pixel value is the mother profile of xt^2 + yt^2.  The four
# trig-over-width terms get quadratic-regularization splits on their
# (angle, width) sub-boxes with certified nonnegativity shifts; the center
# shifts use the square split; everything else follows the combination
# rules above.
# ---------------------------------------------------------------------------

_TRIG_SPECS = (("cos", _SX), ("sin", _SX), ("cos", _SY), ("sin", _SY))
_trig_cache = {}


def _trig_split_constants(gamma_domain: ParamDomain):
    key = (gamma_domain.lows.tobytes(), gamma_domain.highs.tobytes())
    hit = _trig_cache.get(key)
    if hit is not None:
        return hit
    if not (gamma_domain.lows[_SX] > 0.0 and gamma_domain.lows[_SY] > 0.0):
        raise ValueError("atom width bounds must be positive")
    consts = []
    for trig, sdim in _TRIG_SPECS:
        sub = gamma_domain.subdomain([_ANGLE, sdim])
        f = np.cos if trig == "cos" else np.sin

        def fn_vec(pts, f=f):
            return f(pts[:, 0]) / pts[:, 1]

        rho = sampled_curvature_bound(fn_vec, sub, samples_per_dim=50)
        # |trig(a)/s| <= 1/s_lo certifies the nonnegativity shift
        shift = 1.0 / sub.lows[1] + NONNEG_MARGIN
        consts.append((f, sdim, rho, sub.center(), shift))
    if len(_trig_cache) > 64:
        _trig_cache.clear()
    _trig_cache[key] = consts
    return consts


def _pixel_parts_builder(mother, gamma_domain: ParamDomain, nu: np.ndarray, xi: np.ndarray):
    """Vectorized convex-part evaluators of pixel values over fixed points.

    Returns parts(v5) -> (g_pix, h_pix, g_sq, h_sq) arrays across the
    stacked (nu, xi) coordinates, for the pixel value and its square.
    """
    consts = _trig_split_constants(gamma_domain)
    nu_p, nu_n = np.maximum(nu, 0.0), np.maximum(-nu, 0.0)
    xi_p, xi_n = np.maximum(xi, 0.0), np.maximum(-xi, 0.0)
    k_pix = SAFETY_SLOPE * mother.profile_slope_bound()
    k_sq = SAFETY_SLOPE * mother.squared_profile_slope_bound()

    def parts(v5):
        angle = v5[_ANGLE]
        widths = (v5[_SX], v5[_SY])
        ga = []
        ha = []
        for f, sdim, rho, center, shift in consts:
            s = v5[sdim]
            quad = 0.5 * rho * ((angle - center[0]) ** 2 + (s - center[1]) ** 2)
            ga.append(float(f(angle)) / s + quad + shift)
            ha.append(quad + shift)
        gt = (0.5 * (v5[_TX] + 1.0) ** 2, 0.5 * (v5[_TY] + 1.0) ** 2)
        ht = (0.5 * (v5[_TX] ** 2 + 1.0), 0.5 * (v5[_TY] ** 2 + 1.0))
        # products of the trig terms with the center shifts:
        # p1 = A1*tx, p2 = A2*ty, p3 = A3*ty, p4 = A4*tx
        tsel = (0, 1, 1, 0)
        gp = []
        hp = []
        for j in range(4):
            t = tsel[j]
            gp.append(0.5 * ((ga[j] + gt[t]) ** 2 + (ha[j] + ht[t]) ** 2))
            hp.append(0.5 * ((ga[j] + ht[t]) ** 2 + (gt[t] + ha[j]) ** 2))
        # xt = nu*A1 + xi*A2 - p1 - p2 ; yt = xi*A3 - nu*A4 - p3 + p4
        gx = nu_p * ga[0] + nu_n * ha[0] + xi_p * ga[1] + xi_n * ha[1] + hp[0] + hp[1]
        hx = nu_p * ha[0] + nu_n * ga[0] + xi_p * ha[1] + xi_n * ga[1] + gp[0] + gp[1]
        gy = xi_p * ga[2] + xi_n * ha[2] + nu_n * ga[3] + nu_p * ha[3] + hp[2] + gp[3]
        hy = xi_p * ha[2] + xi_n * ga[2] + nu_n * ha[3] + nu_p * ga[3] + gp[2] + hp[3]
        # squares via the product rule, then the squared radius
        gxx = 2.0 * (gx * gx + hx * hx)
        hxx = (gx + hx) ** 2
        gyy = 2.0 * (gy * gy + hy * hy)
        hyy = (gy + hy) ** 2
        gz = gxx + gyy
        hz = hxx + hyy
        zval = gz - hz
        bulk = gz + hz
        g_pix = mother.profile(zval) + k_pix * bulk
        h_pix = k_pix * bulk
        g_sq = mother.squared_profile(zval) + k_sq * bulk
        h_sq = k_sq * bulk
        return g_pix, h_pix, g_sq, h_sq

    return parts


def dc_transformed_atom_pixel(
    mother,
    params,
    grid,
    pixel_index: int,
    gamma_domain: ParamDomain,
    squared: bool = False,
) -> DcFunction:
    """DC decomposition over atom parameters of one rendered pixel value.

    ``params`` is the image-side transformation; ``squared`` selects the
    decomposition of the squared pixel value instead.
    """
    x, y = grid.coords()
    nu, xi = inverse_map(params, x[pixel_index : pixel_index + 1], y[pixel_index : pixel_index + 1])
    builder = _pixel_parts_builder(mother, gamma_domain, nu, xi)

    def parts(v5):
        g_pix, h_pix, g_sq, h_sq = builder(v5)
        if squared:
            return float(g_sq[0]), float(h_sq[0])
        return float(g_pix[0]), float(h_pix[0])

    def direct(v5):
        atom = AtomParams.from_vector(v5)
        val = mother.value(*atom_inverse_map(atom, nu, xi))[0]
        return val * val if squared else val

    return DcFunction(gamma_domain, parts, direct, parts_nonnegative=True)


class ResidualStack:
    """Pixel-stacked data of a weighted residual-fitting objective.

    Holds, across all images, the inversely mapped grid coordinates, the
    residual values, and signed per-image weights for the objective
    F(gamma, c) = sum_l s_l (v_l - c*pix_l(gamma))^2.
    """

    def __init__(self, mother, grid, lambdas, residuals, weights=None):
        if len(lambdas) != len(residuals):
            raise ValueError("one transformation per residual image required")
        x, y = grid.coords()
        nus, xis = [], []
        for lam in lambdas:
            nu, xi = inverse_map(lam, x, y)
            nus.append(nu)
            xis.append(xi)
        self.mother = mother
        self.grid = grid
        self.nu = np.concatenate(nus) if nus else np.empty(0)
        self.xi = np.concatenate(xis) if xis else np.empty(0)
        self.v = np.concatenate([np.asarray(r, dtype=float).ravel() for r in residuals]) if residuals else np.empty(0)
        if weights is None:
            w = np.ones(len(residuals))
        else:
            w = np.asarray(weights, dtype=float)
        self.s = np.repeat(w, grid.n)
        self.const = float(np.sum(self.s * self.v * self.v))

    def pixel_values(self, v5) -> np.ndarray:
        """Direct pixel values through the sequential coordinate maps."""
        atom = AtomParams.from_vector(v5)
        return self.mother.value(*atom_inverse_map(atom, self.nu, self.xi))

    def value(self, v5, coef: float) -> float:
        diff = self.v - float(coef) * self.pixel_values(v5)
        return float(np.sum(self.s * diff * diff))

    def quadratic_coeffs(self, gammas: np.ndarray):
        """For each row gamma, the objective is const - 2*c*B + c^2*A.

        Returns (A, B) accumulated in memory-bounded chunks.
        """
        gammas = np.atleast_2d(np.asarray(gammas, dtype=float))
        m = self.v.size
        sv = self.s * self.v
        a_out = np.empty(gammas.shape[0])
        b_out = np.empty(gammas.shape[0])
        chunk = max(1, int(2e6 / max(m, 1)))
        for start in range(0, gammas.shape[0], chunk):
            block = gammas[start : start + chunk]
            ca = np.cos(block[:, _ANGLE])[:, None]
            sa = np.sin(block[:, _ANGLE])[:, None]
            dx = self.nu[None, :] - block[:, _TX][:, None]
            dy = self.xi[None, :] - block[:, _TY][:, None]
            xt = (ca * dx + sa * dy) / block[:, _SX][:, None]
            yt = (ca * dy - sa * dx) / block[:, _SY][:, None]
            pix = self.mother.profile(xt * xt + yt * yt)
            a_out[start : start + block.shape[0]] = (pix * pix) @ self.s
            b_out[start : start + block.shape[0]] = pix @ sv
        return a_out, b_out

    def best_coefficients(self, gammas: np.ndarray, coef_range):
        """Per gamma row, the best clipped coefficient and its objective.

        The objective is quadratic in c; with signed weights its leading
        coefficient can be nonpositive, so the interior vertex competes
        against both range endpoints.
        """
        quad_a, quad_b = self.quadratic_coeffs(gammas)
        c_lo, c_hi = float(coef_range[0]), float(coef_range[1])
        vertex = np.clip(quad_b / np.maximum(quad_a, 1e-300), c_lo, c_hi)
        candidates = np.stack([vertex, np.full_like(vertex, c_lo), np.full_like(vertex, c_hi)])
        values = self.const - 2.0 * candidates * quad_b + candidates**2 * quad_a
        pick = np.argmin(values, axis=0)
        rows = np.arange(gammas.shape[0])
        return candidates[pick, rows], values[pick, rows]

    def dc_function(self, gamma_domain: ParamDomain, coef_range) -> DcFunction:
        """DC decomposition of the objective over (gamma, c)."""
        builder = _pixel_parts_builder(self.mother, gamma_domain, self.nu, self.xi)
        w_cross = -2.0 * self.s * self.v
        wc_p, wc_n = np.maximum(w_cross, 0.0), np.maximum(-w_cross, 0.0)
        q_p, q_n = np.maximum(self.s, 0.0), np.maximum(-self.s, 0.0)
        const_g, const_h = max(self.const, 0.0), max(-self.const, 0.0)
        domain = append_coef_dim(gamma_domain, coef_range)

        def parts(x):
            v5, c = x[:5], float(x[5])
            g_pix, h_pix, g_sq, h_sq = builder(v5)
            gc = 0.5 * (c + 1.0) ** 2
            hc = 0.5 * (c * c + 1.0)
            csq = c * c
            g_cross = 0.5 * ((gc + g_pix) ** 2 + (hc + h_pix) ** 2)
            h_cross = 0.5 * ((gc + h_pix) ** 2 + (g_pix + hc) ** 2)
            g_square = 0.5 * ((csq + g_sq) ** 2 + h_sq * h_sq)
            h_square = 0.5 * ((csq + h_sq) ** 2 + g_sq * g_sq)
            g = wc_p @ g_cross + wc_n @ h_cross + q_p @ g_square + q_n @ h_square + const_g
            h = wc_p @ h_cross + wc_n @ g_cross + q_p @ h_square + q_n @ g_square + const_h
            return float(g), float(h)

        def direct(x):
            return self.value(x[:5], x[5])

        return DcFunction(domain, parts, direct, parts_nonnegative=True)


def dc_approx_error(residuals, lambdas, mother, grid, gamma_domain: ParamDomain, coef_range) -> DcFunction:
    """DC decomposition of sum_i |v_i - c*render(atom)|^2 over (gamma, c)."""
    stack = ResidualStack(mother, grid, lambdas, residuals)
    return stack.dc_function(gamma_domain, coef_range)


def dc_joint_error(
    own_residuals,
    own_lambdas,
    own_etas,
    rival_residuals,
    rival_lambdas,
    rival_etas,
    alpha: float,
    mother,
    grid,
    gamma_domain: ParamDomain,
    coef_range,
) -> DcFunction:
    """One class block of the joint objective over its (gamma, c).

    Own images enter with weights 1 + alpha*eta, images that currently see
    this class as their best rival enter subtracted with weights alpha*eta.
    """
    if alpha < 0.0:
        raise ValueError("alpha must be nonnegative")
    own_etas = np.asarray(own_etas, dtype=float)
    rival_etas = np.asarray(rival_etas, dtype=float)
    if np.any(own_etas < 0.0) or np.any(rival_etas < 0.0):
        raise ValueError("weights must be nonnegative")
    weights = np.concatenate([1.0 + alpha * own_etas, -alpha * rival_etas])
    stack = ResidualStack(
        mother,
        grid,
        list(own_lambdas) + list(rival_lambdas),
        list(own_residuals) + list(rival_residuals),
        weights,
    )
    return stack.dc_function(gamma_domain, coef_range)
