import numpy as np
import pytest

from ptmlearn.geometry import ParamDomain
from ptmlearn.optimize import (
    SolverOptions,
    coarse_search,
    cutting_plane_min,
    golden_section_min,
    gradient_descent,
)


class PlainDc:
    """Minimal stand-in providing the f/g/h surface the solver consumes."""

    def __init__(self, g, h):
        self.g = g
        self.h = h

    def f(self, x):
        return self.g(x) - self.h(x)


class TestSolverOptions:
    def test_rejects_bad_budgets(self):
        with pytest.raises(ValueError):
            SolverOptions(max_iters=0)
        with pytest.raises(ValueError):
            SolverOptions(tol_f=0.0)
        with pytest.raises(ValueError):
            SolverOptions(fd_step=-1.0)


class TestGoldenSection:
    def test_finds_parabola_minimum(self):
        x, fx = golden_section_min(lambda t: (t - 1.3) ** 2, 0.0, 3.0, tol=1e-8)
        assert x == pytest.approx(1.3, abs=1e-6)
        assert fx == pytest.approx(0.0, abs=1e-10)

    def test_returns_best_evaluated_point(self):
        seen = []

        def fn(t):
            seen.append(t)
            return np.cos(3.0 * t)

        x, fx = golden_section_min(fn, 0.0, 2.0, tol=1e-6)
        assert fx == min(np.cos(3.0 * np.asarray(seen)))
        assert x in seen

    def test_degenerate_interval(self):
        x, fx = golden_section_min(lambda t: t * t, 2.0, 2.0, tol=1e-6)
        assert (x, fx) == (2.0, 4.0)


class TestCoarseSearch:
    def test_exact_when_minimum_on_grid(self):
        dom = ParamDomain([-2.0, -2.0], [2.0, 2.0])
        # 5 points per dim puts nodes at -2,-1,0,1,2
        best = coarse_search(lambda p: np.sum((p - [1.0, -1.0]) ** 2), dom, 5)
        assert np.allclose(best, [1.0, -1.0])

    def test_tie_goes_to_first_grid_point(self):
        dom = ParamDomain([0.0], [1.0])
        best = coarse_search(lambda p: 0.0, dom, 3)
        assert np.allclose(best, [0.0])

    def test_vectorized_matches_scalar(self):
        dom = ParamDomain([-1.0, 0.0], [1.0, 2.0])

        def scalar(p):
            return float(np.sin(p[0]) + (p[1] - 0.7) ** 2)

        def batched(pts):
            return np.sin(pts[:, 0]) + (pts[:, 1] - 0.7) ** 2

        assert np.allclose(
            coarse_search(scalar, dom, 4), coarse_search(batched, dom, 4, vectorized=True)
        )

    def test_rejects_nonpositive_points(self):
        with pytest.raises(ValueError):
            coarse_search(lambda p: 0.0, ParamDomain([0.0], [1.0]), 0)


class TestCuttingPlane:
    def test_quartic_double_well(self):
        # f = x^4 - x^2 = g - h with both parts convex on [-2, 2]
        dc = PlainDc(lambda x: float(x[0] ** 4), lambda x: float(x[0] ** 2))
        dom = ParamDomain([-2.0], [2.0])
        x, fx = cutting_plane_min(dc, dom, np.array([1.8]))
        assert fx == pytest.approx(-0.25, abs=1e-3)

    def test_convex_quadratic_interior_minimum(self):
        target = np.array([0.4, -0.3])
        dc = PlainDc(lambda x: float(np.sum((x - target) ** 2)), lambda x: 0.0)
        dom = ParamDomain([-1.0, -1.0], [1.0, 1.0])
        x, fx = cutting_plane_min(dc, dom, np.array([-0.9, 0.9]))
        assert np.allclose(x, target, atol=1e-5)
        assert fx == pytest.approx(0.0, abs=1e-8)

    def test_convex_quadratic_boundary_minimum(self):
        target = np.array([2.0])
        dc = PlainDc(lambda x: float(np.sum((x - target) ** 2)), lambda x: 0.0)
        dom = ParamDomain([-1.0], [1.0])
        x, fx = cutting_plane_min(dc, dom, np.array([0.0]))
        assert x[0] == pytest.approx(1.0, abs=1e-6)

    def test_never_worse_than_start(self, rng):
        dom = ParamDomain([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0])
        for _ in range(20):
            a = rng.normal(size=3)
            b = rng.normal(size=3)
            c = rng.uniform(0.5, 2.0)
            dc = PlainDc(
                lambda x, a=a, c=c: float(c * np.sum(x ** 2) + a @ x),
                lambda x, b=b: float(abs(b @ x)),
            )
            x0 = rng.uniform(-1.0, 1.0, size=3)
            f0 = dc.f(x0)
            _, fx = cutting_plane_min(dc, dom, x0)
            assert fx <= f0 + 1e-12

    def test_zero_width_domain_returns_start(self):
        dc = PlainDc(lambda x: float(x[0] ** 2), lambda x: 0.0)
        dom = ParamDomain([0.7], [0.7])
        x, fx = cutting_plane_min(dc, dom, np.array([0.7]))
        assert x[0] == 0.7
        assert fx == pytest.approx(0.49)

    def test_clips_start_into_box(self):
        dc = PlainDc(lambda x: float(x[0] ** 2), lambda x: 0.0)
        dom = ParamDomain([-1.0], [1.0])
        x, fx = cutting_plane_min(dc, dom, np.array([5.0]))
        assert -1.0 <= x[0] <= 1.0


class TestGradientDescent:
    def test_converges_on_quadratic(self):
        target = np.array([0.3, -0.6])
        dom = ParamDomain([-2.0, -2.0], [2.0, 2.0])
        x = gradient_descent(lambda p: float(np.sum((p - target) ** 2)), np.array([1.5, 1.5]), dom)
        assert np.allclose(x, target, atol=1e-3)

    def test_stays_in_box(self):
        dom = ParamDomain([-1.0, -1.0], [1.0, 1.0])
        target = np.array([3.0, 0.0])
        x = gradient_descent(lambda p: float(np.sum((p - target) ** 2)), np.array([0.0, 0.5]), dom)
        assert np.all(x >= dom.lows - 1e-15)
        assert np.all(x <= dom.highs + 1e-15)
        assert x[0] == pytest.approx(1.0, abs=1e-6)

    def test_never_increases_objective(self, rng):
        dom = ParamDomain([-2.0, -2.0], [2.0, 2.0])
        for _ in range(10):
            q = rng.normal(size=(2, 2))
            q = q @ q.T + 0.1 * np.eye(2)
            lin = rng.normal(size=2)

            def fn(p, q=q, lin=lin):
                return float(0.5 * p @ q @ p + lin @ p + np.sin(p[0]))

            x0 = rng.uniform(-2.0, 2.0, size=2)
            x = gradient_descent(fn, x0, dom)
            assert fn(x) <= fn(x0) + 1e-12

    def test_zero_width_domain_returns_clipped_start(self):
        dom = ParamDomain([1.0, -1.0], [1.0, 1.0])
        x = gradient_descent(lambda p: float(p @ p), np.array([5.0, 0.3]), dom)
        assert x[0] == 1.0
        # second coordinate may move, first cannot
        dom2 = ParamDomain([1.0], [1.0])
        x2 = gradient_descent(lambda p: float(p @ p), np.array([1.0]), dom2)
        assert x2[0] == 1.0

    def test_monotone_stop_on_flat(self):
        dom = ParamDomain([-1.0], [1.0])
        x = gradient_descent(lambda p: 2.5, np.array([0.2]), dom)
        assert x[0] == pytest.approx(0.2)
