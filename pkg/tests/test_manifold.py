import numpy as np
import pytest

from ptmlearn.dictionary import AtomParams, Gaussian, Pattern, make_mother
from ptmlearn.geometry import ParamDomain, TransformModel, TransformParams
from ptmlearn.manifold import (
    Image,
    InterpolatedPattern,
    SamplingGrid,
    fd_stencil,
    project,
    project_many,
    render,
    render_batch,
    render_values,
    tangent_matrix,
    tangent_residual,
    tangent_residual_from_matrix,
    total_sq_tangent_error,
)


class LinearPattern:
    """Affine height field; its translation manifold is exactly affine in lambda."""

    def __init__(self, a=0.2, b=0.05, c=-0.03):
        self.a, self.b, self.c = a, b, c

    def evaluate(self, x, y):
        return self.a + self.b * np.asarray(x, dtype=float) + self.c * np.asarray(y, dtype=float)


def bump_pattern(mother=None):
    m = mother or Gaussian()
    return Pattern(m).with_atom(AtomParams(0.0, 1.0, -0.5, 2.0, 1.5), 1.2)


class TestSamplingGrid:
    def test_counts_and_spacing(self):
        g = SamplingGrid(0.0, 0.0, 4.0, 2.0, 2, 4)
        assert g.n == 8
        assert g.dx == pytest.approx(1.0)
        assert g.dy == pytest.approx(1.0)

    def test_coords_layout(self):
        g = SamplingGrid(0.0, 0.0, 2.0, 2.0, 2, 2)
        x, y = g.coords()
        # row-major nodes at x0 + c*dx: y varies slowest
        assert np.allclose(x, [0.0, 1.0, 0.0, 1.0])
        assert np.allclose(y, [0.0, 0.0, 1.0, 1.0])

    def test_validation(self):
        with pytest.raises(ValueError):
            SamplingGrid(0.0, 0.0, 1.0, 1.0, 0, 4)
        with pytest.raises(ValueError):
            SamplingGrid(0.0, 0.0, -1.0, 1.0, 2, 2)


class TestImage:
    def test_size_checked(self, grid8):
        with pytest.raises(ValueError):
            Image(grid8, np.zeros(grid8.n - 1))

    def test_finite_checked(self, grid8):
        bad = np.zeros(grid8.n)
        bad[3] = np.nan
        with pytest.raises(ValueError):
            Image(grid8, bad)

    def test_norm(self, grid8):
        vals = np.full(grid8.n, 2.0)
        assert Image(grid8, vals).norm == pytest.approx(2.0 * np.sqrt(grid8.n))


class TestRender:
    def test_identity_equals_direct_evaluation(self, grid8):
        p = bump_pattern()
        x, y = grid8.coords()
        assert np.allclose(render_values(p, TransformParams.identity(), grid8), p.evaluate(x, y))

    def test_translation_shifts_content(self, grid16):
        p = bump_pattern()
        lam = TransformParams(0.0, 2.0, 0.0, 1.0, 1.0)
        shifted = render_values(p, lam, grid16)
        x, y = grid16.coords()
        assert np.allclose(shifted, p.evaluate(x - 2.0, y))

    def test_render_linear_in_pattern(self, grid8, rng):
        m = Gaussian()
        g1 = AtomParams(0.3, 0.5, 0.0, 1.0, 1.0)
        g2 = AtomParams(1.2, -1.0, 1.0, 2.0, 1.0)
        lam = TransformParams(0.4, 0.5, -0.5, 1.1, 0.9)
        both = Pattern(m).with_atom(g1, 0.7).with_atom(g2, -0.4)
        a = render_values(Pattern(m).with_atom(g1, 0.7), lam, grid8)
        b = render_values(Pattern(m).with_atom(g2, -0.4), lam, grid8)
        assert np.allclose(render_values(both, lam, grid8), a + b)

    def test_render_batch_matches_loop(self, grid8):
        p = bump_pattern()
        lams = [
            TransformParams(0.0, 1.0, 0.0, 1.0, 1.0),
            TransformParams(0.8, -0.5, 0.5, 1.5, 0.7),
            TransformParams(3.0, 0.0, 2.0, 0.6, 1.2),
        ]
        batch = render_batch(p, lams, grid8)
        assert batch.shape == (3, grid8.n)
        for k, lam in enumerate(lams):
            assert np.allclose(batch[k], render_values(p, lam, grid8))

    def test_render_returns_image(self, grid8):
        out = render(bump_pattern(), TransformParams.identity(), grid8)
        assert isinstance(out, Image)
        assert out.grid is grid8


class TestInterpolatedPattern:
    def test_exact_at_grid_nodes(self, grid8, rng):
        img = Image(grid8, rng.uniform(0.0, 1.0, grid8.n))
        interp = InterpolatedPattern(img)
        x, y = grid8.coords()
        assert np.allclose(interp.evaluate(x, y), img.values)

    def test_reproduces_bilinear_functions(self, grid8):
        x, y = grid8.coords()
        vals = 0.3 + 0.1 * x - 0.2 * y + 0.05 * x * y
        interp = InterpolatedPattern(Image(grid8, vals))
        xs = np.array([-1.3, 0.7, 2.1])
        ys = np.array([0.4, -2.2, 1.9])
        assert np.allclose(interp.evaluate(xs, ys), 0.3 + 0.1 * xs - 0.2 * ys + 0.05 * xs * ys)

    def test_zero_outside_window(self, grid8):
        img = Image(grid8, np.ones(grid8.n))
        interp = InterpolatedPattern(img)
        assert interp.evaluate(99.0, 0.0) == 0.0
        assert interp.evaluate(0.0, -99.0) == 0.0


class TestProject:
    def test_recovers_pose_of_on_manifold_image(self, grid16):
        p = bump_pattern()
        dom = ParamDomain([-4.0, -4.0], [4.0, 4.0])
        lam_true = TransformParams(0.0, 1.3, -0.8, 1.0, 1.0)
        u = render(p, lam_true, grid16)
        pr = project(u, p, TransformModel.TRANSLATE2, dom)
        assert pr.distance < 1e-4 * u.norm
        assert pr.params.tx == pytest.approx(1.3, abs=0.01)
        assert pr.params.ty == pytest.approx(-0.8, abs=0.01)
        assert np.linalg.norm(pr.residual) == pytest.approx(pr.distance)

    def test_empty_pattern_distance_is_image_norm(self, grid8, rng):
        u = Image(grid8, rng.normal(size=grid8.n))
        pr = project(u, Pattern(Gaussian()), TransformModel.TRANSLATE2, ParamDomain([-1, -1], [1, 1]))
        assert pr.distance == pytest.approx(u.norm)

    def test_hint_speeds_up_without_hurting(self, grid16):
        p = bump_pattern()
        dom = ParamDomain([-4.0, -4.0], [4.0, 4.0])
        lam_true = TransformParams(0.0, 0.9, 0.6, 1.0, 1.0)
        u = render(p, lam_true, grid16)
        hint = TransformParams(0.0, 1.1, 0.4, 1.0, 1.0)
        pr = project(u, p, TransformModel.TRANSLATE2, dom, hint=hint)
        d_hint = float(np.linalg.norm(u.values - render_values(p, hint, grid16)))
        assert pr.distance <= d_hint + 1e-12

    def test_project_many_matches_individual(self, grid16, rng):
        p = bump_pattern()
        dom = ParamDomain([-3.0, -3.0], [3.0, 3.0])
        model = TransformModel.TRANSLATE2
        images = []
        for _ in range(4):
            lam = model.from_vector(rng.uniform(-2.0, 2.0, size=2))
            vals = render_values(p, lam, grid16) + rng.normal(0.0, 0.01, grid16.n)
            images.append(Image(grid16, vals))
        many = project_many(images, p, model, dom, pts_per_dim=5)
        for u, got in zip(images, many):
            one = project(u, p, model, dom, pts_per_dim=5)
            assert got.distance == pytest.approx(one.distance, rel=1e-9)
            assert np.allclose(model.to_vector(got.params), model.to_vector(one.params))


class TestTangent:
    def test_matrix_columns_are_derivatives(self, grid16):
        p = bump_pattern()
        dom = ParamDomain([-4.0, -4.0], [4.0, 4.0])
        model = TransformModel.TRANSLATE2
        lam = TransformParams(0.0, 0.5, -0.5, 1.0, 1.0)
        tm = tangent_matrix(p, lam, model, dom, grid16)
        assert tm.matrix.shape == (grid16.n, 2)
        assert not tm.one_sided.any()
        # compare against an independent FD with a different step
        h = 1e-5
        lam_p = TransformParams(0.0, 0.5 + h, -0.5, 1.0, 1.0)
        lam_m = TransformParams(0.0, 0.5 - h, -0.5, 1.0, 1.0)
        want = (render_values(p, lam_p, grid16) - render_values(p, lam_m, grid16)) / (2 * h)
        assert np.allclose(tm.matrix[:, 0], want, atol=1e-4)

    def test_one_sided_at_boundary(self, grid16):
        p = bump_pattern()
        dom = ParamDomain([-4.0, -4.0], [4.0, 4.0])
        lam = TransformParams(0.0, -4.0, 0.0, 1.0, 1.0)  # tx pinned at the low edge
        tm = tangent_matrix(p, lam, TransformModel.TRANSLATE2, dom, grid16)
        assert tm.one_sided[0]
        assert not tm.one_sided[1]

    def test_residual_orthogonal_to_tangent(self, grid16, rng):
        p = bump_pattern()
        dom = ParamDomain([-4.0, -4.0], [4.0, 4.0])
        lam = TransformParams(0.0, 0.3, 0.2, 1.0, 1.0)
        u = Image(grid16, render_values(p, lam, grid16) + rng.normal(0.0, 0.05, grid16.n))
        resid, dist = tangent_residual(u, p, lam, TransformModel.TRANSLATE2, dom)
        t = tangent_matrix(p, lam, TransformModel.TRANSLATE2, dom, grid16).matrix
        # orthogonality up to the tiny ridge term
        assert np.max(np.abs(t.T @ resid)) < 1e-6 * u.norm
        assert dist == pytest.approx(float(np.linalg.norm(resid)))

    def test_exact_on_linear_manifold(self, grid16):
        # render is affine in lambda, so the tangent plane IS the manifold;
        # compare with an independent least-squares distance to that plane
        p = LinearPattern()
        dom = ParamDomain([-2.0, -2.0], [2.0, 2.0])
        model = TransformModel.TRANSLATE2
        lam0 = TransformParams(0.0, 0.2, -0.1, 1.0, 1.0)
        base = render_values(p, lam0, grid16)
        rng = np.random.default_rng(5)
        u_vals = base + rng.normal(0.0, 0.3, grid16.n)
        u = Image(grid16, u_vals)
        _, dist = tangent_residual(u, p, lam0, model, dom)

        cols = np.stack(
            [
                render_values(p, TransformParams(0.0, 1.2, -0.1, 1.0, 1.0), grid16) - base,
                render_values(p, TransformParams(0.0, 0.2, 0.9, 1.0, 1.0), grid16) - base,
            ],
            axis=1,
        )
        coef, *_ = np.linalg.lstsq(cols, u_vals - base, rcond=None)
        want = float(np.linalg.norm(u_vals - base - cols @ coef))
        assert dist == pytest.approx(want, abs=1e-9)

    def test_zero_tangent_matrix_falls_back_to_plain_residual(self):
        w = np.array([3.0, 4.0])
        resid, dist = tangent_residual_from_matrix(w, np.zeros((2, 2)))
        assert dist == pytest.approx(5.0)
        assert np.allclose(resid, w)

    def test_total_error_sums_squares(self, grid16, rng):
        p = bump_pattern()
        dom = ParamDomain([-4.0, -4.0], [4.0, 4.0])
        model = TransformModel.TRANSLATE2
        lams = [TransformParams(0.0, 0.1, 0.0, 1.0, 1.0), TransformParams(0.0, -0.4, 0.6, 1.0, 1.0)]
        images = [
            Image(grid16, render_values(p, lam, grid16) + rng.normal(0.0, 0.02, grid16.n))
            for lam in lams
        ]
        total = total_sq_tangent_error(images, p, lams, model, dom)
        parts = [tangent_residual(u, p, lam, model, dom)[1] ** 2 for u, lam in zip(images, lams)]
        assert total == pytest.approx(sum(parts))


class TestFdStencil:
    def test_base_row_and_combination(self, grid16):
        dom = ParamDomain([-4.0, -4.0], [4.0, 4.0])
        model = TransformModel.TRANSLATE2
        st = fd_stencil(np.array([0.5, -0.5]), model, dom)
        assert np.allclose(st.points[0], [0.5, -0.5])
        p = bump_pattern()
        renders = np.stack(
            [render_values(p, model.from_vector(v), grid16) for v in st.points]
        )
        via_stencil = st.comb.T @ renders
        direct = tangent_matrix(p, model.from_vector(np.array([0.5, -0.5])), model, dom, grid16)
        assert np.allclose(via_stencil.T, direct.matrix, atol=1e-10)
