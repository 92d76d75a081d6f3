"""Discrete calculus: stencil contracts, adjointness, spectral norms."""

import numpy as np
import pytest

from bfflow import grid as gr
from bfflow.grid import Grid, ScalarField, VectorField
from bfflow.rng import SplitMix64


def random_scalar(grid, rng):
    return ScalarField(grid, rng.normal(grid.shape))


def random_vector(grid, rng):
    return VectorField(grid, rng.normal((grid.dim,) + grid.shape))


class TestGridType:
    def test_spacing_invariant(self):
        for n in (4, 6, 8, 16, 32):
            g = Grid(2, n)
            assert g.h * (n + 1) == 1.0

    @pytest.mark.parametrize("dim,n", [(1, 8), (4, 8), (2, 2), (2, 7), (2, 48)])
    def test_invalid_grids_rejected(self, dim, n):
        with pytest.raises(ValueError):
            Grid(dim, n)

    def test_3d_supported(self):
        g = Grid(3, 4)
        assert g.num_nodes == 64

    def test_nonfinite_field_rejected(self):
        g = Grid(2, 8)
        vals = np.zeros(g.shape)
        vals[0, 0] = np.nan
        with pytest.raises(ValueError):
            ScalarField(g, vals)


class TestGrad:
    def test_zero(self):
        g = Grid(2, 8)
        out = gr.grad(gr.zeros_scalar(g))
        assert np.all(out.values == 0.0)

    @pytest.mark.parametrize("n", [16, 32])
    def test_matches_analytic_gradient(self, n):
        # oracle: hand-differentiated sin(pi x) sin(pi y)
        g = Grid(2, n)
        x, y = gr.coordinates(g)
        p = ScalarField(g, np.sin(np.pi * x) * np.sin(np.pi * y))
        exact = np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)
        err = np.abs(gr.grad(p).values[0] - exact).max()
        # central-difference truncation bound (pi^3/6) h^2, with margin
        assert err <= 1.2 * (np.pi ** 3 / 6.0) * g.h ** 2

    def test_second_order(self):
        errs = []
        for n in (16, 32):
            g = Grid(2, n)
            x, y = gr.coordinates(g)
            p = ScalarField(g, np.sin(np.pi * x) * np.sin(np.pi * y))
            exact = np.pi * np.cos(np.pi * x) * np.sin(np.pi * y)
            errs.append(np.abs(gr.grad(p).values[0] - exact).max())
        order = np.log2(errs[0] / errs[1]) / np.log2(33.0 / 17.0)
        assert order == pytest.approx(2.0, abs=0.3)

    def test_adjointness_10_random_pairs(self):
        g = Grid(2, 8)
        rng = SplitMix64(7)
        for _ in range(10):
            p = random_scalar(g, rng)
            U = random_vector(g, rng)
            lhs = gr.vector_inner(gr.grad(p), U)
            rhs = -gr.inner(p, gr.div(U))
            assert abs(lhs - rhs) <= 1e-13 * max(abs(lhs), abs(rhs), 1.0)


class TestDiv:
    def test_zero(self):
        g = Grid(2, 8)
        assert np.all(gr.div(gr.zeros_vector(g)).values == 0.0)

    def test_matches_analytic_laplacian_in_interior(self):
        # div(grad s) equals the analytic Laplacian away from the
        # zero-extension boundary layer (grad s does not vanish on the walls)
        errs = []
        for n in (16, 32):
            g = Grid(2, n)
            x, y = gr.coordinates(g)
            s = ScalarField(g, np.sin(np.pi * x) * np.sin(np.pi * y))
            got = gr.div(gr.grad(s)).values
            exact = -2.0 * np.pi ** 2 * s.values
            interior = (slice(2, -2), slice(2, -2))
            errs.append(np.abs(got[interior] - exact[interior]).max())
        assert errs[1] <= errs[0] / 2.5  # about 4x per halving of h

    def test_constant_field_boundary_layer_only(self):
        g = Grid(2, 8)
        U = VectorField(g, np.stack([np.ones(g.shape), np.zeros(g.shape)]))
        d = gr.div(U).values
        assert np.all(d[2:-2, 2:-2] == 0.0)
        assert np.any(d[0, :] != 0.0) and np.any(d[-1, :] != 0.0)


class TestLaplacian:
    def test_zero(self):
        g = Grid(2, 8)
        assert np.all(gr.laplacian(gr.zeros_vector(g)).values == 0.0)

    @pytest.mark.parametrize("k", [(1, 1), (2, 3), (5, 1)])
    def test_sine_modes_are_exact_eigenvectors(self, k):
        g = Grid(2, 8)
        mode = gr.sine_mode(g, k).values
        U = VectorField(g, np.stack([mode, np.zeros(g.shape)]))
        lam = -(4.0 / g.h ** 2) * (np.sin(k[0] * np.pi * g.h / 2) ** 2
                                   + np.sin(k[1] * np.pi * g.h / 2) ** 2)
        got = gr.laplacian(U).values[0]
        assert np.abs(got - lam * mode).max() <= 1e-11 * abs(lam)

    def test_negative_definite(self):
        g = Grid(2, 8)
        rng = SplitMix64(11)
        for _ in range(10):
            U = random_vector(g, rng)
            assert gr.vector_inner(gr.laplacian(U), U) < 0.0

    def test_symmetric_and_matches_forward_difference_energy(self):
        # the compact stencil pairs exactly with the forward-difference
        # gradient energy (summation by parts), which backs the spectral H1
        g = Grid(2, 8)
        rng = SplitMix64(13)
        U = random_vector(g, rng)
        V = random_vector(g, rng)
        a = gr.vector_inner(gr.laplacian(U), V)
        b = gr.vector_inner(U, gr.laplacian(V))
        assert abs(a - b) <= 1e-12 * max(abs(a), 1.0)
        energy = 0.0
        for comp in range(g.dim):
            for ax in range(g.dim):
                padded = np.zeros((g.n + 2, g.n + 2))
                padded[1:-1, 1:-1] = U.values[comp]
                dif = np.diff(padded, axis=ax)
                energy += g.cell_volume / g.h ** 2 * np.sum(dif * dif)
        quad = -gr.vector_inner(gr.laplacian(U), U)
        assert quad == pytest.approx(energy, rel=1e-12)


class TestWeightedInner:
    def test_identity_matches_plain_norm(self):
        g = Grid(2, 8)
        rng = SplitMix64(17)
        U = random_vector(g, rng)
        assert gr.weighted_inner(np.eye(2), U, U) == pytest.approx(
            gr.norm_l2(U) ** 2, rel=1e-14)

    def test_hand_summation(self):
        g = Grid(2, 8)
        U = VectorField(g, np.stack([np.ones(g.shape), np.zeros(g.shape)]))
        val = gr.weighted_inner(np.diag([2.0, 3.0]), U, U)
        assert val == pytest.approx(2.0 * g.h ** 2 * 64, rel=1e-15)

    def test_symmetry(self):
        g = Grid(2, 8)
        rng = SplitMix64(19)
        D = np.array([[2.0, 0.5], [0.5, 1.0]])
        U, V = random_vector(g, rng), random_vector(g, rng)
        a = gr.weighted_inner(D, U, V)
        b = gr.weighted_inner(D, V, U)
        assert abs(a - b) <= 1e-15 * max(abs(a), 1.0)


class TestSpectral:
    def test_parseval_and_roundtrip(self):
        g = Grid(2, 16)
        rng = SplitMix64(23)
        f = random_scalar(g, rng)
        c = gr.sine_coefficients(f)
        assert np.sum(c * c) == pytest.approx(gr.norm_l2(f) ** 2, rel=1e-12)
        back = gr.sine_synthesis(c, g)
        assert np.abs(back.values - f.values).max() <= 1e-12

    def test_sobolev_zero_field(self):
        g = Grid(2, 8)
        assert gr.sobolev_norm(gr.zeros_scalar(g), 0.7) == 0.0

    def test_sobolev_delta0_is_l2(self):
        g = Grid(2, 16)
        rng = SplitMix64(29)
        f = random_scalar(g, rng)
        assert gr.sobolev_norm(f, 0.0) == pytest.approx(gr.norm_l2(f), rel=1e-12)

    def test_sobolev_lowest_mode_delta1(self):
        g = Grid(2, 8)
        f = gr.sine_mode(g, (1, 1))
        lam1 = (8.0 / g.h ** 2) * np.sin(np.pi * g.h / 2.0) ** 2
        assert lam1 == pytest.approx(19.539590865365682, rel=1e-14)  # frozen
        assert gr.sobolev_norm(f, 1.0) == pytest.approx(np.sqrt(lam1), rel=1e-12)

    def test_sobolev_monotone_in_delta(self):
        g = Grid(2, 16)
        lam = gr.laplacian_eigenvalues(g)
        assert lam.min() >= 1.0  # precondition for monotonicity
        rng = SplitMix64(31)
        f = random_scalar(g, rng)
        norms = [gr.sobolev_norm(f, d) for d in (0.0, 0.25, 0.5, 0.75, 1.0)]
        assert all(a <= b * (1 + 1e-13) for a, b in zip(norms, norms[1:]))

    def test_sobolev_delta_range(self):
        g = Grid(2, 8)
        with pytest.raises(ValueError):
            gr.sobolev_norm(gr.zeros_scalar(g), 1.5)


class TestMeanProjection:
    def test_constant_to_zero(self):
        g = Grid(2, 8)
        out = gr.project_mean_zero(ScalarField(g, np.full(g.shape, 3.7)))
        assert np.abs(out.values).max() <= 1e-14

    def test_idempotent(self):
        g = Grid(2, 8)
        rng = SplitMix64(37)
        p0 = gr.project_mean_zero(random_scalar(g, rng))
        p1 = gr.project_mean_zero(p0)
        assert np.abs(p1.values - p0.values).max() <= 1e-15

    def test_mean_removed_and_reconstructible(self):
        g = Grid(2, 8)
        rng = SplitMix64(41)
        p = random_scalar(g, rng)
        m = p.values.mean()
        out = gr.project_mean_zero(p)
        assert abs(out.values.mean()) <= 1e-14
        assert np.abs(out.values + m - p.values).max() <= 1e-14


class TestStencilProperties:
    @pytest.mark.parametrize("n", [8, 16, 32])
    def test_adjointness_quantified(self, n):
        g = Grid(2, n)
        rng = SplitMix64(43 + n)
        for _ in range(100):
            p = random_scalar(g, rng)
            U = random_vector(g, rng)
            lhs = gr.vector_inner(gr.grad(p), U)
            rhs = -gr.inner(p, gr.div(U))
            assert abs(lhs - rhs) <= 1e-13 * max(abs(lhs), abs(rhs), 1.0)

    def test_linearity(self):
        g = Grid(2, 8)
        rng = SplitMix64(47)
        a, b = 1.7, -2.3
        F, G = random_scalar(g, rng), random_scalar(g, rng)
        lin = gr.grad(ScalarField(g, a * F.values + b * G.values)).values
        sep = a * gr.grad(F).values + b * gr.grad(G).values
        assert np.abs(lin - sep).max() <= 1e-13 * np.abs(sep).max()
        U, V = random_vector(g, rng), random_vector(g, rng)
        for op in (gr.div, gr.laplacian):
            lin = op(VectorField(g, a * U.values + b * V.values)).values
            sep = a * op(U).values + b * op(V).values
            assert np.abs(lin - sep).max() <= 1e-13 * np.abs(sep).max()

    def test_3d_adjointness_and_eigenvalue(self):
        g = Grid(3, 4)
        rng = SplitMix64(53)
        p = random_scalar(g, rng)
        U = random_vector(g, rng)
        lhs = gr.vector_inner(gr.grad(p), U)
        rhs = -gr.inner(p, gr.div(U))
        assert abs(lhs - rhs) <= 1e-13 * max(abs(lhs), 1.0)
        mode = gr.sine_mode(g, (1, 2, 1)).values
        W = VectorField(g, np.stack([mode] + [np.zeros(g.shape)] * 2))
        lam = -(4.0 / g.h ** 2) * sum(np.sin(k * np.pi * g.h / 2) ** 2
                                      for k in (1, 2, 1))
        assert np.abs(gr.laplacian(W).values[0] - lam * mode).max() <= 1e-11 * abs(lam)
