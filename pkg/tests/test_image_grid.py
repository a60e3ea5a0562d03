import itertools

import numpy as np
import pytest

from mvtv.image_grid import GridSpec, grad, neg_div


def grad_oracle(u, grid):
    """Independent loop implementation of the dual-node staggered gradient.

    Component t at dual node c averages the 2^(d-1) axis-t face differences
    adjacent to the node, with zero extension outside the grid.
    """
    d = grid.d
    out = np.zeros((d,) + grid.dual_shape)
    w = 0.5 ** (d - 1) / grid.spacing
    for c in itertools.product(*(range(s + 1) for s in grid.shape)):
        for t in range(d):
            if not 1 <= c[t] <= grid.shape[t] - 1:
                continue
            acc = 0.0
            others = [s for s in range(d) if s != t]
            for offs in itertools.product(*[(c[s] - 1, c[s]) for s in others]):
                vox_hi = list(c)
                vox_lo = list(c)
                vox_hi[t] = c[t]
                vox_lo[t] = c[t] - 1
                ok = True
                for s, o in zip(others, offs):
                    if not 0 <= o <= grid.shape[s] - 1:
                        ok = False
                        break
                    vox_hi[s] = o
                    vox_lo[s] = o
                if ok:
                    acc += u[tuple(vox_hi)] - u[tuple(vox_lo)]
            out[(t,) + c] = w * acc
    return out


class TestGrad:
    def test_constant_is_zero(self):
        grid = GridSpec((4, 5))
        u = np.full(grid.shape, 3.7)
        assert np.all(grad(u, grid) == 0.0)

    def test_1d_single_difference(self):
        grid = GridSpec((2,))
        out = grad(np.array([0.0, 1.0]), grid)
        assert out.shape == (1, 3)
        assert np.allclose(out, [[0.0, 1.0, 0.0]])

    @pytest.mark.parametrize("shape", [(5,), (3, 4), (4, 4), (2, 3, 2)])
    def test_matches_dense_oracle(self, shape, rng):
        grid = GridSpec(shape)
        u = rng.normal(size=shape)
        want = grad_oracle(u, grid)
        got = grad(u, grid)
        assert got.shape == want.shape
        assert np.abs(got - want).max() <= 1e-14

    def test_shape_mismatch(self):
        grid = GridSpec((4, 4))
        with pytest.raises(ValueError):
            grad(np.zeros((3, 4)), grid)

    def test_rot90_covariance(self, rng):
        # dual nodes map to dual nodes; the coupled norm field is permuted
        grid = GridSpec((6, 6))
        u = rng.normal(size=grid.shape)
        gu = grad(u, grid)
        gr = grad(np.rot90(u).copy(), grid)
        norms = np.hypot(gu[0], gu[1])
        norms_r = np.hypot(gr[0], gr[1])
        assert abs(norms.sum() - norms_r.sum()) <= 1e-12 * max(1.0, norms.sum())
        assert np.abs(np.sort(norms.ravel()) - np.sort(norms_r.ravel())).max() <= 1e-13


class TestNegDiv:
    def test_zero(self):
        grid = GridSpec((3, 3))
        assert np.all(neg_div(np.zeros((2, 4, 4)), grid) == 0.0)

    def test_1d_summation_by_parts(self):
        grid = GridSpec((2,))
        p = np.array([[0.0, 1.0, 0.0]])
        out = neg_div(p, grid)
        assert np.allclose(out, [-1.0, 1.0])

    def test_adjoint_identity_3x4(self, rng):
        grid = GridSpec((3, 4))
        u = rng.normal(size=grid.shape)
        p = rng.normal(size=(2,) + grid.dual_shape)
        lhs = float(np.sum(grad(u, grid) * p))
        rhs = float(np.sum(u * neg_div(p, grid)))
        assert abs(lhs - rhs) <= 1e-13

    @pytest.mark.parametrize("shape", [(2,), (7,), (3, 4), (5, 5), (2, 3, 4),
                                       (5, 5, 5)])
    def test_adjoint_randomized(self, shape, rng):
        grid = GridSpec(shape, spacing=1.0)
        for _ in range(5):
            u = rng.normal(size=shape)
            p = rng.normal(size=(len(shape),) + grid.dual_shape)
            lhs = float(np.sum(grad(u, grid) * p))
            rhs = float(np.sum(u * neg_div(p, grid)))
            scale = max(1.0, abs(lhs))
            assert abs(lhs - rhs) <= 1e-13 * scale

    def test_adjoint_with_channels(self, rng):
        grid = GridSpec((3, 3))
        u = rng.normal(size=(4,) + grid.shape)
        p = rng.normal(size=(4, 2) + grid.dual_shape)
        lhs = float(np.sum(grad(u, grid) * p))
        rhs = float(np.sum(u * neg_div(p, grid)))
        assert abs(lhs - rhs) <= 1e-13

    def test_constant_dual_interior(self):
        grid = GridSpec((5,))
        p = np.ones((1,) + grid.dual_shape)
        out = neg_div(p, grid)
        assert np.allclose(out[1:-1], 0.0)


class TestCartoonCount:
    def test_straight_edge_counts_faces(self):
        # vertical edge through a 16x16 image: exactly 16 face crossings
        grid = GridSpec((16, 16))
        u = np.zeros(grid.shape)
        u[:, :8] = 1.0
        g = grad(u, grid)
        tv = float(np.hypot(g[0], g[1]).sum())
        assert abs(tv - 16.0) <= 1e-12


class TestGridSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            GridSpec((1, 2, 3, 4))
        with pytest.raises(ValueError):
            GridSpec((0, 2))
        with pytest.raises(ValueError):
            GridSpec((2, 2), spacing=0.0)

    def test_dual_shape(self):
        grid = GridSpec((3, 4))
        assert grid.dual_shape == (4, 5)
        assert grid.n_dual == 20
