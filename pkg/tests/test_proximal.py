import itertools

import numpy as np
import pytest

from mvtv.proximal import (
    check_product_norm_conditions,
    project_frobenius_ball,
    project_spectral_ball,
    project_weighted_simplex,
    prox_quadratic_data,
)


def simplex_qp_oracle(v, b):
    """Active-set enumeration for min sum b_k (u_k - v_k)^2 s.t. u>=0, <u,b>=1."""
    l = len(v)
    best = None
    for bits in range(1, 1 << l):
        S = [k for k in range(l) if bits >> k & 1]
        bs = b[S]
        vs = v[S]
        t = (bs @ vs - 1.0) / bs.sum()
        u = np.zeros(l)
        u[S] = vs - t
        if np.any(u[S] < -1e-12):
            continue
        # KKT: inactive coordinates need v_k - t <= 0
        inactive = [k for k in range(l) if not bits >> k & 1]
        if any(v[k] - t > 1e-12 for k in inactive):
            continue
        obj = float(b @ (u - v) ** 2)
        if best is None or obj < best[0] - 1e-15:
            best = (obj, u)
    return best[1]


class TestWeightedSimplex:
    def test_equal_shift(self):
        out = project_weighted_simplex(np.array([0.5, 0.7]), np.array([1.0, 1.0]))
        assert np.allclose(out, [0.4, 0.6], atol=1e-15)

    def test_clipping_case(self):
        out = project_weighted_simplex(np.array([2.0, -1.0]), np.array([1.0, 1.0]))
        assert np.allclose(out, [1.0, 0.0], atol=1e-12)

    def test_feasible_fixed_point(self, rng):
        b = rng.random(6) + 0.5
        u = rng.random(6)
        u /= b @ u
        out = project_weighted_simplex(u, b)
        assert np.abs(out - u).max() <= 1e-12

    def test_constraints_exact(self, rng):
        for _ in range(50):
            l = int(rng.integers(2, 13))
            b = rng.random(l) + 0.1
            v = rng.normal(size=l) * 3
            u = project_weighted_simplex(v, b)
            assert u.min() >= -1e-15
            assert abs(b @ u - 1.0) <= 1e-12

    def test_matches_qp_oracle(self, rng):
        for _ in range(200):
            l = int(rng.integers(2, 13))
            b = rng.random(l) + 0.1
            v = rng.normal(size=l) * 2
            u = project_weighted_simplex(v, b)
            want = simplex_qp_oracle(v, b)
            assert np.abs(u - want).max() <= 1e-10

    def test_batched_matches_loop(self, rng):
        b = rng.random(5) + 0.2
        V = rng.normal(size=(7, 5))
        batch = project_weighted_simplex(V, b)
        for i in range(7):
            assert np.allclose(batch[i], project_weighted_simplex(V[i], b))

    def test_idempotent_and_nonexpansive(self, rng):
        b = rng.random(8) + 0.3
        for _ in range(20):
            x = rng.normal(size=8)
            y = rng.normal(size=8)
            px = project_weighted_simplex(x, b)
            py = project_weighted_simplex(y, b)
            assert np.abs(project_weighted_simplex(px, b) - px).max() <= 1e-12
            # nonexpansive in the b-metric
            dpx = b @ (px - py) ** 2
            dxy = b @ (x - y) ** 2
            assert dpx <= dxy + 1e-12

    def test_nonpositive_weights_rejected(self):
        with pytest.raises(ValueError):
            project_weighted_simplex(np.ones(3), np.array([1.0, 0.0, 1.0]))


def svd_clamp_oracle(g, radius):
    U, S, Vt = np.linalg.svd(g, full_matrices=False)
    return U @ np.diag(np.minimum(S, radius)) @ Vt


class TestSpectralBall:
    def test_diag_clamp(self):
        g = np.diag([2.0, 0.5])
        out = project_spectral_ball(g, 1.0)
        assert np.allclose(out, np.diag([1.0, 0.5]), atol=1e-12)

    def test_inside_unchanged(self, rng):
        g = rng.normal(size=(2, 2)) * 0.1
        out = project_spectral_ball(g, 1.0)
        assert np.abs(out - g).max() <= 1e-14

    def test_matches_svd_oracle_2x3(self, rng):
        for _ in range(50):
            g = rng.normal(size=(2, 3))
            out = project_spectral_ball(g, 0.7)
            assert np.abs(out - svd_clamp_oracle(g, 0.7)).max() <= 1e-10

    @pytest.mark.parametrize("shape", [(1, 2), (2, 1), (2, 2), (2, 3), (3, 3)])
    def test_matches_svd_oracle_all_shapes(self, shape, rng):
        for _ in range(200):
            g = rng.normal(size=shape) * rng.choice([0.3, 1.0, 3.0])
            lam = float(rng.random() + 0.2)
            out = project_spectral_ball(g, lam)
            assert np.abs(out - svd_clamp_oracle(g, lam)).max() <= 1e-10

    def test_idempotent(self, rng):
        g = rng.normal(size=(4, 2, 2)) * 2
        p1 = project_spectral_ball(g, 0.9)
        p2 = project_spectral_ball(p1, 0.9)
        assert np.abs(p2 - p1).max() <= 1e-12

    def test_rotation_commutes(self, rng):
        from mvtv.proximal import _random_rotation
        for _ in range(20):
            g = rng.normal(size=(2, 2)) * 2
            R = _random_rotation(rng, 2)
            Q = _random_rotation(rng, 2)
            lhs = project_spectral_ball(R @ g @ Q, 0.8)
            rhs = R @ project_spectral_ball(g, 0.8) @ Q
            assert np.abs(lhs - rhs).max() <= 1e-10

    def test_nonexpansive(self, rng):
        for _ in range(30):
            a = rng.normal(size=(2, 2)) * 2
            c = rng.normal(size=(2, 2)) * 2
            pa = project_spectral_ball(a, 1.0)
            pc = project_spectral_ball(c, 1.0)
            assert np.linalg.norm(pa - pc) <= np.linalg.norm(a - c) + 1e-12


class TestFrobeniusBall:
    def test_zero(self):
        assert np.all(project_frobenius_ball(np.zeros((2, 2)), 1.0) == 0.0)

    def test_radial_scaling(self, rng):
        g = rng.normal(size=(2, 2))
        g *= 2.0 / np.linalg.norm(g)      # ||g||_F = 2 lambda with lambda = 1
        out = project_frobenius_ball(g, 1.0)
        assert np.abs(out - g / 2).max() <= 1e-12

    def test_row_vector_equals_spectral(self, rng):
        g = rng.normal(size=(1, 3)) * 3
        a = project_frobenius_ball(g, 0.6)
        c = project_spectral_ball(g, 0.6)
        assert np.abs(a - c).max() <= 1e-14


class TestProxQuadratic:
    def test_tau_zero_limit(self, rng):
        u = rng.normal(size=(3, 4))
        f = rng.normal(size=(3, 4))
        out = prox_quadratic_data(u, f, np.ones(4), 1e-12)
        assert np.abs(out - u).max() <= 1e-10

    def test_fixed_point(self, rng):
        f = rng.normal(size=(2, 5))
        out = prox_quadratic_data(f, f, np.ones(5), 0.7)
        assert np.abs(out - f).max() <= 1e-14

    def test_halfway(self):
        out = prox_quadratic_data(np.zeros(3), np.ones(3), np.ones(3), 0.5)
        assert np.allclose(out, 0.5)


class TestProductNorms:
    @pytest.mark.parametrize("norm", ["spectral", "frobenius"])
    def test_conforming_norms(self, norm):
        rep = check_product_norm_conditions(norm, samples=2000, seed=7)
        assert rep.all_hold

    def test_s3_lower_bound_counterexample(self):
        rep = check_product_norm_conditions("s-norm", samples=50, seed=1, s=3)
        ce = [c for c in rep.counterexamples if c["condition"] == "lower-bound"][0]
        assert ce["violated"]
        assert ce["lhs"] == 2.0
        assert abs(ce["bound"] - 2 ** 0.5 * 2 ** (1 / 3)) <= 1e-15

    def test_s1_upper_bound_counterexample(self):
        rep = check_product_norm_conditions("s-norm", samples=50, seed=1, s=1)
        ce = [c for c in rep.counterexamples if c["condition"] == "upper-bound"][0]
        assert ce["violated"]
        assert ce["lhs"] == 2.0
        assert abs(ce["bound"] - 2 ** 0.5) <= 1e-15

    def test_rotation_counterexample_any_s(self):
        for s in (1, 3):
            rep = check_product_norm_conditions("s-norm", samples=10, seed=1, s=s)
            ce = [c for c in rep.counterexamples
                  if c["condition"] == "rotational-invariance"][0]
            assert ce["violated"]
            assert abs(ce["norm_after"] / ce["norm_before"] - np.sqrt(3) / 2) <= 1e-12
