import numpy as np
import pytest
import torch

from condot.autodiff import grad_wrt_input
from condot.gaussian_ot import (AffineMongeMap, QuadLayer, brenier_potential, gaussian_monge_map, gelbrich_distance,
                                quad_layer_eval)
from condot.tensor_core import GaussianMoments, empirical_moments, sample_gaussian


def random_moments(rng, d):
    B = rng.standard_normal((d, d))
    return GaussianMoments(rng.standard_normal(d) * 2, B @ B.T + 0.3 * np.eye(d))


ONE_D = (GaussianMoments([0.0], [[1.0]]), GaussianMoments([3.0], [[4.0]]))


class TestGaussianMongeMap:
    def test_identity(self):
        m = GaussianMoments(np.zeros(3), np.eye(3))
        T = gaussian_monge_map(m, m)
        np.testing.assert_allclose(T.A, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(T.b, np.zeros(3), atol=1e-12)

    def test_one_dimensional(self):
        T = gaussian_monge_map(*ONE_D)
        np.testing.assert_allclose(T.linear, [[2.0]], atol=1e-12)
        np.testing.assert_allclose(T.b, [3.0], atol=1e-12)
        np.testing.assert_allclose(T.omega, [-1.5], atol=1e-12)
        # t = b^T (A^T A)^{-1} b / 2
        assert T.t == pytest.approx(9.0 / 4.0)

    def test_one_dimensional_pushforward(self):
        T = gaussian_monge_map(*ONE_D)
        Y = T(sample_gaussian(ONE_D[0], 100000, 0))
        assert Y.mean() == pytest.approx(3.0, abs=0.03)
        assert Y.var(ddof=1) == pytest.approx(4.0, rel=0.02)

    def test_commuting_covariances(self):
        T = gaussian_monge_map(GaussianMoments(np.zeros(2), np.diag([1.0, 4.0])),
                               GaussianMoments(np.zeros(2), np.diag([9.0, 1.0])))
        np.testing.assert_allclose(T.linear, np.diag([3.0, 0.5]), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_exact_moment_transfer(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 7))
        src, dst = random_moments(rng, d), random_moments(rng, d)
        T = gaussian_monge_map(src, dst)
        L = T.linear
        np.testing.assert_allclose(L @ src.cov @ L.T, dst.cov, rtol=1e-8, atol=1e-9)
        np.testing.assert_allclose(L @ src.mean + T.b, dst.mean, atol=1e-9)
        np.testing.assert_allclose(L, L.T, atol=1e-12)
        assert np.linalg.eigvalsh(L).min() > 0

    @pytest.mark.parametrize("seed", range(5))
    def test_affine_forms_agree(self, seed):
        rng = np.random.default_rng(seed)
        T = gaussian_monge_map(random_moments(rng, 3), random_moments(rng, 3))
        x = rng.standard_normal((10, 3))
        np.testing.assert_allclose(T(x), (x - T.omega) @ T.linear.T, atol=1e-9)

    def test_self_map_is_identity(self):
        m = random_moments(np.random.default_rng(4), 4)
        T = gaussian_monge_map(m, m)
        np.testing.assert_allclose(T.A, np.eye(4), atol=1e-8)
        np.testing.assert_allclose(T.b, np.zeros(4), atol=1e-8)

    def test_dict_round_trip(self):
        T = gaussian_monge_map(*ONE_D)
        R = AffineMongeMap.from_dict(T.to_dict())
        np.testing.assert_array_equal(R.A, T.A)
        assert R.t == T.t


class TestBrenierPotential:
    def test_identity(self):
        x = np.array([1.0, -2.0, 0.5])
        assert brenier_potential(AffineMongeMap.identity(3), x) == pytest.approx(0.5 * x @ x)

    def test_zero_at_omega(self):
        T = gaussian_monge_map(*ONE_D)
        assert brenier_potential(T, [-1.5]) == pytest.approx(0.0, abs=1e-15)

    def test_hand_value(self):
        T = gaussian_monge_map(*ONE_D)
        assert brenier_potential(T, [0.0]) == pytest.approx(2.25)

    def test_autodiff_gradient_matches_map(self):
        rng = np.random.default_rng(0)
        T = gaussian_monge_map(random_moments(rng, 3), random_moments(rng, 3))
        A, om = torch.as_tensor(T.A), torch.as_tensor(T.omega)

        def pot(x, c):
            r = (x - om) @ A.T
            return 0.5 * (r * r).sum(-1)

        x = rng.standard_normal((6, 3))
        g = grad_wrt_input(pot, torch.as_tensor(x), create_graph=False).numpy()
        np.testing.assert_allclose(g, T(x), atol=1e-10)

    def test_floor_on_grid(self):
        T = gaussian_monge_map(GaussianMoments(np.zeros(2), np.diag([1.0, 2.0])),
                               GaussianMoments(np.array([1.0, -1.0]), np.array([[2.0, 0.3], [0.3, 0.5]])))
        g = np.linspace(-3, 3, 121)
        grid = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2) + T.omega
        vals = brenier_potential(T, grid)
        assert vals.min() >= -1e-10
        assert np.allclose(grid[np.argmin(vals)], T.omega, atol=0.05)


class TestQuadLayer:
    def test_identity_layer(self):
        v, g = quad_layer_eval(QuadLayer.identity(2), np.array([1.0, 2.0]))
        assert v == pytest.approx(2.5)
        np.testing.assert_array_equal(g, [1.0, 2.0])

    def test_matches_potential(self):
        T = gaussian_monge_map(*ONE_D)
        v, g = quad_layer_eval(QuadLayer.from_map(T), np.array([0.0]))
        assert v == pytest.approx(2.25)
        np.testing.assert_allclose(g, [3.0], atol=1e-12)

    def test_center(self):
        q = QuadLayer(np.array([[2.0, 1.0], [0.0, 3.0]]), np.array([0.3, -0.7]))
        v, g = quad_layer_eval(q, q.m)
        assert v == 0.0
        np.testing.assert_array_equal(g, [0.0, 0.0])

    def test_pushforward(self):
        rng = np.random.default_rng(2)
        src, dst = random_moments(rng, 2), random_moments(rng, 2)
        q = QuadLayer.from_map(gaussian_monge_map(src, dst))
        X = sample_gaussian(src, 20000, 1)
        Y = np.array([quad_layer_eval(q, x)[1] for x in X])
        est = empirical_moments(Y)
        assert np.linalg.norm(est.cov - dst.cov) / np.linalg.norm(dst.cov) < 0.05


class TestGelbrich:
    def test_identical(self):
        m = random_moments(np.random.default_rng(0), 3)
        assert gelbrich_distance(m, m) == pytest.approx(0.0, abs=1e-9)

    def test_one_dimensional(self):
        assert gelbrich_distance(*ONE_D) == pytest.approx(10.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_moments(rng, 4), random_moments(rng, 4)
        assert gelbrich_distance(a, b) == pytest.approx(gelbrich_distance(b, a), rel=1e-9)

    def test_equals_map_displacement(self):
        # W2^2 = E||T(x) - x||^2 for the optimal affine map
        rng = np.random.default_rng(5)
        a, b = random_moments(rng, 3), random_moments(rng, 3)
        T = gaussian_monge_map(a, b)
        L = T.linear - np.eye(3)
        shift = L @ a.mean + T.b
        expected = float(shift @ shift + np.trace(L @ a.cov @ L.T))
        assert gelbrich_distance(a, b) == pytest.approx(expected, rel=1e-8)
