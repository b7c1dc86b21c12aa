import numpy as np
import pytest

from treereg.numerics import (
    AdamState,
    EncoderParams,
    NonFiniteGradientError,
    RankDeficientError,
    adam_step,
    encoder_backward,
    encoder_forward,
    init_encoder,
    l1_least_squares,
    leaky_relu,
    ols_solve,
)


def small_encoder(rng, d_in=3, hidden=(4, 3), k=2):
    h1, h2 = hidden
    return EncoderParams(
        w1=rng.normal(size=(d_in, h1)), b1=rng.normal(size=h1),
        w2=rng.normal(size=(h1, h2)), b2=rng.normal(size=h2),
        w3=rng.normal(size=(h2, k)), b3=rng.normal(size=k),
    )


def forward_oracle(params, x):
    """Independent straight-line re-implementation, one sample at a time."""
    s = params.negative_slope
    out = np.empty((x.shape[0], params.d_out))
    for i in range(x.shape[0]):
        h = x[i] @ params.w1 + params.b1
        h = np.array([v if v > 0 else s * v for v in h])
        g = h @ params.w2 + params.b2
        g = np.array([v if v > 0 else s * v for v in g])
        out[i] = g @ params.w3 + params.b3
    return out


class TestEncoderForward:
    def test_zero_params_zero_output(self):
        p = EncoderParams(np.zeros((3, 4)), np.zeros(4), np.zeros((4, 2)),
                          np.zeros(2), np.zeros((2, 2)), np.zeros(2))
        z, _ = encoder_forward(p, np.random.default_rng(0).normal(size=(5, 3)))
        assert np.all(z == 0.0)

    def test_unit_chain_negative_input(self):
        # 1-1-1-1 net, unit weights, zero biases: leaky(leaky(-1)) * 1 = -1e-4
        p = EncoderParams(np.ones((1, 1)), np.zeros(1), np.ones((1, 1)),
                          np.zeros(1), np.ones((1, 1)), np.zeros(1),
                          negative_slope=0.01)
        z, _ = encoder_forward(p, np.array([[-1.0]]))
        assert z[0, 0] == pytest.approx(-1e-4, rel=1e-12)

    def test_matches_duplicate_implementation(self):
        rng = np.random.default_rng(7)
        p = small_encoder(rng)
        x = rng.normal(size=(11, 3))
        z, _ = encoder_forward(p, x)
        assert np.allclose(z, forward_oracle(p, x), atol=1e-12, rtol=0)

    def test_row_equivariance(self):
        rng = np.random.default_rng(8)
        p = small_encoder(rng)
        x = rng.normal(size=(9, 3))
        z, _ = encoder_forward(p, x)
        perm = rng.permutation(9)
        z_perm, _ = encoder_forward(p, x[perm])
        assert np.allclose(z_perm, z[perm], atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(9)
        p = small_encoder(rng)
        with pytest.raises(ValueError):
            encoder_forward(p, rng.normal(size=(4, 5)))

    def test_init_encoder_bounds(self):
        rng = np.random.default_rng(0)
        p = init_encoder(16, 5, rng, hidden=(256, 64))
        bound = np.sqrt(6.0 / (16 + 256))
        assert np.abs(p.w1).max() <= bound
        assert np.all(p.b1 == 0.0) and np.all(p.b3 == 0.0)
        assert p.w2.shape == (256, 64) and p.w3.shape == (64, 5)


class TestEncoderBackward:
    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(1)
        p = small_encoder(rng)
        x = rng.normal(size=(6, 3))
        _, cache = encoder_forward(p, x)
        grads, dx = encoder_backward(p, cache, np.zeros((6, 2)))
        assert all(np.all(g == 0.0) for g in grads.arrays())
        assert np.all(dx == 0.0)

    def test_linear_region_matches_linear_network(self):
        # positive weights, biases and inputs keep every pre-activation > 0,
        # so gradients must equal those of the slope-1 linear network
        rng = np.random.default_rng(2)
        p = EncoderParams(
            w1=rng.uniform(0.1, 1.0, (3, 4)), b1=rng.uniform(0.1, 0.5, 4),
            w2=rng.uniform(0.1, 1.0, (4, 3)), b2=rng.uniform(0.1, 0.5, 3),
            w3=rng.normal(size=(3, 2)), b3=rng.normal(size=2),
        )
        x = rng.uniform(0.1, 1.0, (5, 3))
        _, cache = encoder_forward(p, x)
        assert np.all(cache.pre1 > 0) and np.all(cache.pre2 > 0)
        dz = rng.normal(size=(5, 2))
        grads, dx = encoder_backward(p, cache, dz)
        # linear network gradients, derived by hand
        a1 = x @ p.w1 + p.b1
        dw3 = (a1 @ p.w2 + p.b2).T @ dz
        da2 = dz @ p.w3.T
        dw2 = a1.T @ da2
        da1 = da2 @ p.w2.T
        dw1 = x.T @ da1
        assert np.allclose(grads.w3, dw3, atol=1e-12)
        assert np.allclose(grads.w2, dw2, atol=1e-12)
        assert np.allclose(grads.w1, dw1, atol=1e-12)
        assert np.allclose(dx, da1 @ p.w1.T, atol=1e-12)

    def test_matches_central_differences(self):
        rng = np.random.default_rng(3)
        p = small_encoder(rng)
        x = rng.normal(size=(4, 3))
        g_out = rng.normal(size=(4, 2))
        _, cache = encoder_forward(p, x)
        grads, _ = encoder_backward(p, cache, g_out)
        h = 1e-5
        for arr, g in zip(p.arrays(), grads.arrays()):
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float((g_out * encoder_forward(p, x)[0]).sum())
                flat[i] = orig - h
                down = float((g_out * encoder_forward(p, x)[0]).sum())
                flat[i] = orig
                numeric = (up - down) / (2 * h)
                denom = max(abs(numeric), abs(gflat[i]), 1e-8)
                assert abs(numeric - gflat[i]) / denom < 1e-4

    def test_stale_cache_shape_rejected(self):
        rng = np.random.default_rng(4)
        p = small_encoder(rng)
        _, cache = encoder_forward(p, rng.normal(size=(6, 3)))
        with pytest.raises(ValueError):
            encoder_backward(p, cache, np.zeros((5, 2)))


class TestLeakyRelu:
    def test_values(self):
        x = np.array([-2.0, 0.0, 3.0])
        assert np.allclose(leaky_relu(x, 0.01), [-0.02, 0.0, 3.0])


class TestAdam:
    def test_first_step_is_signed_lr(self):
        g = np.array([3.0, -0.5, 10.0])
        p = np.zeros(3)
        state = AdamState.init([p], learning_rate=0.1)
        (new_p,), _ = adam_step(state, [p], [g])
        assert np.allclose(new_p, -0.1 * np.sign(g), rtol=1e-6)

    def test_zero_gradient_no_change(self):
        rng = np.random.default_rng(5)
        p = rng.normal(size=(4, 2))
        state = AdamState.init([p], learning_rate=0.1)
        for _ in range(3):
            (p2,), state = adam_step(state, [p], [np.zeros_like(p)])
            assert np.array_equal(p2, p)
            p = p2

    def test_quadratic_convergence(self):
        # minimize 0.5 * ||p - target||^2; gradient is (p - target)
        rng = np.random.default_rng(6)
        target = rng.normal(size=7)
        p = np.zeros(7)
        state = AdamState.init([p], learning_rate=0.01)
        for step in range(5000):
            (p,), state = adam_step(state, [p], [p - target])
            if np.linalg.norm(p - target) < 1e-6:
                break
        assert np.linalg.norm(p - target) < 1e-6
        assert step < 5000

    def test_non_finite_gradient_flagged(self):
        p = np.zeros(2)
        state = AdamState.init([p], learning_rate=0.1)
        with pytest.raises(NonFiniteGradientError):
            adam_step(state, [p], [np.array([1.0, np.nan])])
        assert state.step == 0  # nothing applied

    def test_state_is_pure(self):
        p = np.ones(2)
        state = AdamState.init([p], learning_rate=0.1)
        adam_step(state, [p], [np.ones(2)])
        assert np.all(p == 1.0)
        assert state.step == 0


class TestOls:
    def test_exact_recovery(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(40, 5))
        beta = rng.normal(size=5)
        got = ols_solve(x, x @ beta)
        assert np.allclose(got, beta, atol=1e-9)

    def test_orthogonal_target_gives_zero(self):
        rng = np.random.default_rng(11)
        q, _ = np.linalg.qr(rng.normal(size=(30, 6)))
        x, y = q[:, :5], q[:, 5]
        assert np.allclose(ols_solve(x, y), 0.0, atol=1e-12)

    def test_matches_normal_equations_oracle(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(100, 8))
        y = rng.normal(size=100)
        oracle = np.linalg.solve(x.T @ x, x.T @ y)
        assert np.allclose(ols_solve(x, y), oracle, atol=1e-8)

    def test_residual_orthogonality(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(60, 4))
        y = rng.normal(size=60)
        beta = ols_solve(x, y)
        lhs = np.abs(x.T @ (y - x @ beta)).max()
        assert lhs < 1e-8 * np.abs(x.T @ y).max()

    def test_rank_deficiency_detected(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(20, 3))
        x = np.column_stack([x, x[:, 0] + x[:, 1]])
        with pytest.raises(RankDeficientError):
            ols_solve(x, rng.normal(size=20))

    def test_underdetermined_rejected(self):
        with pytest.raises(ValueError):
            ols_solve(np.ones((2, 3)), np.ones(2))


class TestL1LeastSquares:
    def test_zero_penalty_matches_ols(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(50, 4))
        y = rng.normal(size=50)
        assert np.allclose(l1_least_squares(x, y, 0.0), ols_solve(x, y), atol=1e-8)

    def test_orthonormal_design_soft_thresholds(self):
        # with columns satisfying X^T X = n I the solution is coordinate-wise
        # soft-thresholding of the OLS estimate at lam / 2
        rng = np.random.default_rng(16)
        n = 64
        q, _ = np.linalg.qr(rng.normal(size=(n, 3)))
        x = q * np.sqrt(n)
        y = rng.normal(size=n)
        lam = 0.3
        rho = x.T @ y / n
        expected = np.sign(rho) * np.maximum(np.abs(rho) - lam / 2.0, 0.0)
        assert np.allclose(l1_least_squares(x, y, lam), expected, atol=1e-10)

    def test_negative_penalty_rejected(self):
        with pytest.raises(ValueError):
            l1_least_squares(np.ones((4, 1)), np.ones(4), -0.1)
