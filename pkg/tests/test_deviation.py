import numpy as np
import pytest

from subvarid.deviation import (
    AlphaMatrix,
    alpha_matrix,
    invert_data_matrix,
    j1_hessian,
    j2_hessian,
    max_deviation,
    noise_sample_counts,
    sample_variance,
    solve_box_qp,
    solve_j1_exact,
    solve_j1_relaxed,
    solve_j2,
)
from subvarid.errors import ConfigurationError, EstimationError
from subvarid.lti_core import MarkovMatrix, build_hankel, build_L, lead_outputs, simulate
from subvarid.subspace_id import EstimatorConfig
from conftest import CANONICAL_X0


def brute_force_box_max(H, delta):
    """Independent oracle: direct enumeration without the solver machinery."""
    d = H.shape[0]
    best = -np.inf
    best_w = None
    for code in range(1 << d):
        w = 2 * delta * np.array([1.0 if (code >> b) & 1 else -1.0 for b in range(d)])
        val = w @ H @ w
        if val > best:
            best, best_w = val, w
    return best, best_w


def canonical_window(canonical, h=4, t=5, seed=11, amp=10.0):
    """Noise-free canonical data window with strong excitation."""
    rng = np.random.default_rng(seed)
    cfg = EstimatorConfig(h=h, t=t)
    T = cfg.samples_needed(1, 1)
    U = amp * rng.choice([-1.0, 1.0], size=T)
    log = simulate(canonical, CANONICAL_X0, U)
    return log.y, log.u, cfg


class TestAlphaMatrix:
    def test_identity(self):
        al = invert_data_matrix(np.eye(4), r=2)
        assert np.array_equal(al.alpha, np.eye(4))
        assert al.condition_number == pytest.approx(1.0)

    def test_diagonal(self):
        al = invert_data_matrix(np.diag([2.0, 4.0]), r=1)
        assert np.allclose(al.alpha, np.diag([0.5, 0.25]))

    def test_residual_on_data_window(self, canonical):
        y, u, cfg = canonical_window(canonical)
        al = alpha_matrix(y, u, cfg)
        L = build_L(y, u, cfg.k, cfg.h, cfg.t)
        assert np.abs(al.alpha @ L - np.eye(al.s)).max() < 1e-10

    def test_singular_raises_with_cond(self):
        with pytest.raises(EstimationError) as err:
            invert_data_matrix(np.zeros((3, 3)), r=1)
        assert err.value.condition_number is not None


class TestJ1Hessian:
    def test_identity_alpha_gives_identity(self):
        al = AlphaMatrix(alpha=np.eye(6), r=2, s=6, condition_number=1.0)
        assert np.array_equal(j1_hessian(al), np.eye(4))

    def test_rank_one_block(self):
        alpha = np.eye(5)
        alpha[2:, 2:] = np.outer([1.0, 2.0, 3.0], [1.0, 1.0, 0.5])
        al = AlphaMatrix(alpha=alpha, r=2, s=5, condition_number=1.0)
        assert np.linalg.matrix_rank(j1_hessian(al)) == 1

    def test_matches_transpose_product_and_psd(self):
        rng = np.random.default_rng(0)
        alpha = rng.normal(size=(7, 7))
        al = AlphaMatrix(alpha=alpha, r=3, s=7, condition_number=1.0)
        H = j1_hessian(al)
        M = alpha[3:, 3:]
        assert np.allclose(H, M.T @ M)
        assert np.linalg.eigvalsh(H).min() >= -1e-12


class TestSolveJ1Exact:
    def test_diagonal_identity(self):
        value, w = solve_j1_exact(np.eye(3), delta=0.05)
        assert value == pytest.approx(3 * 0.1**2)
        assert np.all(np.abs(w) == pytest.approx(0.1))

    def test_all_ones_2x2(self):
        value, w = solve_j1_exact(np.ones((2, 2)), delta=0.5)
        assert value == pytest.approx(4.0)
        assert w[0] == w[1]  # optimum at aligned signs

    def test_zero_delta(self):
        value, _ = solve_j1_exact(np.eye(4), delta=0.0)
        assert value == 0.0

    def test_refuses_large_dimension(self):
        with pytest.raises(ConfigurationError):
            solve_j1_exact(np.eye(21), delta=0.1)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for d in (2, 4, 7):
            A = rng.normal(size=(d, d))
            H = A @ A.T
            value, w = solve_j1_exact(H, delta=0.3)
            ref, _ = brute_force_box_max(H, 0.3)
            assert value == pytest.approx(ref)
            assert w @ H @ w == pytest.approx(value)


class TestSolveJ1Relaxed:
    def test_identity_2x2(self):
        value, w, gap = solve_j1_relaxed(np.eye(2), delta=0.5)
        assert value == pytest.approx(2.0)
        assert gap == pytest.approx(0.0)
        assert np.all(np.abs(w) == pytest.approx(1.0))

    def test_rank_one_equal_magnitude(self):
        q = np.array([1.0, -1.0, 1.0])
        H = np.outer(q, q)
        value, w, gap = solve_j1_relaxed(H, delta=0.25)
        exact, _ = brute_force_box_max(H, 0.25)
        assert value == pytest.approx(exact)

    def test_rounding_quality_random_psd(self):
        # acceptance-style sweep at module scale
        rng = np.random.default_rng(2)
        for _ in range(60):
            d = rng.integers(2, 11)
            A = rng.normal(size=(d, d))
            H = A @ A.T
            delta = float(rng.uniform(0.01, 1.0))
            exact, _ = solve_j1_exact(H, delta)
            rounded, w, gap = solve_j1_relaxed(H, delta)
            relaxed = rounded + gap
            assert relaxed >= exact - 1e-9 * max(exact, 1.0)
            assert rounded <= exact + 1e-9 * max(exact, 1.0)
            assert rounded >= 0.95 * exact
            assert np.abs(w).max() <= 2 * delta + 1e-12

    def test_zero_matrix(self):
        value, w, gap = solve_j1_relaxed(np.zeros((5, 5)), delta=0.1)
        assert value == 0.0 and gap == 0.0


class TestJ2Hessian:
    def small_instance(self, canonical, seed=5):
        y, u, cfg = canonical_window(canonical, h=4, t=5, seed=seed)
        al = alpha_matrix(y, u, cfg)
        lead = lead_outputs(y, cfg.k, cfg.h, cfg.t, al.s)
        return al, lead, cfg

    def test_zero_outputs_give_zero(self, canonical):
        al, lead, cfg = self.small_instance(canonical)
        H2 = j2_hessian(al, np.zeros_like(lead), cfg)
        assert np.all(H2 == 0.0)

    def test_quadratic_scaling_in_lead(self, canonical):
        al, lead, cfg = self.small_instance(canonical)
        H2 = j2_hessian(al, lead, cfg)
        H2_scaled = j2_hessian(al, 3.0 * lead, cfg)
        assert np.allclose(H2_scaled, 9.0 * H2)

    def test_psd(self, canonical):
        al, lead, cfg = self.small_instance(canonical)
        H2 = j2_hessian(al, lead, cfg)
        assert np.linalg.eigvalsh(H2).min() >= -1e-12

    def test_finite_difference_oracle_small_toy(self):
        # SISO h=1, t=1 instance: s = 3, r = 1.  The objective
        # f(P) = sum_j ( lead . (-alpha dL(P) alpha) )_j^2 over the selected
        # column; its Hessian equals 2*H2 (f = P^T H2 P).
        rng = np.random.default_rng(6)
        cfg = EstimatorConfig(h=1, t=1)
        y = rng.normal(size=12)
        u = rng.normal(size=12)
        al = alpha_matrix(y, u, cfg)
        lead = lead_outputs(y, 0, 1, 1, al.s)
        H2 = j2_hessian(al, lead, cfg)
        nw, ne = noise_sample_counts(cfg, 1, 1)

        def f(P):
            w_samples, e_samples = P[:nw], P[nw:]
            dL = np.vstack(
                [
                    build_hankel(w_samples, 0, cfg.h, al.s).data,
                    build_hankel(e_samples, 0, cfg.h + cfg.t, al.s).data,
                ]
            )
            inner = lead @ (-al.alpha @ dL @ al.alpha)
            return float(np.sum(inner[:, al.s - al.r :] ** 2))

        dim = nw + ne
        eps = 1e-5
        H_fd = np.zeros((dim, dim))
        for i in range(dim):
            for j in range(dim):
                P = np.zeros(dim)
                P[i] += eps
                P[j] += eps
                fpp = f(P)
                P = np.zeros(dim)
                P[i] += eps
                P[j] -= eps
                fpm = f(P)
                P = np.zeros(dim)
                P[i] -= eps
                P[j] += eps
                fmp = f(P)
                P = np.zeros(dim)
                P[i] -= eps
                P[j] -= eps
                fmm = f(P)
                H_fd[i, j] = (fpp - fpm - fmp + fmm) / (4 * eps**2)
        assert np.allclose(H_fd, 2.0 * H2, rtol=1e-6, atol=1e-9)


class TestSolveJ2:
    def test_zero(self):
        value, _, gap, method = solve_j2(np.zeros((4, 4)), delta=0.1)
        assert value == 0.0

    def test_diagonal(self):
        H2 = np.diag([1.0, 2.0, 0.5])
        value, _, _, method = solve_j2(H2, delta=0.25)
        assert method == "exact"
        assert value == pytest.approx(3.5 * (2 * 0.25) ** 2)

    def test_small_matches_enumeration(self):
        rng = np.random.default_rng(7)
        A = rng.normal(size=(5, 5))
        H2 = A @ A.T
        value, p_star, _, _ = solve_j2(H2, delta=0.2)
        ref, _ = brute_force_box_max(H2, 0.2)
        assert value == pytest.approx(ref)

    def test_large_dimension_uses_relaxed(self):
        rng = np.random.default_rng(8)
        A = rng.normal(size=(25, 5))
        H2 = A @ A.T
        value, p_star, gap, method = solve_j2(H2, delta=0.1)
        assert method == "relaxed"
        assert np.abs(p_star).max() <= 0.2 + 1e-12
        assert value <= value + gap  # relaxed bound above rounded value


class TestMaxDeviation:
    def test_zero_delta_gives_zero(self, canonical):
        y, u, cfg = canonical_window(canonical)
        res = max_deviation(y, u, cfg, delta=0.0)
        assert res.J == 0.0

    def test_delta_scaling_exact_factor_two(self, canonical):
        # both sub-problems are quadratic in the box half-width
        y, u, cfg = canonical_window(canonical)
        res1 = max_deviation(y, u, cfg, delta=0.05)
        res2 = max_deviation(y, u, cfg, delta=0.10)
        assert res2.J == pytest.approx(2.0 * res1.J, rel=1e-9)

    def test_worst_case_vectors_feasible(self, canonical):
        y, u, cfg = canonical_window(canonical)
        res = max_deviation(y, u, cfg, delta=0.05)
        assert np.abs(res.w_star).max() <= 0.1 + 1e-12
        assert np.abs(res.p_star).max() <= 0.1 + 1e-12

    def test_composition(self, canonical):
        y, u, cfg = canonical_window(canonical)
        res = max_deviation(y, u, cfg, delta=0.05)
        assert res.J == pytest.approx(np.sqrt(res.J1 + res.J2))
        assert res.J1 >= 0 and res.J2 >= 0


class TestSampleVariance:
    def test_identical_estimates(self):
        G = MarkovMatrix(G=np.ones((1, 3)), t=3)
        assert sample_variance([G, G, G]) == 0.0

    def test_two_scalars(self):
        G0 = MarkovMatrix(G=np.array([[0.0]]), t=1)
        G2 = MarkovMatrix(G=np.array([[2.0]]), t=1)
        assert sample_variance([G0, G2]) == pytest.approx(2.0)

    def test_requires_two(self):
        with pytest.raises(ConfigurationError):
            sample_variance([MarkovMatrix(G=np.array([[1.0]]), t=1)])


class TestLinearizationRegime:
    def test_beta_linearization_error_small_on_conditioned_window(self, canonical):
        # first-order inverse perturbation accurate for delta = 0.05 on a
        # strongly excited window; tolerance is the default design epsilon
        y, u, cfg = canonical_window(canonical)
        L = build_L(y, u, cfg.k, cfg.h, cfg.t)
        alpha = np.linalg.inv(L)
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(50):
            dL = rng.uniform(-0.1, 0.1, size=L.shape)
            exact = np.linalg.inv(L + dL)
            lin = alpha - alpha @ dL @ alpha
            worst = max(worst, np.abs(exact - lin).max())
        assert worst < 1e-2
