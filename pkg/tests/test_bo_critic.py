"""Tests for edge_offload_tool.bo_critic module."""

import math
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from edge_offload_tool.bo_critic import (
    BoCache,
    BoCritic,
    GpInputs,
    KernelParams,
    acquisition,
    fit_posterior,
    initial_params,
    kernel,
    kernel_matrix,
    log_marginal_likelihood,
    log_marginal_likelihood_gradient,
    posterior,
    prior_variance,
    refit,
    select_action,
)
from edge_offload_tool.core import (
    AcquisitionKind,
    CriticConfig,
    DegradationAction,
    DomainError,
    FloatArray,
    GradientMode,
)

THETA = KernelParams(1.0, (1.0, 1.0, 1.0), 2.0, 0.1, 0.1)


def _random_inputs(rng: np.random.Generator, j: int, n: int = 3) -> GpInputs:
    slots = rng.choice(np.arange(1, 5 * j + 1), size=j, replace=False)
    return GpInputs(rng.normal(size=(j, n)), rng.integers(0, 4, size=(j, n)), np.sort(slots))


def _random_theta(rng: np.random.Generator, n: int = 3) -> KernelParams:
    return KernelParams(
        signal_var=float(rng.uniform(0.5, 2.0)),
        length_scales=tuple(rng.uniform(0.5, 2.0, size=n)),
        action_var=float(rng.uniform(0.5, 2.0)),
        decay=float(rng.uniform(0.01, 0.3)),
        noise_std=float(rng.uniform(0.1, 0.5)),
    )


def _noisy_gram(inputs: GpInputs, theta: KernelParams) -> FloatArray:
    return kernel_matrix(inputs, inputs, theta) + theta.noise_std**2 * np.eye(len(inputs))


def _gains(rng: np.random.Generator) -> FloatArray:
    return 10.0 ** rng.uniform(-10, -8, size=3)


def _filled_critic(rng: np.random.Generator, n_obs: int = 12) -> BoCritic:
    critic = BoCritic(3, CriticConfig())
    for t in range(1, n_obs + 1):
        action = DegradationAction(tuple(int(x) for x in rng.integers(0, 4, size=3)))
        critic.observe(_gains(rng), action, t, float(rng.normal(1.0, 0.3)))
    return critic


class TestKernelParams:
    """Tests for hyperparameter validation and reparameterization."""

    def test_vector_round_trip(self) -> None:
        """Test that from_vector inverts to_vector."""
        restored = KernelParams.from_vector(THETA.to_vector())

        assert restored.signal_var == pytest.approx(THETA.signal_var)
        assert restored.length_scales == pytest.approx(THETA.length_scales)
        assert restored.decay == pytest.approx(THETA.decay)
        assert restored.noise_std == pytest.approx(THETA.noise_std)

    def test_bounds_cover_every_coordinate(self) -> None:
        """Test that there is one box per reparameterized coordinate."""
        assert len(THETA.bounds()) == THETA.to_vector().size == 3 + 4

    def test_decay_bounds_span_open_unit_interval(self) -> None:
        """Test that the refit box lets rho reach both ends of (0, 1)."""
        lo, hi = THETA.bounds()[2 + THETA.n_dims]

        assert KernelParams.from_vector(np.full(7, lo)).decay == pytest.approx(1e-5)
        assert KernelParams.from_vector(np.full(7, hi)).decay == pytest.approx(1 - 1e-5)
        strong = KernelParams(1.0, (1.0, 1.0, 1.0), 2.0, 0.9, 0.1)
        assert lo <= strong.to_vector()[2 + THETA.n_dims] <= hi

    def test_invalid_decay(self) -> None:
        """Test that rho must lie in [0, 1)."""
        with pytest.raises(DomainError, match="decay"):
            KernelParams(1.0, (1.0,), 1.0, 1.0, 0.1)

    def test_invalid_length_scale(self) -> None:
        """Test that length scales must be positive."""
        with pytest.raises(DomainError):
            KernelParams(1.0, (0.0,), 1.0, 0.1, 0.1)


class TestKernel:
    """Tests for the composite kernel."""

    def test_identical_inputs(self) -> None:
        """Test k(z, z) = v_h + v_a + v_h v_a."""
        theta = KernelParams(1.0, (1.0,), 2.0, 0.1, 0.1)
        z = GpInputs([[0.0]], [[1]], [3])

        assert kernel(z, z, theta) == pytest.approx(5.0)
        assert prior_variance(theta) == pytest.approx(5.0)

    def test_zero_decay_ignores_lag(self) -> None:
        """Test that rho = 0 gives a temporal factor of 1 for any lag."""
        theta = KernelParams(1.0, (1.0,), 2.0, 0.0, 0.1)
        first = GpInputs([[0.0]], [[1]], [1])
        second = GpInputs([[0.0]], [[1]], [500])

        assert kernel(first, second, theta) == pytest.approx(5.0)

    def test_disjoint_actions(self) -> None:
        """Test that the categorical term vanishes when every level differs."""
        first = GpInputs([[0.0, 0.0, 0.0]], [[0, 1, 2]], [4])
        second = GpInputs([[0.0, 0.0, 0.0]], [[1, 2, 3]], [4])

        assert kernel(first, second, THETA) == pytest.approx(THETA.signal_var)

    def test_temporal_decay(self) -> None:
        """Test the (1 - rho)^(lag / 2) damping."""
        first = GpInputs([[0.0, 0.0, 0.0]], [[0, 0, 0]], [0])
        second = GpInputs([[0.0, 0.0, 0.0]], [[0, 0, 0]], [4])

        assert kernel(first, second, THETA) == pytest.approx(5.0 * 0.9**2)

    def test_dimension_mismatch(self) -> None:
        """Test that inputs must match the number of length scales."""
        z = GpInputs([[0.0]], [[1]], [3])

        with pytest.raises(DomainError, match="dimension"):
            kernel(z, z, THETA)

    def test_gram_is_positive_semidefinite(self) -> None:
        """Test Gram eigenvalues >= -1e-8 on random inputs and parameters."""
        rng = np.random.default_rng(0)
        for _ in range(50):
            inputs = _random_inputs(rng, 20)
            theta = _random_theta(rng)
            gram = kernel_matrix(inputs, inputs, theta)

            np.testing.assert_allclose(gram, gram.T, atol=1e-12)
            assert np.linalg.eigvalsh(gram).min() >= -1e-8


class TestPosterior:
    """Tests for GP conditioning and queries."""

    def test_empty_training_set_gives_prior(self) -> None:
        """Test that no data leaves the zero-mean prior."""
        gp = fit_posterior(GpInputs.empty(3), np.zeros(0), THETA)
        mean, var = posterior(gp, GpInputs([[0.1, 0.2, 0.3]], [[0, 1, 2]], [7]))

        assert mean[0] == 0.0
        assert var[0] == pytest.approx(prior_variance(THETA))

    def test_single_observation(self) -> None:
        """Test the 1x1 closed form at the training input."""
        z = GpInputs([[0.5, -0.2, 1.0]], [[1, 2, 3]], [2])
        v = prior_variance(THETA)
        noise = THETA.noise_std**2
        gp = fit_posterior(z, np.array([1.7]), THETA)
        mean, var = posterior(gp, z)

        assert mean[0] == pytest.approx(v * 1.7 / (v + noise), abs=1e-12)
        assert var[0] == pytest.approx(v - v**2 / (v + noise), abs=1e-10)

    def test_matches_dense_inverse(self) -> None:
        """Test agreement with an explicit matrix inverse on random caches."""
        rng = np.random.default_rng(3)
        for _ in range(20):
            inputs = _random_inputs(rng, 5)
            theta = _random_theta(rng)
            y = rng.normal(size=5)
            queries = _random_inputs(rng, 4)
            inverse = np.linalg.inv(_noisy_gram(inputs, theta))
            cross = kernel_matrix(queries, inputs, theta)
            naive_mean = cross @ inverse @ y
            naive_var = prior_variance(theta) - np.einsum("ij,jk,ik->i", cross, inverse, cross)

            mean, var = posterior(fit_posterior(inputs, y, theta), queries)

            np.testing.assert_allclose(mean, naive_mean, atol=1e-8)
            np.testing.assert_allclose(var, naive_var, atol=1e-8)

    def test_variance_at_training_inputs(self) -> None:
        """Test that the latent variance at a training input stays below the noise."""
        rng = np.random.default_rng(4)
        inputs = _random_inputs(rng, 15)
        theta = KernelParams(1.0, (1.0, 1.0, 1.0), 1.0, 0.05, 0.05)
        gp = fit_posterior(inputs, rng.normal(size=15), theta)
        _, var = posterior(gp, inputs)

        assert np.all(var <= theta.noise_std**2 + 1e-8)

    def test_offset_shifts_mean(self) -> None:
        """Test that a prior mean offset is added back to the posterior mean."""
        gp = fit_posterior(GpInputs.empty(3), np.zeros(0), THETA, y_offset=2.5)
        mean, _ = posterior(gp, GpInputs([[0.0, 0.0, 0.0]], [[0, 0, 0]], [1]))

        assert mean[0] == 2.5

    def test_target_length_mismatch(self) -> None:
        """Test that targets must match the inputs."""
        z = GpInputs([[0.0, 0.0, 0.0]], [[0, 0, 0]], [1])

        with pytest.raises(DomainError):
            fit_posterior(z, np.array([1.0, 2.0]), THETA)


class TestAcquisition:
    """Tests for UCB, EI and PI."""

    def test_ucb(self) -> None:
        """Test UCB = mu + zeta sigma."""
        assert float(acquisition(1.0, 2.0, AcquisitionKind.UCB, 1.0, 0.0)) == pytest.approx(3.0)
        assert float(acquisition(1.0, 2.0, AcquisitionKind.UCB, 0.0, 0.0)) == pytest.approx(1.0)

    def test_zero_std_fallbacks(self) -> None:
        """Test the degenerate Gaussian forms of EI and PI."""
        means = np.array([0.5, 1.5])
        stds = np.zeros(2)

        ei = acquisition(means, stds, AcquisitionKind.EI, 2.0, 1.0)
        pi = acquisition(means, stds, AcquisitionKind.PI, 2.0, 1.0)

        np.testing.assert_allclose(ei, [0.0, 0.5])
        np.testing.assert_array_equal(pi, [0.0, 1.0])

    def test_ei_closed_form(self) -> None:
        """Test EI at mu = best, where it equals sigma / sqrt(2 pi)."""
        value = float(acquisition(1.0, 0.3, AcquisitionKind.EI, 2.0, 1.0))

        assert value == pytest.approx(0.3 / math.sqrt(2 * math.pi))

    def test_pi_at_incumbent(self) -> None:
        """Test that PI is one half when mu equals the incumbent."""
        assert float(acquisition(1.0, 0.3, AcquisitionKind.PI, 2.0, 1.0)) == pytest.approx(0.5)

    def test_negative_std(self) -> None:
        """Test that sigma < 0 is rejected."""
        with pytest.raises(DomainError):
            acquisition(0.0, -1.0, AcquisitionKind.UCB, 2.0, 0.0)


class TestMarginalLikelihood:
    """Tests for the log marginal likelihood and its gradient."""

    def test_single_observation(self) -> None:
        """Test the 1x1 closed form."""
        z = GpInputs([[0.0, 0.0, 0.0]], [[0, 0, 0]], [1])
        total = prior_variance(THETA) + THETA.noise_std**2
        expected = -(1.3**2) / (2 * total) - 0.5 * math.log(total) - 0.5 * math.log(2 * math.pi)

        value = log_marginal_likelihood(z, np.array([1.3]), THETA)

        assert value == pytest.approx(expected, abs=1e-12)

    def test_zero_targets(self) -> None:
        """Test that zero targets leave only the determinant and constant terms."""
        rng = np.random.default_rng(6)
        inputs = _random_inputs(rng, 6)
        _, log_det = np.linalg.slogdet(_noisy_gram(inputs, THETA))

        value = log_marginal_likelihood(inputs, np.zeros(6), THETA)

        assert value == pytest.approx(-0.5 * log_det - 3.0 * math.log(2 * math.pi), abs=1e-9)

    def test_matches_dense_evaluation(self) -> None:
        """Test agreement with an explicit inverse and determinant."""
        rng = np.random.default_rng(7)
        for _ in range(20):
            inputs = _random_inputs(rng, 10)
            theta = _random_theta(rng)
            y = rng.normal(size=10)
            gram = _noisy_gram(inputs, theta)
            _, log_det = np.linalg.slogdet(gram)
            naive = -0.5 * y @ np.linalg.inv(gram) @ y - 0.5 * log_det - 5 * math.log(2 * math.pi)

            assert log_marginal_likelihood(inputs, y, theta) == pytest.approx(naive, abs=1e-8)

    def test_gradient_matches_finite_differences(self) -> None:
        """Test the analytic gradient against central differences."""
        rng = np.random.default_rng(8)
        step = 1e-5
        for _ in range(20):
            inputs = _random_inputs(rng, 10)
            theta = _random_theta(rng)
            y = rng.normal(size=10)
            v = theta.to_vector()
            numeric = np.zeros_like(v)
            for i in range(v.size):
                up, down = v.copy(), v.copy()
                up[i] += step
                down[i] -= step
                numeric[i] = (
                    log_marginal_likelihood(inputs, y, KernelParams.from_vector(up))
                    - log_marginal_likelihood(inputs, y, KernelParams.from_vector(down))
                ) / (2 * step)

            value, grad = log_marginal_likelihood_gradient(inputs, y, theta)

            assert value == pytest.approx(log_marginal_likelihood(inputs, y, theta))
            assert np.linalg.norm(grad - numeric) <= 1e-4 * max(np.linalg.norm(numeric), 1e-8)

    def test_empty_inputs(self) -> None:
        """Test that an empty cache has no likelihood."""
        with pytest.raises(DomainError):
            log_marginal_likelihood(GpInputs.empty(3), np.zeros(0), THETA)


class TestRefit:
    """Tests for hyperparameter re-optimization."""

    def test_recovers_generating_likelihood(self) -> None:
        """Test that refit from the generating parameters never loses likelihood."""
        rng = np.random.default_rng(9)
        truth = KernelParams(1.5, (0.8, 1.2, 1.0), 0.7, 0.05, 0.2)
        inputs = _random_inputs(rng, 30)
        gram = _noisy_gram(inputs, truth)
        y = np.linalg.cholesky(gram) @ rng.normal(size=30)

        fitted = refit(inputs, y, truth)

        baseline = log_marginal_likelihood(inputs, y, truth)
        assert log_marginal_likelihood(inputs, y, fitted) >= baseline - 1e-3

    def test_likelihood_never_decreases(self) -> None:
        """Test monotone likelihood across repeated refits on a frozen cache."""
        rng = np.random.default_rng(10)
        inputs = _random_inputs(rng, 20)
        y = rng.normal(size=20)
        theta = initial_params(inputs.features)
        values = [log_marginal_likelihood(inputs, y, theta)]
        for _ in range(3):
            theta = refit(inputs, y, theta)
            values.append(log_marginal_likelihood(inputs, y, theta))

        assert all(b >= a - 1e-9 for a, b in zip(values, values[1:], strict=False))

    def test_analytic_gradient_mode(self) -> None:
        """Test that the analytic-gradient path also respects the bound."""
        rng = np.random.default_rng(12)
        inputs = _random_inputs(rng, 15)
        y = rng.normal(size=15)
        theta = initial_params(inputs.features)

        fitted = refit(inputs, y, theta, gradient=GradientMode.ANALYTIC)

        baseline = log_marginal_likelihood(inputs, y, theta)
        assert log_marginal_likelihood(inputs, y, fitted) >= baseline - 1e-9

    def test_needs_two_observations(self) -> None:
        """Test that a single observation cannot be refit."""
        z = GpInputs([[0.0, 0.0, 0.0]], [[0, 0, 0]], [1])

        with pytest.raises(DomainError, match="two"):
            refit(z, np.array([1.0]), THETA)

    @patch("edge_offload_tool.bo_critic.minimize")
    def test_no_improvement_keeps_start(self, mock_minimize: MagicMock) -> None:
        """Test that a stalled optimizer returns the starting parameters."""
        worse = THETA.to_vector()
        worse[-1] = math.log(10.0)
        mock_minimize.return_value = MagicMock(x=worse, message="stalled", nit=0)
        rng = np.random.default_rng(13)
        inputs = _random_inputs(rng, 5)

        fitted = refit(inputs, rng.normal(size=5), THETA)

        assert fitted is THETA
        mock_minimize.assert_called_once()


class TestBoCache:
    """Tests for the ring-buffer cache."""

    def test_eviction(self) -> None:
        """Test that the oldest entry leaves when the cache is full."""
        cache = BoCache(2)
        for t in (1, 2, 3):
            cache.add(np.ones(3), DegradationAction((0, 0, 0)), t, float(t))

        _, _, slots, utilities = cache.arrays()

        assert len(cache) == 2
        np.testing.assert_array_equal(slots, [2.0, 3.0])
        np.testing.assert_array_equal(utilities, [2.0, 3.0])

    def test_time_ordering(self) -> None:
        """Test that an entry older than the newest one is rejected."""
        cache = BoCache(4)
        cache.add(np.ones(3), DegradationAction((0, 0, 0)), 5, 1.0)

        with pytest.raises(DomainError, match="time-ordered"):
            cache.add(np.ones(3), DegradationAction((0, 0, 0)), 4, 1.0)

    def test_best_y(self) -> None:
        """Test the incumbent over the current window."""
        cache = BoCache(2)
        assert cache.best_y == 0.0
        cache.add(np.ones(3), DegradationAction((0, 0, 0)), 1, 9.0)
        cache.add(np.ones(3), DegradationAction((0, 0, 0)), 2, 1.0)
        cache.add(np.ones(3), DegradationAction((0, 0, 0)), 3, 2.0)

        assert cache.best_y == 2.0

    def test_empty_arrays(self) -> None:
        """Test that an empty cache has no arrays."""
        with pytest.raises(DomainError):
            BoCache(3).arrays()


class TestBoCritic:
    """Tests for the stateful critic."""

    def test_empty_critic_predicts_prior(self) -> None:
        """Test the zero-mean prior before any observation."""
        critic = BoCritic(3, CriticConfig())
        mean, var = critic.predict([DegradationAction((0, 1, 2))], np.full(3, 1e-9), 1)

        assert mean[0] == 0.0
        assert var[0] == pytest.approx(3.0)

    def test_refit_counts(self) -> None:
        """Test that refits are counted and parameters stay valid."""
        critic = _filled_critic(np.random.default_rng(14))

        params = critic.refit()

        assert critic.refits == 1
        assert params is not None
        assert params.n_dims == 3

    def test_refit_needs_data(self) -> None:
        """Test that a refit on one observation is a no-op."""
        critic = BoCritic(3, CriticConfig())
        critic.observe(np.full(3, 1e-9), DegradationAction((0, 0, 0)), 1, 1.0)

        critic.refit()

        assert critic.refits == 0

    def test_duplicates_score_identically(self) -> None:
        """Test that repeated actions get identical acquisition values."""
        rng = np.random.default_rng(15)
        critic = _filled_critic(rng)
        action = DegradationAction((1, 2, 3))

        values = critic.score([action, DegradationAction((0, 0, 0)), action], _gains(rng), 13)

        assert values[0] == values[2]


class TestSelectAction:
    """Tests for candidate ranking."""

    def test_single_candidate(self) -> None:
        """Test that a lone candidate is chosen with k* = 1."""
        critic = BoCritic(3, CriticConfig())
        action = DegradationAction((1, 1, 1))

        chosen, k_star, values = select_action([action], np.full(3, 1e-9), 1, critic)

        assert chosen == action
        assert k_star == 1
        assert values.shape == (1,)

    def test_ties_go_to_lowest_index(self) -> None:
        """Test that duplicate candidates resolve to the first occurrence."""
        rng = np.random.default_rng(16)
        critic = _filled_critic(rng)
        action = DegradationAction((2, 2, 2))

        chosen, k_star, _ = select_action([action, action], _gains(rng), 13, critic)

        assert chosen == action
        assert k_star == 1

    def test_matches_brute_force(self) -> None:
        """Test the choice against a recomputed acquisition over 8 candidates."""
        rng = np.random.default_rng(17)
        for _ in range(10):
            critic = _filled_critic(rng)
            gains = _gains(rng)
            candidates = [
                DegradationAction(tuple(int(x) for x in rng.integers(0, 4, size=3)))
                for _ in range(8)
            ]
            mean, var = critic.predict(candidates, gains, 13)
            expected = acquisition(
                mean, np.sqrt(var), AcquisitionKind.UCB, 2.0, critic.cache.best_y
            )

            chosen, k_star, values = select_action(candidates, gains, 13, critic)

            np.testing.assert_allclose(values, expected)
            assert k_star == int(np.argmax(expected)) + 1
            assert chosen == candidates[k_star - 1]

    def test_empty_candidates(self) -> None:
        """Test that an empty candidate set is rejected."""
        with pytest.raises(DomainError, match="empty"):
            select_action([], np.full(3, 1e-9), 1, BoCritic(3, CriticConfig()))
