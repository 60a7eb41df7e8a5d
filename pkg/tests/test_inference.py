"""
Maximum-entropy engine tests: relative entropy, dual solver, constraint classification and Bayes.
"""

import math
import time

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.stats import norm

from errors import (
    AbsoluteContinuityError,
    InvalidDistributionError,
    SupportMismatchError,
    ZeroEvidenceError,
)
from inference import (
    DUAL_ROUNDOFF_TOL,
    Classification,
    Constraint,
    ConstraintSet,
    Distribution,
    JointDistribution,
    bayes_update,
    bayes_update_via_maxent,
    canonical_ensemble,
    classify_constraints,
    compose_likelihood,
    expectation,
    least_squares_log_likelihood,
    marginalize,
    maximize_entropy,
    relative_entropy,
    shannon_entropy,
    variance,
)

positive_weights = st.lists(st.floats(min_value=0.05, max_value=1.0), min_size=2, max_size=8)


def gaussian_grid_problem(dx: float = 0.02):
    n = int(round(20.0 / dx)) + 1
    prior = Distribution.uniform_grid(-10.0, dx, n)
    constraints = ConstraintSet.of(
        Constraint(lambda x: x, 0.0, name="mean"),
        Constraint(lambda x: x**2, 1.0, name="second moment"),
    )
    return prior, constraints


# ----- distributions and entropy -----


class TestDistribution:
    def test_rejects_negative_weights(self):
        with pytest.raises(InvalidDistributionError):
            Distribution(np.array([0.5, -0.1, 0.6]), np.arange(3))

    def test_rejects_unnormalized_weights(self):
        with pytest.raises(InvalidDistributionError):
            Distribution(np.array([0.5, 0.6]), np.arange(2))

    def test_grid_factory_normalizes_density(self):
        dist = Distribution.grid(np.ones(10), 0.0, 0.5)
        assert dist.probabilities.sum() == pytest.approx(1.0, abs=1e-14)
        assert dist.weights[0] == pytest.approx(0.2)

    def test_moments_of_two_points(self):
        dist = Distribution.uniform(2, [-1.0, 1.0])
        assert expectation(dist, lambda x: x) == pytest.approx(0.0, abs=1e-15)
        assert variance(dist) == pytest.approx(1.0, abs=1e-15)
        assert expectation(dist, 4.0) == pytest.approx(4.0, abs=1e-15)
        assert variance(dist, 4.0) == pytest.approx(0.0, abs=1e-15)

    def test_weights_are_read_only(self):
        dist = Distribution.uniform(3)
        with pytest.raises(ValueError):
            dist.weights[0] = 1.0


class TestRelativeEntropy:
    def test_zero_for_identical_distributions(self):
        q = Distribution.discrete([0.7, 0.1, 0.1, 0.1])
        assert relative_entropy(q, q) == 0.0

    def test_matches_brute_force_sum(self):
        p = Distribution.uniform(4)
        q = Distribution.discrete([0.7, 0.1, 0.1, 0.1])
        expected = -sum(0.25 * math.log(0.25 / qi) for qi in (0.7, 0.1, 0.1, 0.1))
        value = relative_entropy(p, q)
        assert value == pytest.approx(expected, abs=1e-14)
        assert value < 0

    def test_requires_absolute_continuity(self):
        p = Distribution.discrete([0.5, 0.5, 0.0])
        q = Distribution.discrete([1.0, 0.0, 0.0])
        with pytest.raises(AbsoluteContinuityError):
            relative_entropy(p, q)

    def test_zero_mass_points_contribute_nothing(self):
        p = Distribution.discrete([1.0, 0.0])
        q = Distribution.discrete([0.5, 0.5])
        assert relative_entropy(p, q) == pytest.approx(-math.log(2.0), abs=1e-15)

    def test_support_mismatch(self):
        with pytest.raises(SupportMismatchError):
            relative_entropy(Distribution.uniform(3), Distribution.uniform(4))

    @given(p=positive_weights, q=positive_weights)
    @settings(max_examples=200, deadline=None)
    def test_never_positive(self, p, q):
        n = min(len(p), len(q))
        value = relative_entropy(Distribution.discrete(p[:n]), Distribution.discrete(q[:n]))
        assert value <= 1e-12

    def test_shannon_entropy_of_uniform(self):
        assert shannon_entropy(Distribution.uniform(4)) == pytest.approx(math.log(4.0), abs=1e-14)


# ----- maximum entropy -----


class TestMaximizeEntropy:
    def test_normalization_only_returns_prior(self):
        prior = Distribution.discrete([0.4, 0.3, 0.2, 0.1])
        solution = maximize_entropy(prior, [])
        assert solution.classification is Classification.WELL
        np.testing.assert_allclose(solution.posterior.probabilities, prior.probabilities, atol=1e-14)
        assert solution.achieved_entropy == pytest.approx(0.0, abs=1e-14)

    def test_uniform_prior_with_no_constraints_stays_uniform(self):
        solution = maximize_entropy(Distribution.uniform(6), ConstraintSet())
        np.testing.assert_allclose(solution.posterior.probabilities, np.full(6, 1 / 6), atol=1e-10)

    def test_two_state_mean(self):
        prior = Distribution.uniform(2, [0.0, 1.0])
        solution = maximize_entropy(prior, [Constraint(lambda e: e, 0.3)])
        np.testing.assert_allclose(solution.posterior.probabilities, [0.7, 0.3], atol=1e-10)
        assert solution.classification is Classification.FULLY
        assert solution.multipliers[0] == pytest.approx(math.log(7.0 / 3.0), abs=1e-9)

    def test_grid_gaussian(self):
        prior, constraints = gaussian_grid_problem()
        solution = maximize_entropy(prior, constraints)
        assert solution.classification is Classification.WELL
        x = prior.points
        np.testing.assert_allclose(solution.posterior.weights, norm.pdf(x), atol=1e-6)

    def test_exponential_family_form(self):
        prior, constraints = gaussian_grid_problem(dx=0.05)
        solution = maximize_entropy(prior, constraints)
        f = constraints.matrix(prior.points)
        log_ratio = np.log(solution.posterior.probabilities / prior.probabilities)
        residual = log_ratio + solution.log_partition + solution.multipliers @ f
        assert np.max(np.abs(residual)) < 1e-9

    def test_constraints_are_met(self):
        prior, constraints = gaussian_grid_problem(dx=0.05)
        posterior = maximize_entropy(prior, constraints).posterior
        assert expectation(posterior, lambda x: x) == pytest.approx(0.0, abs=2e-10)
        assert expectation(posterior, lambda x: x**2) == pytest.approx(1.0, abs=2e-10)

    def test_dual_history_is_non_increasing(self):
        prior, constraints = gaussian_grid_problem(dx=0.05)
        history = np.array(maximize_entropy(prior, constraints).dual_history)
        assert history.size >= 2
        assert np.all(np.diff(history) <= DUAL_ROUNDOFF_TOL * (1.0 + np.abs(history[:-1])))

    @given(
        weights=positive_weights,
        fraction=st.floats(min_value=0.1, max_value=0.9),
    )
    @settings(max_examples=60, deadline=None)
    def test_random_mean_constraint_is_satisfied(self, weights, fraction):
        prior = Distribution.discrete(weights)
        target = fraction * (prior.size - 1)
        solution = maximize_entropy(prior, [Constraint(lambda x: x, target)])
        assert solution.feasible
        assert expectation(solution.posterior, lambda x: x) == pytest.approx(target, abs=1e-9)


class TestClassification:
    def test_contradictory_means_are_overconstrained(self):
        prior = Distribution.uniform(5, np.arange(-2.0, 3.0))
        solution = maximize_entropy(
            prior,
            [Constraint(lambda x: x, 0.0, name="a"), Constraint(lambda x: x, 1.0, name="b")],
        )
        assert solution.classification is Classification.OVER
        assert solution.posterior is None
        assert solution.diagnostic

    def test_target_outside_range_is_overconstrained(self):
        prior = Distribution.uniform(5, np.arange(-2.0, 3.0))
        assert classify_constraints(prior, [Constraint(lambda x: x, 10.0)]) is Classification.OVER

    def test_zero_spread_is_fully_constrained(self):
        prior = Distribution.uniform_grid(-2.0, 0.1, 41)
        solution = maximize_entropy(
            prior,
            [Constraint(lambda x: x, 0.5), Constraint(lambda x: (x - 0.5) ** 2, 0.0)],
        )
        assert solution.classification is Classification.FULLY
        probabilities = solution.posterior.probabilities
        assert probabilities[25] == pytest.approx(1.0, abs=1e-12)
        assert probabilities.sum() - probabilities[25] == pytest.approx(0.0, abs=1e-12)

    def test_variance_with_free_centre_is_underconstrained(self):
        prior = Distribution.uniform_grid(-10.0, 0.05, 401)
        solution = maximize_entropy(prior, [Constraint(lambda x: x**2, 1.0, free_centre=True)])
        assert solution.classification is Classification.UNDER
        assert solution.centre == pytest.approx(0.0, abs=1e-9)
        assert variance(solution.posterior) == pytest.approx(1.0, abs=1e-8)

    def test_free_centre_follows_an_asymmetric_prior(self):
        x = np.arange(-5.0, 5.0 + 1e-9, 0.1)
        prior = Distribution.grid(np.exp(-((x - 1.5) ** 2) / 8.0), -5.0, 0.1)
        solution = maximize_entropy(prior, [Constraint(lambda y: y**2, 0.5, free_centre=True)])
        assert solution.classification is Classification.WELL
        assert solution.centre == pytest.approx(1.5, abs=0.1)


# ----- Bayes -----


def coin_joint() -> JointDistribution:
    prior = Distribution.uniform(2, [0.3, 0.7])
    likelihood = np.array([[0.7, 0.3], [0.3, 0.7]])  # columns: tails, heads
    return JointDistribution.from_model(prior, likelihood, data_points=[0.0, 1.0])


class TestBayes:
    def test_uninformative_likelihood_keeps_the_prior(self):
        prior = Distribution(np.array([0.2, 0.5, 0.3]), [0.0, 1.0, 2.0])
        likelihood = np.tile([0.4, 0.6], (3, 1))
        joint = JointDistribution.from_model(prior, likelihood)
        posterior = bayes_update(joint, observed=1.0)
        np.testing.assert_allclose(posterior.probabilities, prior.probabilities, atol=1e-14)

    def test_coin_bias_after_one_head(self):
        posterior = bayes_update(coin_joint(), observed=1.0)
        np.testing.assert_allclose(posterior.probabilities, [0.3, 0.7], atol=1e-12)

    def test_maxent_route_agrees_on_coin(self):
        posterior = bayes_update_via_maxent(coin_joint(), observed=1.0)
        np.testing.assert_allclose(posterior.probabilities, [0.3, 0.7], atol=1e-12)

    def test_zero_evidence(self):
        joint = JointDistribution(np.array([[0.5, 0.0], [0.5, 0.0]]), [0.0, 1.0], [0.0, 1.0])
        with pytest.raises(ZeroEvidenceError):
            bayes_update(joint, observed=1.0)
        with pytest.raises(ZeroEvidenceError):
            bayes_update_via_maxent(joint, observed=1.0)

    def test_marginals(self):
        joint = coin_joint()
        np.testing.assert_allclose(marginalize(joint, "theta").probabilities, [0.5, 0.5])
        np.testing.assert_allclose(marginalize(joint, "data").probabilities, [0.5, 0.5])
        np.testing.assert_allclose(joint.marginal("data").probabilities, marginalize(joint, "data").probabilities)
        np.testing.assert_allclose(joint.conditional(1.0).probabilities, [0.3, 0.7], atol=1e-12)

    @given(
        data=st.data(),
        n_theta=st.integers(min_value=1, max_value=8),
        n_data=st.integers(min_value=1, max_value=8),
    )
    @settings(max_examples=100, deadline=None)
    def test_maxent_route_matches_direct_bayes(self, data, n_theta, n_data):
        cells = data.draw(
            st.lists(
                st.floats(min_value=0.0, max_value=1.0),
                min_size=n_theta * n_data,
                max_size=n_theta * n_data,
            )
        )
        weights = np.array(cells).reshape(n_theta, n_data)
        assume(weights.sum() > 1e-6)
        observed = data.draw(st.integers(min_value=0, max_value=n_data - 1))
        assume(weights[:, observed].sum() > 1e-6)
        joint = JointDistribution(weights / weights.sum(), np.arange(n_theta), np.arange(n_data))
        direct = bayes_update(joint, float(observed))
        via_maxent = bayes_update_via_maxent(joint, float(observed))
        np.testing.assert_allclose(via_maxent.probabilities, direct.probabilities, atol=1e-12)

    def test_maxent_route_matches_direct_bayes_up_to_64_points(self, rng):
        shapes = [(64, 64), (1, 64), (64, 1)] + [tuple(rng.integers(1, 65, size=2)) for _ in range(47)]
        start = time.perf_counter()
        for n_theta, n_data in shapes:
            weights = rng.random((n_theta, n_data))
            weights[rng.random((n_theta, n_data)) < 0.2] = 0.0
            weights[0, 0] = 1.0
            joint = JointDistribution(weights / weights.sum(), np.arange(n_theta), np.arange(n_data))
            observed = float(rng.choice(np.flatnonzero(weights.sum(axis=0) > 0)))
            direct = bayes_update(joint, observed)
            via_maxent = bayes_update_via_maxent(joint, observed)
            np.testing.assert_allclose(via_maxent.probabilities, direct.probabilities, atol=1e-12)
        assert time.perf_counter() - start < 5.0


class TestLikelihoods:
    def test_compose_discrete_kernels(self):
        outcome = np.array([[1.0, 0.0], [0.25, 0.75]])
        data = np.array([[0.9, 0.1], [0.2, 0.8]])
        composed = compose_likelihood(outcome, data)
        np.testing.assert_allclose(composed, [[0.9, 0.1], [0.375, 0.625]])
        np.testing.assert_allclose(composed.sum(axis=1), 1.0)

    def test_delta_data_kernel_passes_the_outcome_model_through(self):
        outcome = np.array([[0.2, 0.8], [0.6, 0.4]])
        np.testing.assert_allclose(compose_likelihood(outcome, np.eye(2)), outcome)

    def test_compose_rejects_mismatched_supports(self):
        with pytest.raises(SupportMismatchError):
            compose_likelihood(np.eye(2), np.eye(3))

    def test_least_squares_matches_gaussian_log_density(self):
        data = np.array([0.1, -0.4, 2.0])
        model = np.array([0.0, 0.0, 1.5])
        expected = norm.logpdf(data, loc=model, scale=0.7).sum()
        assert least_squares_log_likelihood(data, model, 0.7) == pytest.approx(expected, rel=1e-12)


class TestCanonicalEnsemble:
    def test_two_level_system(self):
        ensemble = canonical_ensemble([0.0, 1.0], 0.3)
        beta = math.log(7.0 / 3.0)
        assert ensemble.beta == pytest.approx(beta, abs=1e-9)
        np.testing.assert_allclose(ensemble.distribution.probabilities, [0.7, 0.3], atol=1e-10)
        assert ensemble.log_partition == pytest.approx(math.log(10.0 / 7.0), abs=1e-9)
        assert ensemble.free_energy == pytest.approx(-math.log(10.0 / 7.0) / beta, abs=1e-9)

    def test_infinite_temperature(self):
        ensemble = canonical_ensemble([0.0, 1.0, 2.0], 1.0)
        assert ensemble.beta == pytest.approx(0.0, abs=1e-12)
