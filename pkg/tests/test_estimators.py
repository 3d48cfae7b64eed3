"""Tests for the policy-gradient estimators and the KL term."""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np
import pytest

from pathguide_lab.adapters.critic import CriticModel
from pathguide_lab.adapters.estimators import (
    RolloutBatch,
    add_kl_gradient,
    advantage_variance,
    build_rollout_batch,
    estimate,
    estimate_a2c,
    estimate_rtg,
    estimate_std,
    estimator_weights,
    grpo_weights,
    mean_kl,
    position_baselines,
    reward_to_go,
)
from pathguide_lab.adapters.oracle import enumerate_paths, exact_gradient
from pathguide_lab.adapters.policy import LinearSoftmaxPolicy
from pathguide_lab.adapters.rewards import (
    CenteringMode,
    RewardWeights,
    apply_centering,
    decompose,
    fit_stats,
    path_reward,
)
from pathguide_lab.api.schemas import EstimatorKind
from pathguide_lab.core.models import PathSample
from pathguide_lab.errors import ParameterError

HISTORY = (0,)
TARGET = 1


def _path(policy: LinearSoftmaxPolicy, items: Sequence[int], *, stopped: bool = True) -> PathSample:
    fmap = policy.feature_map
    actions = [fmap.action_of(item) for item in items]
    if stopped:
        actions.append(fmap.stop_action)
    return PathSample(
        items=tuple(items),
        actions=tuple(actions),
        log_probs=(-1.0,) * len(actions),
        truncated=not stopped,
        history=HISTORY,
        target=TARGET,
    )


def _batch(
    policy: LinearSoftmaxPolicy,
    grid: Sequence[Sequence[tuple[Sequence[int], Sequence[float]]]],
    max_length: int = 3,
) -> RolloutBatch:
    samples = [[_path(policy, items, stopped=len(items) < max_length) for items, _ in row] for row in grid]
    rewards = [[np.array(r, dtype=np.float64) for _, r in row] for row in grid]
    return build_rollout_batch(policy, samples, rewards, max_length)


def _sampled_batch(policy: LinearSoftmaxPolicy, n: int, m: int, seed: int) -> RolloutBatch:
    rng = np.random.default_rng(seed)
    samples = [[policy.sample_path(HISTORY, TARGET, 3, rng, i, j) for j in range(m)] for i in range(n)]
    rewards = [[rng.normal(size=s.length) for s in row] for row in samples]
    return build_rollout_batch(policy, samples, rewards, 3)


def test_reward_to_go() -> None:
    np.testing.assert_array_equal(reward_to_go(np.array([1.0, 2.0, 3.0])), [6.0, 5.0, 3.0])
    assert reward_to_go(np.array([])).shape == (0,)


class TestRolloutBatch:
    def test_rows_follow_decisions(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _batch(toy_policy, [[((0, 1), (1.0, 2.0)), ((), ())]])
        assert batch.n_decisions == 4
        assert batch.position.tolist() == [1, 2, 3, 1]
        assert batch.is_stop.tolist() == [False, False, True, True]
        assert batch.reward_to_go.tolist() == [3.0, 2.0, 0.0, 0.0]
        assert batch.path_return.tolist() == [3.0, 3.0, 3.0, 0.0]
        np.testing.assert_array_equal(batch.lengths, [[2, 0]])

    def test_truncated_path_has_no_stop_row(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _batch(toy_policy, [[((0, 0, 1), (1.0, 1.0, 1.0))]])
        assert not batch.is_stop.any()

    def test_residuals_match_policy(self, toy_policy: LinearSoftmaxPolicy) -> None:
        sample = _path(toy_policy, (1,))
        batch = build_rollout_batch(toy_policy, [[sample]], [[np.array([0.5])]], 3)
        expected = toy_policy.score_residuals(toy_policy.decision_features(sample), sample.actions)
        np.testing.assert_allclose(batch.residuals, expected, atol=1e-12)

    def test_critic_inputs_append_position_scale(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _batch(toy_policy, [[((0,), (1.0,))]])
        inputs = batch.critic_inputs()
        assert inputs.shape == (2, toy_policy.feature_map.dim + 1)
        np.testing.assert_allclose(inputs[:, -1], [0.25, 0.5])

    def test_misaligned_rewards_raise(self, toy_policy: LinearSoftmaxPolicy) -> None:
        with pytest.raises(ParameterError):
            _batch(toy_policy, [[((0, 1), (1.0,))]])

    def test_ragged_grid_raises(self, toy_policy: LinearSoftmaxPolicy) -> None:
        with pytest.raises(ParameterError):
            _batch(toy_policy, [[((0,), (1.0,))], [((0,), (1.0,)), ((1,), (1.0,))]])


class TestGroupBaselines:
    def test_grpo_advantages(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _batch(toy_policy, [[((0,), (1.0,)), ((1,), (2.0,)), ((0,), (3.0,))]])
        np.testing.assert_allclose(grpo_weights(batch), [-1.0, -1.0, 0.0, 0.0, 1.0, 1.0], atol=1e-12)

    def test_grpo_leave_one_out(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _batch(toy_policy, [[((0,), (1.0,)), ((1,), (2.0,)), ((0,), (3.0,))]])
        np.testing.assert_allclose(grpo_weights(batch, leave_one_out=True)[::2], [-1.5, 0.0, 1.5], atol=1e-12)

    def test_position_baseline_example(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _batch(toy_policy, [[((0,), (0.5,)), ((1,), (1.5,))]])
        table = position_baselines(batch)
        assert table.baseline is not None and table.advantage is not None
        items = ~batch.is_stop
        np.testing.assert_allclose(table.baseline[items], [1.0, 1.0])
        np.testing.assert_allclose(table.advantage[items], [-0.5, 0.5])
        np.testing.assert_allclose(table.advantage[batch.is_stop], [0.0, 0.0])

    def test_stop_row_is_penalized_by_continuing_baseline(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _batch(toy_policy, [[((), ()), ((1,), (2.0,)), ((0,), (4.0,))]])
        table = position_baselines(batch)
        assert table.advantage is not None
        assert table.advantage[0] == pytest.approx(-3.0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_item_advantages_sum_to_zero_per_position(self, toy_policy: LinearSoftmaxPolicy, seed: int) -> None:
        batch = _sampled_batch(toy_policy, n=3, m=6, seed=seed)
        table = position_baselines(batch)
        assert table.advantage is not None
        items = ~batch.is_stop
        for i in range(batch.n):
            for t in range(1, batch.max_length + 1):
                rows = items & (batch.input_index == i) & (batch.position == t)
                assert abs(float(table.advantage[rows].sum())) < 1e-12

    def test_lone_reacher_keeps_reward_to_go_with_leave_one_out(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _batch(toy_policy, [[((0, 1), (1.0, 2.0)), ((1,), (5.0,))]])
        table = position_baselines(batch, leave_one_out=True)
        assert table.advantage is not None
        lone = (batch.position == 2) & ~batch.is_stop
        np.testing.assert_allclose(table.advantage[lone], batch.reward_to_go[lone])

    @pytest.mark.parametrize("kind", [EstimatorKind.GRPO, EstimatorKind.PRORL])
    def test_group_estimators_need_two_samples(self, toy_policy: LinearSoftmaxPolicy, kind: EstimatorKind) -> None:
        batch = _batch(toy_policy, [[((0,), (1.0,))], [((1,), (2.0,))]])
        with pytest.raises(ParameterError):
            estimator_weights(batch, kind)


class TestEstimators:
    def test_std_and_rtg_weights(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _batch(toy_policy, [[((0, 1), (1.0, 2.0))]])
        np.testing.assert_array_equal(estimator_weights(batch, EstimatorKind.STD), [3.0, 3.0, 3.0])
        np.testing.assert_array_equal(estimator_weights(batch, EstimatorKind.RTG), [3.0, 2.0, 0.0])

    def test_perfect_critic_gives_zero_weights(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _sampled_batch(toy_policy, n=2, m=3, seed=4)
        weights = estimator_weights(batch, EstimatorKind.A2C, values=batch.reward_to_go)
        np.testing.assert_array_equal(weights, 0.0)

    def test_zero_critic_equals_reward_to_go(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _sampled_batch(toy_policy, n=2, m=3, seed=4)
        critic = CriticModel.zeros(toy_policy.feature_map.dim + 1, hidden_width=4)
        result, update = estimate_a2c(batch, critic)
        np.testing.assert_allclose(result.gradient, estimate_rtg(batch).gradient, atol=1e-12)
        assert update.mse_after <= update.mse_before

    def test_a2c_without_critic_raises(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _sampled_batch(toy_policy, n=1, m=2, seed=0)
        with pytest.raises(ParameterError):
            estimate(batch, EstimatorKind.A2C)

    def test_zero_rewards_give_zero_gradient(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _batch(toy_policy, [[((0,), (0.0,)), ((1, 0), (0.0, 0.0))]])
        for kind in (EstimatorKind.STD, EstimatorKind.RTG, EstimatorKind.GRPO, EstimatorKind.PRORL):
            est = estimate(batch, kind)
            assert est.is_finite
            np.testing.assert_array_equal(est.gradient, 0.0)
            assert est.sample_count == 2

    def test_gradient_shape(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _sampled_batch(toy_policy, n=2, m=2, seed=1)
        assert estimate_std(batch).gradient.shape == toy_policy.weights.shape


class TestVariance:
    def test_grpo_weight_variance(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _batch(toy_policy, [[((0,), (1.0,)), ((1,), (2.0,)), ((0,), (3.0,))]])
        assert advantage_variance(batch, EstimatorKind.GRPO) == pytest.approx(2 / 3)

    def test_constant_weights_have_zero_variance(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _batch(toy_policy, [[((0,), (2.0,)), ((1,), (2.0,))]])
        assert advantage_variance(batch, EstimatorKind.GRPO) == 0.0


class TestKlPenalty:
    def test_zero_coefficient_leaves_estimate(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _sampled_batch(toy_policy, n=2, m=2, seed=3)
        prior = toy_policy.with_weights(np.zeros_like(toy_policy.weights))
        est = estimate_std(batch)
        assert add_kl_gradient(est, batch, prior, 0.0) is est

    def test_policy_equal_to_prior_has_no_penalty(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _sampled_batch(toy_policy, n=2, m=2, seed=3)
        est = estimate_std(batch)
        assert mean_kl(batch, toy_policy) == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(add_kl_gradient(est, batch, toy_policy, 5.0).gradient, est.gradient, atol=1e-12)

    def test_penalty_pulls_toward_prior(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _sampled_batch(toy_policy, n=2, m=2, seed=3)
        prior = toy_policy.with_weights(np.zeros_like(toy_policy.weights))
        zero = estimate(batch, EstimatorKind.STD)
        penalized = add_kl_gradient(zero, batch, prior, 1.0)
        step = penalized.gradient - zero.gradient
        # A small step along the penalty direction lowers the batch KL.
        moved = build_rollout_batch(
            toy_policy.with_weights(toy_policy.weights + 1e-3 * step),
            [list(row) for row in batch.samples],
            [list(row) for row in batch.step_rewards],
            batch.max_length,
        )
        assert mean_kl(moved, prior) < mean_kl(batch, prior)

    def test_negative_coefficient_raises(self, toy_policy: LinearSoftmaxPolicy) -> None:
        batch = _sampled_batch(toy_policy, n=1, m=2, seed=0)
        with pytest.raises(ParameterError):
            add_kl_gradient(estimate_std(batch), batch, toy_policy, -1.0)


def _per_path_contributions(batch: RolloutBatch, weights: np.ndarray) -> np.ndarray:
    """Each path's summed w * residual (outer) phi, flattened; their mean is the n = 1 estimate."""
    rows = np.einsum("ra,rd->rad", batch.residuals * weights[:, None], batch.features)
    key = batch.input_index * batch.m + batch.sample_index
    starts = np.flatnonzero(np.r_[True, np.diff(key) != 0])
    return np.add.reduceat(rows.reshape(batch.n_decisions, -1), starts, axis=0)


@pytest.mark.slow
@pytest.mark.parametrize("kind", [EstimatorKind.STD, EstimatorKind.RTG])
def test_estimators_match_exact_gradient(toy_policy: LinearSoftmaxPolicy, kind: EstimatorKind) -> None:
    sim = toy_policy.feature_map.simulator
    weights = RewardWeights()
    exact = exact_gradient(
        enumerate_paths(toy_policy, HISTORY, TARGET, max_length=2),
        lambda s: path_reward(s.history, s.items, s.target, sim, weights),
    )
    rng = np.random.default_rng(2024)
    m = 200_000
    samples = [[toy_policy.sample_path(HISTORY, TARGET, 2, rng, 0, j) for j in range(m)]]
    by_path = {
        items: decompose(HISTORY, items, TARGET, sim, weights).weighted()
        for items in {s.items for s in samples[0]}
    }
    batch = build_rollout_batch(toy_policy, samples, [[by_path[s.items] for s in samples[0]]], 2)

    contributions = _per_path_contributions(batch, estimator_weights(batch, kind))
    mean = contributions.mean(axis=0)
    standard_error = contributions.std(axis=0, ddof=1) / np.sqrt(m)
    np.testing.assert_allclose(mean, estimate(batch, kind).gradient.ravel(), rtol=1e-9, atol=1e-10)
    assert np.all(np.abs(mean - exact.ravel()) <= 4.0 * standard_error + 1e-12)


@pytest.mark.slow
def test_position_baselines_match_centered_exact_gradient(toy_policy: LinearSoftmaxPolicy) -> None:
    sim = toy_policy.feature_map.simulator
    weights = RewardWeights(beta=0.0)
    rng = np.random.default_rng(7)
    pilot = [toy_policy.sample_path(HISTORY, TARGET, 2, rng, 0, j) for j in range(2000)]
    mode = CenteringMode.normalize(fit_stats(decompose(HISTORY, s.items, TARGET, sim, weights) for s in pilot), weights)
    centered: dict[tuple[int, ...], np.ndarray] = {}

    def step_rewards(items: tuple[int, ...]) -> np.ndarray:
        if items not in centered:
            centered[items] = apply_centering(decompose(HISTORY, items, TARGET, sim, weights), mode)
        return centered[items]

    exact = exact_gradient(
        enumerate_paths(toy_policy, HISTORY, TARGET, max_length=2),
        lambda s: float(np.sum(step_rewards(s.items))),
    )
    n_batches, m = 200, 256
    estimates = []
    for _ in range(n_batches):
        samples = [[toy_policy.sample_path(HISTORY, TARGET, 2, rng, 0, j) for j in range(m)]]
        batch = build_rollout_batch(toy_policy, samples, [[step_rewards(s.items) for s in samples[0]]], 2)
        estimates.append(estimate(batch, EstimatorKind.PRORL, leave_one_out=True).gradient)
    stacked = np.array(estimates)
    standard_error = stacked.std(axis=0, ddof=1) / np.sqrt(n_batches)
    assert np.all(np.abs(stacked.mean(axis=0) - exact) <= 4.0 * standard_error + 1e-12)
