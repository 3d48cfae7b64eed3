"""Policy-gradient estimators over a batch of n inputs x m sampled paths.

Every realized decision of every path becomes one row of the batch: its
feature vector, its score residual ``(onehot(a) - pi) / T``, its input and
sample indices, its 1-based position and whether it was the STOP action.
Each estimator reduces to a scalar weight per row; the gradient is then

    g = (1 / nm) * sum_rows weight * residual (outer) phi.

The STOP decision of a path sits at position L + 1 and has reward-to-go 0.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from pathguide_lab.adapters.policy import LinearSoftmaxPolicy, PriorPolicy
from pathguide_lab.api.schemas import EstimatorKind
from pathguide_lab.core.interfaces import ValueEstimator
from pathguide_lab.core.models import BoolArray, FloatArray, IntArray, PathSample, frozen_array
from pathguide_lab.errors import ParameterError


def reward_to_go(step_rewards: FloatArray) -> FloatArray:
    """Suffix sums G_t = sum_{l >= t} r_l."""
    return np.cumsum(step_rewards[::-1])[::-1].astype(np.float64)


def _group_means(values: FloatArray, groups: IntArray, n_groups: int) -> tuple[FloatArray, FloatArray]:
    """Per-group mean and sum, computed around each group's first value.

    Shifting by the first member makes a group of identical values have a
    mean exactly equal to that value.
    """
    counts = np.bincount(groups, minlength=n_groups).astype(np.float64)
    first = np.zeros(n_groups, dtype=np.float64)
    present, first_rows = np.unique(groups, return_index=True)
    first[present] = values[first_rows]
    shifted_sum = np.bincount(groups, weights=values - first[groups], minlength=n_groups)
    safe = np.where(counts > 0, counts, 1.0)
    means = np.where(counts > 0, first + shifted_sum / safe, 0.0)
    return means, counts


@dataclass(frozen=True, eq=False)
class RolloutBatch:
    """Flattened decisions of an n x m rollout grid with centered step rewards."""

    n: int
    m: int
    max_length: int
    temperature: float
    feature_hash: str
    samples: tuple[tuple[PathSample, ...], ...]
    step_rewards: tuple[tuple[FloatArray, ...], ...]
    features: FloatArray
    log_probs: FloatArray
    residuals: FloatArray
    input_index: IntArray
    sample_index: IntArray
    position: IntArray
    is_stop: BoolArray
    reward_to_go: FloatArray
    path_return: FloatArray

    @property
    def n_decisions(self) -> int:
        return int(self.features.shape[0])

    @property
    def path_returns(self) -> FloatArray:
        """R^(i,j) = sum_t r~_t as an (n, m) array."""
        return np.array([[float(np.sum(r)) for r in row] for row in self.step_rewards], dtype=np.float64)

    @property
    def lengths(self) -> IntArray:
        return np.array([[s.length for s in row] for row in self.samples], dtype=np.int64)

    def critic_inputs(self) -> FloatArray:
        """[phi_t, t / (L_max + 1)] per decision."""
        scale = self.position.astype(np.float64) / (self.max_length + 1)
        return np.column_stack((self.features, scale))

    def critic_targets(self) -> FloatArray:
        return self.reward_to_go


def build_rollout_batch(
    policy: LinearSoftmaxPolicy,
    samples: Sequence[Sequence[PathSample]],
    step_rewards: Sequence[Sequence[FloatArray]],
    max_length: int,
    features: Sequence[Sequence[FloatArray]] | None = None,
) -> RolloutBatch:
    """Flatten an n x m grid of paths and their centered step rewards.

    Args:
        policy: Policy the paths were sampled from.
        samples: ``samples[i][j]`` is path j of input i.
        step_rewards: Centered per-item rewards, aligned with ``samples``.
        max_length: L_max used when sampling.
        features: Decision features from sampling; replayed when omitted.

    Raises:
        ParameterError: If the grid is ragged or rewards do not match path lengths.
    """
    n = len(samples)
    if n == 0:
        raise ParameterError("rollout batch needs at least one input")
    m = len(samples[0])
    if m == 0 or any(len(row) != m for row in samples) or len(step_rewards) != n:
        raise ParameterError("rollout grid must be n x m with m >= 1")

    feature_rows: list[FloatArray] = []
    action_rows: list[int] = []
    inputs: list[int] = []
    sample_ids: list[int] = []
    positions: list[int] = []
    stops: list[bool] = []
    rtg_rows: list[float] = []
    return_rows: list[float] = []
    reward_grid: list[tuple[FloatArray, ...]] = []

    for i in range(n):
        if len(step_rewards[i]) != m:
            raise ParameterError("step rewards must align with the sample grid")
        row_rewards: list[FloatArray] = []
        for j in range(m):
            sample = samples[i][j]
            rewards = frozen_array(step_rewards[i][j])
            if rewards.shape != (sample.length,):
                raise ParameterError(f"path ({i}, {j}) has {sample.length} items but {rewards.shape} rewards")
            row_rewards.append(rewards)
            phi = features[i][j] if features is not None else policy.decision_features(sample)
            g = reward_to_go(rewards)
            total = float(np.sum(rewards))
            for k, action in enumerate(sample.actions):
                is_stop = k == sample.length
                feature_rows.append(phi[k])
                action_rows.append(action)
                inputs.append(i)
                sample_ids.append(j)
                positions.append(k + 1)
                stops.append(is_stop)
                rtg_rows.append(0.0 if is_stop else float(g[k]))
                return_rows.append(total)
        reward_grid.append(tuple(row_rewards))

    feature_array = np.array(feature_rows, dtype=np.float64).reshape(len(feature_rows), policy.feature_map.dim)
    log_probs = policy.log_distribution(feature_array)
    residuals = -np.exp(log_probs)
    residuals[np.arange(len(action_rows)), np.array(action_rows, dtype=np.int64)] += 1.0
    residuals /= policy.temperature

    return RolloutBatch(
        n=n,
        m=m,
        max_length=max_length,
        temperature=policy.temperature,
        feature_hash=policy.feature_map.spec_hash(),
        samples=tuple(tuple(row) for row in samples),
        step_rewards=tuple(reward_grid),
        features=frozen_array(feature_array),
        log_probs=frozen_array(log_probs),
        residuals=frozen_array(residuals),
        input_index=np.array(inputs, dtype=np.int64),
        sample_index=np.array(sample_ids, dtype=np.int64),
        position=np.array(positions, dtype=np.int64),
        is_stop=np.array(stops, dtype=bool),
        reward_to_go=np.array(rtg_rows, dtype=np.float64),
        path_return=np.array(return_rows, dtype=np.float64),
    )


@dataclass(frozen=True, eq=False)
class AdvantageTable:
    """Reward-to-go, position baselines and advantages per batch decision.

    Rows follow the batch's decision order; STOP rows have G = 0.
    """

    reward_to_go: FloatArray
    baseline: FloatArray | None = None
    advantage: FloatArray | None = None


@dataclass(frozen=True, eq=False)
class GradientEstimate:
    """Dense gradient with the shape of the policy weights."""

    gradient: FloatArray
    kind: EstimatorKind
    sample_count: int

    @property
    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.gradient)))


class CriticUpdate(NamedTuple):
    """Critic regression step taken alongside an A2C estimate."""

    mse_before: float
    mse_after: float


def gradient_from_weights(batch: RolloutBatch, weights: FloatArray) -> FloatArray:
    """(1 / nm) sum_rows w * residual (outer) phi."""
    weighted = batch.residuals * weights[:, None]
    return np.asarray(weighted.T @ batch.features / (batch.n * batch.m), dtype=np.float64)


def compute_reward_to_go(batch: RolloutBatch) -> AdvantageTable:
    return AdvantageTable(reward_to_go=batch.reward_to_go.copy())


def _require_group(batch: RolloutBatch, kind: EstimatorKind) -> None:
    if batch.m < 2:
        raise ParameterError(f"{kind.value} estimator needs m >= 2 samples per input, got {batch.m}")


def position_baselines(batch: RolloutBatch, leave_one_out: bool = False) -> AdvantageTable:
    """Position-specific baselines and advantages.

    For input i and position t the baseline is the mean reward-to-go of the
    paths whose t-th decision was an item. Item rows get ``G - baseline``;
    the STOP row of a path that stopped at t gets ``-baseline`` (zero when no
    path continued at t). With ``leave_one_out`` an item row's own value is
    excluded from its baseline, and a lone reacher keeps ``A = G``.
    """
    stride = batch.max_length + 2
    groups = batch.input_index * stride + batch.position
    n_groups = batch.n * stride
    items = ~batch.is_stop
    g = batch.reward_to_go

    means, counts = _group_means(g[items], groups[items], n_groups)
    baseline = means[groups]
    if leave_one_out:
        sums = np.bincount(groups[items], weights=g[items], minlength=n_groups)
        own = np.where(items, g, 0.0)
        others = counts[groups] - items.astype(np.float64)
        loo = np.where(others > 0, (sums[groups] - own) / np.where(others > 0, others, 1.0), 0.0)
        baseline = np.where(items, loo, baseline)
    advantage = np.where(items, g - baseline, -baseline)
    return AdvantageTable(reward_to_go=g.copy(), baseline=baseline, advantage=advantage)


def grpo_weights(batch: RolloutBatch, leave_one_out: bool = False) -> FloatArray:
    """R^(i,j) - R-bar_i broadcast to every decision of path (i, j)."""
    returns = batch.path_returns
    means, _ = _group_means(returns.ravel(), np.repeat(np.arange(batch.n), batch.m), batch.n)
    if leave_one_out:
        sums = returns.sum(axis=1, keepdims=True)
        baseline = (sums - returns) / (batch.m - 1)
    else:
        baseline = np.broadcast_to(means[:, None], returns.shape)
    advantages = returns - baseline
    return np.asarray(advantages[batch.input_index, batch.sample_index], dtype=np.float64)


def estimator_weights(
    batch: RolloutBatch,
    kind: EstimatorKind,
    *,
    values: FloatArray | None = None,
    leave_one_out: bool = False,
) -> FloatArray:
    """Scalar weight of every decision row under the given estimator.

    Args:
        batch: Rollout batch.
        kind: Estimator.
        values: Critic predictions per row; required for A2C.
        leave_one_out: Exclude each sample from its own group baseline.

    Raises:
        ParameterError: If a group estimator gets m < 2 or A2C has no values.
    """
    if kind is EstimatorKind.STD:
        return batch.path_return.copy()
    if kind is EstimatorKind.RTG:
        return batch.reward_to_go.copy()
    if kind is EstimatorKind.GRPO:
        _require_group(batch, kind)
        return grpo_weights(batch, leave_one_out)
    if kind is EstimatorKind.PRORL:
        _require_group(batch, kind)
        table = position_baselines(batch, leave_one_out)
        assert table.advantage is not None
        return table.advantage
    if values is None:
        raise ParameterError("a2c weights need critic values")
    return batch.reward_to_go - values


def estimate_std(batch: RolloutBatch) -> GradientEstimate:
    """Every decision weighted by its path's total centered reward."""
    weights = estimator_weights(batch, EstimatorKind.STD)
    return GradientEstimate(gradient_from_weights(batch, weights), EstimatorKind.STD, batch.n * batch.m)


def estimate_rtg(batch: RolloutBatch) -> GradientEstimate:
    """Every decision weighted by its reward-to-go."""
    weights = estimator_weights(batch, EstimatorKind.RTG)
    return GradientEstimate(gradient_from_weights(batch, weights), EstimatorKind.RTG, batch.n * batch.m)


def estimate_grpo(batch: RolloutBatch, leave_one_out: bool = False) -> GradientEstimate:
    weights = estimator_weights(batch, EstimatorKind.GRPO, leave_one_out=leave_one_out)
    return GradientEstimate(gradient_from_weights(batch, weights), EstimatorKind.GRPO, batch.n * batch.m)


def estimate_prorl(batch: RolloutBatch, leave_one_out: bool = False) -> GradientEstimate:
    """Decisions weighted by reward-to-go minus the same-input, same-position mean."""
    weights = estimator_weights(batch, EstimatorKind.PRORL, leave_one_out=leave_one_out)
    return GradientEstimate(gradient_from_weights(batch, weights), EstimatorKind.PRORL, batch.n * batch.m)


def estimate_a2c(batch: RolloutBatch, critic: ValueEstimator) -> tuple[GradientEstimate, CriticUpdate]:
    """Advantage G_t - V(phi_t, t), then one critic regression step toward G_t.

    The advantage uses the critic's predictions from before the update.
    """
    inputs = batch.critic_inputs()
    values = critic.predict(inputs)
    weights = estimator_weights(batch, EstimatorKind.A2C, values=values)
    estimate = GradientEstimate(gradient_from_weights(batch, weights), EstimatorKind.A2C, batch.n * batch.m)
    targets = batch.critic_targets()
    mse_before = float(np.mean((values - targets) ** 2))
    critic.fit_step(inputs, targets)
    mse_after = float(np.mean((critic.predict(inputs) - targets) ** 2))
    return estimate, CriticUpdate(mse_before, mse_after)


def estimate(
    batch: RolloutBatch,
    kind: EstimatorKind,
    critic: ValueEstimator | None = None,
    leave_one_out: bool = False,
) -> GradientEstimate:
    """Dispatch to the estimator selected by ``kind``."""
    if kind is EstimatorKind.STD:
        return estimate_std(batch)
    if kind is EstimatorKind.RTG:
        return estimate_rtg(batch)
    if kind is EstimatorKind.GRPO:
        return estimate_grpo(batch, leave_one_out)
    if kind is EstimatorKind.PRORL:
        return estimate_prorl(batch, leave_one_out)
    if critic is None:
        raise ParameterError("a2c estimator needs a critic")
    result, _ = estimate_a2c(batch, critic)
    return result


def _check_prior(batch: RolloutBatch, prior: PriorPolicy) -> None:
    if prior.feature_map.spec_hash() != batch.feature_hash:
        raise ParameterError("prior and batch must share the same feature map")


def batch_kl(batch: RolloutBatch, prior: PriorPolicy) -> tuple[FloatArray, FloatArray]:
    """Per-decision KL(pi_theta || pi_0) and its logit gradient, from the batch's own log-probs."""
    _check_prior(batch, prior)
    log_p = batch.log_probs
    log_q = prior.log_distribution(batch.features)
    p = np.exp(log_p)
    pointwise = p * (log_p - log_q)
    kl = pointwise.sum(axis=1)
    coeff = (pointwise - p * kl[:, None]) / batch.temperature
    return kl, coeff


def mean_kl(batch: RolloutBatch, prior: PriorPolicy) -> float:
    """Mean over paths of the summed per-step KL to the prior."""
    kl, _ = batch_kl(batch, prior)
    return float(kl.sum() / (batch.n * batch.m))


def add_kl_gradient(
    est: GradientEstimate,
    batch: RolloutBatch,
    prior: PriorPolicy,
    kl_coeff: float,
) -> GradientEstimate:
    """Subtract ``kl_coeff`` times the gradient of the mean per-path KL to the prior.

    Raises:
        ParameterError: If ``kl_coeff`` is negative.
    """
    if kl_coeff < 0.0:
        raise ParameterError(f"KL coefficient must be >= 0, got {kl_coeff}")
    if kl_coeff == 0.0:
        return est
    _, coeff = batch_kl(batch, prior)
    kl_grad = coeff.T @ batch.features / (batch.n * batch.m)
    return GradientEstimate(est.gradient - kl_coeff * kl_grad, est.kind, est.sample_count)


def advantage_variance(
    batch: RolloutBatch,
    kind: EstimatorKind,
    *,
    values: FloatArray | None = None,
    leave_one_out: bool = False,
) -> float:
    """Population variance of the estimator's per-decision weights, pooled over (i, j, t)."""
    weights = estimator_weights(batch, kind, values=values, leave_one_out=leave_one_out)
    return float(np.var(weights))
