"""Guidance metrics, path reward and step-reward centering.

Step rewards are stored per component in the column order of
``REWARD_COMPONENTS`` (IoI, IoR, CTR). The empty path has reward zero in
every component, which fixes the prefix-0 value of the telescoping
decomposition.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from pathguide_lab.adapters.catalog_env import SimulatorModel
from pathguide_lab.api.schemas import CenteringKind, RewardComponent
from pathguide_lab.core.models import Catalog, FloatArray, InteractionHistory, frozen_array
from pathguide_lab.errors import DegenerateStatisticsError, ParameterError, StatsFrozenError

REWARD_COMPONENTS: tuple[RewardComponent, ...] = (RewardComponent.IOI, RewardComponent.IOR, RewardComponent.CTR)
N_COMPONENTS = len(REWARD_COMPONENTS)

CTR_EMPTY_SENTINEL = 0.0
COHERENCE_SHORT_SENTINEL = 1.0


class MetricValue(NamedTuple):
    """Metric value plus whether it is defined for the given path."""

    value: float
    defined: bool


class RewardWeights(BaseModel):
    """alpha, beta, gamma on (IoI, IoR, CTR) and the normalized-mode weights w_i."""

    model_config = ConfigDict(frozen=True)

    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    component_weights: tuple[float, float, float] | None = Field(
        default=None,
        description="w_i for normalize and fixed_offset; (alpha, beta, gamma) when unset",
    )

    @field_validator("alpha", "beta", "gamma")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("reward weights must be finite")
        return value

    @field_validator("component_weights")
    @classmethod
    def _finite_components(cls, value: tuple[float, float, float] | None) -> tuple[float, float, float] | None:
        if value is not None and not all(math.isfinite(v) for v in value):
            raise ValueError("component weights must be finite")
        return value

    def as_array(self) -> FloatArray:
        return np.array([self.alpha, self.beta, self.gamma], dtype=np.float64)

    def normalization_weights(self) -> FloatArray:
        if self.component_weights is None:
            return self.as_array()
        return np.array(self.component_weights, dtype=np.float64)


# ============================================================================
# Path-level metrics
# ============================================================================


def ioi(history: InteractionHistory, path: Sequence[int], target: int, sim: SimulatorModel) -> float:
    """Increment of Interest: log P(target | S + L) - log P(target | S)."""
    before = sim.log_prob(target, history)
    after = sim.log_prob(target, [*history, *path])
    return after - before


def ior(history: InteractionHistory, path: Sequence[int], target: int, sim: SimulatorModel) -> int:
    """Increment of Rank: Rank(target | S) - Rank(target | S + L)."""
    return sim.rank(target, history) - sim.rank(target, [*history, *path])


def ctr(history: InteractionHistory, path: Sequence[int], sim: SimulatorModel) -> MetricValue:
    """Mean acceptance probability of each path item given its prefix.

    The empty path returns ``MetricValue(0.0, defined=False)``.
    """
    if not path:
        return MetricValue(CTR_EMPTY_SENTINEL, defined=False)
    catalog = sim.catalog
    accumulator = sim.context_accumulator(history)
    total = 0.0
    for item_id in path:
        total += float(np.exp(sim.log_distribution(accumulator)[catalog.index_of(item_id)]))
        accumulator = sim.extend(accumulator, item_id)
    return MetricValue(total / len(path), defined=True)


def coherence(path: Sequence[int], catalog: Catalog) -> MetricValue:
    """Fraction of adjacent pairs whose attribute sets intersect.

    Paths shorter than two items are vacuously coherent and return
    ``MetricValue(1.0, defined=False)``.
    """
    if len(path) < 2:
        return MetricValue(COHERENCE_SHORT_SENTINEL, defined=False)
    linked = sum(
        1 for left, right in zip(path[:-1], path[1:], strict=True)
        if catalog.attributes(left) & catalog.attributes(right)
    )
    return MetricValue(linked / (len(path) - 1), defined=True)


def path_reward(
    history: InteractionHistory,
    path: Sequence[int],
    target: int,
    sim: SimulatorModel,
    weights: RewardWeights,
) -> float:
    """alpha * IoI + beta * IoR + gamma * CTR; zero for the empty path."""
    if not path:
        return 0.0
    return (
        weights.alpha * ioi(history, path, target, sim)
        + weights.beta * ior(history, path, target, sim)
        + weights.gamma * ctr(history, path, sim).value
    )


# ============================================================================
# Step decomposition
# ============================================================================


@dataclass(frozen=True, eq=False)
class StepRewardVector:
    """Per-position, per-component increments r_t^(i) of one path.

    ``increments`` has shape (L, 3); column sums telescope to the path-level
    component values.
    """

    increments: FloatArray
    weights: RewardWeights

    def __post_init__(self) -> None:
        increments = frozen_array(self.increments)
        if increments.ndim != 2 or increments.shape[1] != N_COMPONENTS:
            raise ParameterError(f"increments must have shape (L, {N_COMPONENTS}), got {increments.shape}")
        object.__setattr__(self, "increments", increments)

    @property
    def length(self) -> int:
        return int(self.increments.shape[0])

    def component(self, component: RewardComponent) -> FloatArray:
        return self.increments[:, REWARD_COMPONENTS.index(component)]

    def totals(self) -> FloatArray:
        """Path-level component values recovered by summing increments."""
        return self.increments.sum(axis=0)

    def weighted(self) -> FloatArray:
        """alpha r^IoI + beta r^IoR + gamma r^CTR per step."""
        return self.increments @ self.weights.as_array()


def prefix_levels(
    history: InteractionHistory,
    path: Sequence[int],
    target: int,
    sim: SimulatorModel,
) -> FloatArray:
    """Component values of every path prefix, shape (L + 1, 3); row 0 is the empty prefix."""
    catalog = sim.catalog
    target_row = catalog.index_of(target)
    accumulator = sim.context_accumulator(history)
    log_probs = sim.log_distribution(accumulator)
    probs = np.exp(log_probs)
    base_log_prob = log_probs[target_row]
    base_rank = sim.rank_in(probs, target_row)

    levels = np.zeros((len(path) + 1, N_COMPONENTS), dtype=np.float64)
    accepted = 0.0
    for t, item_id in enumerate(path, start=1):
        accepted += probs[catalog.index_of(item_id)]
        accumulator = sim.extend(accumulator, item_id)
        log_probs = sim.log_distribution(accumulator)
        probs = np.exp(log_probs)
        levels[t, 0] = log_probs[target_row] - base_log_prob
        levels[t, 1] = base_rank - sim.rank_in(probs, target_row)
        levels[t, 2] = accepted / t
    return levels


def decompose(
    history: InteractionHistory,
    path: Sequence[int],
    target: int,
    sim: SimulatorModel,
    weights: RewardWeights,
) -> StepRewardVector:
    """Telescoping step rewards r_t = R(prefix t) - R(prefix t-1) per component.

    CTR is averaged over the prefix, so its increments may be negative.
    """
    levels = prefix_levels(history, path, target, sim)
    return StepRewardVector(increments=np.diff(levels, axis=0), weights=weights)


# ============================================================================
# Warm-up statistics and centering
# ============================================================================


class RewardStats(BaseModel):
    """Streaming per-component mean and population variance of step rewards.

    All step positions are pooled into one global statistic per component.
    Instances are immutable; accumulation returns a new instance.
    """

    model_config = ConfigDict(frozen=True)

    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    m2: tuple[float, float, float] = Field(default=(0.0, 0.0, 0.0), description="Sum of squared deviations")
    count: int = Field(default=0, ge=0)
    frozen: bool = False

    @property
    def std(self) -> tuple[float, float, float]:
        if self.count == 0:
            return (0.0, 0.0, 0.0)
        s = [math.sqrt(max(v, 0.0) / self.count) for v in self.m2]
        return (s[0], s[1], s[2])

    @property
    def mean_array(self) -> FloatArray:
        return np.array(self.mean, dtype=np.float64)

    @property
    def std_array(self) -> FloatArray:
        return np.array(self.std, dtype=np.float64)

    def freeze(self) -> RewardStats:
        return self.model_copy(update={"frozen": True})


def accumulate_warmup(stats: RewardStats, batch: Iterable[StepRewardVector]) -> RewardStats:
    """Fold a batch of step-reward vectors into the running statistics.

    Batches are merged with the pairwise mean/M2 update, so the result does
    not depend on how the samples were split into batches.

    Raises:
        StatsFrozenError: If ``stats`` is already frozen.
    """
    if stats.frozen:
        raise StatsFrozenError("RewardStats are frozen; warm-up accumulation is closed")
    blocks = [vector.increments for vector in batch if vector.length > 0]
    if not blocks:
        return stats
    samples = np.concatenate(blocks, axis=0)
    n_new = samples.shape[0]
    mean_new = samples.mean(axis=0)
    m2_new = ((samples - mean_new) ** 2).sum(axis=0)

    n_old = stats.count
    total = n_old + n_new
    mean_old = stats.mean_array
    delta = mean_new - mean_old
    mean = mean_old + delta * (n_new / total)
    m2 = np.array(stats.m2) + m2_new + delta**2 * (n_old * n_new / total)
    return RewardStats(
        mean=(float(mean[0]), float(mean[1]), float(mean[2])),
        m2=(float(m2[0]), float(m2[1]), float(m2[2])),
        count=total,
    )


def fit_stats(batch: Iterable[StepRewardVector]) -> RewardStats:
    """Frozen statistics of a single pool of step-reward vectors."""
    return accumulate_warmup(RewardStats(), batch).freeze()


class CenteringMode(BaseModel):
    """Step-reward transform applied before gradient estimation.

    Build instances with the ``raw``, ``center``, ``normalize`` and
    ``fixed_offset`` constructors.
    """

    model_config = ConfigDict(frozen=True)

    kind: CenteringKind
    offset: float = Field(default=0.0, description="r-bar subtracted in center mode")
    stats: RewardStats | None = None
    component_weights: tuple[float, float, float] | None = None
    epsilon: float = 0.0

    @classmethod
    def raw(cls) -> CenteringMode:
        return cls(kind=CenteringKind.RAW)

    @classmethod
    def center(cls, offset: float) -> CenteringMode:
        return cls(kind=CenteringKind.CENTER, offset=offset)

    @classmethod
    def center_from_stats(cls, stats: RewardStats, weights: RewardWeights) -> CenteringMode:
        """Center on the mean weighted step reward implied by warm-up statistics."""
        return cls.center(float(stats.mean_array @ weights.as_array()))

    @classmethod
    def normalize(cls, stats: RewardStats, weights: RewardWeights) -> CenteringMode:
        w = weights.normalization_weights()
        return cls(
            kind=CenteringKind.NORMALIZE,
            stats=stats,
            component_weights=(float(w[0]), float(w[1]), float(w[2])),
        )

    @classmethod
    def fixed_offset(cls, stats: RewardStats, weights: RewardWeights, epsilon: float) -> CenteringMode:
        w = weights.normalization_weights()
        return cls(
            kind=CenteringKind.FIXED_OFFSET,
            stats=stats,
            component_weights=(float(w[0]), float(w[1]), float(w[2])),
            epsilon=epsilon,
        )

    def scaling(self) -> tuple[FloatArray, FloatArray, FloatArray]:
        """(weights, mean, std) with zero-weight components masked out."""
        if self.stats is None or self.component_weights is None:
            raise ParameterError(f"{self.kind.value} centering needs reward statistics")
        if not self.stats.frozen:
            raise ParameterError(f"{self.kind.value} centering needs frozen reward statistics")
        weights = np.array(self.component_weights, dtype=np.float64)
        std = self.stats.std_array
        active = weights != 0.0
        degenerate = [
            REWARD_COMPONENTS[i].value for i in range(N_COMPONENTS) if active[i] and std[i] <= 0.0
        ]
        if degenerate:
            raise DegenerateStatisticsError(f"Zero standard deviation for components: {', '.join(degenerate)}")
        safe_std = np.where(active, std, 1.0)
        return np.where(active, weights, 0.0), self.stats.mean_array, safe_std


def apply_centering(step_rewards: StepRewardVector, mode: CenteringMode) -> FloatArray:
    """Scalar per-step rewards r~_t under the given centering mode.

    raw: alpha/beta/gamma-weighted sum. center: that sum minus r-bar.
    normalize: sum_i w_i (r^(i) - mu_i) / sigma_i. fixed_offset:
    sum_i w_i r^(i) / sigma_i - epsilon.

    Raises:
        DegenerateStatisticsError: A weighted component has sigma = 0.
        ParameterError: Statistics are missing or not frozen.
    """
    if mode.kind is CenteringKind.RAW:
        return step_rewards.weighted()
    if mode.kind is CenteringKind.CENTER:
        return step_rewards.weighted() - mode.offset
    weights, mean, std = mode.scaling()
    increments = step_rewards.increments
    if mode.kind is CenteringKind.NORMALIZE:
        return ((increments - mean) / std) @ weights
    return (increments / std) @ weights - mode.epsilon
