"""Rollout collection and path diagnostics.

Each path (i, j) draws from its own generator seeded with
``[*stream, i, j]``, so a batch is reproducible independently of the order
in which paths are generated.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from pathguide_lab.adapters.catalog_env import SimulatorModel
from pathguide_lab.adapters.estimators import RolloutBatch, build_rollout_batch
from pathguide_lab.adapters.policy import LinearSoftmaxPolicy
from pathguide_lab.adapters.rewards import (
    CenteringMode,
    RewardWeights,
    StepRewardVector,
    apply_centering,
    decompose,
)
from pathguide_lab.core.models import FloatArray, GuidanceInput, PathSample
from pathguide_lab.errors import ParameterError


def jaccard_diversity(paths: Sequence[Sequence[int]]) -> float:
    """1 - mean pairwise Jaccard similarity of the paths' item sets.

    A pair of empty paths counts as identical (similarity 1).

    Raises:
        ParameterError: With fewer than two paths.
    """
    if len(paths) < 2:
        raise ParameterError(f"diversity needs at least 2 paths, got {len(paths)}")
    sets = [frozenset(path) for path in paths]
    total = 0.0
    pairs = 0
    for left, right in combinations(sets, 2):
        union = len(left | right)
        total += 1.0 if union == 0 else len(left & right) / union
        pairs += 1
    return 1.0 - total / pairs


@dataclass(frozen=True, eq=False)
class CollectedRollouts:
    """n x m sampled paths with their decision features and raw step rewards."""

    inputs: tuple[GuidanceInput, ...]
    samples: tuple[tuple[PathSample, ...], ...]
    features: tuple[tuple[FloatArray, ...], ...]
    step_rewards: tuple[tuple[StepRewardVector, ...], ...]

    @property
    def n(self) -> int:
        return len(self.samples)

    @property
    def m(self) -> int:
        return len(self.samples[0]) if self.samples else 0

    def flat_step_rewards(self) -> list[StepRewardVector]:
        return [vector for row in self.step_rewards for vector in row]

    def lengths(self) -> list[int]:
        return [sample.length for row in self.samples for sample in row]

    def mean_length(self) -> float:
        return float(np.mean(self.lengths()))

    def raw_rewards(self) -> list[float]:
        """alpha/beta/gamma-weighted path reward of every path."""
        return [float(np.sum(vector.weighted())) for vector in self.flat_step_rewards()]

    def component_means(self) -> FloatArray:
        """Mean path-level (IoI, IoR, CTR) over all paths."""
        totals = np.array([vector.totals() for vector in self.flat_step_rewards()], dtype=np.float64)
        return totals.mean(axis=0)

    def path_diversity(self) -> float:
        """Mean over inputs of the diversity among that input's m paths.

        Falls back to ``cross_input_diversity`` when m < 2.
        """
        if self.m < 2:
            return self.cross_input_diversity()
        return float(np.mean([jaccard_diversity([s.items for s in row]) for row in self.samples]))

    def cross_input_diversity(self) -> float:
        """Diversity among the first path of every input; 0 with a single input."""
        if self.n < 2:
            return 0.0
        return jaccard_diversity([row[0].items for row in self.samples])

    def to_batch(self, policy: LinearSoftmaxPolicy, mode: CenteringMode, max_length: int) -> RolloutBatch:
        centered = [[apply_centering(vector, mode) for vector in row] for row in self.step_rewards]
        return build_rollout_batch(policy, self.samples, centered, max_length, self.features)


class RolloutCollector:
    """Samples n x m paths from a policy and decomposes their rewards."""

    def __init__(
        self,
        policy: LinearSoftmaxPolicy,
        simulator: SimulatorModel,
        weights: RewardWeights,
        max_length: int,
    ) -> None:
        self._policy = policy
        self._simulator = simulator
        self._weights = weights
        self._max_length = max_length

    def collect(self, inputs: Sequence[GuidanceInput], m: int, stream: Sequence[int]) -> CollectedRollouts:
        """Draw ``m`` paths per input using generators seeded by ``[*stream, i, j]``."""
        if m < 1:
            raise ParameterError(f"m must be >= 1, got {m}")
        samples: list[tuple[PathSample, ...]] = []
        features: list[tuple[FloatArray, ...]] = []
        rewards: list[tuple[StepRewardVector, ...]] = []
        for i, guidance in enumerate(inputs):
            row_samples: list[PathSample] = []
            row_features: list[FloatArray] = []
            row_rewards: list[StepRewardVector] = []
            for j in range(m):
                rng = np.random.default_rng([*stream, i, j])
                sample, phi = self._policy.rollout(
                    guidance.history, guidance.target, self._max_length, rng, input_index=i, sample_index=j,
                )
                row_samples.append(sample)
                row_features.append(phi)
                row_rewards.append(
                    decompose(guidance.history, sample.items, guidance.target, self._simulator, self._weights),
                )
            samples.append(tuple(row_samples))
            features.append(tuple(row_features))
            rewards.append(tuple(row_rewards))
        return CollectedRollouts(
            inputs=tuple(inputs),
            samples=tuple(samples),
            features=tuple(features),
            step_rewards=tuple(rewards),
        )
