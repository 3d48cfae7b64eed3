"""Exact enumeration of the path distribution on toy instances.

Every action sequence ending in STOP or truncation is enumerated with its
exact probability and summed score. Expected rewards and the exact policy
gradient are then plain weighted sums, used as references for the Monte
Carlo estimators.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from pathguide_lab.adapters.policy import LinearSoftmaxPolicy
from pathguide_lab.core.models import FloatArray, InteractionHistory, PathSample, frozen_array
from pathguide_lab.errors import EnumerationBudgetError, UndefinedPositionError
from pathguide_lab.observability import get_logger

logger = get_logger(__name__)

DEFAULT_BUDGET = 1_000_000

PathRewardFn = Callable[[PathSample], float]
StepRewardFn = Callable[[PathSample], FloatArray]


@dataclass(frozen=True, eq=False)
class EnumeratedPath:
    """One terminal action sequence with its exact probability.

    ``score`` is sum_t d log pi(a_t | phi_t) / dW over the path's decisions.
    """

    sample: PathSample
    probability: float
    score: FloatArray

    def __post_init__(self) -> None:
        object.__setattr__(self, "score", frozen_array(self.score))

    @property
    def items(self) -> tuple[int, ...]:
        return self.sample.items


def enumerate_paths(
    policy: LinearSoftmaxPolicy,
    history: InteractionHistory,
    target: int,
    max_length: int,
    budget: int = DEFAULT_BUDGET,
) -> list[EnumeratedPath]:
    """Enumerate all terminal histories of the policy for one input.

    Paths are produced depth-first with STOP explored before items at every
    node, so the order is deterministic.

    Raises:
        EnumerationBudgetError: If ``|items|^max_length * max_length`` exceeds ``budget``.
    """
    fmap = policy.feature_map
    n_items = fmap.catalog.n_items
    work = n_items**max_length * max_length
    if work > budget:
        raise EnumerationBudgetError(
            f"Enumeration needs {n_items}^{max_length} * {max_length} = {work} > budget {budget}",
        )

    paths: list[EnumeratedPath] = []
    history = tuple(history)
    stop = policy.stop_action
    temperature = policy.temperature

    def visit(
        state: FloatArray,
        items: tuple[int, ...],
        actions: tuple[int, ...],
        log_probs: tuple[float, ...],
        score: FloatArray,
    ) -> None:
        if len(items) == max_length:
            sample = PathSample(items, actions, log_probs, True, history, target)
            paths.append(EnumeratedPath(sample, float(np.exp(sum(log_probs))), score))
            return
        phi = fmap.features(state, target)
        log_dist = policy.log_distribution(phi)
        base = score - np.outer(np.exp(log_dist), phi) / temperature
        for action in (stop, *range(n_items)):
            child_score = base.copy()
            child_score[action] += phi / temperature
            child_actions = (*actions, action)
            child_log_probs = (*log_probs, float(log_dist[action]))
            if action == stop:
                sample = PathSample(items, child_actions, child_log_probs, False, history, target)
                paths.append(EnumeratedPath(sample, float(np.exp(sum(child_log_probs))), child_score))
                continue
            item_id = fmap.item_of(action)
            visit(fmap.advance(state, item_id), (*items, item_id), child_actions, child_log_probs, child_score)

    visit(
        fmap.initial_state(history),
        (),
        (),
        (),
        np.zeros((policy.n_actions, fmap.dim), dtype=np.float64),
    )
    logger.debug("paths_enumerated", count=len(paths), max_length=max_length)
    return paths


def total_probability(enumeration: Sequence[EnumeratedPath]) -> float:
    return float(sum(path.probability for path in enumeration))


def exact_expected_reward(enumeration: Sequence[EnumeratedPath], reward_fn: PathRewardFn) -> float:
    """sum over paths of P(path) * R(path)."""
    return float(sum(path.probability * reward_fn(path.sample) for path in enumeration))


def reaching_probability(enumeration: Sequence[EnumeratedPath], position: int) -> float:
    """P(L >= position)."""
    return float(sum(path.probability for path in enumeration if path.sample.length >= position))


def exact_expected_step_reward(
    enumeration: Sequence[EnumeratedPath],
    position: int,
    step_reward_fn: StepRewardFn,
) -> float:
    """E[r_t | L >= t] for 1-based position ``t``.

    Raises:
        UndefinedPositionError: If no enumerated path reaches ``position``.
    """
    mass = 0.0
    weighted = 0.0
    for path in enumeration:
        if position >= 1 and path.sample.length >= position:
            mass += path.probability
            weighted += path.probability * float(step_reward_fn(path.sample)[position - 1])
    if mass <= 0.0:
        raise UndefinedPositionError(f"No enumerated path reaches position {position}")
    return weighted / mass


def exact_gradient(enumeration: Sequence[EnumeratedPath], reward_fn: PathRewardFn) -> FloatArray:
    """Policy gradient sum over paths of P(path) * score(path) * R(path).

    Pass a reward function returning the sum of centered step rewards to get
    the gradient of the centered objective.
    """
    gradient = np.zeros_like(enumeration[0].score)
    for path in enumeration:
        gradient += path.probability * reward_fn(path.sample) * path.score
    return gradient


def dump_table(enumeration: Sequence[EnumeratedPath], reward_fn: PathRewardFn | None = None) -> str:
    """Fixed-width debug table of the enumeration, one row per path."""
    header = f"{'path':<32} {'end':<5} {'probability':>14}"
    if reward_fn is not None:
        header += f" {'reward':>14}"
    lines = [header, "-" * len(header)]
    for path in enumeration:
        label = "-".join(str(i) for i in path.items) or "()"
        row = f"{label:<32} {'trunc' if path.sample.truncated else 'stop':<5} {path.probability:>14.10f}"
        if reward_fn is not None:
            row += f" {reward_fn(path.sample):>14.8f}"
        lines.append(row)
    lines.append(f"{'total':<38} {total_probability(enumeration):>14.10f}")
    return "\n".join(lines)
