"""Autoregressive linear-softmax guidance policy with an explicit STOP action.

The policy scores ``n_items + 1`` actions (catalog rows, then STOP) with
``softmax(W phi / T)`` where ``phi = [h(S + generated), emb(target), 1]``.
Score-function and KL gradients are closed-form outer products, so no
autodiff is involved anywhere.
"""

from __future__ import annotations

import hashlib
from collections.abc import Callable, Sequence
from typing import TypeAlias

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit, log_softmax

from pathguide_lab.adapters.catalog_env import SimulatorModel
from pathguide_lab.core.models import (
    Catalog,
    Demonstration,
    FloatArray,
    IntArray,
    InteractionHistory,
    PathSample,
    frozen_array,
)
from pathguide_lab.errors import ParameterError
from pathguide_lab.observability import get_logger

logger = get_logger(__name__)


class FeatureMap:
    """phi(S, generated, target) = concat(h(S + generated), emb(target), 1)."""

    def __init__(self, sim: SimulatorModel) -> None:
        self._sim = sim
        self._catalog = sim.catalog
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self._catalog.embeddings).tobytes())
        digest.update(self._catalog.item_ids.tobytes())
        digest.update(repr((sim.decay, self.dim)).encode("utf-8"))
        self._hash = digest.hexdigest()

    @property
    def simulator(self) -> SimulatorModel:
        return self._sim

    @property
    def catalog(self) -> Catalog:
        return self._catalog

    @property
    def dim(self) -> int:
        return 2 * self._catalog.embedding_dim + 1

    @property
    def n_actions(self) -> int:
        return self._catalog.n_items + 1

    @property
    def stop_action(self) -> int:
        return self._catalog.n_items

    def spec_hash(self) -> str:
        """Digest of everything the features depend on; stored in checkpoints."""
        return self._hash

    def initial_state(self, history: InteractionHistory) -> FloatArray:
        return self._sim.context_accumulator(history)

    def advance(self, state: FloatArray, item_id: int) -> FloatArray:
        return self._sim.extend(state, item_id)

    def features(self, state: FloatArray, target: int) -> FloatArray:
        return np.concatenate((self._sim.normalize(state), self._catalog.embedding(target), [1.0]))

    def features_for(self, history: InteractionHistory, generated: Sequence[int], target: int) -> FloatArray:
        state = self.initial_state(history)
        for item_id in generated:
            state = self.advance(state, item_id)
        return self.features(state, target)

    def action_of(self, item_id: int) -> int:
        return self._catalog.index_of(item_id)

    def item_of(self, action: int) -> int:
        return self._catalog.items[action].id


class LinearSoftmaxPolicy:
    """pi_W(a | phi) = softmax(W phi / T) over catalog items plus STOP.

    The weight matrix has shape ``(n_actions, feature_dim)`` and is read-only;
    updates produce a new policy through ``with_weights``.
    """

    def __init__(
        self,
        feature_map: FeatureMap,
        weights: FloatArray | None = None,
        temperature: float = 1.0,
    ) -> None:
        if not temperature > 0.0:
            raise ParameterError(f"temperature must be > 0, got {temperature}")
        shape = (feature_map.n_actions, feature_map.dim)
        if weights is None:
            weights = np.zeros(shape, dtype=np.float64)
        if weights.shape != shape:
            raise ParameterError(f"weights must have shape {shape}, got {weights.shape}")
        if not np.all(np.isfinite(weights)):
            raise ParameterError("policy weights must be finite")
        self._feature_map = feature_map
        self._weights = frozen_array(weights)
        self._temperature = float(temperature)

    @classmethod
    def zeros(cls, feature_map: FeatureMap, temperature: float = 1.0) -> LinearSoftmaxPolicy:
        return cls(feature_map, None, temperature)

    @property
    def feature_map(self) -> FeatureMap:
        return self._feature_map

    @property
    def weights(self) -> FloatArray:
        return self._weights

    @property
    def temperature(self) -> float:
        return self._temperature

    @property
    def n_actions(self) -> int:
        return self._feature_map.n_actions

    @property
    def stop_action(self) -> int:
        return self._feature_map.stop_action

    def with_weights(self, weights: FloatArray) -> LinearSoftmaxPolicy:
        return LinearSoftmaxPolicy(self._feature_map, weights, self._temperature)

    def log_distribution(self, features: FloatArray) -> FloatArray:
        """Log action probabilities for one feature vector or a (k, dim) stack."""
        logits = features @ self._weights.T / self._temperature
        return np.asarray(log_softmax(logits, axis=-1), dtype=np.float64)

    def distribution(self, features: FloatArray) -> FloatArray:
        return np.exp(self.log_distribution(features))

    def action_distribution(
        self,
        history: InteractionHistory,
        generated: Sequence[int],
        target: int,
    ) -> FloatArray:
        """pi(. | S, generated, target) over ``n_actions``; STOP is the last entry."""
        return self.distribution(self._feature_map.features_for(history, generated, target))

    def rollout(
        self,
        history: InteractionHistory,
        target: int,
        max_length: int,
        rng: np.random.Generator | None,
        input_index: int = 0,
        sample_index: int = 0,
    ) -> tuple[PathSample, FloatArray]:
        """Generate one path and return it with the features of every decision.

        Actions are drawn by inverse-CDF sampling from ``rng.random()``; with
        ``rng=None`` the most probable action is taken (lowest index on ties).
        """
        if max_length < 1:
            raise ParameterError(f"max_length must be >= 1, got {max_length}")
        fmap = self._feature_map
        state = fmap.initial_state(history)
        items: list[int] = []
        actions: list[int] = []
        log_probs: list[float] = []
        rows: list[FloatArray] = []
        truncated = True
        while len(items) < max_length:
            phi = fmap.features(state, target)
            log_dist = self.log_distribution(phi)
            if rng is None:
                action = int(np.argmax(log_dist))
            else:
                cdf = np.cumsum(np.exp(log_dist))
                action = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
                action = min(action, self.n_actions - 1)
            rows.append(phi)
            actions.append(action)
            log_probs.append(float(log_dist[action]))
            if action == self.stop_action:
                truncated = False
                break
            item_id = fmap.item_of(action)
            items.append(item_id)
            state = fmap.advance(state, item_id)
        sample = PathSample(
            items=tuple(items),
            actions=tuple(actions),
            log_probs=tuple(log_probs),
            truncated=truncated,
            history=tuple(history),
            target=target,
            input_index=input_index,
            sample_index=sample_index,
        )
        return sample, np.array(rows, dtype=np.float64).reshape(len(rows), fmap.dim)

    def sample_path(
        self,
        history: InteractionHistory,
        target: int,
        max_length: int,
        rng: np.random.Generator,
        input_index: int = 0,
        sample_index: int = 0,
    ) -> PathSample:
        """Draw actions until STOP or ``max_length`` items; deterministic given ``rng`` state."""
        sample, _ = self.rollout(history, target, max_length, rng, input_index, sample_index)
        return sample

    def greedy_path(self, history: InteractionHistory, target: int, max_length: int) -> PathSample:
        sample, _ = self.rollout(history, target, max_length, None)
        return sample

    def decision_features(self, sample: PathSample) -> FloatArray:
        """Replay the feature vector of every realized decision of ``sample``."""
        fmap = self._feature_map
        state = fmap.initial_state(sample.history)
        rows = np.empty((sample.n_decisions, fmap.dim), dtype=np.float64)
        for k in range(sample.n_decisions):
            rows[k] = fmap.features(state, sample.target)
            if k < sample.length:
                state = fmap.advance(state, sample.items[k])
        return rows

    def score_residuals(self, features: FloatArray, actions: Sequence[int] | IntArray) -> FloatArray:
        """(onehot(a) - pi) / T per decision; the score is this outer phi."""
        residuals = -self.distribution(features)
        residuals[np.arange(len(actions)), np.asarray(actions)] += 1.0
        return residuals / self._temperature

    def grad_log_prob(self, sample: PathSample) -> FloatArray:
        """d log pi(a_t | phi_t) / dW for every decision, shape (n_decisions, n_actions, dim)."""
        features = self.decision_features(sample)
        residuals = self.score_residuals(features, sample.actions)
        return np.einsum("ka,kd->kad", residuals, features)


PriorPolicy: TypeAlias = LinearSoftmaxPolicy
"""Frozen pi_0 obtained from supervised pretraining."""


# ============================================================================
# KL to the prior
# ============================================================================


def _check_same_features(policy: LinearSoftmaxPolicy, prior: LinearSoftmaxPolicy) -> None:
    if policy.feature_map.spec_hash() != prior.feature_map.spec_hash():
        raise ParameterError("policy and prior must share the same feature map")


def kl_rows(
    policy: LinearSoftmaxPolicy,
    prior: LinearSoftmaxPolicy,
    features: FloatArray,
) -> tuple[FloatArray, FloatArray]:
    """Per-context KL(pi || pi_0) and its gradient with respect to the logits.

    Returns:
        ``(kl, coeff)`` where ``kl`` has one entry per feature row and
        ``coeff.T @ features`` is the gradient of ``kl.sum()`` in W.
    """
    _check_same_features(policy, prior)
    log_p = policy.log_distribution(features)
    log_q = prior.log_distribution(features)
    p = np.exp(log_p)
    pointwise = p * (log_p - log_q)
    kl = pointwise.sum(axis=-1)
    coeff = (pointwise - p * kl[..., None]) / policy.temperature
    return kl, coeff


def kl_per_path(policy: LinearSoftmaxPolicy, prior: LinearSoftmaxPolicy, sample: PathSample) -> float:
    """Sum over the path's realized contexts of KL(pi_theta || pi_0)."""
    kl, _ = kl_rows(policy, prior, policy.decision_features(sample))
    return float(kl.sum())


def kl_gradient(policy: LinearSoftmaxPolicy, prior: LinearSoftmaxPolicy, sample: PathSample) -> FloatArray:
    """Gradient in W of ``kl_per_path`` with the sample's contexts held fixed."""
    features = policy.decision_features(sample)
    _, coeff = kl_rows(policy, prior, features)
    return np.asarray(coeff.T @ features, dtype=np.float64)


# ============================================================================
# Supervised pretraining
# ============================================================================


def demonstration_steps(
    feature_map: FeatureMap,
    demos: Sequence[Demonstration],
    max_length: int | None = None,
) -> tuple[FloatArray, IntArray]:
    """Features and target actions of every demonstration decision, STOP included.

    Decisions beyond ``max_length`` items cannot occur during sampling and are
    skipped, as is the STOP of a demonstration longer than ``max_length``.
    """
    rows: list[FloatArray] = []
    actions: list[int] = []
    for demo in demos:
        state = feature_map.initial_state(demo.history)
        for position, item_id in enumerate(demo.path):
            if max_length is not None and position >= max_length:
                break
            rows.append(feature_map.features(state, demo.goal))
            actions.append(feature_map.action_of(item_id))
            state = feature_map.advance(state, item_id)
        if max_length is None or len(demo.path) <= max_length:
            rows.append(feature_map.features(state, demo.goal))
            actions.append(feature_map.stop_action)
    return (
        np.array(rows, dtype=np.float64).reshape(len(rows), feature_map.dim),
        np.array(actions, dtype=np.int64),
    )


def supervised_log_likelihood(
    policy: LinearSoftmaxPolicy,
    demos: Sequence[Demonstration],
    max_length: int | None = None,
) -> float:
    """Sum of log pi(action | context) over all demonstration decisions."""
    features, actions = demonstration_steps(policy.feature_map, demos, max_length)
    log_dist = policy.log_distribution(features)
    return float(log_dist[np.arange(len(actions)), actions].sum())


def pretrain_supervised(
    feature_map: FeatureMap,
    demos: Sequence[Demonstration],
    epochs: int,
    lr: float,
    rng: np.random.Generator | None = None,
    *,
    temperature: float = 1.0,
    max_length: int | None = None,
    init_scale: float = 0.0,
    on_epoch: Callable[[int, float], None] | None = None,
) -> PriorPolicy:
    """Fit pi_0 by full-batch gradient ascent on the demonstration log-likelihood.

    The mean log-likelihood is concave in W for a linear-softmax policy, and
    ``||phi||^2 <= 3`` bounds its curvature, so any ``lr < 4 T^2 / 3`` ascends
    monotonically.

    Args:
        feature_map: Feature map shared with the policy to be trained.
        demos: Mined demonstrations; must be non-empty.
        epochs: Full-batch ascent steps.
        lr: Step size.
        rng: Source of the initial weights when ``init_scale > 0``.
        temperature: Policy temperature.
        max_length: L_max; decisions the sampler can never reach are skipped.
        init_scale: Standard deviation of the Gaussian initial weights.
        on_epoch: Called with ``(epoch, total log-likelihood)`` after each step.

    Returns:
        The frozen prior policy.

    Raises:
        ParameterError: If ``demos`` is empty or hyperparameters are invalid.
    """
    if not demos:
        raise ParameterError("pretraining needs at least one demonstration")
    if epochs < 1 or not lr > 0.0:
        raise ParameterError(f"need epochs >= 1 and lr > 0, got epochs={epochs}, lr={lr}")
    features, actions = demonstration_steps(feature_map, demos, max_length)
    if len(actions) == 0:
        raise ParameterError("demonstrations produced no decisions within max_length")

    shape = (feature_map.n_actions, feature_map.dim)
    weights = np.zeros(shape, dtype=np.float64)
    if init_scale > 0.0:
        generator = rng if rng is not None else np.random.default_rng(0)
        weights = generator.normal(0.0, init_scale, size=shape)

    n_steps = len(actions)
    rows = np.arange(n_steps)
    for epoch in range(1, epochs + 1):
        log_dist = np.asarray(log_softmax(features @ weights.T / temperature, axis=1))
        residuals = -np.exp(log_dist)
        residuals[rows, actions] += 1.0
        weights = weights + lr * (residuals.T @ features) / (temperature * n_steps)
        if on_epoch is not None:
            log_dist = np.asarray(log_softmax(features @ weights.T / temperature, axis=1))
            on_epoch(epoch, float(log_dist[rows, actions].sum()))

    prior = LinearSoftmaxPolicy(feature_map, weights, temperature)
    logger.info(
        "pretraining_complete",
        demonstrations=len(demos),
        decisions=n_steps,
        epochs=epochs,
        log_likelihood=supervised_log_likelihood(prior, demos, max_length),
    )
    return prior


# ============================================================================
# Stop-only reduction
# ============================================================================


class StopOnlyModel(BaseModel):
    """Policy that always emits an item and then stops with p = sigmoid(theta).

    Position t of the path carries the fixed conditional reward mean
    ``mu[t-1]``; the first item is always generated.
    """

    model_config = ConfigDict(frozen=True)

    theta: float
    mu: tuple[float, ...]
    max_length: int = Field(ge=1)

    @model_validator(mode="after")
    def _mu_covers_positions(self) -> StopOnlyModel:
        if len(self.mu) != self.max_length:
            raise ValueError(f"mu needs {self.max_length} entries, got {len(self.mu)}")
        return self

    @classmethod
    def constant(cls, theta: float, mu: float, max_length: int) -> StopOnlyModel:
        return cls(theta=theta, mu=(mu,) * max_length, max_length=max_length)

    @property
    def stop_probability(self) -> float:
        return float(expit(self.theta))

    @property
    def mu_min(self) -> float:
        return min(self.mu)

    def expected_length(self) -> float:
        q = 1.0 - self.stop_probability
        return float(sum(q ** (t - 1) for t in range(1, self.max_length + 1)))

    def sample_stopping_times(self, n: int, rng: np.random.Generator) -> IntArray:
        """Path lengths of ``n`` independent runs, each in ``[1, max_length]``."""
        draws = rng.geometric(self.stop_probability, size=n)
        return np.minimum(draws, self.max_length).astype(np.int64)
