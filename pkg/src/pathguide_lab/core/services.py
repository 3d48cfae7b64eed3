"""Experiment services for pathguide-lab.

Services receive their settings (and optionally a prebuilt environment or
prior) through the constructor and orchestrate the adapters. All randomness
is derived from the configured seeds through fixed stream tags, so every
service call is a deterministic function of its settings.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, replace

import numpy as np

from pathguide_lab.adapters.catalog_env import SimulatorModel, generate_catalog
from pathguide_lab.adapters.checkpoint import Checkpoint
from pathguide_lab.adapters.critic import CriticModel
from pathguide_lab.adapters.estimators import (
    add_kl_gradient,
    advantage_variance,
    estimate,
    estimate_a2c,
    mean_kl,
)
from pathguide_lab.adapters.mining import (
    AttributeOverlapOracle,
    build_inputs,
    generate_user_sequences,
    mine_all,
    split_users,
)
from pathguide_lab.adapters.oracle import enumerate_paths, exact_expected_reward, exact_gradient, total_probability
from pathguide_lab.adapters.policy import FeatureMap, LinearSoftmaxPolicy, PriorPolicy, pretrain_supervised
from pathguide_lab.adapters.rewards import (
    CenteringMode,
    RewardStats,
    RewardWeights,
    accumulate_warmup,
    coherence,
    ctr,
    ioi,
    ior,
    path_reward,
)
from pathguide_lab.adapters.rollouts import CollectedRollouts, RolloutCollector
from pathguide_lab.adapters.theory import FlowTrace, integrate_flow, verify_bound, verify_grid
from pathguide_lab.api.schemas import (
    BoundReport,
    CenteringKind,
    CollapseDemoReport,
    CollapseRow,
    EpochMetrics,
    EstimatorComparisonRow,
    EstimatorKind,
    EvaluationReport,
    GridReport,
    InputRolloutMax,
    MiningReport,
    OffsetSweepRow,
    OracleCheckReport,
    OracleCheckRow,
    RewardComponent,
    RolloutAtKReport,
    StepRewardProfileRow,
    TrainingSummary,
    UpdateMetrics,
    VarianceStudyRow,
)
from pathguide_lab.core.models import Catalog, Demonstration, GuidanceInput, PathSample, RawSequence
from pathguide_lab.errors import ConfigError, DegenerateStatisticsError, NumericalAbortError, ParameterError
from pathguide_lab.observability import get_logger
from pathguide_lab.settings import Settings

logger = get_logger(__name__)

# Stream tags separating the generators derived from one master seed.
STREAM_WARMUP = 1
STREAM_TRAIN = 2
STREAM_EVAL = 3
STREAM_CRITIC = 4
STREAM_INPUTS = 5
STREAM_ROLLOUT_K = 6
STREAM_PRETRAIN_EVAL = 7
STREAM_VARIANCE = 8

GRID_MU_MINS: tuple[float, ...] = (0.5, 1.0, 2.0)
GRID_MAX_LENGTHS: tuple[int, ...] = (3, 10)
GRID_THETA0S: tuple[float, ...] = (-1.0, 0.0, 2.0)
ORACLE_FD_STEP = 1e-5
ORACLE_TOLERANCE = 1e-6


# ============================================================================
# Environment
# ============================================================================


@dataclass(frozen=True, eq=False)
class LabEnvironment:
    """Catalog, simulator, feature map and the user pools built from one config."""

    catalog: Catalog
    simulator: SimulatorModel
    feature_map: FeatureMap
    weights: RewardWeights
    train_sequences: tuple[RawSequence, ...]
    validation_sequences: tuple[RawSequence, ...]
    test_sequences: tuple[RawSequence, ...]
    train_inputs: tuple[GuidanceInput, ...]
    test_inputs: tuple[GuidanceInput, ...]


def reward_weights(settings: Settings) -> RewardWeights:
    section = settings.rewards
    return RewardWeights(
        alpha=section.alpha,
        beta=section.beta,
        gamma=section.gamma,
        component_weights=section.component_weights,
    )


def build_environment(settings: Settings) -> LabEnvironment:
    """Generate the catalog and synthetic users; everything derives from ``catalog.seed``."""
    cat = settings.catalog
    catalog = generate_catalog(cat.seed, cat.n_items, cat.n_attributes, cat.attrs_per_item, cat.embedding_dim)
    simulator = SimulatorModel(catalog, settings.simulator.decay, settings.simulator.temperature)
    trainer = settings.trainer
    sequences = generate_user_sequences(
        catalog,
        trainer.n_users,
        trainer.min_sequence_length,
        trainer.max_sequence_length,
        settings.pretrain.walk_coherence,
        seed=cat.seed + 1,
    )
    train, validation, test = split_users(sequences, seed=cat.seed + 2)
    return LabEnvironment(
        catalog=catalog,
        simulator=simulator,
        feature_map=FeatureMap(simulator),
        weights=reward_weights(settings),
        train_sequences=tuple(train),
        validation_sequences=tuple(validation),
        test_sequences=tuple(test),
        train_inputs=tuple(build_inputs(train, trainer.history_length, cat.seed + 3, catalog)),
        test_inputs=tuple(build_inputs(test, trainer.history_length, cat.seed + 4, catalog)),
    )


def centering_mode(settings: Settings, stats: RewardStats, weights: RewardWeights) -> CenteringMode:
    """CenteringMode selected by ``rewards.centering`` using frozen warm-up statistics."""
    kind = settings.rewards.centering
    if kind is CenteringKind.RAW:
        return CenteringMode.raw()
    if kind is CenteringKind.CENTER:
        return CenteringMode.center_from_stats(stats, weights)
    if kind is CenteringKind.NORMALIZE:
        return CenteringMode.normalize(stats, weights)
    return CenteringMode.fixed_offset(stats, weights, settings.rewards.epsilon)


def sample_inputs(pool: Sequence[GuidanceInput], n: int, rng: np.random.Generator) -> list[GuidanceInput]:
    """Draw ``n`` inputs; without replacement whenever the pool is large enough."""
    if not pool:
        raise ParameterError("input pool is empty")
    chosen = rng.choice(len(pool), size=n, replace=len(pool) < n)
    return [pool[int(k)] for k in chosen]


def policy_from_checkpoint(checkpoint: Checkpoint, env: LabEnvironment, use_prior: bool = False) -> LinearSoftmaxPolicy:
    """Rebuild the trained policy (or the prior) stored in a checkpoint.

    Raises:
        ConfigError: If the checkpoint was written for a different feature map.
    """
    if checkpoint.feature_hash != env.feature_map.spec_hash():
        raise ConfigError("Checkpoint feature map does not match the configured catalog")
    weights = checkpoint.prior_weights if use_prior else checkpoint.policy_weights
    return LinearSoftmaxPolicy(env.feature_map, weights, checkpoint.temperature)


# ============================================================================
# Mining and pretraining
# ============================================================================


class PretrainService:
    """Mines demonstrations from the training users and fits the prior pi_0."""

    def __init__(self, settings: Settings) -> None:
        self._settings = settings

    def mine(self, env: LabEnvironment) -> tuple[list[Demonstration], MiningReport]:
        section = self._settings.pretrain
        oracle = AttributeOverlapOracle(env.catalog, section.min_shared_attributes)
        demos = mine_all(
            env.train_sequences,
            self._settings.trainer.history_length,
            oracle,
            archive_trailing=section.archive_trailing,
        )
        report = MiningReport(
            n_users=len(env.train_sequences) + len(env.validation_sequences) + len(env.test_sequences),
            n_train_users=len(env.train_sequences),
            n_demonstrations=len(demos),
            mean_demo_length=float(np.mean([len(d.path) for d in demos])) if demos else 0.0,
            oracle_calls=oracle.calls,
        )
        return demos, report

    def pretrain(
        self,
        env: LabEnvironment,
        demos: Sequence[Demonstration],
        on_epoch: Callable[[int, float], None] | None = None,
    ) -> PriorPolicy:
        section = self._settings.pretrain
        return pretrain_supervised(
            env.feature_map,
            demos,
            section.epochs,
            section.learning_rate,
            temperature=self._settings.policy.temperature,
            max_length=self._settings.policy.max_length,
            on_epoch=on_epoch,
        )

    def checkpoint(self, env: LabEnvironment, prior: PriorPolicy) -> Checkpoint:
        """Epoch-0 checkpoint holding the prior as both policy and reference."""
        sampler = np.random.default_rng([self._settings.trainer.seed, STREAM_INPUTS])
        return Checkpoint(
            config_hash=self._settings.config_hash(),
            epoch=0,
            feature_hash=env.feature_map.spec_hash(),
            temperature=prior.temperature,
            policy_weights=np.array(prior.weights),
            prior_weights=np.array(prior.weights),
            reward_stats=RewardStats(),
            rng_state=sampler.bit_generator.state,
        )


# ============================================================================
# Warm-up
# ============================================================================


def run_warmup(settings: Settings, policy: LinearSoftmaxPolicy, env: LabEnvironment) -> RewardStats:
    """Pool the step rewards of ``warmup_epochs`` epochs of rollouts into frozen statistics.

    The policy is not updated during warm-up.
    """
    trainer = settings.trainer
    collector = RolloutCollector(policy, env.simulator, env.weights, settings.policy.max_length)
    input_rng = np.random.default_rng([trainer.seed, STREAM_WARMUP])
    stats = RewardStats()
    for epoch in range(trainer.warmup_epochs):
        for update in range(trainer.updates_per_epoch):
            inputs = sample_inputs(env.train_inputs, trainer.batch_size, input_rng)
            stream = [trainer.seed, STREAM_WARMUP, epoch, update]
            rollouts = collector.collect(inputs, trainer.samples_per_input, stream)
            stats = accumulate_warmup(stats, rollouts.flat_step_rewards())
    frozen = stats.freeze()
    logger.info("warmup_complete", count=frozen.count, mean=frozen.mean, std=frozen.std)
    return frozen


# ============================================================================
# Evaluation
# ============================================================================


class EvaluationService:
    """Held-out guidance metrics and Rollout@K."""

    def __init__(self, simulator: SimulatorModel, max_length: int) -> None:
        self._simulator = simulator
        self._max_length = max_length

    def _path(
        self,
        policy: LinearSoftmaxPolicy,
        guidance: GuidanceInput,
        greedy: bool,
        stream: Sequence[int],
        i: int,
        k: int = 0,
    ) -> PathSample:
        if greedy:
            return policy.greedy_path(guidance.history, guidance.target, self._max_length)
        rng = np.random.default_rng([*stream, i, k])
        return policy.sample_path(guidance.history, guidance.target, self._max_length, rng, i, k)

    def evaluate(
        self,
        policy: LinearSoftmaxPolicy,
        inputs: Sequence[GuidanceInput],
        stream: Sequence[int],
        greedy: bool = False,
    ) -> EvaluationReport:
        """Mean CTR, Coherence, IoI, IoR and length over one path per input.

        Empty paths contribute IoI = IoR = 0 and are left out of the CTR and
        Coherence means.
        """
        if not inputs:
            raise ParameterError("evaluation needs at least one input")
        sim = self._simulator
        lengths: list[int] = []
        ioi_values: list[float] = []
        ior_values: list[float] = []
        ctr_values: list[float] = []
        coherence_values: list[float] = []
        for i, guidance in enumerate(inputs):
            path = self._path(policy, guidance, greedy, stream, i).items
            lengths.append(len(path))
            ioi_values.append(ioi(guidance.history, path, guidance.target, sim))
            ior_values.append(float(ior(guidance.history, path, guidance.target, sim)))
            if path:
                ctr_values.append(ctr(guidance.history, path, sim).value)
                coherence_values.append(coherence(path, sim.catalog).value)
        return EvaluationReport(
            n_inputs=len(inputs),
            greedy=greedy,
            mean_length=float(np.mean(lengths)),
            ctr=float(np.mean(ctr_values)) if ctr_values else 0.0,
            coherence=float(np.mean(coherence_values)) if coherence_values else 0.0,
            ioi=float(np.mean(ioi_values)),
            ior=float(np.mean(ior_values)),
            empty_fraction=float(np.mean([length == 0 for length in lengths])),
        )

    def rollout_at_k(
        self,
        policy: LinearSoftmaxPolicy,
        inputs: Sequence[GuidanceInput],
        k: int,
        stream: Sequence[int],
    ) -> RolloutAtKReport:
        """Per input, the best IoI and best IoR over K sampled paths.

        Sample ``k`` of input ``i`` always uses the generator ``[*stream, i, k]``,
        so the K=5 sample set is contained in the K=10 one.
        """
        if k < 1:
            raise ParameterError(f"K must be >= 1, got {k}")
        sim = self._simulator
        per_input: list[InputRolloutMax] = []
        for i, guidance in enumerate(inputs):
            paths = [self._path(policy, guidance, False, stream, i, draw).items for draw in range(k)]
            per_input.append(
                InputRolloutMax(
                    input_index=i,
                    max_ioi=max(ioi(guidance.history, p, guidance.target, sim) for p in paths),
                    max_ior=float(max(ior(guidance.history, p, guidance.target, sim) for p in paths)),
                ),
            )
        return RolloutAtKReport(
            k=k,
            mean_max_ioi=float(np.mean([row.max_ioi for row in per_input])),
            mean_max_ior=float(np.mean([row.max_ior for row in per_input])),
            per_input=per_input,
        )


# ============================================================================
# Training
# ============================================================================


@dataclass(eq=False)
class TrainingResult:
    """Outcome of ``TrainingService.train``."""

    policy: LinearSoftmaxPolicy
    prior: PriorPolicy
    reward_stats: RewardStats
    epochs: list[EpochMetrics]
    updates: list[UpdateMetrics]
    checkpoint: Checkpoint
    summary: TrainingSummary


UpdateObserver = Callable[[UpdateMetrics, CollectedRollouts], None]


class TrainingService:
    """Pretraining, warm-up and the KL-regularized policy-gradient loop.

    One epoch is ``updates_per_epoch`` updates; each update samples
    ``batch_size`` training inputs, draws ``samples_per_input`` paths per
    input, centers their step rewards, forms the selected estimator, adds
    the KL gradient and takes a fixed gradient-ascent step.
    """

    def __init__(
        self,
        settings: Settings,
        environment: LabEnvironment | None = None,
        prior: PriorPolicy | None = None,
    ) -> None:
        self._settings = settings
        self._env = environment
        self._prior = prior

    @property
    def environment(self) -> LabEnvironment:
        if self._env is None:
            self._env = build_environment(self._settings)
        return self._env

    def prior(self) -> PriorPolicy:
        """Mine demonstrations and pretrain pi_0 (cached)."""
        if self._prior is None:
            service = PretrainService(self._settings)
            demos, report = service.mine(self.environment)
            logger.info("mining_complete", **report.model_dump())
            self._prior = service.pretrain(self.environment, demos)
        return self._prior

    def _critic(self) -> CriticModel:
        section = self._settings.critic
        return CriticModel(
            self.environment.feature_map.dim + 1,
            section.hidden_width,
            section.loss_coefficient,
            section.learning_rate,
            seed=self._settings.trainer.seed,
        )

    def _warm_critic(self, critic: CriticModel, prior: PriorPolicy, mode: CenteringMode) -> None:
        trainer = self._settings.trainer
        env = self.environment
        max_length = self._settings.policy.max_length
        collector = RolloutCollector(prior, env.simulator, env.weights, max_length)
        input_rng = np.random.default_rng([trainer.seed, STREAM_CRITIC])
        for epoch in range(self._settings.critic.warmup_epochs):
            for update in range(trainer.updates_per_epoch):
                inputs = sample_inputs(env.train_inputs, trainer.batch_size, input_rng)
                stream = [trainer.seed, STREAM_CRITIC, epoch, update]
                batch = collector.collect(inputs, trainer.samples_per_input, stream).to_batch(prior, mode, max_length)
                loss = critic.fit_step(batch.critic_inputs(), batch.critic_targets())
            logger.info("critic_warmup_epoch", epoch=epoch, loss=loss)

    def _validate_resume(self, checkpoint: Checkpoint) -> None:
        if checkpoint.config_hash != self._settings.config_hash():
            raise ConfigError("Checkpoint was written under a different configuration")
        if not checkpoint.reward_stats.frozen:
            raise ConfigError("Checkpoint carries no warm-up statistics; load it as a prior instead")

    def train(
        self,
        checkpoint: Checkpoint | None = None,
        observer: UpdateObserver | None = None,
    ) -> TrainingResult:
        """Run (or resume) training up to ``trainer.epochs`` epochs.

        Args:
            checkpoint: Resume from this state instead of pretraining.
            observer: Called after every update with its metrics and rollouts.

        Raises:
            ConfigError: If the checkpoint does not belong to these settings.
            NumericalAbortError: On a non-finite gradient or parameter.
        """
        settings = self._settings
        trainer = settings.trainer
        env = self.environment
        max_length = settings.policy.max_length
        evaluator = EvaluationService(env.simulator, max_length)
        eval_inputs = env.test_inputs[: trainer.eval_inputs]
        critic: CriticModel | None = None

        if checkpoint is None:
            prior = self.prior()
            stats = run_warmup(settings, prior, env)
            mode = centering_mode(settings, stats, env.weights)
            if trainer.estimator is EstimatorKind.A2C:
                critic = self._critic()
                self._warm_critic(critic, prior, mode)
            policy = prior
            input_rng = np.random.default_rng([trainer.seed, STREAM_INPUTS])
            start_epoch = 0
            pretrain_report = evaluator.evaluate(prior, eval_inputs, [trainer.seed, STREAM_PRETRAIN_EVAL])
            metadata = {"pretrain_eval_ioi": pretrain_report.ioi, "pretrain_eval_ctr": pretrain_report.ctr}
        else:
            self._validate_resume(checkpoint)
            prior = policy_from_checkpoint(checkpoint, env, use_prior=True)
            policy = policy_from_checkpoint(checkpoint, env)
            stats = checkpoint.reward_stats
            mode = centering_mode(settings, stats, env.weights)
            if trainer.estimator is EstimatorKind.A2C:
                critic = self._critic()
                if checkpoint.critic is not None:
                    critic.load_parameters(checkpoint.critic)
            input_rng = np.random.default_rng()
            input_rng.bit_generator.state = checkpoint.rng_state
            start_epoch = checkpoint.epoch
            metadata = dict(checkpoint.metadata)

        epochs: list[EpochMetrics] = []
        updates: list[UpdateMetrics] = []
        for epoch in range(start_epoch, trainer.epochs):
            epoch_updates: list[UpdateMetrics] = []
            cross_diversity: list[float] = []
            for update in range(trainer.updates_per_epoch):
                inputs = sample_inputs(env.train_inputs, trainer.batch_size, input_rng)
                collector = RolloutCollector(policy, env.simulator, env.weights, max_length)
                stream = [trainer.seed, STREAM_TRAIN, epoch, update]
                rollouts = collector.collect(inputs, trainer.samples_per_input, stream)
                batch = rollouts.to_batch(policy, mode, max_length)

                values = None
                if critic is not None:
                    values = critic.predict(batch.critic_inputs())
                    est, _ = estimate_a2c(batch, critic)
                else:
                    est = estimate(batch, trainer.estimator, leave_one_out=trainer.leave_one_out)
                est = add_kl_gradient(est, batch, prior, trainer.kl_coeff)
                new_weights = policy.weights + trainer.learning_rate * est.gradient
                if not est.is_finite or not np.all(np.isfinite(new_weights)):
                    diagnostic = {
                        "epoch": epoch,
                        "update": update,
                        "non_finite_entries": int(np.count_nonzero(~np.isfinite(est.gradient))),
                        "weight_norm": float(np.linalg.norm(policy.weights)),
                        "mean_length": rollouts.mean_length(),
                    }
                    logger.error("numerical_abort", **diagnostic)
                    raise NumericalAbortError(f"Non-finite gradient at epoch {epoch}, update {update}", diagnostic)

                if "variance_reference" not in metadata:
                    metadata["variance_reference"] = advantage_variance(batch, EstimatorKind.STD)
                metrics = UpdateMetrics(
                    epoch=epoch,
                    update=update,
                    mean_length=rollouts.mean_length(),
                    path_diversity=rollouts.path_diversity(),
                    mean_reward=float(np.mean(rollouts.raw_rewards())),
                    advantage_variance=advantage_variance(
                        batch, trainer.estimator, values=values, leave_one_out=trainer.leave_one_out,
                    ),
                    mean_kl=mean_kl(batch, prior),
                )
                cross_diversity.append(rollouts.cross_input_diversity())
                epoch_updates.append(metrics)
                if observer is not None:
                    observer(metrics, rollouts)
                policy = policy.with_weights(new_weights)

            report = evaluator.evaluate(policy, eval_inputs, [trainer.seed, STREAM_EVAL, epoch], trainer.greedy_eval)
            variance = float(np.mean([u.advantage_variance for u in epoch_updates]))
            reference = metadata["variance_reference"]
            row = EpochMetrics(
                epoch=epoch,
                mean_length=float(np.mean([u.mean_length for u in epoch_updates])),
                path_diversity=float(np.mean([u.path_diversity for u in epoch_updates])),
                cross_input_diversity=float(np.mean(cross_diversity)),
                mean_reward=float(np.mean([u.mean_reward for u in epoch_updates])),
                advantage_variance=variance,
                advantage_variance_normalized=variance / reference if reference > 0.0 else float("nan"),
                mean_kl=float(np.mean([u.mean_kl for u in epoch_updates])),
                eval_mean_length=report.mean_length,
                eval_ctr=report.ctr,
                eval_ioi=report.ioi,
                eval_ior=report.ior,
                eval_coherence=report.coherence,
                eval_empty_fraction=report.empty_fraction,
            )
            logger.info(
                "epoch_complete",
                epoch=epoch,
                mean_length=row.mean_length,
                diversity=row.path_diversity,
                eval_ioi=row.eval_ioi,
                mean_kl=row.mean_kl,
            )
            epochs.append(row)
            updates.extend(epoch_updates)

        final_checkpoint = Checkpoint(
            config_hash=settings.config_hash(),
            epoch=max(trainer.epochs, start_epoch),
            feature_hash=env.feature_map.spec_hash(),
            temperature=policy.temperature,
            policy_weights=np.array(policy.weights),
            prior_weights=np.array(prior.weights),
            reward_stats=stats,
            rng_state=input_rng.bit_generator.state,
            critic={k: np.array(v) for k, v in critic.parameters().items()} if critic is not None else None,
            metadata=metadata,
        )
        summary = TrainingSummary(
            config_hash=final_checkpoint.config_hash,
            estimator=trainer.estimator,
            centering=settings.rewards.centering,
            epochs_completed=final_checkpoint.epoch,
            updates=len(updates),
            final_mean_length=epochs[-1].mean_length if epochs else float("nan"),
            final_eval_ioi=epochs[-1].eval_ioi if epochs else float("nan"),
            final_eval_ctr=epochs[-1].eval_ctr if epochs else float("nan"),
            pretrain_eval_ioi=metadata.get("pretrain_eval_ioi", float("nan")),
            pretrain_eval_ctr=metadata.get("pretrain_eval_ctr", float("nan")),
        )
        return TrainingResult(
            policy=policy,
            prior=prior,
            reward_stats=stats,
            epochs=epochs,
            updates=updates,
            checkpoint=final_checkpoint,
            summary=summary,
        )


# ============================================================================
# Studies
# ============================================================================


def _single_component(settings: Settings, component: RewardComponent) -> Settings:
    weights = {c.value: 0.0 for c in RewardComponent}
    weights[component.value] = 1.0
    return _with_rewards(
        settings,
        alpha=weights["ioi"],
        beta=weights["ior"],
        gamma=weights["ctr"],
        component_weights=None,
    )


def _with_trainer(settings: Settings, **changes: object) -> Settings:
    return settings.model_copy(update={"trainer": settings.trainer.model_copy(update=changes)})


def _with_rewards(settings: Settings, **changes: object) -> Settings:
    return settings.model_copy(update={"rewards": settings.rewards.model_copy(update=changes)})


class _CollapseRecorder:
    """Update observer that keeps length/diversity rows and step rewards by position."""

    def __init__(self, run: str, max_length: int) -> None:
        self.run = run
        self.rows: list[CollapseRow] = []
        self.sums = np.zeros(max_length, dtype=np.float64)
        self.counts = np.zeros(max_length, dtype=np.int64)

    def __call__(self, metrics: UpdateMetrics, rollouts: CollectedRollouts) -> None:
        self.rows.append(
            CollapseRow(
                run=self.run,
                update=len(self.rows),
                mean_length=metrics.mean_length,
                path_diversity=metrics.path_diversity,
            ),
        )
        for vector in rollouts.flat_step_rewards():
            weighted = vector.weighted()
            self.sums[: weighted.shape[0]] += weighted
            self.counts[: weighted.shape[0]] += 1

    def pooled_mean(self) -> float:
        total = int(self.counts.sum())
        return float(self.sums.sum() / total) if total else 0.0

    def profile(self) -> list[StepRewardProfileRow]:
        return [
            StepRewardProfileRow(
                run=self.run,
                position=position + 1,
                mean_step_reward=float(self.sums[position] / self.counts[position]),
                count=int(self.counts[position]),
            )
            for position in range(self.counts.shape[0])
            if self.counts[position]
        ]


class CollapseDemoService:
    """Single-reward runs with the standard estimator, raw and centered."""

    def __init__(self, settings: Settings) -> None:
        self._settings = settings

    def run(
        self,
        components: Sequence[RewardComponent] = (RewardComponent.CTR, RewardComponent.IOI, RewardComponent.IOR),
        centered_pair: bool = True,
    ) -> CollapseDemoReport:
        """Train each configuration and record per-update length, diversity and E[r_t] by position.

        Every run starts from the same pretrained prior and environment;
        only the reward weights and the centering mode differ. The loop
        hyperparameters come from the ``collapse`` section.
        """
        section = self._settings.collapse
        base = _with_trainer(
            self._settings,
            estimator=EstimatorKind.STD,
            epochs=section.epochs,
            updates_per_epoch=section.updates_per_epoch,
            batch_size=section.batch_size,
            samples_per_input=section.samples_per_input,
            learning_rate=section.learning_rate,
            kl_coeff=section.kl_coeff,
        )
        shared = TrainingService(base)
        env = shared.environment
        prior = shared.prior()

        runs: list[tuple[str, Settings]] = []
        for component in components:
            single = _single_component(base, component)
            runs.append((f"{component.value}_raw", _with_rewards(single, centering=CenteringKind.RAW)))
            if centered_pair:
                runs.append((f"{component.value}_normalized", _with_rewards(single, centering=CenteringKind.NORMALIZE)))

        rows: list[CollapseRow] = []
        profile: list[StepRewardProfileRow] = []
        pooled: dict[str, float] = {}
        final_length: dict[str, float] = {}
        final_diversity: dict[str, float] = {}
        for name, run_settings in runs:
            recorder = _CollapseRecorder(name, base.policy.max_length)
            run_env = replace(env, weights=reward_weights(run_settings))
            TrainingService(run_settings, environment=run_env, prior=prior).train(observer=recorder)
            rows.extend(recorder.rows)
            profile.extend(recorder.profile())
            pooled[name] = recorder.pooled_mean()
            window = recorder.rows[-section.final_window :]
            final_length[name] = float(np.mean([r.mean_length for r in window])) if window else float("nan")
            final_diversity[name] = float(np.mean([r.path_diversity for r in window])) if window else float("nan")
            logger.info(
                "collapse_run_complete",
                run=name,
                pooled_mean=pooled[name],
                final_length=final_length[name],
                final_diversity=final_diversity[name],
            )
        return CollapseDemoReport(
            rows=rows,
            profile=profile,
            pooled_mean_step_reward=pooled,
            final_mean_length=final_length,
            final_diversity=final_diversity,
            final_window=section.final_window,
        )


class EstimatorStudyService:
    """Estimator ablation, the fixed-offset epsilon sweep and the weight-variance study."""

    def __init__(self, settings: Settings) -> None:
        self._settings = settings
        self._shared = TrainingService(settings)

    def compare_estimators(self, kinds: Sequence[EstimatorKind]) -> list[EstimatorComparisonRow]:
        """Same seeded pipeline per estimator; variance normalized to the first std-weight batch."""
        env = self._shared.environment
        prior = self._shared.prior()
        rows: list[EstimatorComparisonRow] = []
        for kind in kinds:
            result = TrainingService(_with_trainer(self._settings, estimator=kind), env, prior).train()
            rows.extend(
                EstimatorComparisonRow(
                    estimator=kind,
                    epoch=row.epoch,
                    mean_length=row.mean_length,
                    advantage_variance_normalized=row.advantage_variance_normalized,
                )
                for row in result.epochs
            )
        return rows

    def offset_sweep(
        self,
        epsilons: Sequence[float],
        component: RewardComponent = RewardComponent.IOI,
    ) -> list[OffsetSweepRow]:
        """Fixed-offset centering with a single reward component for each epsilon."""
        single = _single_component(self._settings, component)
        env = self._shared.environment
        run_env = replace(env, weights=reward_weights(single))
        prior = self._shared.prior()
        rows: list[OffsetSweepRow] = []
        for epsilon in epsilons:
            run_settings = _with_rewards(single, centering=CenteringKind.FIXED_OFFSET, epsilon=epsilon)
            result = TrainingService(run_settings, run_env, prior).train()
            rows.extend(
                OffsetSweepRow(epsilon=epsilon, epoch=r.epoch, mean_length=r.mean_length) for r in result.epochs
            )
        return rows

    def variance_study(self, kinds: Sequence[EstimatorKind], n_batches: int) -> list[VarianceStudyRow]:
        """Weight variance of each estimator on repeated batches sampled from the prior.

        Every kind is measured on the same batches, centered with the
        configured mode from a fresh warm-up. Ratios are against the std
        weights of those batches.

        Raises:
            ParameterError: If fewer than two batches are requested or a kind needs a critic.
            DegenerateStatisticsError: If the std weights have zero variance.
        """
        if n_batches < 2:
            raise ParameterError(f"the variance study needs at least 2 batches, got {n_batches}")
        if EstimatorKind.A2C in kinds:
            raise ParameterError("a2c weights depend on a critic and are not measured at the prior")
        settings = self._settings
        trainer = settings.trainer
        max_length = settings.policy.max_length
        env = self._shared.environment
        prior = self._shared.prior()
        mode = centering_mode(settings, run_warmup(settings, prior, env), env.weights)
        collector = RolloutCollector(prior, env.simulator, env.weights, max_length)
        input_rng = np.random.default_rng([trainer.seed, STREAM_VARIANCE])

        measured: dict[EstimatorKind, list[float]] = {kind: [] for kind in (EstimatorKind.STD, *kinds)}
        for index in range(n_batches):
            inputs = sample_inputs(env.train_inputs, trainer.batch_size, input_rng)
            stream = [trainer.seed, STREAM_VARIANCE, index]
            batch = collector.collect(inputs, trainer.samples_per_input, stream).to_batch(prior, mode, max_length)
            for kind, values in measured.items():
                values.append(advantage_variance(batch, kind, leave_one_out=trainer.leave_one_out))

        reference = float(np.mean(measured[EstimatorKind.STD]))
        if not reference > 0.0:
            raise DegenerateStatisticsError("std weights have zero variance; no ratio can be formed")
        rows: list[VarianceStudyRow] = []
        for kind in kinds:
            values = np.asarray(measured[kind], dtype=np.float64)
            mean = float(values.mean())
            rows.append(
                VarianceStudyRow(
                    estimator=kind,
                    n_batches=n_batches,
                    mean_variance=mean,
                    standard_error=float(values.std(ddof=1) / np.sqrt(n_batches)),
                    ratio_to_std=mean / reference,
                ),
            )
            logger.info("variance_measured", estimator=kind.value, mean_variance=mean, ratio_to_std=mean / reference)
        return rows


# ============================================================================
# Verification
# ============================================================================


class TheoryVerificationService:
    """Gradient-flow verification of the stop-only model."""

    def __init__(self, settings: Settings) -> None:
        self._settings = settings

    def verify_grid(
        self,
        mu_mins: Sequence[float] = GRID_MU_MINS,
        max_lengths: Sequence[int] = GRID_MAX_LENGTHS,
        theta0s: Sequence[float] = GRID_THETA0S,
    ) -> GridReport:
        section = self._settings.theory
        return verify_grid(mu_mins, max_lengths, theta0s, section.step, section.horizon)

    def default_trace_report(self) -> tuple[FlowTrace, BoundReport]:
        section = self._settings.theory
        mu = [section.mu_min] * section.max_length
        trace = integrate_flow(section.theta0, mu, section.max_length, section.step, section.horizon)
        return trace, verify_bound(trace, section.mu_min)


class OracleCheckService:
    """Exact gradient against finite differences of the exact expected reward."""

    def __init__(self, settings: Settings) -> None:
        self._settings = settings

    def run(self) -> OracleCheckReport:
        section = self._settings.oracle
        rows = [self.check_config(index, seed=index) for index in range(section.n_configs)]
        return OracleCheckReport(passed=all(r.passed for r in rows), tolerance=ORACLE_TOLERANCE, rows=rows)

    def check_config(self, index: int, seed: int) -> OracleCheckRow:
        section = self._settings.oracle
        catalog = generate_catalog(seed, section.n_items, n_attributes=2, attrs_per_item=1, embedding_dim=2)
        sim = SimulatorModel(catalog, self._settings.simulator.decay, self._settings.simulator.temperature)
        fmap = FeatureMap(sim)
        rng = np.random.default_rng([seed, 99])
        weights = rng.normal(0.0, 0.5, size=(fmap.n_actions, fmap.dim))
        policy = LinearSoftmaxPolicy(fmap, weights, self._settings.policy.temperature)
        history = (catalog.items[int(rng.integers(catalog.n_items))].id,)
        target = catalog.items[0].id
        unit = RewardWeights()

        def reward(sample: PathSample) -> float:
            return path_reward(history, sample.items, target, sim, unit)

        enumeration = enumerate_paths(policy, history, target, section.max_length, section.budget)
        exact = exact_gradient(enumeration, reward)
        numeric = np.zeros_like(exact)
        for idx in np.ndindex(*weights.shape):
            shifted = []
            for delta in (ORACLE_FD_STEP, -ORACLE_FD_STEP):
                w = weights.copy()
                w[idx] += delta
                shifted_policy = policy.with_weights(w)
                enum_shift = enumerate_paths(shifted_policy, history, target, section.max_length, section.budget)
                shifted.append(exact_expected_reward(enum_shift, reward))
            numeric[idx] = (shifted[0] - shifted[1]) / (2.0 * ORACLE_FD_STEP)
        scale = max(float(np.linalg.norm(numeric)), 1e-12)
        error = float(np.linalg.norm(exact - numeric)) / scale
        return OracleCheckRow(
            config_index=index,
            seed=seed,
            n_paths=len(enumeration),
            probability_mass=total_probability(enumeration),
            relative_error=error,
            passed=error < ORACLE_TOLERANCE,
        )
