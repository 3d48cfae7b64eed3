"""Experiment settings for pathguide-lab.

One nested section per library module. Values come from (highest first)
``--set``/``--seed`` overrides, the TOML config file, ``PATHGUIDE_*``
environment variables and the defaults below.
"""

from __future__ import annotations

import hashlib
import json
import tomllib
from pathlib import Path
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from pathguide_lab.api.schemas import CenteringKind, EstimatorKind
from pathguide_lab.errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CatalogSection(_Section):
    """Synthetic catalog generation."""

    seed: int = Field(default=7, ge=0, description="Seed for catalog generation")
    n_items: int = Field(default=40, ge=2, description="Number of catalog items")
    n_attributes: int = Field(default=10, ge=1, description="Size of the attribute vocabulary")
    attrs_per_item: int = Field(default=2, ge=1, description="Attributes sampled per item")
    embedding_dim: int = Field(default=8, ge=1, description="Item embedding dimension")

    @model_validator(mode="after")
    def _attrs_fit_vocabulary(self) -> CatalogSection:
        if self.attrs_per_item > self.n_attributes:
            raise ValueError("attrs_per_item must not exceed n_attributes")
        return self


class SimulatorSection(_Section):
    """User simulator scoring."""

    decay: float = Field(default=0.8, gt=0.0, lt=1.0, description="Exponential recency weight")
    temperature: float = Field(default=0.25, gt=0.0, description="Softmax temperature of the preference scorer")


class PolicySection(_Section):
    """Guidance policy sampling."""

    temperature: float = Field(default=1.0, gt=0.0, description="Sampling temperature")
    max_length: int = Field(default=10, ge=1, description="Maximum guidance path length L_max")


class RewardsSection(_Section):
    """Path reward weights and step-reward centering."""

    alpha: float = Field(default=1.0, description="Weight on IoI")
    beta: float = Field(default=1.0, description="Weight on IoR")
    gamma: float = Field(default=1.0, description="Weight on CTR")
    centering: CenteringKind = Field(default=CenteringKind.NORMALIZE, description="Step reward centering mode")
    component_weights: tuple[float, float, float] | None = Field(
        default=None,
        description="Normalized-mode weights w_i for (IoI, IoR, CTR); defaults to (alpha, beta, gamma)",
    )
    epsilon: float = Field(default=0.0, description="Offset subtracted per step in fixed-offset mode")


class TrainerSection(_Section):
    """Reinforcement-learning loop."""

    seed: int = Field(default=0, ge=0, description="Master seed for rollouts and input sampling")
    epochs: int = Field(default=10, ge=0, description="Training epochs after warm-up")
    updates_per_epoch: int = Field(default=4, ge=1, description="Gradient updates per epoch")
    batch_size: int = Field(default=128, ge=1, description="Inputs n per update")
    samples_per_input: int = Field(default=16, ge=1, description="Sampled paths m per input")
    learning_rate: float = Field(default=0.05, gt=0.0, description="Fixed gradient-ascent step size")
    kl_coeff: float = Field(default=0.01, ge=0.0, description="KL coefficient lambda")
    estimator: EstimatorKind = Field(default=EstimatorKind.PRORL, description="Policy-gradient estimator")
    warmup_epochs: int = Field(default=1, ge=1, description="Epochs of rollouts pooled into reward statistics")
    leave_one_out: bool = Field(default=False, description="Exclude each sample from its own baseline")
    n_users: int = Field(default=200, ge=10, description="Synthetic users generated for the input pools")
    history_length: int = Field(default=5, ge=1, description="History window n per input")
    min_sequence_length: int = Field(default=12, ge=2, description="Shortest synthetic user sequence")
    max_sequence_length: int = Field(default=30, ge=2, description="Longest synthetic user sequence")
    eval_inputs: int = Field(default=64, ge=1, description="Held-out inputs scored per evaluation")
    greedy_eval: bool = Field(default=False, description="Decode evaluation paths greedily instead of sampling")
    rollout_k: int = Field(default=10, ge=1, description="K for Rollout@K analysis")

    @model_validator(mode="after")
    def _sequence_range(self) -> TrainerSection:
        if self.min_sequence_length > self.max_sequence_length:
            raise ValueError("min_sequence_length must not exceed max_sequence_length")
        if self.min_sequence_length <= self.history_length:
            raise ValueError("min_sequence_length must exceed history_length")
        return self


class CriticSection(_Section):
    """A2C value baseline."""

    hidden_width: int = Field(default=256, ge=1, description="Hidden units of the 2-layer critic")
    loss_coefficient: float = Field(default=0.25, gt=0.0, description="Critic loss coefficient")
    learning_rate: float = Field(default=0.01, gt=0.0, description="Critic step size")
    warmup_epochs: int = Field(default=5, ge=0, description="Critic-only epochs before joint training")


class PretrainSection(_Section):
    """Demonstration mining and supervised pretraining of the prior."""

    epochs: int = Field(default=200, ge=1, description="Full-batch gradient-ascent epochs")
    learning_rate: float = Field(default=0.5, gt=0.0, description="Pretraining step size")
    walk_coherence: float = Field(
        default=0.7,
        ge=0.0,
        le=1.0,
        description="Probability that a synthetic walk step shares an attribute with the previous item",
    )
    min_shared_attributes: int = Field(default=1, ge=1, description="Feasibility threshold on shared attributes")
    archive_trailing: bool = Field(default=False, description="Archive the trailing mined segment")


class TheorySection(_Section):
    """Gradient-flow verification of the stop-only model."""

    step: float = Field(default=1e-3, gt=0.0, description="Integrator step h")
    horizon: float = Field(default=200.0, gt=0.0, description="Integration horizon")
    theta0: float = Field(default=0.0, description="Initial logit of the stop probability")
    mu_min: float = Field(default=1.0, gt=0.0, description="Constant conditional step-reward mean")
    max_length: int = Field(default=10, ge=1, description="L_max of the stop-only model")


class CollapseSection(_Section):
    """Single-reward collapse demonstration runs with the standard estimator."""

    epochs: int = Field(default=10, ge=1, description="Epochs per demonstration run")
    updates_per_epoch: int = Field(default=50, ge=1, description="Gradient updates per epoch")
    batch_size: int = Field(default=8, ge=1, description="Inputs per update")
    samples_per_input: int = Field(default=8, ge=1, description="Sampled paths per input")
    learning_rate: float = Field(default=0.5, gt=0.0, description="Step size of the demonstration runs")
    kl_coeff: float = Field(default=0.0, ge=0.0, description="KL coefficient of the demonstration runs")
    final_window: int = Field(default=50, ge=1, description="Trailing updates averaged into the final metrics")


class OracleSection(_Section):
    """Brute-force enumeration checks."""

    budget: int = Field(default=1_000_000, ge=1, description="Maximum |items|^L_max * L_max work")
    n_items: int = Field(default=2, ge=2, description="Items in each toy configuration")
    max_length: int = Field(default=2, ge=1, description="L_max of each toy configuration")
    n_configs: int = Field(default=20, ge=1, description="Seeded toy configurations to check")


class Settings(BaseSettings):
    """pathguide-lab experiment configuration.

    Defaults follow the reference hyperparameters where they are stated:
    16 samples per input, KL coefficient 0.01, temperature 1, unit reward
    weights, batch size 128, L_max 10 and a 256-wide critic with loss
    coefficient 0.25 warmed up for 5 epochs.
    """

    catalog: CatalogSection = Field(default_factory=CatalogSection)
    simulator: SimulatorSection = Field(default_factory=SimulatorSection)
    policy: PolicySection = Field(default_factory=PolicySection)
    rewards: RewardsSection = Field(default_factory=RewardsSection)
    trainer: TrainerSection = Field(default_factory=TrainerSection)
    critic: CriticSection = Field(default_factory=CriticSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    theory: TheorySection = Field(default_factory=TheorySection)
    oracle: OracleSection = Field(default_factory=OracleSection)
    collapse: CollapseSection = Field(default_factory=CollapseSection)

    model_config = SettingsConfigDict(env_prefix="PATHGUIDE_", env_nested_delimiter="__", extra="forbid")

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON dump of every section.

        ``trainer.epochs`` is left out: it sets where a run stops, not its
        trajectory, so a resumed run keeps the hash of its checkpoint.
        """
        dump = self.model_dump(mode="json")
        dump["trainer"].pop("epochs")
        canonical = json.dumps(dump, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _parse_scalar(raw: str) -> Any:
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_override(data: dict[str, Any], assignment: str) -> None:
    """Apply one ``section.key=value`` override to a nested config dict.

    Raises:
        ConfigError: If the assignment is not of the form section.key=value.
    """
    if "=" not in assignment:
        raise ConfigError(f"Override must be section.key=value, got: {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    parts = dotted.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"Override key must be section.key, got: {dotted!r}")
    section, key = parts
    data.setdefault(section, {})
    if not isinstance(data[section], dict):
        raise ConfigError(f"Config section {section!r} is not a table")
    data[section][key] = _parse_scalar(raw.strip())


def load_settings(
    config_path: Path | None = None,
    overrides: list[str] | None = None,
    seed: int | None = None,
) -> Settings:
    """Build validated settings from a TOML file plus CLI overrides.

    Args:
        config_path: Optional TOML file with one table per section.
        overrides: ``section.key=value`` assignments applied after the file.
        seed: Replaces ``trainer.seed`` when given.

    Returns:
        Validated Settings instance.

    Raises:
        ConfigError: On unreadable files, malformed overrides or failed validation.
    """
    data: dict[str, Any] = {}
    if config_path is not None:
        try:
            data = tomllib.loads(config_path.read_text(encoding="utf-8"))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"Cannot read config {config_path}: {exc}") from exc
    for assignment in overrides or []:
        apply_override(data, assignment)
    if seed is not None:
        data.setdefault("trainer", {})["seed"] = seed
    try:
        return Settings(**data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid configuration: {exc}") from exc
