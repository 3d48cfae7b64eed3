"""Pydantic schemas and enums for pathguide-lab.

Report schemas are what the CLI serializes to JSON summaries and CSV rows;
field order is the column order.
"""

from __future__ import annotations

from enum import Enum

from pydantic import BaseModel, Field

# ============================================================================
# Enums
# ============================================================================


class EstimatorKind(str, Enum):
    """Policy-gradient estimator selected for training."""

    STD = "std"  # whole-path return on every step
    RTG = "rtg"  # reward-to-go
    GRPO = "grpo"  # path-level group baseline
    A2C = "a2c"  # learned value baseline
    PRORL = "prorl"  # position-specific group baseline on reward-to-go


class CenteringKind(str, Enum):
    """How step rewards are shifted and scaled before estimation."""

    RAW = "raw"
    CENTER = "center"
    NORMALIZE = "normalize"
    FIXED_OFFSET = "fixed_offset"


class RewardComponent(str, Enum):
    """Path reward components, in column order of step-reward arrays."""

    IOI = "ioi"
    IOR = "ior"
    CTR = "ctr"


class BoundStatus(str, Enum):
    """Outcome of the O(1/s) bound check on a flow trace."""

    HOLDS = "holds"
    VIOLATED = "violated"
    INCONCLUSIVE = "inconclusive"


# ============================================================================
# Training metrics
# ============================================================================


class UpdateMetrics(BaseModel):
    """Diagnostics of a single gradient update."""

    epoch: int
    update: int
    mean_length: float
    path_diversity: float = Field(ge=0.0, le=1.0)
    mean_reward: float
    advantage_variance: float
    mean_kl: float


class EpochMetrics(BaseModel):
    """One CSV row per training epoch."""

    epoch: int
    mean_length: float
    path_diversity: float = Field(ge=0.0, le=1.0)
    cross_input_diversity: float = Field(ge=0.0, le=1.0)
    mean_reward: float
    advantage_variance: float
    advantage_variance_normalized: float
    mean_kl: float
    eval_mean_length: float
    eval_ctr: float
    eval_ioi: float
    eval_ior: float
    eval_coherence: float
    eval_empty_fraction: float = Field(ge=0.0, le=1.0)


class TrainingSummary(BaseModel):
    """Machine-readable JSON summary of a training run."""

    config_hash: str
    estimator: EstimatorKind
    centering: CenteringKind
    epochs_completed: int
    updates: int
    final_mean_length: float
    final_eval_ioi: float
    final_eval_ctr: float
    pretrain_eval_ioi: float
    pretrain_eval_ctr: float


# ============================================================================
# Evaluation
# ============================================================================


class EvaluationReport(BaseModel):
    """Held-out guidance metrics.

    Empty paths count as zero IoI/IoR and are excluded from the CTR and
    Coherence means; a fully empty evaluation reports zeros for those.
    """

    n_inputs: int
    greedy: bool
    mean_length: float
    ctr: float
    coherence: float
    ioi: float
    ior: float
    empty_fraction: float = Field(ge=0.0, le=1.0)


class InputRolloutMax(BaseModel):
    """Best IoI and IoR over K sampled paths for one input (maxima taken independently)."""

    input_index: int
    max_ioi: float
    max_ior: float


class RolloutAtKReport(BaseModel):
    """Rollout@K aggregate over inputs."""

    k: int
    mean_max_ioi: float
    mean_max_ior: float
    per_input: list[InputRolloutMax]


# ============================================================================
# Estimator studies
# ============================================================================


class EstimatorComparisonRow(BaseModel):
    """Per-epoch row of the estimator ablation."""

    estimator: EstimatorKind
    epoch: int
    mean_length: float
    advantage_variance_normalized: float


class OffsetSweepRow(BaseModel):
    """Per-epoch mean length for one fixed-offset epsilon."""

    epsilon: float
    epoch: int
    mean_length: float


class VarianceStudyRow(BaseModel):
    """Per-decision weight variance of one estimator over repeated batches at the prior."""

    estimator: EstimatorKind
    n_batches: int
    mean_variance: float
    standard_error: float
    ratio_to_std: float


class CollapseRow(BaseModel):
    """One update of a collapse-demo run."""

    run: str
    update: int
    mean_length: float
    path_diversity: float = Field(ge=0.0, le=1.0)


class StepRewardProfileRow(BaseModel):
    """Pooled mean step reward at one position of a collapse-demo run."""

    run: str
    position: int
    mean_step_reward: float
    count: int


class CollapseDemoReport(BaseModel):
    """Dynamics and step-reward profiles of the single-reward runs.

    Final length and diversity are means over the last ``final_window`` updates of each run.
    """

    rows: list[CollapseRow]
    profile: list[StepRewardProfileRow]
    pooled_mean_step_reward: dict[str, float]
    final_mean_length: dict[str, float]
    final_diversity: dict[str, float]
    final_window: int


# ============================================================================
# Verification
# ============================================================================


class BoundReport(BaseModel):
    """Result of checking p(s) <= 4 / (mu_min (s - S0)) along a trace."""

    status: BoundStatus
    holds: bool
    max_violation: float = Field(description="max over checked points of p(s) - bound(s); <= 0 when the bound holds")
    worst_time: float | None = None
    first_violation_time: float | None = None
    s0: float | None = None
    checked_points: int = 0


class GridPointReport(BaseModel):
    """Flow verification at one (mu_min, L_max, theta0) grid point."""

    mu_min: float
    max_length: int
    theta0: float
    bound: BoundReport
    strictly_decreasing: bool
    derivative_bound_holds: bool
    max_derivative: float


class GridReport(BaseModel):
    """All grid points of a theory verification."""

    passed: bool
    points: list[GridPointReport]


class OracleCheckRow(BaseModel):
    """Exact-gradient versus finite-difference comparison on one toy configuration."""

    config_index: int
    seed: int
    n_paths: int
    probability_mass: float
    relative_error: float
    passed: bool


class OracleCheckReport(BaseModel):
    """Summary of the oracle gradient check."""

    passed: bool
    tolerance: float
    rows: list[OracleCheckRow]


class MiningReport(BaseModel):
    """Counts from mining synthetic user sequences."""

    n_users: int
    n_train_users: int
    n_demonstrations: int
    mean_demo_length: float
    oracle_calls: int
