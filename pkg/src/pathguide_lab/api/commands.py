"""Typer command surface for pathguide-lab.

All commands are thin: they resolve settings from the global options,
delegate to a service and write the resulting reports under the output
directory. Library errors are mapped to their exit codes.
"""

import json
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated

import typer

from pathguide_lab.adapters.catalog_env import save_catalog
from pathguide_lab.adapters.checkpoint import read_checkpoint, write_checkpoint
from pathguide_lab.adapters.exporters import model_to_json, rows_to_csv, write_bytes
from pathguide_lab.adapters.mining import save_demonstrations
from pathguide_lab.adapters.theory import export_trace_csv
from pathguide_lab.api.schemas import (
    CollapseRow,
    EpochMetrics,
    EstimatorComparisonRow,
    EstimatorKind,
    InputRolloutMax,
    OffsetSweepRow,
    OracleCheckRow,
    StepRewardProfileRow,
    UpdateMetrics,
    VarianceStudyRow,
)
from pathguide_lab.core.services import (
    STREAM_EVAL,
    STREAM_ROLLOUT_K,
    CollapseDemoService,
    EstimatorStudyService,
    EvaluationService,
    OracleCheckService,
    PretrainService,
    TheoryVerificationService,
    TrainingService,
    build_environment,
    policy_from_checkpoint,
    run_warmup,
)
from pathguide_lab.errors import AcceptanceCheckError, LabError, NumericalAbortError
from pathguide_lab.observability import configure_logging, get_logger
from pathguide_lab.settings import Settings, load_settings

logger = get_logger(__name__)

cli = typer.Typer(
    name="pathguide",
    help="Train and analyze path-guided recommendation policies.",
    no_args_is_help=True,
    add_completion=False,
)


@dataclass(frozen=True)
class CliContext:
    settings: Settings
    output_dir: Path

    def write(self, name: str, payload: bytes) -> Path:
        path = write_bytes(self.output_dir / name, payload)
        logger.info("artifact_written", path=str(path), size=len(payload))
        return path


@contextmanager
def lab_errors() -> Iterator[None]:
    """Translate library errors into a logged message and their exit code."""
    try:
        yield
    except LabError as exc:
        logger.error("command_failed", error_type=type(exc).__name__, message=str(exc))
        typer.echo(f"error: {exc}", err=True)
        raise typer.Exit(code=exc.exit_code) from exc


def _context(ctx: typer.Context) -> CliContext:
    state: CliContext = ctx.obj
    return state


# ============================================================================
# Global options
# ============================================================================


@cli.callback()
def configure(
    ctx: typer.Context,
    config: Annotated[Path | None, typer.Option("--config", help="TOML configuration file")] = None,
    overrides: Annotated[
        list[str] | None,
        typer.Option("--set", help="Override one setting as section.key=value (repeatable)"),
    ] = None,
    seed: Annotated[int | None, typer.Option("--seed", help="Replace trainer.seed")] = None,
    output_dir: Annotated[Path, typer.Option("--output-dir", help="Directory for reports")] = Path("runs"),
    log_level: Annotated[str, typer.Option("--log-level", help="DEBUG, INFO, WARNING or ERROR")] = "INFO",
    json_logs: Annotated[bool, typer.Option("--json-logs", help="Emit JSON log lines")] = False,
) -> None:
    """Load settings once for the invoked command."""
    configure_logging(log_level, json_logs)
    with lab_errors():
        settings = load_settings(config, overrides, seed)
    logger.info("settings_loaded", config_hash=settings.config_hash(), output_dir=str(output_dir))
    ctx.obj = CliContext(settings=settings, output_dir=output_dir)


# ============================================================================
# Pipeline commands
# ============================================================================


@cli.command()
def mine(ctx: typer.Context) -> None:
    """Mine demonstrations from the training users."""
    state = _context(ctx)
    with lab_errors():
        env = build_environment(state.settings)
        demos, report = PretrainService(state.settings).mine(env)
        state.write("catalog.txt", save_catalog(env.catalog).encode("utf-8"))
        state.write("demonstrations.tsv", save_demonstrations(demos).encode("utf-8"))
        state.write("mining.json", model_to_json(report))
    typer.echo(f"{report.n_demonstrations} demonstrations from {report.n_train_users} users")


@cli.command()
def pretrain(ctx: typer.Context) -> None:
    """Mine demonstrations, fit the prior and evaluate it on held-out users."""
    state = _context(ctx)
    settings = state.settings
    with lab_errors():
        env = build_environment(settings)
        service = PretrainService(settings)
        demos, report = service.mine(env)
        prior = service.pretrain(env, demos)
        evaluation = EvaluationService(env.simulator, settings.policy.max_length).evaluate(
            prior,
            env.test_inputs[: settings.trainer.eval_inputs],
            [settings.trainer.seed, STREAM_EVAL],
            greedy=settings.trainer.greedy_eval,
        )
        write_checkpoint(service.checkpoint(env, prior), state.output_dir / "prior.ckpt")
        state.write("mining.json", model_to_json(report))
        state.write("pretrain_eval.json", model_to_json(evaluation))
    typer.echo(f"prior IoI={evaluation.ioi:.4f} CTR={evaluation.ctr:.4f} length={evaluation.mean_length:.2f}")


@cli.command()
def warmup(
    ctx: typer.Context,
    prior_path: Annotated[Path | None, typer.Option("--prior", help="Checkpoint holding the prior")] = None,
) -> None:
    """Collect warm-up rollouts from the prior and write the frozen reward statistics."""
    state = _context(ctx)
    with lab_errors():
        service = TrainingService(state.settings)
        env = service.environment
        if prior_path is not None:
            prior = policy_from_checkpoint(read_checkpoint(prior_path), env, use_prior=True)
        else:
            prior = service.prior()
        stats = run_warmup(state.settings, prior, env)
        state.write("reward_stats.json", model_to_json(stats))
    typer.echo(f"mean={stats.mean} std={stats.std} count={stats.count}")


@cli.command()
def train(
    ctx: typer.Context,
    prior_path: Annotated[Path | None, typer.Option("--prior", help="Checkpoint holding the prior")] = None,
    resume: Annotated[Path | None, typer.Option("--resume", help="Checkpoint to continue from")] = None,
) -> None:
    """Train the guide policy and write per-epoch metrics, a summary and a checkpoint."""
    state = _context(ctx)
    with lab_errors():
        service = TrainingService(state.settings)
        if prior_path is not None:
            service = TrainingService(
                state.settings,
                service.environment,
                policy_from_checkpoint(read_checkpoint(prior_path), service.environment, use_prior=True),
            )
        checkpoint = read_checkpoint(resume) if resume is not None else None
        try:
            result = service.train(checkpoint)
        except NumericalAbortError as exc:
            state.write("abort.json", (json.dumps(exc.diagnostic, sort_keys=True, indent=2) + "\n").encode("utf-8"))
            raise
        state.write("epochs.csv", rows_to_csv(result.epochs, EpochMetrics))
        state.write("updates.csv", rows_to_csv(result.updates, UpdateMetrics))
        state.write("summary.json", model_to_json(result.summary))
        write_checkpoint(result.checkpoint, state.output_dir / "checkpoint.ckpt")
    summary = result.summary
    typer.echo(
        f"{summary.epochs_completed} epochs: length={summary.final_mean_length:.2f} IoI={summary.final_eval_ioi:.4f}",
    )


@cli.command("eval")
def evaluate(
    ctx: typer.Context,
    checkpoint_path: Annotated[Path, typer.Option("--checkpoint", help="Checkpoint to evaluate")],
    greedy: Annotated[bool, typer.Option("--greedy", help="Argmax decoding instead of sampling")] = False,
) -> None:
    """Evaluate a checkpoint's policy on held-out users."""
    state = _context(ctx)
    settings = state.settings
    with lab_errors():
        env = build_environment(settings)
        policy = policy_from_checkpoint(read_checkpoint(checkpoint_path), env)
        report = EvaluationService(env.simulator, settings.policy.max_length).evaluate(
            policy,
            env.test_inputs[: settings.trainer.eval_inputs],
            [settings.trainer.seed, STREAM_EVAL],
            greedy=greedy,
        )
        state.write("eval.json", model_to_json(report))
    typer.echo(f"IoI={report.ioi:.4f} IoR={report.ior:.2f} CTR={report.ctr:.4f} length={report.mean_length:.2f}")


@cli.command("rollout-at-k")
def rollout_at_k(
    ctx: typer.Context,
    checkpoint_path: Annotated[Path, typer.Option("--checkpoint", help="Checkpoint to evaluate")],
    ks: Annotated[list[int] | None, typer.Option("--k", help="Sample counts K (repeatable)")] = None,
) -> None:
    """Best-of-K IoI and IoR on held-out users."""
    state = _context(ctx)
    settings = state.settings
    with lab_errors():
        env = build_environment(settings)
        policy = policy_from_checkpoint(read_checkpoint(checkpoint_path), env)
        evaluator = EvaluationService(env.simulator, settings.policy.max_length)
        inputs = env.test_inputs[: settings.trainer.eval_inputs]
        for k in ks or [settings.trainer.rollout_k]:
            report = evaluator.rollout_at_k(policy, inputs, k, [settings.trainer.seed, STREAM_ROLLOUT_K])
            state.write(f"rollout_at_{k}.json", model_to_json(report))
            state.write(f"rollout_at_{k}.csv", rows_to_csv(report.per_input, InputRolloutMax))
            typer.echo(f"K={k}: max IoI={report.mean_max_ioi:.4f} max IoR={report.mean_max_ior:.2f}")


# ============================================================================
# Studies
# ============================================================================


@cli.command("collapse-demo")
def collapse_demo(
    ctx: typer.Context,
    raw_only: Annotated[bool, typer.Option("--raw-only", help="Skip the normalized counterpart runs")] = False,
) -> None:
    """Single-reward runs with the standard estimator, raw and normalized."""
    state = _context(ctx)
    with lab_errors():
        report = CollapseDemoService(state.settings).run(centered_pair=not raw_only)
        state.write("collapse.csv", rows_to_csv(report.rows, CollapseRow))
        state.write("step_profile.csv", rows_to_csv(report.profile, StepRewardProfileRow))
        state.write("collapse_summary.json", model_to_json(report))
    for run, length in sorted(report.final_mean_length.items()):
        typer.echo(f"{run}: final length={length:.2f} pooled E[r_t]={report.pooled_mean_step_reward[run]:.4f}")


@cli.command("compare-estimators")
def compare_estimators(
    ctx: typer.Context,
    estimators: Annotated[
        list[EstimatorKind] | None,
        typer.Option("--estimator", help="Estimator to include (repeatable); all when omitted"),
    ] = None,
) -> None:
    """Train once per estimator and tabulate length and normalized advantage variance."""
    state = _context(ctx)
    with lab_errors():
        rows = EstimatorStudyService(state.settings).compare_estimators(estimators or list(EstimatorKind))
        state.write("estimators.csv", rows_to_csv(rows, EstimatorComparisonRow))
    typer.echo(f"{len(rows)} rows written")


@cli.command("offset-sweep")
def offset_sweep(
    ctx: typer.Context,
    epsilons: Annotated[list[float], typer.Option("--epsilon", help="Offset to sweep (repeatable)")],
) -> None:
    """Fixed-offset centering runs, one per epsilon."""
    state = _context(ctx)
    with lab_errors():
        rows = EstimatorStudyService(state.settings).offset_sweep(epsilons)
        state.write("offset_sweep.csv", rows_to_csv(rows, OffsetSweepRow))
    typer.echo(f"{len(rows)} rows written")


@cli.command("variance-study")
def variance_study(
    ctx: typer.Context,
    estimators: Annotated[
        list[EstimatorKind] | None,
        typer.Option("--estimator", help="Estimator to measure (repeatable); all critic-free ones when omitted"),
    ] = None,
    batches: Annotated[int, typer.Option("--batches", min=2, help="Repeated batches drawn at the prior")] = 200,
) -> None:
    """Advantage-weight variance per estimator at the prior, relative to std."""
    state = _context(ctx)
    kinds = estimators or [kind for kind in EstimatorKind if kind is not EstimatorKind.A2C]
    with lab_errors():
        rows = EstimatorStudyService(state.settings).variance_study(kinds, batches)
        state.write("variance_study.csv", rows_to_csv(rows, VarianceStudyRow))
    for row in rows:
        typer.echo(f"{row.estimator.value}: variance={row.mean_variance:.4f} ratio={row.ratio_to_std:.3f}")


# ============================================================================
# Verification
# ============================================================================


@cli.command("theory-verify")
def theory_verify(ctx: typer.Context) -> None:
    """Integrate the stop-only gradient flow over the check grid and test the length bound."""
    state = _context(ctx)
    with lab_errors():
        service = TheoryVerificationService(state.settings)
        grid = service.verify_grid()
        trace, bound = service.default_trace_report()
        state.write("theory_grid.json", model_to_json(grid))
        state.write("theory_bound.json", model_to_json(bound))
        state.write("theory_trace.csv", export_trace_csv(trace, state.settings.theory.mu_min).encode("utf-8"))
        typer.echo(f"{len(grid.points)} grid points, passed={grid.passed}")
        if not grid.passed:
            raise AcceptanceCheckError("Gradient-flow verification failed on at least one grid point")


@cli.command("oracle-check")
def oracle_check(ctx: typer.Context) -> None:
    """Compare the enumerated exact gradient with finite differences on toy catalogs."""
    state = _context(ctx)
    with lab_errors():
        report = OracleCheckService(state.settings).run()
        state.write("oracle_check.csv", rows_to_csv(report.rows, OracleCheckRow))
        state.write("oracle_check.json", model_to_json(report))
        worst = max(row.relative_error for row in report.rows)
        typer.echo(f"{len(report.rows)} configurations, worst relative error={worst:.3e}")
        if not report.passed:
            raise AcceptanceCheckError(f"Exact gradient disagrees with finite differences (worst {worst:.3e})")
