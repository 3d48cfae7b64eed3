"""Length-collapse analysis of the stop-only model.

With fixed conditional step-reward means mu_t, the return of a policy that
stops with probability p after each item is

    J(p) = sum_{t=1}^{L_max} mu_t (1 - p)^(t-1),

and gradient flow on the stop logit theta follows
dtheta/ds = dJ/dp * p (1 - p). When every mu_t >= mu_min > 0 the stop
probability decreases monotonically and, once p <= 1/2 at time S0,
p(s) <= 4 / (mu_min (s - S0)).
"""

from __future__ import annotations

import csv
import io
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial
from scipy.special import expit

from pathguide_lab.adapters.policy import StopOnlyModel
from pathguide_lab.api.schemas import BoundReport, BoundStatus, GridPointReport, GridReport
from pathguide_lab.core.models import FloatArray, frozen_array
from pathguide_lab.errors import IntegrationError, ParameterError
from pathguide_lab.observability import get_logger

logger = get_logger(__name__)

BOUND_CONSTANT = 4.0
DERIVATIVE_SAMPLE_POINTS = 1000


def _check_p(p: float) -> None:
    if not 0.0 < p < 1.0:
        raise ParameterError(f"p must lie in (0, 1), got {p}")


def _mu_array(mu: Sequence[float], max_length: int) -> FloatArray:
    values = np.asarray(mu, dtype=np.float64)
    if values.shape != (max_length,):
        raise ParameterError(f"mu needs {max_length} entries, got {values.shape}")
    return values


def _derivative_coefficients(mu: FloatArray) -> FloatArray:
    """Coefficients c_k of dJ/dp = sum_k c_k q^k with q = 1 - p."""
    t = np.arange(2, mu.shape[0] + 1, dtype=np.float64)
    return np.asarray(-(t - 1.0) * mu[1:], dtype=np.float64)


def expected_return(p: float, mu: Sequence[float], max_length: int) -> float:
    """J(p) = sum_t mu_t (1 - p)^(t-1).

    Raises:
        ParameterError: If p is outside (0, 1) or mu has the wrong length.
    """
    _check_p(p)
    return float(polynomial.polyval(1.0 - p, _mu_array(mu, max_length)))


def dJ_dp(p: float, mu: Sequence[float], max_length: int) -> float:  # noqa: N802
    """dJ/dp = -sum_{t>=2} (t-1) mu_t (1 - p)^(t-2); zero when L_max = 1."""
    _check_p(p)
    coefficients = _derivative_coefficients(_mu_array(mu, max_length))
    if coefficients.size == 0:
        return 0.0
    return float(polynomial.polyval(1.0 - p, coefficients))


def expected_length(p: float, max_length: int) -> float:
    """E[tau] = sum_{t=1}^{L_max} (1 - p)^(t-1)."""
    _check_p(p)
    return float(polynomial.polyval(1.0 - p, np.ones(max_length)))


@dataclass(frozen=True, eq=False)
class FlowTrace:
    """Gradient-flow trajectory (s, theta(s), p(s)).

    ``s0`` is the first recorded time with p <= 1/2, or None if never reached.
    """

    times: FloatArray
    theta: FloatArray
    p: FloatArray
    s0: float | None
    step: float

    def __post_init__(self) -> None:
        for name in ("times", "theta", "p"):
            object.__setattr__(self, name, frozen_array(getattr(self, name)))

    @property
    def final_p(self) -> float:
        return float(self.p[-1])

    def strictly_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.p) < 0.0))


def integrate_flow(
    theta0: float,
    mu: Sequence[float],
    max_length: int,
    step: float,
    horizon: float,
) -> FlowTrace:
    """Integrate dtheta/ds = dJ/dp * p (1 - p) with classical fourth-order Runge-Kutta.

    Times are ``k * step`` for ``k = 0..round(horizon / step)``.

    Raises:
        ParameterError: If ``step`` or ``horizon`` is not positive.
        IntegrationError: If the state becomes non-finite.
    """
    if not step > 0.0 or not horizon > 0.0:
        raise ParameterError(f"step and horizon must be > 0, got step={step}, horizon={horizon}")
    coefficients = [float(c) for c in _derivative_coefficients(_mu_array(mu, max_length))][::-1]

    def field(theta: float) -> float:
        p = float(expit(theta))
        q = 1.0 - p
        slope = 0.0
        for c in coefficients:
            slope = slope * q + c
        return slope * p * q

    n_steps = int(round(horizon / step))
    thetas = np.empty(n_steps + 1, dtype=np.float64)
    theta = float(theta0)
    thetas[0] = theta
    half = 0.5 * step
    for k in range(1, n_steps + 1):
        k1 = field(theta)
        k2 = field(theta + half * k1)
        k3 = field(theta + half * k2)
        k4 = field(theta + step * k3)
        theta = theta + step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not math.isfinite(theta):
            diagnostic = {"step_index": k, "time": k * step, "previous_theta": float(thetas[k - 1])}
            logger.error("flow_integration_diverged", **diagnostic)
            raise IntegrationError(f"Non-finite theta at s={k * step}", diagnostic)
        thetas[k] = theta

    times = np.arange(n_steps + 1, dtype=np.float64) * step
    p = np.asarray(expit(thetas), dtype=np.float64)
    reached = np.flatnonzero(p <= 0.5)
    s0 = float(times[reached[0]]) if reached.size else None
    return FlowTrace(times=times, theta=thetas, p=p, s0=s0, step=step)


def bound_values(trace: FlowTrace, mu_min: float) -> FloatArray:
    """4 / (mu_min (s - S0)) at every trace time, NaN where s <= S0 + h."""
    bound = np.full_like(trace.times, np.nan)
    if trace.s0 is None:
        return bound
    mask = trace.times > trace.s0 + trace.step
    bound[mask] = BOUND_CONSTANT / (mu_min * (trace.times[mask] - trace.s0))
    return bound


def verify_bound(trace: FlowTrace, mu_min: float) -> BoundReport:
    """Check p(s) <= 4 / (mu_min (s - S0)) at every recorded s > S0 + h.

    Returns an inconclusive report when p never drops to 1/2 or no point
    lies past S0 + h.
    """
    if not mu_min > 0.0:
        raise ParameterError(f"mu_min must be > 0, got {mu_min}")
    bound = bound_values(trace, mu_min)
    mask = ~np.isnan(bound)
    if trace.s0 is None or not mask.any():
        return BoundReport(
            status=BoundStatus.INCONCLUSIVE,
            holds=False,
            max_violation=float("nan"),
            s0=trace.s0,
        )
    slack = trace.p[mask] - bound[mask]
    times = trace.times[mask]
    worst = int(np.argmax(slack))
    violated = np.flatnonzero(slack > 0.0)
    holds = violated.size == 0
    return BoundReport(
        status=BoundStatus.HOLDS if holds else BoundStatus.VIOLATED,
        holds=holds,
        max_violation=float(slack[worst]),
        worst_time=float(times[worst]),
        first_violation_time=None if holds else float(times[violated[0]]),
        s0=trace.s0,
        checked_points=int(mask.sum()),
    )


def max_derivative_on_grid(mu: Sequence[float], max_length: int, points: int = DERIVATIVE_SAMPLE_POINTS) -> float:
    """Largest dJ/dp over ``points`` interior samples of (0, 1)."""
    coefficients = _derivative_coefficients(_mu_array(mu, max_length))
    if coefficients.size == 0:
        return 0.0
    p = np.linspace(0.0, 1.0, points + 2)[1:-1]
    return float(np.max(polynomial.polyval(1.0 - p, coefficients)))


def verify_grid(
    mu_mins: Sequence[float],
    max_lengths: Sequence[int],
    theta0s: Sequence[float],
    step: float,
    horizon: float,
) -> GridReport:
    """Bound, monotonicity and derivative checks over a parameter grid with constant mu."""
    points: list[GridPointReport] = []
    for mu_min in mu_mins:
        for max_length in max_lengths:
            mu = [mu_min] * max_length
            max_derivative = max_derivative_on_grid(mu, max_length)
            derivative_ok = max_length < 2 or max_derivative <= -mu_min
            for theta0 in theta0s:
                trace = integrate_flow(theta0, mu, max_length, step, horizon)
                report = verify_bound(trace, mu_min)
                points.append(
                    GridPointReport(
                        mu_min=mu_min,
                        max_length=max_length,
                        theta0=theta0,
                        bound=report,
                        strictly_decreasing=trace.strictly_decreasing(),
                        derivative_bound_holds=derivative_ok,
                        max_derivative=max_derivative,
                    ),
                )
                logger.info(
                    "grid_point_verified",
                    mu_min=mu_min,
                    max_length=max_length,
                    theta0=theta0,
                    status=report.status.value,
                    max_violation=report.max_violation,
                )
    passed = all(
        point.bound.holds and point.strictly_decreasing and point.derivative_bound_holds for point in points
    )
    return GridReport(passed=passed, points=points)


def export_trace_csv(trace: FlowTrace, mu_min: float, every: int = 1) -> str:
    """CSV text with columns s, theta, p, bound (empty bound before S0 + h)."""
    bound = bound_values(trace, mu_min)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["s", "theta", "p", "bound"])
    for k in range(0, trace.times.shape[0], max(every, 1)):
        value = bound[k]
        writer.writerow(
            [repr(float(trace.times[k])), repr(float(trace.theta[k])), repr(float(trace.p[k])),
             "" if np.isnan(value) else repr(float(value))],
        )
    return buffer.getvalue()


# ============================================================================
# Discrete REINFORCE on the stop-only model
# ============================================================================


@dataclass(frozen=True, eq=False)
class StopOnlyRun:
    """Per-update trajectory of discrete REINFORCE on the stop-only model."""

    theta: FloatArray
    p: FloatArray
    expected_length: FloatArray
    empirical_length: FloatArray

    @property
    def length_drift(self) -> float:
        return float(self.expected_length[-1] - self.expected_length[0])


def simulate_stop_only_training(
    model: StopOnlyModel,
    reward_mean: float,
    reward_spread: float,
    lr: float,
    updates: int,
    batch_size: int,
    rng: np.random.Generator,
) -> StopOnlyRun:
    """Standard REINFORCE on the stop logit with i.i.d. step rewards.

    Each path emits its first item, then after every item t < L_max stops
    with probability p. Every emitted item earns ``reward_mean`` plus
    symmetric noise of +-``reward_spread``. The score of a continue decision
    is -p and of a stop decision 1 - p; the update is
    ``theta += lr * mean(score_sum * R)``.

    Entry 0 of every recorded array is the initial state.
    """
    if updates < 0 or batch_size < 1:
        raise ParameterError(f"need updates >= 0 and batch_size >= 1, got {updates}, {batch_size}")
    theta = model.theta
    max_length = model.max_length
    thetas = [theta]
    empirical = [float("nan")]
    for _ in range(updates):
        p = float(expit(theta))
        lengths = np.minimum(rng.geometric(p, size=batch_size), max_length)
        signs = rng.choice((-1.0, 1.0), size=(batch_size, max_length))
        rewards = reward_mean + reward_spread * signs
        positions = np.arange(1, max_length + 1)
        returns = np.where(positions[None, :] <= lengths[:, None], rewards, 0.0).sum(axis=1)
        stopped = lengths < max_length
        scores = -(lengths - 1) * p + np.where(stopped, 1.0 - p, 0.0)
        theta = theta + lr * float(np.mean(scores * returns))
        thetas.append(theta)
        empirical.append(float(np.mean(lengths)))
    theta_array = np.array(thetas, dtype=np.float64)
    p_array = np.asarray(expit(theta_array), dtype=np.float64)
    q = 1.0 - p_array
    expected = np.array([polynomial.polyval(qk, np.ones(max_length)) for qk in q], dtype=np.float64)
    return StopOnlyRun(
        theta=theta_array,
        p=p_array,
        expected_length=expected,
        empirical_length=np.array(empirical, dtype=np.float64),
    )
