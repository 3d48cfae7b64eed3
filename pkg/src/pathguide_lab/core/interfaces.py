"""Protocol interfaces for pathguide-lab.

Structural subtypes for the pluggable pieces of the pipeline. Adapters
conform to these protocols, so tests can substitute stubs (for example an
oracular critic) without inheritance.
"""

from __future__ import annotations

from typing import Protocol, runtime_checkable

from pathguide_lab.core.models import FloatArray, PathSample


@runtime_checkable
class ValueEstimator(Protocol):
    """Per-decision value baseline V(phi_t, t) used by the A2C estimator."""

    def predict(self, inputs: FloatArray) -> FloatArray:
        """Return one value per input row."""
        ...

    def fit_step(self, inputs: FloatArray, targets: FloatArray) -> float:
        """Take one regression step toward ``targets``.

        Returns:
            The weighted loss before the step.
        """
        ...


@runtime_checkable
class FeasibilityOracle(Protocol):
    """Binary predicate on consecutive items gating demonstration mining."""

    def feasible(self, left: int, right: int) -> bool:
        """Whether ``right`` may follow ``left`` in a demonstration."""
        ...


@runtime_checkable
class PathRewardFunction(Protocol):
    """Scalar reward of a complete path, used by the exact oracle."""

    def __call__(self, sample: PathSample) -> float:
        ...
