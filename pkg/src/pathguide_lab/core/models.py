"""Domain records shared across pathguide-lab adapters.

Records holding numpy arrays are frozen dataclasses whose arrays are marked
read-only on construction, so a record can be shared freely once built.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import TypeAlias

import numpy as np
from numpy.typing import NDArray

from pathguide_lab.errors import ParameterError, UnknownItemError

FloatArray: TypeAlias = NDArray[np.float64]
IntArray: TypeAlias = NDArray[np.int64]
BoolArray: TypeAlias = NDArray[np.bool_]

InteractionHistory: TypeAlias = Sequence[int]
"""Ordered item ids a user interacted with; may be empty."""

EMBEDDING_NORM_TOLERANCE = 1e-9


def frozen_array(values: NDArray[np.generic] | Sequence[float], dtype: type = np.float64) -> NDArray[np.generic]:
    """Return a C-contiguous read-only copy of ``values``."""
    array = np.array(values, dtype=dtype, order="C", copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Item:
    """Catalog item with its attribute set (genres, bridge attributes)."""

    id: int
    attributes: frozenset[int]

    def __post_init__(self) -> None:
        if not self.attributes:
            raise ParameterError(f"Item {self.id} has no attributes")


@dataclass(frozen=True, eq=False)
class Catalog:
    """Ordered item list with one unit-norm embedding row per item."""

    items: tuple[Item, ...]
    embeddings: FloatArray
    _index: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.items) < 2:
            raise ParameterError(f"Catalog needs at least 2 items, got {len(self.items)}")
        index = {item.id: row for row, item in enumerate(self.items)}
        if len(index) != len(self.items):
            raise ParameterError("Catalog item ids must be unique")
        embeddings = frozen_array(self.embeddings)
        if embeddings.ndim != 2 or embeddings.shape[0] != len(self.items):
            raise ParameterError(
                f"Embeddings must have shape ({len(self.items)}, d), got {embeddings.shape}",
            )
        norms = np.linalg.norm(embeddings, axis=1)
        if not np.all(np.abs(norms - 1.0) <= EMBEDDING_NORM_TOLERANCE):
            raise ParameterError("Catalog embeddings must be unit-normalized")
        object.__setattr__(self, "embeddings", embeddings)
        object.__setattr__(self, "_index", index)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def embedding_dim(self) -> int:
        return int(self.embeddings.shape[1])

    @property
    def item_ids(self) -> IntArray:
        return np.array([item.id for item in self.items], dtype=np.int64)

    def index_of(self, item_id: int) -> int:
        """Row of ``item_id`` in ``items`` and ``embeddings``.

        Raises:
            UnknownItemError: If the id is not in the catalog.
        """
        try:
            return self._index[int(item_id)]
        except KeyError:
            raise UnknownItemError(item_id) from None

    def __contains__(self, item_id: object) -> bool:
        return isinstance(item_id, int | np.integer) and int(item_id) in self._index

    def item(self, item_id: int) -> Item:
        return self.items[self.index_of(item_id)]

    def embedding(self, item_id: int) -> FloatArray:
        return self.embeddings[self.index_of(item_id)]

    def attributes(self, item_id: int) -> frozenset[int]:
        return self.items[self.index_of(item_id)].attributes


@dataclass(frozen=True)
class PathSample:
    """One sampled guidance path with the log-probability of every realized decision.

    ``actions`` holds policy action indices (catalog rows, STOP last). When the
    path ended with STOP, ``actions`` and ``log_probs`` have ``len(items) + 1``
    entries; a truncated path has exactly ``len(items)``.
    """

    items: tuple[int, ...]
    actions: tuple[int, ...]
    log_probs: tuple[float, ...]
    truncated: bool
    history: tuple[int, ...]
    target: int
    input_index: int = 0
    sample_index: int = 0

    def __post_init__(self) -> None:
        expected = len(self.items) if self.truncated else len(self.items) + 1
        if len(self.actions) != expected or len(self.log_probs) != expected:
            raise ParameterError(
                f"Path with {len(self.items)} items (truncated={self.truncated}) needs {expected} decisions",
            )
        if not all(np.isfinite(self.log_probs)):
            raise ParameterError("Path log-probabilities must be finite")

    @property
    def length(self) -> int:
        return len(self.items)

    @property
    def stopped(self) -> bool:
        return not self.truncated

    @property
    def n_decisions(self) -> int:
        return len(self.actions)

    @property
    def log_prob(self) -> float:
        return float(sum(self.log_probs))


@dataclass(frozen=True)
class GuidanceInput:
    """A user history paired with the item the path should steer toward."""

    history: tuple[int, ...]
    target: int
    user_id: int = -1


@dataclass(frozen=True)
class RawSequence:
    """A user's full interaction sequence."""

    user_id: int
    items: tuple[int, ...]


@dataclass(frozen=True)
class Demonstration:
    """Mined expert path ending at its goal, plus the history preceding it."""

    path: tuple[int, ...]
    goal: int
    history: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if len(self.path) < 2:
            raise ParameterError(f"Demonstration path needs more than one item, got {self.path}")
        if self.goal != self.path[-1]:
            raise ParameterError(f"Demonstration goal {self.goal} must be the last path item {self.path[-1]}")
