"""Synthetic item catalog and deterministic user simulator.

The simulator scores every item against a recency-weighted context of the
user's history and turns the scores into acceptance probabilities with a
softmax. Probabilities and ranks are computed from one shared log-softmax so
``prob`` and ``rank`` always agree.
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_softmax

from pathguide_lab.core.models import Catalog, FloatArray, InteractionHistory, Item
from pathguide_lab.errors import CheckpointFormatError, ParameterError
from pathguide_lab.observability import get_logger

logger = get_logger(__name__)

CATALOG_FORMAT_HEADER = "pathguide-catalog v1"


def generate_catalog(
    seed: int,
    n_items: int,
    n_attributes: int,
    attrs_per_item: int,
    embedding_dim: int,
) -> Catalog:
    """Generate a seeded synthetic catalog.

    Item ids are ``0..n_items-1``. Each item draws ``attrs_per_item``
    attributes without replacement and an isotropic Gaussian embedding that
    is then unit-normalized.

    Args:
        seed: Generator seed; equal seeds give byte-identical catalogs.
        n_items: Number of items, at least 2.
        n_attributes: Attribute vocabulary size.
        attrs_per_item: Attributes per item, in ``[1, n_attributes]``.
        embedding_dim: Embedding dimension, at least 1.

    Returns:
        The generated Catalog.

    Raises:
        ParameterError: If any size is out of range.
    """
    if n_items < 2:
        raise ParameterError(f"n_items must be >= 2, got {n_items}")
    if not 1 <= attrs_per_item <= n_attributes:
        raise ParameterError(f"attrs_per_item must be in [1, {n_attributes}], got {attrs_per_item}")
    if embedding_dim < 1:
        raise ParameterError(f"embedding_dim must be >= 1, got {embedding_dim}")

    rng = np.random.default_rng(seed)
    items = tuple(
        Item(id=item_id, attributes=frozenset(int(a) for a in rng.choice(n_attributes, attrs_per_item, replace=False)))
        for item_id in range(n_items)
    )
    raw = rng.standard_normal((n_items, embedding_dim))
    embeddings = raw / np.linalg.norm(raw, axis=1, keepdims=True)

    logger.debug("catalog_generated", seed=seed, n_items=n_items, embedding_dim=embedding_dim)
    return Catalog(items=items, embeddings=embeddings)


def save_catalog(catalog: Catalog) -> str:
    """Serialize a catalog to the versioned text format.

    One line per item: ``id<TAB>attr,attr<TAB>e1 e2 ...`` with floats in
    shortest round-trip form.
    """
    lines = [CATALOG_FORMAT_HEADER]
    for item, embedding in zip(catalog.items, catalog.embeddings, strict=True):
        attributes = ",".join(str(a) for a in sorted(item.attributes))
        values = " ".join(repr(float(v)) for v in embedding)
        lines.append(f"{item.id}\t{attributes}\t{values}")
    return "\n".join(lines) + "\n"


def load_catalog(text: str) -> Catalog:
    """Parse a catalog written by ``save_catalog``.

    Raises:
        CheckpointFormatError: On an unknown header or a malformed record.
    """
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or lines[0].strip() != CATALOG_FORMAT_HEADER:
        raise CheckpointFormatError(f"Expected header {CATALOG_FORMAT_HEADER!r}")
    items: list[Item] = []
    rows: list[list[float]] = []
    for number, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != 3:
            raise CheckpointFormatError(f"Catalog line {number}: expected 3 tab-separated fields")
        try:
            item_id = int(fields[0])
            attributes = frozenset(int(a) for a in fields[1].split(",") if a)
            rows.append([float(v) for v in fields[2].split()])
        except ValueError as exc:
            raise CheckpointFormatError(f"Catalog line {number}: {exc}") from exc
        items.append(Item(id=item_id, attributes=attributes))
    if len({len(row) for row in rows}) != 1:
        raise CheckpointFormatError("Catalog embeddings have inconsistent dimensions")
    return Catalog(items=tuple(items), embeddings=np.array(rows, dtype=np.float64))


class SimulatorModel:
    """Deterministic preference scorer supplying P(i|S) and Rank(i|S).

    The context of a history S is h(S) = normalize(sum_k decay^(|S|-k) emb(S[k])),
    kept internally as the unnormalized accumulator ``u`` so that a prefix can
    be extended in O(d): ``u' = decay * u + emb(i)``. The empty history has the
    zero context, which yields the uniform distribution.
    """

    def __init__(self, catalog: Catalog, decay: float = 0.8, temperature: float = 1.0) -> None:
        if not 0.0 < decay < 1.0:
            raise ParameterError(f"decay must be in (0, 1), got {decay}")
        if not temperature > 0.0:
            raise ParameterError(f"temperature must be > 0, got {temperature}")
        self._catalog = catalog
        self._decay = float(decay)
        self._temperature = float(temperature)
        self._ids = catalog.item_ids

    @property
    def catalog(self) -> Catalog:
        return self._catalog

    @property
    def decay(self) -> float:
        return self._decay

    @property
    def temperature(self) -> float:
        return self._temperature

    def context_accumulator(self, history: InteractionHistory) -> FloatArray:
        """Unnormalized recency-weighted sum of the history embeddings."""
        accumulator = np.zeros(self._catalog.embedding_dim, dtype=np.float64)
        for item_id in history:
            accumulator = self.extend(accumulator, item_id)
        return accumulator

    def extend(self, accumulator: FloatArray, item_id: int) -> FloatArray:
        """Accumulator of the history extended by one item."""
        return self._decay * accumulator + self._catalog.embedding(item_id)

    @staticmethod
    def normalize(accumulator: FloatArray) -> FloatArray:
        norm = float(np.linalg.norm(accumulator))
        if norm == 0.0:
            return np.zeros_like(accumulator)
        return accumulator / norm

    def context_vector(self, history: InteractionHistory) -> FloatArray:
        """h(S); the zero vector for an empty history."""
        return self.normalize(self.context_accumulator(history))

    def log_distribution(self, accumulator: FloatArray) -> FloatArray:
        """Log acceptance probabilities of every catalog item (catalog row order)."""
        scores = self._catalog.embeddings @ self.normalize(accumulator) / self._temperature
        return np.asarray(log_softmax(scores), dtype=np.float64)

    def log_probabilities(self, history: InteractionHistory) -> FloatArray:
        return self.log_distribution(self.context_accumulator(history))

    def probabilities(self, history: InteractionHistory) -> FloatArray:
        return np.exp(self.log_probabilities(history))

    def prob(self, item_id: int, history: InteractionHistory) -> float:
        """P(i | S).

        Raises:
            UnknownItemError: If ``item_id`` is not in the catalog.
        """
        row = self._catalog.index_of(item_id)
        return float(self.probabilities(history)[row])

    def log_prob(self, item_id: int, history: InteractionHistory) -> float:
        row = self._catalog.index_of(item_id)
        return float(self.log_probabilities(history)[row])

    def rank(self, item_id: int, history: InteractionHistory) -> int:
        """Rank(i | S), 1 for the most probable item; ties go to the lower id.

        Raises:
            UnknownItemError: If ``item_id`` is not in the catalog.
        """
        row = self._catalog.index_of(item_id)
        return self.rank_in(self.probabilities(history), row)

    def rank_in(self, probabilities: FloatArray, row: int) -> int:
        """Rank of catalog row ``row`` under an already computed distribution."""
        value = probabilities[row]
        better = int(np.count_nonzero(probabilities > value))
        tied_lower = int(np.count_nonzero((probabilities == value) & (self._ids < self._ids[row])))
        return 1 + better + tied_lower

    def ranks(self, history: InteractionHistory) -> list[int]:
        """Rank of every catalog item, in catalog row order."""
        probabilities = self.probabilities(history)
        return [self.rank_in(probabilities, row) for row in range(self._catalog.n_items)]
