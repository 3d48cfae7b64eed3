"""Goal-oriented trajectory mining with an attribute-overlap feasibility oracle.

Also generates the synthetic user sequences mining runs on, splits users
into train/validation/test and builds guidance inputs from held sequences.
"""

from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from pathguide_lab.core.interfaces import FeasibilityOracle
from pathguide_lab.core.models import Catalog, Demonstration, GuidanceInput, RawSequence
from pathguide_lab.errors import CheckpointFormatError, ParameterError, UnknownItemError
from pathguide_lab.observability import get_logger

logger = get_logger(__name__)

MIN_USERS_TO_SPLIT = 10


class AttributeOverlapOracle:
    """Feasible iff two items share at least ``min_shared`` attributes.

    Counts its calls so mining cost can be audited.
    """

    def __init__(self, catalog: Catalog, min_shared: int = 1) -> None:
        if min_shared < 1:
            raise ParameterError(f"min_shared must be >= 1, got {min_shared}")
        self._catalog = catalog
        self.min_shared = min_shared
        self.calls = 0

    def feasible(self, left: int, right: int) -> bool:
        """Raises UnknownItemError if either id is not in the catalog."""
        self.calls += 1
        shared = self._catalog.attributes(left) & self._catalog.attributes(right)
        return len(shared) >= self.min_shared


def feasible(left: int, right: int, oracle: FeasibilityOracle) -> bool:
    return oracle.feasible(left, right)


def mine(
    seq: RawSequence,
    n: int,
    oracle: FeasibilityOracle,
    archive_trailing: bool = False,
) -> list[Demonstration]:
    """Split a user sequence into feasible segments, each ending at its own goal.

    The segment starts at the n-th item (1-based). Each following item is
    appended while it is feasible after the previous one; on an infeasible
    transition the current segment is archived if it holds more than one
    item and a new segment starts at the current item. The final segment is
    kept only with ``archive_trailing``.

    Each demonstration carries up to ``n`` items preceding its segment as
    history.

    Raises:
        ParameterError: Unless ``1 <= n < len(seq.items)``.
    """
    items = seq.items
    if not 1 <= n < len(items):
        raise ParameterError(f"history length n must satisfy 1 <= n < {len(items)}, got {n}")

    demos: list[Demonstration] = []
    start = n - 1
    path = [items[start]]

    def archive(segment: list[int], begin: int) -> None:
        if len(segment) > 1:
            history = tuple(items[max(0, begin - n):begin])
            demos.append(Demonstration(path=tuple(segment), goal=segment[-1], history=history))

    for k in range(n, len(items)):
        previous, current = items[k - 1], items[k]
        if oracle.feasible(previous, current):
            path.append(current)
            continue
        archive(path, start)
        start = k
        path = [current]
    if archive_trailing:
        archive(path, start)
    return demos


def mine_all(
    sequences: Sequence[RawSequence],
    n: int,
    oracle: FeasibilityOracle,
    archive_trailing: bool = False,
) -> list[Demonstration]:
    """Mine every sequence long enough for history length ``n``."""
    demos: list[Demonstration] = []
    for seq in sequences:
        if len(seq.items) > n:
            demos.extend(mine(seq, n, oracle, archive_trailing))
    logger.info("demonstrations_mined", sequences=len(sequences), demonstrations=len(demos))
    return demos


def split_users(
    sequences: Sequence[RawSequence],
    seed: int,
) -> tuple[list[RawSequence], list[RawSequence], list[RawSequence]]:
    """Seeded user-level 8:1:1 partition into (train, validation, test).

    Validation and test each receive ``N // 10`` users; train gets the rest.

    Raises:
        ParameterError: With fewer than 10 users.
    """
    total = len(sequences)
    if total < MIN_USERS_TO_SPLIT:
        raise ParameterError(f"need at least {MIN_USERS_TO_SPLIT} users to split, got {total}")
    order = np.random.default_rng(seed).permutation(total)
    n_holdout = total // 10
    validation = [sequences[i] for i in order[:n_holdout]]
    test = [sequences[i] for i in order[n_holdout:2 * n_holdout]]
    train = [sequences[i] for i in order[2 * n_holdout:]]
    return train, validation, test


def generate_user_sequences(
    catalog: Catalog,
    n_users: int,
    min_length: int,
    max_length: int,
    coherence: float,
    seed: int,
) -> list[RawSequence]:
    """Seeded attribute-biased random walks over the catalog.

    With probability ``coherence`` the next item is drawn uniformly among the
    other items sharing an attribute with the current one (if any exist);
    otherwise it is uniform over the whole catalog.
    """
    if n_users < 1 or not 1 <= min_length <= max_length:
        raise ParameterError(f"invalid walk sizes: users={n_users}, lengths=[{min_length}, {max_length}]")
    if not 0.0 <= coherence <= 1.0:
        raise ParameterError(f"coherence must be in [0, 1], got {coherence}")

    rng = np.random.default_rng(seed)
    ids = [item.id for item in catalog.items]
    neighbours = {
        item.id: [other.id for other in catalog.items if other.id != item.id and item.attributes & other.attributes]
        for item in catalog.items
    }
    sequences: list[RawSequence] = []
    for user_id in range(n_users):
        length = int(rng.integers(min_length, max_length + 1))
        walk = [ids[int(rng.integers(len(ids)))]]
        while len(walk) < length:
            candidates = neighbours[walk[-1]]
            if candidates and rng.random() < coherence:
                walk.append(candidates[int(rng.integers(len(candidates)))])
            else:
                walk.append(ids[int(rng.integers(len(ids)))])
        sequences.append(RawSequence(user_id=user_id, items=tuple(walk)))
    return sequences


def build_inputs(
    sequences: Sequence[RawSequence],
    history_length: int,
    seed: int,
    catalog: Catalog,
) -> list[GuidanceInput]:
    """One guidance input per sequence: its last ``history_length`` items and a random unseen target."""
    rng = np.random.default_rng(seed)
    ids = [item.id for item in catalog.items]
    inputs: list[GuidanceInput] = []
    for seq in sequences:
        history = tuple(seq.items[-history_length:])
        seen = set(history)
        candidates = [item_id for item_id in ids if item_id not in seen]
        if not candidates:
            continue
        target = candidates[int(rng.integers(len(candidates)))]
        inputs.append(GuidanceInput(history=history, target=target, user_id=seq.user_id))
    return inputs


def save_demonstrations(demos: Sequence[Demonstration]) -> str:
    """One line per demonstration: ``goal<TAB>path ids<TAB>history ids``."""
    lines = [
        f"{demo.goal}\t{' '.join(map(str, demo.path))}\t{' '.join(map(str, demo.history))}"
        for demo in demos
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def load_demonstrations(text: str, catalog: Catalog | None = None) -> list[Demonstration]:
    """Parse ``save_demonstrations`` output; ids are checked against ``catalog`` when given.

    Raises:
        CheckpointFormatError: On a malformed line.
        UnknownItemError: If an id does not resolve in ``catalog``.
    """
    demos: list[Demonstration] = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) not in (2, 3):
            raise CheckpointFormatError(f"Demonstration line {number}: expected goal, path and history fields")
        try:
            goal = int(fields[0])
            path = tuple(int(v) for v in fields[1].split())
            history = tuple(int(v) for v in fields[2].split()) if len(fields) == 3 else ()
            demo = Demonstration(path=path, goal=goal, history=history)
        except ValueError as exc:
            raise CheckpointFormatError(f"Demonstration line {number}: {exc}") from exc
        if catalog is not None:
            for item_id in (*demo.path, *demo.history):
                if item_id not in catalog:
                    raise UnknownItemError(item_id)
        demos.append(demo)
    return demos
