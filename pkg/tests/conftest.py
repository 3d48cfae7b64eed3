"""Shared fixtures for pathguide-lab tests."""

from __future__ import annotations

import numpy as np
import pytest

from pathguide_lab.adapters.catalog_env import SimulatorModel, generate_catalog
from pathguide_lab.adapters.policy import FeatureMap, LinearSoftmaxPolicy
from pathguide_lab.core.models import Catalog, Item
from pathguide_lab.settings import Settings


@pytest.fixture()
def axis_catalog() -> Catalog:
    """Two items on orthogonal unit axes with disjoint attributes."""
    return Catalog(
        items=(Item(id=0, attributes=frozenset({0})), Item(id=1, attributes=frozenset({1}))),
        embeddings=np.eye(2),
    )


@pytest.fixture()
def axis_simulator(axis_catalog: Catalog) -> SimulatorModel:
    return SimulatorModel(axis_catalog, decay=0.5, temperature=1.0)


@pytest.fixture()
def seeded_catalog() -> Catalog:
    return generate_catalog(seed=7, n_items=6, n_attributes=4, attrs_per_item=2, embedding_dim=4)


@pytest.fixture()
def seeded_simulator(seeded_catalog: Catalog) -> SimulatorModel:
    return SimulatorModel(seeded_catalog, decay=0.8, temperature=0.5)


@pytest.fixture()
def toy_policy() -> LinearSoftmaxPolicy:
    """Random policy over a 2-item, 2-dimensional toy catalog."""
    catalog = generate_catalog(seed=3, n_items=2, n_attributes=2, attrs_per_item=1, embedding_dim=2)
    fmap = FeatureMap(SimulatorModel(catalog, decay=0.8, temperature=1.0))
    weights = np.random.default_rng(11).normal(0.0, 0.5, size=(fmap.n_actions, fmap.dim))
    return LinearSoftmaxPolicy(fmap, weights)


@pytest.fixture()
def small_settings() -> Settings:
    """Settings small enough for end-to-end service runs in a few seconds."""
    return Settings(
        catalog={"seed": 7, "n_items": 8, "n_attributes": 4, "attrs_per_item": 2, "embedding_dim": 4},
        simulator={"decay": 0.8, "temperature": 0.5},
        policy={"temperature": 1.0, "max_length": 4},
        trainer={
            "seed": 0,
            "epochs": 2,
            "updates_per_epoch": 2,
            "batch_size": 4,
            "samples_per_input": 4,
            "learning_rate": 0.05,
            "n_users": 30,
            "history_length": 3,
            "min_sequence_length": 6,
            "max_sequence_length": 10,
            "eval_inputs": 3,
        },
        critic={"hidden_width": 8, "warmup_epochs": 1},
        pretrain={"epochs": 5},
        theory={"step": 1e-2, "horizon": 60.0},
        oracle={"n_configs": 3},
        collapse={"epochs": 1, "updates_per_epoch": 2, "batch_size": 4, "samples_per_input": 4, "final_window": 2},
    )
