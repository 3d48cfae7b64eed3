"""Tests for settings loading, overrides and the configuration hash."""

from __future__ import annotations

from pathlib import Path

import pytest

from pathguide_lab.api.schemas import CenteringKind, EstimatorKind
from pathguide_lab.errors import ConfigError
from pathguide_lab.settings import Settings, apply_override, load_settings


def test_defaults() -> None:
    settings = Settings()
    assert settings.trainer.samples_per_input == 16
    assert settings.trainer.kl_coeff == 0.01
    assert settings.trainer.estimator is EstimatorKind.PRORL
    assert settings.policy.max_length == 10
    assert settings.critic.hidden_width == 256
    assert settings.collapse.kl_coeff == 0.0
    assert settings.collapse.epochs * settings.collapse.updates_per_epoch == 500


class TestOverrides:
    def test_scalars_are_parsed(self) -> None:
        settings = load_settings(
            overrides=["trainer.learning_rate=0.1", "rewards.centering=raw", "trainer.leave_one_out=true"],
        )
        assert settings.trainer.learning_rate == 0.1
        assert settings.rewards.centering is CenteringKind.RAW
        assert settings.trainer.leave_one_out is True

    def test_arrays_are_parsed(self) -> None:
        settings = load_settings(overrides=["rewards.component_weights=[1.0, 0.0, 0.0]"])
        assert settings.rewards.component_weights == (1.0, 0.0, 0.0)

    def test_seed_replaces_trainer_seed(self) -> None:
        assert load_settings(overrides=["trainer.seed=3"], seed=11).trainer.seed == 11

    @pytest.mark.parametrize("assignment", ["trainer.seed", "seed=3", "trainer.sub.key=1", ".seed=1"])
    def test_malformed_assignments(self, assignment: str) -> None:
        with pytest.raises(ConfigError):
            apply_override({}, assignment)

    @pytest.mark.parametrize(
        "assignment",
        ["policy.max_length=0", "trainer.bogus=1", "simulator.decay=1.0", "trainer.estimator=sgd"],
    )
    def test_invalid_values(self, assignment: str) -> None:
        with pytest.raises(ConfigError):
            load_settings(overrides=[assignment])

    def test_sequence_lengths_must_exceed_history(self) -> None:
        with pytest.raises(ConfigError):
            load_settings(overrides=["trainer.history_length=12", "trainer.min_sequence_length=12"])

    def test_config_error_exit_code(self) -> None:
        with pytest.raises(ConfigError) as excinfo:
            load_settings(overrides=["policy.max_length=0"])
        assert excinfo.value.exit_code == 2


class TestConfigFile:
    def test_toml_file(self, tmp_path: Path) -> None:
        path = tmp_path / "lab.toml"
        path.write_text('[trainer]\nbatch_size = 8\nestimator = "grpo"\n\n[policy]\nmax_length = 3\n')
        settings = load_settings(path, overrides=["trainer.batch_size=4"])
        assert settings.trainer.batch_size == 4
        assert settings.trainer.estimator is EstimatorKind.GRPO
        assert settings.policy.max_length == 3

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(ConfigError):
            load_settings(tmp_path / "absent.toml")

    def test_malformed_toml(self, tmp_path: Path) -> None:
        path = tmp_path / "broken.toml"
        path.write_text("[trainer\nseed = \n")
        with pytest.raises(ConfigError):
            load_settings(path)

    def test_environment_variables(self, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setenv("PATHGUIDE_TRAINER__BATCH_SIZE", "32")
        assert Settings().trainer.batch_size == 32


class TestConfigHash:
    def test_stable(self) -> None:
        assert Settings().config_hash() == Settings().config_hash()

    def test_ignores_epochs(self) -> None:
        assert load_settings(overrides=["trainer.epochs=99"]).config_hash() == Settings().config_hash()

    def test_tracks_trajectory_settings(self) -> None:
        assert load_settings(overrides=["trainer.learning_rate=0.2"]).config_hash() != Settings().config_hash()
        assert load_settings(seed=5).config_hash() != Settings().config_hash()
