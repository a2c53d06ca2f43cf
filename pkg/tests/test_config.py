import pytest
import yaml

import config
from core.errors import ConfigError
from core.trainer import loss_weights_from, lr_at, schedule_from, validate_train_config


class TestResolveRunConfig:

    def test_defaults(self):
        resolved = config.resolve_run_config()
        assert resolved == config.DEFAULTS
        assert resolved["loss.lambda_b"] == 0.05 and resolved["model.f_dec"] == 16

    def test_nested_and_dotted_files(self, tmp_path):
        nested = tmp_path / "nested.yaml"
        nested.write_text("loss:\n  lambda_b: 0.2\nmodel:\n  head_variant: nearest\n")
        dotted = tmp_path / "dotted.yaml"
        dotted.write_text("loss.lambda_b: 0.2\nmodel.head_variant: nearest\n")
        assert config.resolve_run_config(str(nested)) == config.resolve_run_config(str(dotted))

    def test_precedence(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("seed: 3\ntrain:\n  steps: 10\n")
        resolved = config.resolve_run_config(str(path), ["train.steps=20", "seed=4"], seed=5,
                                              updates={"train.steps": 30})
        assert resolved["train.steps"] == 30
        assert resolved["seed"] == 5

    def test_set_values_are_yaml(self):
        resolved = config.resolve_run_config(overrides=["model.channel_mult=[1, 1]", "loss.beta=2",
                                                        "model.zero_head=true"])
        assert resolved["model.channel_mult"] == [1, 1]
        assert resolved["loss.beta"] == 2.0 and isinstance(resolved["loss.beta"], float)
        assert resolved["model.zero_head"] is True

    @pytest.mark.parametrize("overrides", [
        ["loss.lambda_x=1"], ["train.steps=many"], ["model.zero_head=1"], ["no-equals-sign"], ["seed=-1"],
    ])
    def test_invalid_overrides(self, overrides):
        with pytest.raises(ConfigError):
            config.resolve_run_config(overrides=overrides)

    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("loss:\n  lambda_typo: 1\n")
        with pytest.raises(ConfigError, match="lambda_typo"):
            config.resolve_run_config(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            config.resolve_run_config(str(tmp_path / "absent.yaml"))

    def test_precision(self):
        with pytest.raises(ConfigError):
            config.resolve_run_config(precision="f16")

    def test_resolved_snapshot_round_trips(self, tmp_path):
        resolved = config.resolve_run_config(overrides=["loss.lambda_b=0.3"])
        path = config.write_resolved_config(resolved, tmp_path / "run")
        with open(path) as f:
            assert config.flatten(yaml.safe_load(f)) == resolved
        assert config.resolve_run_config(path) == resolved

    def test_section(self):
        optim = config.section(config.resolve_run_config(), "optim")
        assert optim == {"beta1": 0.9, "beta2": 0.95, "weight_decay": 0.0, "eps": 1e-8}


class TestTrainingTranslation:

    def test_vanilla_objective_disables_bound_and_stage_b(self):
        resolved = config.resolve_run_config(overrides=["loss.objective=vanilla"])
        assert loss_weights_from(resolved).lambda_b == 0.0
        assert schedule_from(resolved).b_steps == 0

    def test_two_phase_learning_rate(self):
        train = config.section(config.resolve_run_config(), "train")
        assert lr_at(0, train) == 1e-3
        assert lr_at(1499, train) == 1e-3
        assert lr_at(1500, train) == 1e-4

    @pytest.mark.parametrize("override", [
        "train.steps=-1", "train.batch_size=0", "train.lr=-0.1", "loss.objective=gan", "loss.beta=0.5",
        "model.f_dec=32",
    ])
    def test_invalid_training_config(self, override):
        with pytest.raises(ConfigError):
            validate_train_config(config.resolve_run_config(overrides=[override]))
