import pytest
from django.core.exceptions import ValidationError

from capture.config import (
    SECTIONS,
    RunConfig,
    apply_overrides,
    build_run_config,
    dump_run_config,
    load_run_config,
    parse_override,
)
from capture.dynamics import VesselParams
from capture.evaluation import SWEEP_AXES
from capture.mpc import MpcModel, OcpConfig
from capture.ppo import TrainConfig
from capture.task import RandomizationConfig, RewardWeights, TaskConfig

from .conftest import BASE_CONFIG, PROJECT_DIR


def error_keys(excinfo) -> set:
    return set(excinfo.value.message_dict)


class TestShippedConfigs:
    def test_base_config_holds_the_defaults(self):
        config = load_run_config(BASE_CONFIG)
        assert config.seed == 0
        assert config.dynamics == VesselParams()
        assert config.reward == RewardWeights()
        assert config.task == TaskConfig()
        assert config.randomization == RandomizationConfig()
        assert config.ppo == TrainConfig()
        assert config.mpc == OcpConfig()
        assert config.sweep.resolved_values(config.dynamics) == SWEEP_AXES["com"].defaults

    def test_desk_config_scales_down_training(self):
        config = load_run_config(PROJECT_DIR / "configs" / "desk.yaml")
        assert config.ppo.num_envs == 256
        assert config.ppo.rollout_length == 16
        assert config.dynamics == VesselParams()

    def test_defaults_without_a_file(self):
        assert load_run_config(None) == RunConfig()


class TestValidation:
    def test_unknown_section(self):
        with pytest.raises(ValidationError) as excinfo:
            build_run_config({"wind": {"speed": 3}})
        assert error_keys(excinfo) == {"wind"}

    def test_unknown_field_names_the_valid_ones(self):
        with pytest.raises(ValidationError) as excinfo:
            build_run_config({"ppo": {"lr": 0.001}})
        assert error_keys(excinfo) == {"ppo.lr"}
        assert "learning_rate" in excinfo.value.message_dict["ppo.lr"][0]

    def test_wrong_type(self):
        with pytest.raises(ValidationError) as excinfo:
            build_run_config({"ppo": {"num_envs": "many"}, "task": {"max_steps": 2.5}})
        assert error_keys(excinfo) == {"ppo.num_envs", "task.max_steps"}

    def test_invariant_violation_is_reported_by_path(self):
        with pytest.raises(ValidationError) as excinfo:
            build_run_config({"dynamics": {"mass": -1}})
        assert error_keys(excinfo) == {"dynamics.mass"}

    def test_errors_from_several_sections_are_collected(self):
        with pytest.raises(ValidationError) as excinfo:
            build_run_config({"reward": {"d_threshold": 0.0}, "sweep": {"axis": "wind"}, "seed": -1})
        assert error_keys(excinfo) == {"reward.d_threshold", "sweep.axis", "seed"}

    def test_horizon_nodes_must_match_the_control_period(self):
        with pytest.raises(ValidationError) as excinfo:
            build_run_config({"mpc": {"nodes": 30}})
        assert error_keys(excinfo) == {"mpc.nodes"}

    def test_top_level_must_be_a_mapping(self):
        with pytest.raises(ValidationError):
            build_run_config([1, 2, 3])

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_run_config(tmp_path / "absent.yaml")

    def test_malformed_yaml(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("ppo: [unclosed\n")
        with pytest.raises(ValidationError):
            load_run_config(path)


class TestOverrides:
    def test_parse(self):
        assert parse_override("ppo.num_envs=8") == ("ppo", "num_envs", 8)
        assert parse_override("sweep.values=[0.0, 0.05]") == ("sweep", "values", [0.0, 0.05])
        assert parse_override("seed=7") == ("seed", "", 7)

    @pytest.mark.parametrize("text", ["ppo.num_envs", "ppo=8", "=3", ".x=1"])
    def test_malformed(self, text):
        with pytest.raises(ValidationError) as excinfo:
            parse_override(text)
        assert error_keys(excinfo) == {"--set"}

    def test_apply_leaves_the_source_alone(self):
        tree = {"ppo": {"num_envs": 4}}
        merged = apply_overrides(tree, ["ppo.num_envs=8", "mpc.nodes=60"])
        assert merged == {"ppo": {"num_envs": 8}, "mpc": {"nodes": 60}}
        assert tree == {"ppo": {"num_envs": 4}}

    def test_overrides_on_top_of_a_file(self):
        config = load_run_config(
            BASE_CONFIG,
            ["ppo.num_envs=8", "ppo.batch_size=64", "seed=7", "sweep.values=[0.0, 0.05]", "dynamics.N_r=4"],
        )
        assert config.seed == 7
        assert config.ppo.num_envs == 8 and config.ppo.rollout_length == 8
        assert config.sweep.values == (0.0, 0.05)
        assert config.dynamics.N_r == 4.0

    def test_forward_thrust_override_carries_reverse_thrust(self):
        config = load_run_config(BASE_CONFIG, ["dynamics.thrust_max_forward=30"])
        assert config.dynamics.thrust_max_reverse == pytest.approx(18.0)
        explicit = load_run_config(BASE_CONFIG, ["dynamics.thrust_max_reverse=12"])
        assert explicit.dynamics.thrust_max_reverse == 12.0

    def test_override_errors_use_the_field_path(self):
        with pytest.raises(ValidationError) as excinfo:
            load_run_config(BASE_CONFIG, ["ppo.batch_size=100"])
        assert error_keys(excinfo) == {"ppo.batch_size"}


class TestRunConfig:
    def test_dump_and_reload(self, tmp_path):
        config = load_run_config(BASE_CONFIG, ["seed=3", "dynamics.com_offset_y=0.05"])
        path = dump_run_config(config, tmp_path / "out" / "resolved_config.yaml")
        assert load_run_config(path) == config

    def test_as_dict_has_every_section(self):
        tree = RunConfig().as_dict()
        assert list(tree) == ["seed", *SECTIONS]
        assert tree["sweep"]["controllers"] == ["rl", "mpc"]

    def test_mpc_model_uses_the_tuned_yaw_damping(self):
        config = load_run_config(None, ["dynamics.N_r=9", "mpc.n_r=4"])
        assert config.mpc_model() == MpcModel.from_params(config.dynamics, 4.0)

    def test_make_env(self):
        env = load_run_config(None, ["ppo.num_envs=4", "ppo.batch_size=8"]).make_env(seed=2)
        assert env.num_envs == 4
        assert env.reset().shape == (4, 6)
