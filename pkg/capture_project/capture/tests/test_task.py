import math

import numpy as np
import pytest
from django.core.exceptions import ValidationError

from capture.dynamics import NO_DISTURBANCE, VesselParams, VesselState
from capture.task import (
    Action,
    CaptureVecEnv,
    Episode,
    EpisodeConfig,
    EpisodeFinishedError,
    EpisodeStart,
    Goal,
    Observation,
    RandomizationConfig,
    RewardWeights,
    TaskConfig,
    curriculum_length,
    curriculum_level,
    evaluation_grid,
    observe,
    reset,
    reward,
)
from capture.utils import spawn_generators


def start_at(x: float = 0.0, goal: Goal = Goal(5.0, 0.0), u: float = 0.0) -> EpisodeStart:
    return EpisodeStart(VesselState(x=x, u=u), goal, VesselParams(), NO_DISTURBANCE)


class TestObserve:
    def test_dead_ahead(self):
        obs = observe(VesselState(u=0.4), Goal(5.0, 0.0))
        assert obs == Observation(0.4, 0.0, 0.0, 1.0, 0.0, 5.0)

    def test_goal_to_the_left(self):
        obs = observe(VesselState(), Goal(0.0, 5.0))
        assert obs.cos_head == pytest.approx(0.0, abs=1e-15)
        assert obs.sin_head == pytest.approx(1.0)
        assert obs.d == pytest.approx(5.0)

    def test_heading_aligned_with_diagonal_goal(self):
        obs = observe(VesselState(psi=math.pi / 4), Goal(3.0, 3.0))
        assert obs.cos_head == pytest.approx(1.0)
        assert obs.sin_head == pytest.approx(0.0, abs=1e-12)
        assert obs.d == pytest.approx(math.sqrt(18.0))

    def test_noise_free_observation_is_on_the_unit_circle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            state = VesselState(*rng.uniform(-5.0, 5.0, size=3))
            obs = observe(state, Goal(*rng.uniform(-10.0, 10.0, size=2)))
            assert obs.cos_head**2 + obs.sin_head**2 == pytest.approx(1.0, abs=1e-15)
            assert obs.d >= 0.0

    def test_pose_noise_stays_within_bounds(self):
        randomization = RandomizationConfig()
        rng = np.random.default_rng(8)
        for _ in range(200):
            obs = observe(VesselState(), Goal(5.0, 0.0), rng, randomization, level=1.0)
            assert abs(obs.d - 5.0) <= math.hypot(0.03, 0.03) + 1e-12
            assert abs(obs.heading_error) <= 0.025 + 0.03 / 4.9 + 1e-9

    def test_pose_noise_leaves_velocities_exact(self):
        randomization = RandomizationConfig()
        rng = np.random.default_rng(12)
        state = VesselState(u=0.7, v=-0.05, r=0.2)
        for _ in range(50):
            obs = observe(state, Goal(5.0, 0.0), rng, randomization, level=1.0)
            assert (obs.u, obs.v, obs.r) == (0.7, -0.05, 0.2)


class TestReward:
    def test_aligned_idle_terms(self, weights):
        obs = Observation(0.0, 0.0, 0.0, 1.0, 0.0, 5.0)
        total, terms = reward(5.0, obs, Action(0.0, 0.0), weights)
        assert terms == (0.0, 1.0, 0.0, -1.0, 0.0)
        assert total == 0.0

    def test_full_thrust_energy_term(self, weights):
        obs = Observation(0.0, 0.0, 0.0, 1.0, 0.0, 5.0)
        _, terms = reward(5.0, obs, Action(1.0, 1.0), weights)
        assert terms[2] == pytest.approx(0.001 * (math.exp(-0.2) - 1.0), abs=1e-15)
        assert terms[2] == pytest.approx(-1.8127e-4, rel=1e-4)

    def test_goal_bonus_inside_threshold(self, weights):
        obs = Observation(0.0, 0.0, 0.0, 1.0, 0.0, 0.05)
        _, terms = reward(0.1, obs, Action(0.0, 0.0), weights)
        assert terms[4] == 10.0

    def test_terms_sum_and_ranges(self, weights):
        rng = np.random.default_rng(12)
        for _ in range(500):
            angle = rng.uniform(-math.pi, math.pi)
            obs = Observation(0.0, 0.0, 0.0, math.cos(angle), math.sin(angle), rng.uniform(0.0, 10.0))
            action = Action(*rng.uniform(-1.0, 1.0, size=2))
            total, terms = reward(rng.uniform(0.0, 10.0), obs, action, weights)
            assert total == pytest.approx(sum(terms), abs=1e-12)
            assert 0.0 < terms[1] <= weights.lambda2
            assert weights.lambda3 * (math.exp(2 * weights.k2) - 1.0) < terms[2] <= 0.0

    def test_heading_reward_uses_absolute_error(self, weights):
        left = Observation(0.0, 0.0, 0.0, math.cos(0.5), math.sin(0.5), 5.0)
        right = Observation(0.0, 0.0, 0.0, math.cos(-0.5), math.sin(-0.5), 5.0)
        assert reward(5.0, left, Action(0, 0), weights)[1][1] == pytest.approx(
            reward(5.0, right, Action(0, 0), weights)[1][1]
        )

    def test_rejects_negative_previous_distance(self, weights):
        with pytest.raises(ValueError):
            reward(-1.0, Observation(0, 0, 0, 1, 0, 1), Action(0, 0), weights)

    def test_weights_validation(self):
        with pytest.raises(ValidationError):
            RewardWeights(d_threshold=0.5, success_radius=0.3)


class TestReset:
    def test_level_zero_keeps_nominal_physics(self):
        start = reset(42, EpisodeConfig(randomization_level=0.0))
        assert start.params == VesselParams()
        assert start.disturbance == NO_DISTURBANCE
        assert start.state.x == 0.0 and start.state.psi == 0.0

    def test_explicit_goal_and_speed(self):
        start = reset(1, EpisodeConfig(goal_distance=6.0, goal_bearing_deg=30.0, initial_speed=0.5))
        assert math.hypot(start.goal.gx, start.goal.gy) == pytest.approx(6.0)
        assert math.degrees(math.atan2(start.goal.gy, start.goal.gx)) == pytest.approx(30.0)
        assert start.state.u == 0.5

    def test_sampled_goals_stay_in_the_field_of_view(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            goal = reset(rng).goal
            assert 3.0 <= math.hypot(goal.gx, goal.gy) <= 10.0
            assert abs(math.degrees(math.atan2(goal.gy, goal.gx))) <= 45.0 + 1e-9

    def test_full_randomization_keeps_yaw_damping_in_range(self):
        rng = np.random.default_rng(2024)
        config = EpisodeConfig(randomization_level=1.0)
        values = np.array([reset(rng, config).params.N_r for _ in range(10_000)])
        assert values.min() >= 0.0
        assert values.max() <= 11.66 + 1e-12
        assert values.max() - values.min() > 10.0

    def test_full_randomization_bounds_disturbance(self):
        rng = np.random.default_rng(6)
        for _ in range(200):
            start = reset(rng, EpisodeConfig(randomization_level=1.0))
            assert abs(start.disturbance.force_x) <= 2.5
            assert abs(start.disturbance.torque_z) <= 1.0
            assert 0.5 <= start.params.thrust_gain_left <= 1.5
            assert abs(start.params.com_offset_y) <= 0.1

    @pytest.mark.parametrize(
        "config",
        [
            EpisodeConfig(goal_distance=2.0),
            EpisodeConfig(goal_distance=12.0),
            EpisodeConfig(goal_bearing_deg=50.0),
            EpisodeConfig(randomization_level=1.5),
        ],
    )
    def test_rejects_out_of_range_requests(self, config):
        with pytest.raises(ValueError):
            reset(0, config)

    def test_same_seed_same_episode(self):
        config = EpisodeConfig(randomization_level=0.7)
        assert reset(5, config) == reset(5, config)


def test_evaluation_grid_has_399_unique_goals():
    grid = evaluation_grid()
    assert len(grid) == 7 * 19 * 3 == 399
    keys = {(c.goal_distance, c.goal_bearing_deg, c.initial_speed) for c in grid}
    assert len(keys) == 399
    assert {c.goal_distance for c in grid} == {3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0}
    assert {c.initial_speed for c in grid} == {0.0, 0.5, 1.0}


@pytest.mark.parametrize("epoch, level", [(0, 0.0), (150, 0.5), (300, 1.0), (999, 1.0)])
def test_curriculum_ramp(epoch, level):
    assert curriculum_level(epoch, RandomizationConfig()) == pytest.approx(level)


def test_curriculum_length_covers_ramp_and_hold():
    assert curriculum_length(RandomizationConfig()) == 1000
    assert curriculum_length(RandomizationConfig(curriculum_ramp_epochs=2, curriculum_hold_epochs=0)) == 2


def test_curriculum_rejects_negative_epoch():
    with pytest.raises(ValueError):
        curriculum_level(-1, RandomizationConfig())


class TestEpisode:
    def test_capture_inside_radius(self):
        outcome = Episode(start_at(x=4.8)).step(Action(0.3, -0.2))
        assert outcome.success and outcome.done
        assert outcome.elapsed == pytest.approx(0.01)

    def test_idle_step_at_rest(self):
        episode = Episode(start_at())
        outcome = episode.step(Action(0.0, 0.0))
        assert outcome.reward == pytest.approx(0.0)
        assert outcome.reward == pytest.approx(-1.0 + outcome.reward_terms[1])
        assert not outcome.done
        assert episode.steps == 5
        assert episode.time == pytest.approx(0.05)

    def test_step_budget_truncates(self):
        episode = Episode(start_at())
        outcome = episode.step(Action(0.0, 0.0))
        while not outcome.done:
            outcome = episode.step(Action(0.0, 0.0))
        assert episode.steps == 3000
        assert outcome.truncated and not outcome.success

    def test_finished_episode_rejects_steps(self):
        episode = Episode(start_at(x=4.9))
        episode.step(Action(0.0, 0.0))
        with pytest.raises(EpisodeFinishedError):
            episode.step(Action(0.0, 0.0))

    def test_fast_fly_through_is_captured_at_substep_resolution(self):
        # inside the radius after the first substep only; out again by the end of the period
        weights = RewardWeights(d_threshold=0.005, success_radius=0.008)
        episode = Episode(start_at(x=4.978, u=1.6), weights, TaskConfig())
        outcome = episode.step(Action(1.0, 1.0))
        assert outcome.success
        assert outcome.elapsed == pytest.approx(0.01)
        assert episode.distance < 0.008

    def test_reward_matches_sum_of_terms(self):
        episode = Episode(start_at(goal=Goal(4.0, 2.0)))
        for _ in range(20):
            outcome = episode.step(Action(0.6, 0.9))
            assert outcome.reward == pytest.approx(sum(outcome.reward_terms), abs=1e-12)


def _heading_controller(obs: Observation) -> Action:
    error = obs.heading_error
    return Action(0.7 - 1.5 * error, 0.7 + 1.5 * error)


def test_proportional_heading_controller_captures_dead_ahead_goals():
    for config in evaluation_grid(bearings_deg=(0.0,)):
        episode = Episode(reset(0, config))
        outcome = episode.step(_heading_controller(episode.observe()))
        while not outcome.done:
            outcome = episode.step(_heading_controller(outcome.observation))
        assert outcome.success, config


def test_proportional_heading_controller_turns_toward_offset_goals():
    for bearing in (-45.0, 45.0):
        episode = Episode(reset(0, EpisodeConfig(goal_distance=6.0, goal_bearing_deg=bearing, initial_speed=0.0)))
        outcome = episode.step(_heading_controller(episode.observe()))
        while not outcome.done:
            outcome = episode.step(_heading_controller(outcome.observation))
        assert outcome.success


class TestCaptureVecEnv:
    def test_reset_shapes_and_reproducibility(self):
        first = CaptureVecEnv(8, seed=3).reset()
        second = CaptureVecEnv(8, seed=3).reset()
        assert first.shape == (8, 6)
        np.testing.assert_array_equal(first, second)

    def test_matches_scalar_episodes_without_randomization(self):
        env = CaptureVecEnv(3, seed=11)
        env.reset()
        episodes = [Episode(reset(rng)) for rng in spawn_generators(11, 3)]
        actions = np.array([[0.5, 0.6], [1.0, -0.2], [0.0, 0.3]])
        for _ in range(10):
            _, rewards, _, _ = env.step(actions)
            expected = [episode.step(Action(*action)).reward for episode, action in zip(episodes, actions)]
            np.testing.assert_allclose(rewards, expected, atol=1e-12)

    def test_auto_reset_after_time_out(self):
        env = CaptureVecEnv(4, seed=0, task=TaskConfig(max_steps=10))
        env.reset()
        env.step(np.zeros((4, 2)))
        obs, _, dones, info = env.step(np.zeros((4, 2)))
        np.testing.assert_array_equal(dones, np.ones(4))
        assert info["truncated"].all()
        assert info["terminal_observation"].shape == (4, 6)
        assert np.all(env.steps == 0)
        stats = env.pop_stats()
        assert len(stats.returns) == 4 and stats.success_rate == 0.0
        assert obs.shape == (4, 6)

    def test_level_controls_observation_noise(self):
        clean = CaptureVecEnv(16, seed=1)
        noisy = CaptureVecEnv(16, seed=1)
        noisy.set_level(1.0)
        clean_obs = clean.reset()
        noisy_obs = noisy.reset()
        assert not np.allclose(clean_obs[:, 3:], noisy_obs[:, 3:])
        assert noisy.level == 1.0
        noisy.set_level(3.0)
        assert noisy.level == 1.0
