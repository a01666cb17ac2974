"""
The waste-capture task: reach a floating target placed in front of the vessel.

A scalar ``Episode`` serves evaluation and tests; ``CaptureVecEnv`` steps a
batch of independent episodes with numpy for PPO rollouts. Both share the
sampling, observation and reward code below.
"""

from __future__ import annotations

import dataclasses
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np
from django.core.exceptions import ValidationError

from .dynamics import (
    DisturbanceWrench,
    VesselParams,
    VesselState,
    step_dynamics,
)
from .utils import FloatArray, spawn_generators, wrap_angle

logger = logging.getLogger(__name__)

OBSERVATION_SIZE = 6
ACTION_SIZE = 2
REWARD_TERMS = ("distance", "heading", "energy", "time", "goal")

# Sampled per episode, in this order, from U(-1, 1).
RANDOMIZED_FIELDS = (
    "X_u",
    "Y_v",
    "N_r",
    "X_uu",
    "Y_vv",
    "N_rr",
    "com_offset_y",
    "thrust_gain_left",
    "thrust_gain_right",
)

GRID_DISTANCES = tuple(float(d) for d in range(3, 10))
GRID_BEARINGS_DEG = tuple(float(b) for b in range(-45, 50, 5))
GRID_SPEEDS = (0.0, 0.5, 1.0)


class EpisodeFinishedError(RuntimeError):
    """Raised when stepping an episode that has already terminated."""


@dataclass(frozen=True)
class Goal:
    gx: float
    gy: float

    @classmethod
    def from_polar(cls, distance: float, bearing_deg: float) -> "Goal":
        """Goal relative to a vessel at the origin heading +x; positive bearing is to the left."""
        bearing = math.radians(bearing_deg)
        return cls(distance * math.cos(bearing), distance * math.sin(bearing))

    def as_array(self) -> FloatArray:
        return np.array([self.gx, self.gy])


@dataclass(frozen=True)
class Observation:
    u: float
    v: float
    r: float
    cos_head: float
    sin_head: float
    d: float

    def as_array(self) -> FloatArray:
        return np.array([self.u, self.v, self.r, self.cos_head, self.sin_head, self.d])

    @classmethod
    def from_array(cls, values: Sequence[float] | FloatArray) -> "Observation":
        return cls(*(float(value) for value in values))

    @property
    def heading_error(self) -> float:
        return math.atan2(self.sin_head, self.cos_head)


@dataclass(frozen=True)
class Action:
    left: float
    right: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "left", float(np.clip(self.left, -1.0, 1.0)))
        object.__setattr__(self, "right", float(np.clip(self.right, -1.0, 1.0)))

    def as_array(self) -> FloatArray:
        return np.array([self.left, self.right])


@dataclass(frozen=True)
class RewardWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.001
    lambda4: float = -1.0
    lambda5: float = 10.0
    k1: float = -4.0
    k2: float = -0.1
    d_threshold: float = 0.1
    success_radius: float = 0.3

    def __post_init__(self) -> None:
        errors = {}
        if self.d_threshold <= 0.0:
            errors["d_threshold"] = "must be > 0"
        if self.success_radius < self.d_threshold:
            errors["success_radius"] = "must be >= d_threshold"
        if errors:
            raise ValidationError(errors)


@dataclass(frozen=True)
class TaskConfig:
    physics_dt: float = 0.01
    control_substeps: int = 5
    max_steps: int = 3000
    min_goal_distance: float = 3.0
    max_goal_distance: float = 10.0
    max_goal_bearing_deg: float = 45.0
    max_initial_speed: float = 1.0

    def __post_init__(self) -> None:
        errors = {}
        if not 0.0 < self.physics_dt <= 0.1:
            errors["physics_dt"] = "must lie in (0, 0.1]"
        if self.control_substeps < 1:
            errors["control_substeps"] = "must be >= 1"
        if self.max_steps < self.control_substeps:
            errors["max_steps"] = "must cover at least one control period"
        if not 0.0 < self.min_goal_distance <= self.max_goal_distance:
            errors["min_goal_distance"] = "must satisfy 0 < min <= max_goal_distance"
        if not 0.0 <= self.max_goal_bearing_deg <= 180.0:
            errors["max_goal_bearing_deg"] = "must lie in [0, 180]"
        if self.max_initial_speed < 0.0:
            errors["max_initial_speed"] = "must be >= 0"
        if errors:
            raise ValidationError(errors)

    @property
    def control_period(self) -> float:
        return self.physics_dt * self.control_substeps


@dataclass(frozen=True)
class RandomizationConfig:
    obs_pos_noise: float = 0.03
    obs_ang_noise: float = 0.025
    nr_range: float = 1.0
    damping_range: float = 0.1
    com_radius: float = 0.10
    force_range: float = 2.5
    torque_range: float = 1.0
    thrust_gain_range: float = 0.5
    action_noise: float = 0.05
    curriculum_ramp_epochs: int = 300
    curriculum_hold_epochs: int = 700

    def __post_init__(self) -> None:
        errors = {}
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                errors[f.name] = "must be >= 0"
        if self.thrust_gain_range > 0.5:
            errors["thrust_gain_range"] = "must be <= 0.5 so gains stay in (0, 1.5]"
        if self.nr_range > 1.0:
            errors["nr_range"] = "must be <= 1 so N_r stays non-negative"
        if self.damping_range > 1.0:
            errors["damping_range"] = "must be <= 1 so damping stays non-negative"
        if errors:
            raise ValidationError(errors)


@dataclass(frozen=True)
class EpisodeConfig:
    """What to spawn; ``None`` fields are sampled."""

    goal_distance: Optional[float] = None
    goal_bearing_deg: Optional[float] = None
    initial_speed: Optional[float] = None
    params_overrides: Mapping[str, float] = field(default_factory=dict)
    randomization_level: float = 0.0


class EpisodeStart(NamedTuple):
    state: VesselState
    goal: Goal
    params: VesselParams
    disturbance: DisturbanceWrench


@dataclass
class StepOutcome:
    observation: Observation
    reward: float
    reward_terms: tuple[float, float, float, float, float]
    done: bool
    success: bool
    truncated: bool = False
    distance: float = math.nan
    elapsed: float = 0.0


def curriculum_level(epoch: int, config: RandomizationConfig) -> float:
    """Linear ramp from 0 to 1 over the ramp epochs, then held at 1."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if config.curriculum_ramp_epochs <= 0:
        return 1.0
    return min(1.0, epoch / config.curriculum_ramp_epochs)


def curriculum_length(config: RandomizationConfig) -> int:
    """Epochs the schedule expects: the ramp plus the hold at full randomization."""
    return config.curriculum_ramp_epochs + config.curriculum_hold_epochs


def evaluation_grid(
    distances: Iterable[float] = GRID_DISTANCES,
    bearings_deg: Iterable[float] = GRID_BEARINGS_DEG,
    speeds: Iterable[float] = GRID_SPEEDS,
) -> List[EpisodeConfig]:
    """Goal-distance x bearing x initial-speed grid of noiseless episodes."""
    return [
        EpisodeConfig(goal_distance=d, goal_bearing_deg=b, initial_speed=v)
        for d, b, v in itertools.product(distances, bearings_deg, speeds)
    ]


def _check_goal_spec(config: EpisodeConfig, task: TaskConfig) -> None:
    if config.goal_distance is not None and not (
        task.min_goal_distance <= config.goal_distance <= task.max_goal_distance
    ):
        raise ValueError(
            f"goal distance {config.goal_distance} m outside "
            f"[{task.min_goal_distance}, {task.max_goal_distance}]"
        )
    if config.goal_bearing_deg is not None and abs(config.goal_bearing_deg) > task.max_goal_bearing_deg:
        raise ValueError(
            f"goal bearing {config.goal_bearing_deg} deg outside ±{task.max_goal_bearing_deg}"
        )
    if not 0.0 <= config.randomization_level <= 1.0:
        raise ValueError("randomization level must lie in [0, 1]")


def randomize_params(
    base: VesselParams,
    randomization: RandomizationConfig,
    level: float,
    draws: FloatArray,
) -> VesselParams:
    """
    Scale the randomization ranges by ``level`` and apply one draw per
    field of ``RANDOMIZED_FIELDS`` (each in [-1, 1]). Level 0 returns the
    base values exactly.
    """
    spread = {
        "X_u": randomization.damping_range,
        "Y_v": randomization.damping_range,
        "N_r": randomization.nr_range,
        "X_uu": randomization.damping_range,
        "Y_vv": randomization.damping_range,
        "N_rr": randomization.damping_range,
        "thrust_gain_left": randomization.thrust_gain_range,
        "thrust_gain_right": randomization.thrust_gain_range,
    }
    changes: dict[str, float] = {}
    for name, draw in zip(RANDOMIZED_FIELDS, draws):
        value = float(getattr(base, name))
        if name == "com_offset_y":
            changes[name] = value + level * randomization.com_radius * float(draw)
        else:
            changes[name] = value * (1.0 + level * spread[name] * float(draw))
    return base.replace(**changes)


def reset(
    seed: int | np.random.Generator,
    episode_config: EpisodeConfig = EpisodeConfig(),
    base_params: VesselParams = VesselParams(),
    randomization: RandomizationConfig = RandomizationConfig(),
    task: TaskConfig = TaskConfig(),
) -> EpisodeStart:
    """Spawn one episode: vessel at the origin heading +x, goal ahead."""
    _check_goal_spec(episode_config, task)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    level = episode_config.randomization_level

    distance = rng.uniform(task.min_goal_distance, task.max_goal_distance)
    bearing = rng.uniform(-task.max_goal_bearing_deg, task.max_goal_bearing_deg)
    speed = rng.uniform(0.0, task.max_initial_speed)
    param_draws = rng.uniform(-1.0, 1.0, size=len(RANDOMIZED_FIELDS))
    wrench_draws = rng.uniform(-1.0, 1.0, size=3)

    if episode_config.goal_distance is not None:
        distance = episode_config.goal_distance
    if episode_config.goal_bearing_deg is not None:
        bearing = episode_config.goal_bearing_deg
    if episode_config.initial_speed is not None:
        speed = episode_config.initial_speed

    base = base_params.replace(**dict(episode_config.params_overrides))
    params = randomize_params(base, randomization, level, param_draws)
    disturbance = DisturbanceWrench(
        force_x=level * randomization.force_range * float(wrench_draws[0]),
        force_y=level * randomization.force_range * float(wrench_draws[1]),
        torque_z=level * randomization.torque_range * float(wrench_draws[2]),
    )
    state = VesselState(u=float(speed))
    return EpisodeStart(state, Goal.from_polar(float(distance), float(bearing)), params, disturbance)


def observe_arrays(
    states: FloatArray,
    goals: FloatArray,
    pose_noise: FloatArray | None = None,
) -> FloatArray:
    """
    Observation arrays (..., 6) from state arrays (..., 8) and goals (..., 2).
    ``pose_noise`` (..., 3) perturbs x, y and heading before the geometry.
    """
    x, y, psi = states[..., 0], states[..., 1], states[..., 2]
    if pose_noise is not None:
        x = x + pose_noise[..., 0]
        y = y + pose_noise[..., 1]
        psi = psi + pose_noise[..., 2]
    dx = goals[..., 0] - x
    dy = goals[..., 1] - y
    heading_error = wrap_angle(np.arctan2(dy, dx) - psi)
    return np.stack(
        [
            states[..., 3],
            states[..., 4],
            states[..., 5],
            np.cos(heading_error),
            np.sin(heading_error),
            np.hypot(dx, dy),
        ],
        axis=-1,
    )


def observe(
    state: VesselState,
    goal: Goal,
    noise_rng: np.random.Generator | None = None,
    randomization: RandomizationConfig | None = None,
    level: float = 1.0,
) -> Observation:
    """Observation of the goal from the vessel, with optional pose noise."""
    noise = None
    if noise_rng is not None and randomization is not None:
        bounds = level * np.array(
            [randomization.obs_pos_noise, randomization.obs_pos_noise, randomization.obs_ang_noise]
        )
        noise = noise_rng.uniform(-bounds, bounds)
    values = observe_arrays(state.as_array(), goal.as_array(), noise)
    return Observation.from_array(values)


def reward_arrays(
    prev_d: FloatArray | float,
    d: FloatArray | float,
    heading_error: FloatArray | float,
    actions: FloatArray,
    weights: RewardWeights,
) -> FloatArray:
    """The five reward terms stacked along the last axis."""
    actions = np.asarray(actions, dtype=float)
    d = np.asarray(d, dtype=float)
    energy = actions[..., 0] ** 2 + actions[..., 1] ** 2
    r_dist = weights.lambda1 * (np.asarray(prev_d) - d)
    r_head = weights.lambda2 * np.exp(weights.k1 * np.abs(heading_error))
    r_energy = weights.lambda3 * (np.exp(weights.k2 * energy) - 1.0)
    r_time = np.full_like(d, weights.lambda4)
    r_goal = np.where(d < weights.d_threshold, weights.lambda5, 0.0)
    return np.stack(np.broadcast_arrays(r_dist, r_head, r_energy, r_time, r_goal), axis=-1)


def reward(
    prev_d: float,
    obs: Observation,
    action: Action,
    weights: RewardWeights,
) -> tuple[float, tuple[float, float, float, float, float]]:
    if prev_d < 0.0:
        raise ValueError("previous distance must be >= 0")
    terms = reward_arrays(prev_d, obs.d, obs.heading_error, action.as_array(), weights)
    as_floats = tuple(float(t) for t in terms)
    return math.fsum(as_floats), as_floats  # type: ignore[return-value]


def _advance(
    states: FloatArray,
    goals: FloatArray,
    command: FloatArray,
    params: VesselParams,
    disturbance: FloatArray,
    active: FloatArray,
    task: TaskConfig,
    success_radius: float,
) -> tuple[FloatArray, FloatArray, FloatArray]:
    """
    Integrate one control period, checking capture after every physics
    substep. Captured vessels are frozen at their capture state.

    Returns the new states, the capture flags and the physics substeps run.
    """
    success = np.zeros(states.shape[:-1], dtype=bool)
    substeps = np.zeros(states.shape[:-1], dtype=int)
    for _ in range(task.control_substeps):
        running = active & ~success
        if not np.any(running):
            break
        stepped = step_dynamics(states, command, params, disturbance, task.physics_dt)
        states = np.where(running[..., None], stepped, states)
        substeps = substeps + running
        dist = np.hypot(goals[..., 0] - states[..., 0], goals[..., 1] - states[..., 1])
        success = success | (running & (dist < success_radius))
    return states, success, substeps


class Episode:
    """One capture episode stepped at the control rate."""

    def __init__(
        self,
        start: EpisodeStart,
        weights: RewardWeights = RewardWeights(),
        task: TaskConfig = TaskConfig(),
    ):
        self.state = start.state
        self.goal = start.goal
        self.params = start.params
        self.disturbance = start.disturbance
        self.weights = weights
        self.task = task
        self.steps = 0
        self.time = 0.0
        self.done = False
        self.success = False

    @property
    def distance(self) -> float:
        return math.hypot(self.goal.gx - self.state.x, self.goal.gy - self.state.y)

    def observe(
        self,
        noise_rng: np.random.Generator | None = None,
        randomization: RandomizationConfig | None = None,
        level: float = 1.0,
    ) -> Observation:
        return observe(self.state, self.goal, noise_rng, randomization, level)

    def step(self, action: Action) -> StepOutcome:
        return step(self, action)


def step(episode: Episode, action: Action) -> StepOutcome:
    """
    Advance the episode by one control period and score it.

    The reward is computed on the noiseless geometry; episodes end on capture
    or when the physics-step budget is spent.
    """
    if episode.done:
        raise EpisodeFinishedError("episode already finished; call reset first")

    task = episode.task
    prev_d = episode.distance
    states, success, substeps = _advance(
        episode.state.as_array(),
        episode.goal.as_array(),
        action.as_array(),
        episode.params,
        episode.disturbance.as_array(),
        np.array(True),
        task,
        episode.weights.success_radius,
    )
    episode.state = VesselState.from_array(states)
    episode.steps += int(substeps)
    elapsed = int(substeps) * task.physics_dt
    episode.time += elapsed
    episode.success = bool(success)

    obs = observe(episode.state, episode.goal)
    total, terms = reward(prev_d, obs, action, episode.weights)
    truncated = not episode.success and episode.steps >= task.max_steps
    episode.done = episode.success or truncated
    return StepOutcome(
        observation=obs,
        reward=total,
        reward_terms=terms,
        done=episode.done,
        success=episode.success,
        truncated=truncated,
        distance=obs.d,
        elapsed=elapsed,
    )


@dataclass
class EpisodeStats:
    returns: List[float] = field(default_factory=list)
    successes: List[bool] = field(default_factory=list)

    def extend(self, other: "EpisodeStats") -> None:
        self.returns.extend(other.returns)
        self.successes.extend(other.successes)

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns)) if self.returns else math.nan

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.successes)) if self.successes else math.nan


class CaptureVecEnv:
    """
    A batch of independent capture episodes stepped together.

    Each environment owns an RNG stream spawned from the root seed; finished
    environments are reset automatically at the end of ``step``.
    """

    def __init__(
        self,
        num_envs: int,
        seed: int,
        base_params: VesselParams = VesselParams(),
        weights: RewardWeights = RewardWeights(),
        randomization: RandomizationConfig = RandomizationConfig(),
        task: TaskConfig = TaskConfig(),
        episode_config: EpisodeConfig = EpisodeConfig(),
    ):
        if num_envs < 1:
            raise ValueError("num_envs must be >= 1")
        self.num_envs = num_envs
        self.base_params = base_params
        self.weights = weights
        self.randomization = randomization
        self.task = task
        self.episode_config = episode_config
        self.level = episode_config.randomization_level
        self.rngs = spawn_generators(seed, num_envs)

        self.states = np.zeros((num_envs, 8))
        self.goals = np.zeros((num_envs, 2))
        self.disturbances = np.zeros((num_envs, 3))
        self._param_rows: List[VesselParams] = [base_params] * num_envs
        self.params = VesselParams.stack(self._param_rows)
        self.steps = np.zeros(num_envs, dtype=int)
        self.returns = np.zeros(num_envs)
        self.stats = EpisodeStats()
        logger.debug("capture batch of %d environments, seed %d", num_envs, seed)

    def set_level(self, level: float) -> None:
        """Randomization level applied to episodes spawned from now on."""
        self.level = float(np.clip(level, 0.0, 1.0))

    def _spawn(self, index: int) -> None:
        config = dataclasses.replace(self.episode_config, randomization_level=self.level)
        start = reset(self.rngs[index], config, self.base_params, self.randomization, self.task)
        self.states[index] = start.state.as_array()
        self.goals[index] = start.goal.as_array()
        self.disturbances[index] = start.disturbance.as_array()
        self._param_rows[index] = start.params
        self.steps[index] = 0
        self.returns[index] = 0.0

    def _observe(self) -> FloatArray:
        r = self.randomization
        bounds = self.level * np.array([r.obs_pos_noise, r.obs_pos_noise, r.obs_ang_noise])
        noise = np.stack([rng.uniform(-bounds, bounds) for rng in self.rngs])
        return observe_arrays(self.states, self.goals, noise)

    def reset(self) -> FloatArray:
        for index in range(self.num_envs):
            self._spawn(index)
        self.params = VesselParams.stack(self._param_rows)
        return self._observe()

    def step(self, actions: FloatArray) -> tuple[FloatArray, FloatArray, FloatArray, dict[str, Any]]:
        """
        Step every environment by one control period.

        Returns observations (after auto-reset), rewards, done flags and an
        info dict with ``success``, ``truncated`` and ``terminal_observation``
        (the noiseless observation of the state each episode ended in).
        """
        actions = np.clip(np.asarray(actions, dtype=float), -1.0, 1.0)
        bound = self.level * self.randomization.action_noise
        if bound > 0.0:
            perturbation = np.stack([rng.uniform(-bound, bound, size=2) for rng in self.rngs])
            commands = np.clip(actions + perturbation, -1.0, 1.0)
        else:
            commands = actions

        prev_d = np.hypot(self.goals[:, 0] - self.states[:, 0], self.goals[:, 1] - self.states[:, 1])
        active = np.ones(self.num_envs, dtype=bool)
        self.states, success, substeps = _advance(
            self.states,
            self.goals,
            commands,
            self.params,
            self.disturbances,
            active,
            self.task,
            self.weights.success_radius,
        )
        self.steps += substeps

        clean = observe_arrays(self.states, self.goals)
        heading_error = np.arctan2(clean[:, 4], clean[:, 3])
        rewards = reward_arrays(prev_d, clean[:, 5], heading_error, actions, self.weights).sum(axis=-1)
        truncated = ~success & (self.steps >= self.task.max_steps)
        dones = success | truncated
        self.returns += rewards

        finished = np.flatnonzero(dones)
        for index in finished:
            self.stats.returns.append(float(self.returns[index]))
            self.stats.successes.append(bool(success[index]))
            self._spawn(int(index))
        if finished.size:
            self.params = VesselParams.stack(self._param_rows)

        info = {"success": success, "truncated": truncated, "terminal_observation": clean}
        return self._observe(), rewards, dones.astype(float), info

    def pop_stats(self) -> EpisodeStats:
        stats, self.stats = self.stats, EpisodeStats()
        return stats
