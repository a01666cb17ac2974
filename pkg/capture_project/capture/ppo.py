"""
Proximal Policy Optimization for the capture task.

Actor and critic are separate 128x128 tanh MLPs behind a running observation
normalizer. The policy is a diagonal Gaussian over pre-squash actions with a
state-independent log-std; thrust commands are ``tanh`` of the sample.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, List, Optional

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from django.core.exceptions import ValidationError
from torch.distributions import Normal

from .task import (
    ACTION_SIZE,
    OBSERVATION_SIZE,
    Action,
    CaptureVecEnv,
    Observation,
    curriculum_length,
    curriculum_level,
)
from .utils import FloatArray

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
CURVE_COLUMNS = ["iteration", "mean_reward", "success_rate", "policy_loss", "value_loss", "kl", "level"]


class TrainingDivergedError(RuntimeError):
    def __init__(self, iteration: int, diagnostics: dict[str, float]):
        self.iteration = iteration
        self.diagnostics = diagnostics
        details = ", ".join(f"{key}={value:.4g}" for key, value in diagnostics.items())
        super().__init__(f"training diverged at iteration {iteration}: {details}")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    num_envs: int = 2048
    batch_size: int = 16384
    max_iterations: int = 1000
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    learning_rate: float = 3e-4
    update_epochs: int = 4
    num_minibatches: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 1.0
    hidden_size: int = 128
    curriculum: bool = True
    checkpoint_interval: int = 100
    single_threaded: bool = True

    def __post_init__(self) -> None:
        errors = {}
        for name in ("num_envs", "batch_size", "update_epochs", "num_minibatches", "hidden_size"):
            if getattr(self, name) < 1:
                errors[name] = "must be >= 1"
        if self.max_iterations < 0:
            errors["max_iterations"] = "must be >= 0"
        if self.num_envs >= 1 and self.batch_size % self.num_envs:
            errors["batch_size"] = "must be a multiple of num_envs"
        if self.num_minibatches > self.batch_size >= 1:
            errors["num_minibatches"] = "must be <= batch_size"
        for name in ("gamma", "gae_lambda"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errors[name] = "must lie in [0, 1]"
        for name in ("clip_epsilon", "learning_rate", "value_coef", "entropy_coef", "max_grad_norm"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0.0:
                errors[name] = "must be finite and >= 0"
        if self.checkpoint_interval < 0:
            errors["checkpoint_interval"] = "must be >= 0"
        if errors:
            raise ValidationError(errors)

    @property
    def rollout_length(self) -> int:
        return self.batch_size // self.num_envs

    @property
    def minibatch_size(self) -> int:
        return max(1, self.batch_size // self.num_minibatches)


class RunningNormalizer(nn.Module):
    """Running mean/variance observation normalizer, stored with the weights."""

    def __init__(self, size: int, clip: float = 10.0, epsilon: float = 1e-8):
        super().__init__()
        self.clip = clip
        self.epsilon = epsilon
        self.register_buffer("mean", torch.zeros(size))
        self.register_buffer("var", torch.ones(size))
        self.register_buffer("count", torch.tensor(1e-4))

    @torch.no_grad()
    def update(self, batch: torch.Tensor) -> None:
        batch = batch.reshape(-1, batch.shape[-1]).to(self.mean.dtype)
        batch_mean = batch.mean(dim=0)
        batch_var = batch.var(dim=0, unbiased=False)
        batch_count = batch.shape[0]
        delta = batch_mean - self.mean
        total = self.count + batch_count
        self.mean += delta * batch_count / total
        m2 = self.var * self.count + batch_var * batch_count + delta**2 * self.count * batch_count / total
        self.var.copy_(m2 / total)
        self.count.copy_(total)

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        normalized = (obs - self.mean) / torch.sqrt(self.var + self.epsilon)
        return normalized.clamp(-self.clip, self.clip)


def _mlp(in_size: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_size, hidden),
        nn.Tanh(),
        nn.Linear(hidden, hidden),
        nn.Tanh(),
    )


def _init_layer(layer: nn.Linear, gain: float) -> None:
    nn.init.orthogonal_(layer.weight, gain=gain)
    nn.init.zeros_(layer.bias)


class ActorCritic(nn.Module):
    def __init__(
        self,
        obs_size: int = OBSERVATION_SIZE,
        action_size: int = ACTION_SIZE,
        hidden_size: int = 128,
    ):
        super().__init__()
        self.obs_size = obs_size
        self.action_size = action_size
        self.hidden_size = hidden_size
        self.normalizer = RunningNormalizer(obs_size)
        self.actor = _mlp(obs_size, hidden_size)
        self.mean_head = nn.Linear(hidden_size, action_size)
        self.critic = _mlp(obs_size, hidden_size)
        self.value_head = nn.Linear(hidden_size, 1)
        self.log_std = nn.Parameter(torch.zeros(action_size))

        for body in (self.actor, self.critic):
            for layer in body:
                if isinstance(layer, nn.Linear):
                    _init_layer(layer, math.sqrt(2.0))
        _init_layer(self.mean_head, 0.01)
        _init_layer(self.value_head, 1.0)

    def architecture(self) -> dict[str, int]:
        return {
            "obs_size": self.obs_size,
            "action_size": self.action_size,
            "hidden_size": self.hidden_size,
        }

    def _heads(self, normalized: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        raw_mean = self.mean_head(self.actor(normalized))
        value = self.value_head(self.critic(normalized)).squeeze(-1)
        log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)
        return raw_mean, log_std, value

    def forward(self, obs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Squashed action means in [-1, 1], clamped log-stds and the value."""
        if not torch.isfinite(obs).all():
            raise ValueError("observation contains non-finite values")
        raw_mean, log_std, value = self._heads(self.normalizer(obs))
        return torch.tanh(raw_mean), log_std, value

    def distribution(self, normalized: torch.Tensor) -> tuple[Normal, torch.Tensor]:
        """Pre-squash action distribution and value for normalized observations."""
        raw_mean, log_std, value = self._heads(normalized)
        return Normal(raw_mean, log_std.exp().expand_as(raw_mean)), value


def _as_tensor(obs: Observation | FloatArray | torch.Tensor, net: nn.Module) -> torch.Tensor:
    if isinstance(obs, Observation):
        obs = obs.as_array()
    dtype = next(net.parameters()).dtype
    return torch.as_tensor(obs, dtype=dtype)


def act(
    net: ActorCritic,
    obs: Observation | FloatArray | torch.Tensor,
    deterministic: bool = True,
    generator: torch.Generator | None = None,
) -> Action:
    """Query the policy for one thrust command pair."""
    with torch.no_grad():
        obs_t = _as_tensor(obs, net)
        if deterministic:
            mean, _, _ = net(obs_t)
            command = mean
        else:
            dist, _ = net.distribution(net.normalizer(obs_t))
            noise = torch.randn(dist.mean.shape, generator=generator, dtype=dist.mean.dtype)
            command = torch.tanh(dist.mean + dist.stddev * noise).clamp(-1.0, 1.0)
    left, right = command.tolist()
    return Action(left, right)


def gae(
    rewards: torch.Tensor,
    values: torch.Tensor,
    dones: torch.Tensor,
    last_value: torch.Tensor,
    gamma: float,
    lam: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Generalized advantage estimation over (T, ...) arrays; ``dones[t]`` marks
    that the episode ended at step t, so ``values[t + 1]`` is not bootstrapped.
    """
    advantages = torch.zeros_like(rewards)
    next_advantage = torch.zeros_like(last_value)
    next_value = last_value
    for t in reversed(range(rewards.shape[0])):
        not_done = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * not_done - values[t]
        next_advantage = delta + gamma * lam * not_done * next_advantage
        advantages[t] = next_advantage
        next_value = values[t]
    return advantages, advantages + values


@dataclass
class RolloutBuffer:
    observations: torch.Tensor
    raw_actions: torch.Tensor
    log_probs: torch.Tensor
    values: torch.Tensor
    rewards: torch.Tensor
    dones: torch.Tensor
    advantages: torch.Tensor = field(init=False)
    returns: torch.Tensor = field(init=False)

    def __post_init__(self) -> None:
        self.advantages = torch.zeros_like(self.rewards)
        self.returns = torch.zeros_like(self.rewards)
        self.step = 0

    @classmethod
    def allocate(
        cls, rollout_length: int, num_envs: int, obs_size: int = OBSERVATION_SIZE, action_size: int = ACTION_SIZE
    ) -> "RolloutBuffer":
        shape = (rollout_length, num_envs)
        return cls(
            observations=torch.zeros(*shape, obs_size),
            raw_actions=torch.zeros(*shape, action_size),
            log_probs=torch.zeros(shape),
            values=torch.zeros(shape),
            rewards=torch.zeros(shape),
            dones=torch.zeros(shape),
        )

    @property
    def full(self) -> bool:
        return self.step >= self.rewards.shape[0]

    def add(self, **tensors: torch.Tensor) -> None:
        if self.full:
            raise RuntimeError("rollout buffer is full")
        for name, value in tensors.items():
            getattr(self, name)[self.step] = value
        self.step += 1

    def compute_advantages(self, last_value: torch.Tensor, gamma: float, lam: float) -> None:
        self.advantages, self.returns = gae(self.rewards, self.values, self.dones, last_value, gamma, lam)

    def minibatches(self, num_minibatches: int, generator: torch.Generator | None = None) -> Iterator[dict[str, torch.Tensor]]:
        """Shuffled minibatches over the flattened buffer, advantages normalized per batch."""
        flat = {
            "observations": self.observations.reshape(-1, self.observations.shape[-1]),
            "raw_actions": self.raw_actions.reshape(-1, self.raw_actions.shape[-1]),
            "log_probs": self.log_probs.reshape(-1),
            "advantages": normalize_advantages(self.advantages.reshape(-1)),
            "returns": self.returns.reshape(-1),
        }
        total = flat["log_probs"].shape[0]
        order = torch.randperm(total, generator=generator)
        size = max(1, total // num_minibatches)
        for start in range(0, size * num_minibatches, size):
            index = order[start : start + size]
            yield {key: value[index] for key, value in flat.items()}

    def reset(self) -> None:
        self.step = 0


def normalize_advantages(advantages: torch.Tensor) -> torch.Tensor:
    if advantages.numel() < 2:
        return advantages - advantages.mean()
    return (advantages - advantages.mean()) / (advantages.std(unbiased=False) + 1e-8)


def ppo_loss(net: ActorCritic, batch: dict[str, torch.Tensor], config: TrainConfig) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Clipped surrogate + value MSE - entropy bonus on one minibatch."""
    dist, values = net.distribution(batch["observations"])
    log_probs = dist.log_prob(batch["raw_actions"]).sum(-1)
    log_ratio = log_probs - batch["log_probs"]
    ratio = log_ratio.exp()
    advantages = batch["advantages"]

    unclipped = ratio * advantages
    clipped = ratio.clamp(1.0 - config.clip_epsilon, 1.0 + config.clip_epsilon) * advantages
    policy_loss = -torch.min(unclipped, clipped).mean()
    value_loss = (values - batch["returns"]).pow(2).mean()
    entropy = dist.entropy().sum(-1).mean()
    loss = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy

    with torch.no_grad():
        stats = {
            "policy_loss": policy_loss.detach(),
            "value_loss": value_loss.detach(),
            "entropy": entropy.detach(),
            "kl": ((ratio - 1.0) - log_ratio).mean(),
            "clip_fraction": ((ratio - 1.0).abs() > config.clip_epsilon).float().mean(),
        }
    return loss, stats


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    kl: float
    clip_fraction: float


def ppo_update(
    net: ActorCritic,
    optimizer: torch.optim.Optimizer,
    buffer: RolloutBuffer,
    config: TrainConfig,
    generator: torch.Generator | None = None,
    iteration: int = 0,
) -> UpdateStats:
    if not buffer.full:
        raise RuntimeError("ppo_update needs a full rollout buffer")
    totals: dict[str, float] = {}
    count = 0
    for _ in range(config.update_epochs):
        for batch in buffer.minibatches(config.num_minibatches, generator):
            loss, stats = ppo_loss(net, batch, config)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    iteration, {"loss": float(loss), **{k: float(v) for k, v in stats.items()}}
                )
            optimizer.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(net.parameters(), config.max_grad_norm)
            optimizer.step()
            for key, value in stats.items():
                totals[key] = totals.get(key, 0.0) + float(value)
            count += 1
    return UpdateStats(**{key: value / count for key, value in totals.items()})


@dataclass
class IterationRecord:
    iteration: int
    mean_reward: float
    success_rate: float
    policy_loss: float
    value_loss: float
    kl: float
    level: float


@dataclass
class TrainingResult:
    net: ActorCritic
    curve: List[IterationRecord]

    @property
    def final_success_rate(self) -> float:
        rates = [record.success_rate for record in self.curve if not math.isnan(record.success_rate)]
        return rates[-1] if rates else math.nan


def write_curve(curve: List[IterationRecord], path: Path) -> None:
    frame = pd.DataFrame([dataclasses.asdict(record) for record in curve], columns=CURVE_COLUMNS)
    frame.to_csv(path, index=False)


def save_checkpoint(net: ActorCritic, path: Path, metadata: Optional[dict[str, Any]] = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format_version": CHECKPOINT_VERSION,
            "architecture": net.architecture(),
            "state_dict": net.state_dict(),
            "metadata": metadata or {},
        },
        path,
    )


def load_checkpoint(path: Path, expected_architecture: Optional[dict[str, int]] = None) -> ActorCritic:
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path} has format version {version}, expected {CHECKPOINT_VERSION}"
        )
    architecture = payload["architecture"]
    if expected_architecture is not None and architecture != expected_architecture:
        raise CheckpointError(
            f"checkpoint {path} architecture {architecture} does not match {expected_architecture}"
        )
    net = ActorCritic(**architecture)
    try:
        net.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} weights do not fit {architecture}: {exc}") from exc
    net.eval()
    return net


def train(
    env: CaptureVecEnv,
    config: TrainConfig,
    seed: int,
    checkpoint_dir: Optional[Path] = None,
    on_iteration: Optional[Callable[[IterationRecord], None]] = None,
) -> TrainingResult:
    """
    Collect-and-update loop. The randomization level follows the curriculum
    when ``config.curriculum`` is set; time-outs are bootstrapped with the
    critic's value of the final state.
    """
    if env.num_envs != config.num_envs:
        raise ValueError(f"environment batch has {env.num_envs} envs, config expects {config.num_envs}")
    if config.single_threaded:
        torch.set_num_threads(1)
    torch.manual_seed(seed)
    generator = torch.Generator().manual_seed(seed)

    net = ActorCritic(hidden_size=config.hidden_size)
    curve: List[IterationRecord] = []
    if config.max_iterations == 0:
        return TrainingResult(net, curve)

    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate, eps=1e-5)
    buffer = RolloutBuffer.allocate(config.rollout_length, config.num_envs)
    if config.curriculum:
        scheduled = curriculum_length(env.randomization)
        if config.max_iterations < scheduled:
            logger.warning(
                "curriculum schedules %d epochs (%d ramp, %d hold) but training stops after %d at level %.2f",
                scheduled,
                env.randomization.curriculum_ramp_epochs,
                env.randomization.curriculum_hold_epochs,
                config.max_iterations,
                curriculum_level(config.max_iterations - 1, env.randomization),
            )
        env.set_level(curriculum_level(0, env.randomization))
    obs = torch.as_tensor(env.reset(), dtype=torch.float32)

    for iteration in range(config.max_iterations):
        if config.curriculum:
            env.set_level(curriculum_level(iteration, env.randomization))
        buffer.reset()
        with torch.no_grad():
            while not buffer.full:
                net.normalizer.update(obs)
                normalized = net.normalizer(obs)
                dist, values = net.distribution(normalized)
                raw = dist.mean + dist.stddev * torch.randn(dist.mean.shape, generator=generator)
                log_probs = dist.log_prob(raw).sum(-1)

                next_obs, rewards, dones, info = env.step(torch.tanh(raw).numpy().astype(np.float64))
                rewards_t = torch.as_tensor(rewards, dtype=torch.float32)
                truncated = torch.as_tensor(info["truncated"])
                if truncated.any():
                    terminal = net.normalizer(torch.as_tensor(info["terminal_observation"], dtype=torch.float32))
                    _, terminal_values = net.distribution(terminal)
                    rewards_t = rewards_t + config.gamma * terminal_values * truncated.float()
                if not (torch.isfinite(rewards_t).all() and torch.isfinite(values).all()):
                    raise TrainingDivergedError(
                        iteration,
                        {"reward": float(rewards_t.abs().max()), "value": float(values.abs().max())},
                    )
                buffer.add(
                    observations=normalized,
                    raw_actions=raw,
                    log_probs=log_probs,
                    values=values,
                    rewards=rewards_t,
                    dones=torch.as_tensor(dones, dtype=torch.float32),
                )
                obs = torch.as_tensor(next_obs, dtype=torch.float32)
            _, last_value = net.distribution(net.normalizer(obs))
        buffer.compute_advantages(last_value, config.gamma, config.gae_lambda)
        stats = ppo_update(net, optimizer, buffer, config, generator, iteration)

        episodes = env.pop_stats()
        record = IterationRecord(
            iteration=iteration,
            mean_reward=episodes.mean_return,
            success_rate=episodes.success_rate,
            policy_loss=stats.policy_loss,
            value_loss=stats.value_loss,
            kl=stats.kl,
            level=env.level,
        )
        curve.append(record)
        logger.info(
            "iteration %d: reward %.3f success %.3f policy %.4f value %.4f kl %.5f level %.2f",
            iteration,
            record.mean_reward,
            record.success_rate,
            record.policy_loss,
            record.value_loss,
            record.kl,
            record.level,
        )
        if on_iteration is not None:
            on_iteration(record)
        interval = config.checkpoint_interval
        if checkpoint_dir is not None and interval and (iteration + 1) % interval == 0:
            save_checkpoint(net, checkpoint_dir / f"policy_{iteration + 1:05d}.pt", {"iteration": iteration + 1})
            write_curve(curve, checkpoint_dir / "training_curve.csv")

    net.eval()
    if checkpoint_dir is not None:
        save_checkpoint(net, checkpoint_dir / "policy_final.pt", {"iteration": config.max_iterations, "seed": seed})
        write_curve(curve, checkpoint_dir / "training_curve.csv")
    return TrainingResult(net, curve)
