"""
Episode metrics, robustness sweeps over the goal grid and degradation tables.

Sweeps run noiseless episodes at randomization level 0 with exactly one
physical parameter moved away from nominal, for each controller.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, List, Mapping, Optional, Protocol, Sequence

import numpy as np
import pandas as pd
import torch
from django.core.exceptions import ValidationError

from .dynamics import NO_DISTURBANCE, DisturbanceWrench, VesselParams, VesselState
from .mpc import MpcController, MpcModel, OcpConfig
from .ppo import ActorCritic, act
from .task import (
    GRID_BEARINGS_DEG,
    GRID_DISTANCES,
    GRID_SPEEDS,
    Action,
    Episode,
    EpisodeConfig,
    Goal,
    RewardWeights,
    TaskConfig,
    evaluation_grid,
    observe,
    reset,
)
from .utils import FloatArray

logger = logging.getLogger(__name__)

CONTROLLERS = ("rl", "mpc")
METRICS = ("T_norm", "delta_d", "E_acc_norm")
CSV_COLUMNS = [
    "controller",
    "sweep_axis",
    "sweep_value",
    "goal_d",
    "goal_bearing_deg",
    "v0",
    "seed",
    "success",
    "T",
    "T_norm",
    "delta_d",
    "E_acc_norm",
    "solver_degraded_steps",
]
GOAL_KEY = ["goal_d", "goal_bearing_deg", "v0", "seed"]
TRAJECTORY_COLUMNS = ["t", "x", "y", "psi", "u", "v", "r", "left", "right", "reward", "d"]
TRAJECTORY_DISTANCES = (3.0, 6.0, 9.0)
TRAJECTORY_BEARINGS_DEG = (-45.0, 0.0, 45.0)


@dataclass(frozen=True)
class SweepAxis:
    name: str
    field: str
    lower: float
    upper: float
    lower_inclusive: bool = True
    defaults: tuple[float, ...] = ()
    # multiples of the nominal value when ``defaults`` is empty
    relative_defaults: tuple[float, ...] = ()

    def contains(self, value: float) -> bool:
        above = value >= self.lower if self.lower_inclusive else value > self.lower
        return above and value <= self.upper

    def default_values(self, base: VesselParams) -> tuple[float, ...]:
        if self.defaults:
            return self.defaults
        nominal = float(getattr(base, self.field))
        return tuple(round(factor * nominal, 6) for factor in self.relative_defaults)


_RELATIVE = (0.8, 0.9, 1.0, 1.1, 1.2, 1.3)
SWEEP_AXES: dict[str, SweepAxis] = {
    "com": SweepAxis("com", "com_offset_y", 0.0, 0.125, defaults=(0.0, 0.025, 0.05, 0.075, 0.1, 0.125)),
    "nr": SweepAxis("nr", "N_r", 0.0, 20.0, defaults=(0.0, 4.0, 8.0, 12.0, 16.0, 20.0)),
    "xu": SweepAxis("xu", "X_u", 0.0, 40.0, defaults=(0.0, 4.0, 8.0, 12.0, 16.0, 20.0)),
    "mass": SweepAxis("mass", "mass", 0.0, math.inf, lower_inclusive=False, relative_defaults=_RELATIVE),
    "inertia": SweepAxis("inertia", "inertia_z", 0.0, math.inf, lower_inclusive=False, relative_defaults=_RELATIVE),
}


def get_axis(name: str) -> SweepAxis:
    try:
        return SWEEP_AXES[name]
    except KeyError:
        raise ValueError(f"unknown sweep axis {name!r}; valid axes: {', '.join(SWEEP_AXES)}") from None


@dataclass(frozen=True)
class SweepSpec:
    axis: str = "com"
    values: tuple[float, ...] = ()
    distances: tuple[float, ...] = GRID_DISTANCES
    bearings_deg: tuple[float, ...] = GRID_BEARINGS_DEG
    speeds: tuple[float, ...] = GRID_SPEEDS
    controllers: tuple[str, ...] = CONTROLLERS
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self) -> None:
        errors = {}
        try:
            object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        except (TypeError, ValueError):
            raise ValidationError({"values": "must be a list of numbers"}) from None
        if self.axis not in SWEEP_AXES:
            errors["axis"] = f"must be one of {', '.join(SWEEP_AXES)}"
        else:
            axis = SWEEP_AXES[self.axis]
            outside = [v for v in self.values if not axis.contains(v)]
            if outside:
                errors["values"] = f"{outside} outside the {axis.name} sweep bounds [{axis.lower}, {axis.upper}]"
        unknown = [c for c in self.controllers if c not in CONTROLLERS]
        if unknown or not self.controllers:
            errors["controllers"] = f"must be a non-empty subset of {', '.join(CONTROLLERS)}"
        for name in ("distances", "bearings_deg", "speeds", "seeds"):
            if not getattr(self, name):
                errors[name] = "must not be empty"
        if errors:
            raise ValidationError(errors)

    def replace(self, **changes: Any) -> "SweepSpec":
        return dataclasses.replace(self, **changes)

    def resolved_values(self, base: VesselParams) -> tuple[float, ...]:
        return self.values or SWEEP_AXES[self.axis].default_values(base)

    def goals(self) -> List[EpisodeConfig]:
        return evaluation_grid(self.distances, self.bearings_deg, self.speeds)


class Controller(Protocol):
    def reset(self) -> None: ...

    def __call__(self, state: VesselState, goal: Goal) -> Action: ...


class PolicyController:
    """Deterministic policy queried on noiseless observations."""

    def __init__(self, net: ActorCritic):
        self.net = net.eval()

    def reset(self) -> None:
        pass

    def __call__(self, state: VesselState, goal: Goal) -> Action:
        return act(self.net, observe(state, goal), deterministic=True)


@dataclass
class EpisodeRecord:
    controller: str
    goal: Goal
    goal_distance: float
    goal_bearing_deg: float
    initial_speed: float
    params: VesselParams
    disturbance: DisturbanceWrench
    times: FloatArray
    states: FloatArray
    actions: FloatArray
    rewards: FloatArray
    success: bool
    time_to_goal: float = math.nan
    success_radius: float = 0.3
    solver_degraded_steps: int = 0
    seed: int = 0
    error: Optional[str] = None

    @property
    def distances(self) -> FloatArray:
        return np.hypot(self.goal.gx - self.states[:, 0], self.goal.gy - self.states[:, 1])

    def trajectory_frame(self) -> pd.DataFrame:
        """One row per sample; the command and reward of the final sample are empty."""
        n = len(self.actions)
        commands = np.full((n + 1, 2), np.nan)
        commands[:n] = self.actions
        rewards = np.full(n + 1, np.nan)
        rewards[:n] = self.rewards
        frame = pd.DataFrame(self.states[:, :6], columns=["x", "y", "psi", "u", "v", "r"])
        frame.insert(0, "t", self.times)
        frame["left"] = commands[:, 0]
        frame["right"] = commands[:, 1]
        frame["reward"] = rewards
        frame["d"] = self.distances
        return frame[TRAJECTORY_COLUMNS]


@dataclass(frozen=True)
class MetricsRow:
    success: bool
    T_norm: Optional[float] = None
    delta_d: Optional[float] = None
    E_acc_norm: Optional[float] = None


def path_length(record: EpisodeRecord) -> float:
    """Polyline length from the start to the first sample inside the success radius."""
    inside = np.flatnonzero(record.distances < record.success_radius)
    end = int(inside[0]) if inside.size else len(record.states) - 1
    segments = np.diff(record.states[: end + 1, :2], axis=0)
    return float(np.hypot(segments[:, 0], segments[:, 1]).sum())


def compute_metrics(record: EpisodeRecord, d_threshold: float = 0.1) -> MetricsRow:
    if not record.success:
        return MetricsRow(success=False)
    d = record.goal_distance
    if not d > 0.0:
        raise ValueError("goal distance must be > 0")
    d_real = path_length(record)
    effort = float(np.abs(record.actions).sum()) if len(record.actions) else 0.0
    return MetricsRow(
        success=True,
        T_norm=record.time_to_goal / d,
        delta_d=d_real - (d - d_threshold),
        E_acc_norm=effort / d,
    )


def run_episode(
    controller: Controller,
    controller_id: str,
    episode_config: EpisodeConfig,
    base_params: VesselParams = VesselParams(),
    weights: RewardWeights = RewardWeights(),
    task: TaskConfig = TaskConfig(),
    seed: int = 0,
) -> EpisodeRecord:
    """Run one noiseless episode to capture or time-out and record it."""
    start = reset(seed, episode_config, base_params, task=task)
    episode = Episode(start, weights, task)
    controller.reset()

    times = [0.0]
    states = [episode.state.as_array()]
    actions: List[FloatArray] = []
    rewards: List[float] = []
    while not episode.done:
        action = controller(episode.state, episode.goal)
        outcome = episode.step(action)
        times.append(episode.time)
        states.append(episode.state.as_array())
        actions.append(action.as_array())
        rewards.append(outcome.reward)

    return EpisodeRecord(
        controller=controller_id,
        goal=start.goal,
        goal_distance=float(episode_config.goal_distance or math.hypot(start.goal.gx, start.goal.gy)),
        goal_bearing_deg=float(
            episode_config.goal_bearing_deg
            if episode_config.goal_bearing_deg is not None
            else math.degrees(math.atan2(start.goal.gy, start.goal.gx))
        ),
        initial_speed=start.state.u,
        params=start.params,
        disturbance=start.disturbance,
        times=np.array(times),
        states=np.array(states),
        actions=np.array(actions).reshape(-1, 2),
        rewards=np.array(rewards),
        success=episode.success,
        time_to_goal=episode.time if episode.success else math.nan,
        success_radius=weights.success_radius,
        solver_degraded_steps=int(getattr(controller, "degraded_steps", 0)),
        seed=seed,
    )


def _failed_record(controller_id: str, config: EpisodeConfig, params: VesselParams, seed: int, error: str) -> EpisodeRecord:
    distance = float(config.goal_distance or 0.0)
    bearing = float(config.goal_bearing_deg or 0.0)
    return EpisodeRecord(
        controller=controller_id,
        goal=Goal.from_polar(distance, bearing),
        goal_distance=distance,
        goal_bearing_deg=bearing,
        initial_speed=float(config.initial_speed or 0.0),
        params=params,
        disturbance=NO_DISTURBANCE,
        times=np.zeros(1),
        states=np.zeros((1, 8)),
        actions=np.zeros((0, 2)),
        rewards=np.zeros(0),
        success=False,
        seed=seed,
        error=error,
    )


@dataclass
class ControllerFactory:
    """Picklable recipe for building a controller inside a worker process."""

    controller_id: str
    policy_state: Optional[dict[str, Any]] = None
    policy_architecture: Optional[dict[str, int]] = None
    mpc_model: MpcModel = field(default_factory=MpcModel)
    ocp: OcpConfig = field(default_factory=OcpConfig)

    @classmethod
    def for_policy(cls, net: ActorCritic) -> "ControllerFactory":
        return cls("rl", policy_state=net.state_dict(), policy_architecture=net.architecture())

    @classmethod
    def for_mpc(cls, model: MpcModel, ocp: OcpConfig) -> "ControllerFactory":
        return cls("mpc", mpc_model=model, ocp=ocp)

    def build(self) -> Controller:
        if self.controller_id == "mpc":
            return MpcController(self.mpc_model, self.ocp)
        if self.policy_state is None or self.policy_architecture is None:
            raise ValueError("the rl controller needs policy weights")
        net = ActorCritic(**self.policy_architecture)
        net.load_state_dict(self.policy_state)
        return PolicyController(net)


@dataclass
class SweepJob:
    factory: ControllerFactory
    axis: str
    value: Optional[float]
    seed: int
    goals: List[EpisodeConfig]
    base_params: VesselParams
    weights: RewardWeights
    task: TaskConfig
    keep_records: bool = False


@dataclass
class JobResult:
    rows: List[dict[str, Any]]
    records: List[EpisodeRecord]


def _overrides(axis: str, value: Optional[float]) -> dict[str, float]:
    if value is None:
        return {}
    return {get_axis(axis).field: float(value)}


def metrics_row(record: EpisodeRecord, axis: str, value: Optional[float], d_threshold: float) -> dict[str, Any]:
    metrics = compute_metrics(record, d_threshold)
    return {
        "controller": record.controller,
        "sweep_axis": axis,
        "sweep_value": math.nan if value is None else float(value),
        "goal_d": record.goal_distance,
        "goal_bearing_deg": record.goal_bearing_deg,
        "v0": record.initial_speed,
        "seed": record.seed,
        "success": metrics.success,
        "T": record.time_to_goal,
        "T_norm": math.nan if metrics.T_norm is None else metrics.T_norm,
        "delta_d": math.nan if metrics.delta_d is None else metrics.delta_d,
        "E_acc_norm": math.nan if metrics.E_acc_norm is None else metrics.E_acc_norm,
        "solver_degraded_steps": record.solver_degraded_steps,
    }


def run_job(job: SweepJob) -> JobResult:
    torch.set_num_threads(1)
    controller = job.factory.build()
    overrides = _overrides(job.axis, job.value)
    params = job.base_params.replace(**overrides)
    rows, records = [], []
    for goal in job.goals:
        config = dataclasses.replace(goal, params_overrides=overrides, randomization_level=0.0)
        try:
            record = run_episode(
                controller, job.factory.controller_id, config, job.base_params, job.weights, job.task, job.seed
            )
        except Exception as exc:
            logger.exception(
                "%s episode failed (d=%s, bearing=%s, %s=%s)",
                job.factory.controller_id,
                goal.goal_distance,
                goal.goal_bearing_deg,
                job.axis,
                job.value,
            )
            record = _failed_record(job.factory.controller_id, config, params, job.seed, repr(exc))
        rows.append(metrics_row(record, job.axis, job.value, job.weights.d_threshold))
        if job.keep_records:
            records.append(record)
    return JobResult(rows, records)


def run_jobs(jobs: Sequence[SweepJob], workers: int = 1) -> List[JobResult]:
    """Run jobs in order, in a process pool when ``workers`` > 1."""
    if workers <= 1 or len(jobs) <= 1:
        return [run_job(job) for job in jobs]
    results = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for index, result in enumerate(pool.map(run_job, jobs)):
            results.append(result)
            logger.info("sweep chunk %d/%d done", index + 1, len(jobs))
    return results


def _chunks(items: List[EpisodeConfig], size: int) -> Iterable[List[EpisodeConfig]]:
    for start in range(0, len(items), size):
        yield items[start : start + size]


def run_sweep(
    spec: SweepSpec,
    policy: Optional[ActorCritic] = None,
    mpc_model: MpcModel = MpcModel(),
    ocp: OcpConfig = OcpConfig(),
    base_params: VesselParams = VesselParams(),
    weights: RewardWeights = RewardWeights(),
    task: TaskConfig = TaskConfig(),
    jobs: int = 1,
    chunk_size: int = 57,
) -> pd.DataFrame:
    """
    One episode per controller x sweep value x seed x goal. Rows come back in
    that order regardless of ``jobs``; failed episodes are rows with
    ``success`` false.
    """
    factories = []
    for controller_id in spec.controllers:
        if controller_id == "rl":
            if policy is None:
                raise ValueError("the rl controller needs a trained policy")
            factories.append(ControllerFactory.for_policy(policy))
        else:
            factories.append(ControllerFactory.for_mpc(mpc_model, ocp))

    goals = spec.goals()
    work = [
        SweepJob(factory, spec.axis, value, seed, chunk, base_params, weights, task)
        for factory in factories
        for value in spec.resolved_values(base_params)
        for seed in spec.seeds
        for chunk in _chunks(goals, chunk_size)
    ]
    logger.info("sweep over %s: %d chunks of up to %d episodes on %d workers", spec.axis, len(work), chunk_size, jobs)
    rows = [row for result in run_jobs(work, jobs) for row in result.rows]
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def trajectory_goals(
    distances: Sequence[float] = TRAJECTORY_DISTANCES,
    bearings_deg: Sequence[float] = TRAJECTORY_BEARINGS_DEG,
) -> List[EpisodeConfig]:
    return evaluation_grid(distances, bearings_deg, (0.0,))


def parse_condition(text: str) -> tuple[str, Optional[float]]:
    """``nominal`` or ``<axis>=<value>``, e.g. ``com=0.1``."""
    if text == "nominal":
        return "nominal", None
    name, sep, raw = text.partition("=")
    if not sep:
        raise ValueError(f"condition {text!r} must be 'nominal' or '<axis>=<value>'")
    axis = get_axis(name)
    try:
        value = float(raw)
    except ValueError:
        raise ValueError(f"condition {text!r} has a non-numeric value") from None
    if not axis.contains(value):
        raise ValueError(f"condition {text!r} outside the {axis.name} sweep bounds")
    return name, value


def collect_trajectories(
    factories: Sequence[ControllerFactory],
    condition: str,
    goals: Sequence[EpisodeConfig],
    base_params: VesselParams = VesselParams(),
    weights: RewardWeights = RewardWeights(),
    task: TaskConfig = TaskConfig(),
    jobs: int = 1,
) -> List[EpisodeRecord]:
    axis, value = parse_condition(condition)
    work = [
        SweepJob(factory, axis, value, 0, list(goals), base_params, weights, task, keep_records=True)
        for factory in factories
    ]
    return [record for result in run_jobs(work, jobs) for record in result.records]


def _mean_std(values: pd.Series) -> dict[str, Optional[float]]:
    values = values.dropna()
    if values.empty:
        return {"mean": None, "std": None}
    return {"mean": float(values.mean()), "std": float(values.std(ddof=0))}


def aggregate(table: pd.DataFrame) -> pd.DataFrame:
    """Success rate and per-metric mean/std (population) per controller and sweep value."""
    records = []
    for (controller, value), group in table.groupby(["controller", "sweep_value"], sort=True, dropna=False):
        row: dict[str, Any] = {
            "controller": controller,
            "sweep_value": value,
            "episodes": len(group),
            "success_rate": float(group["success"].astype(bool).mean()),
            "solver_degraded_steps": int(group["solver_degraded_steps"].sum()),
        }
        succeeded = group[group["success"].astype(bool)]
        for metric in METRICS:
            stats = _mean_std(succeeded[metric])
            row[f"{metric}_mean"] = math.nan if stats["mean"] is None else stats["mean"]
            row[f"{metric}_std"] = math.nan if stats["std"] is None else stats["std"]
        records.append(row)
    return pd.DataFrame(records)


def summarize(table: pd.DataFrame) -> dict[str, dict[str, Any]]:
    """Nested summary: controller -> sweep value -> success rate and metric stats."""
    summary: dict[str, dict[str, Any]] = {}
    for row in aggregate(table).to_dict("records"):
        value = row["sweep_value"]
        key = "nominal" if pd.isna(value) else f"{value:g}"
        entry: dict[str, Any] = {
            "episodes": row["episodes"],
            "success_rate": row["success_rate"],
            "solver_degraded_steps": row["solver_degraded_steps"],
        }
        for metric in METRICS:
            mean, std = row[f"{metric}_mean"], row[f"{metric}_std"]
            entry[metric] = {
                "mean": None if pd.isna(mean) else mean,
                "std": None if pd.isna(std) else std,
            }
        summary.setdefault(row["controller"], {})[key] = entry
    return summary


def write_sweep(table: pd.DataFrame, output_dir: Path, stem: str) -> tuple[Path, Path]:
    output_dir.mkdir(parents=True, exist_ok=True)
    csv_path = output_dir / f"{stem}.csv"
    json_path = output_dir / f"{stem}_summary.json"
    table.to_csv(csv_path, index=False)
    json_path.write_text(json.dumps(summarize(table), indent=2, sort_keys=True))
    return csv_path, json_path


def load_metrics_csv(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise FileNotFoundError(f"metrics file not found: {path}")
    try:
        table = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise ValueError(f"metrics file {path} is empty") from None
    missing = [column for column in CSV_COLUMNS if column not in table.columns]
    if missing:
        raise ValueError(f"metrics file {path} lacks columns: {', '.join(missing)}")
    if table.empty:
        raise ValueError(f"metrics file {path} has no rows")
    table["success"] = table["success"].astype(bool)
    return table


def _goal_set(table: pd.DataFrame) -> set[tuple[Any, ...]]:
    return set(map(tuple, table[GOAL_KEY].itertuples(index=False, name=None)))


def percent_change(nominal: float, disturbed: float) -> float:
    if pd.isna(nominal) or pd.isna(disturbed) or nominal == 0.0:
        return math.nan
    return 100.0 * (disturbed - nominal) / nominal


def degradation_table(nominal: pd.DataFrame, disturbed: pd.DataFrame) -> pd.DataFrame:
    """
    Percent change of each metric's mean from nominal to disturbed rows, per
    controller. Each controller is only compared against itself.
    """
    rows = []
    controllers = sorted(set(nominal["controller"]) & set(disturbed["controller"]))
    if not controllers:
        raise ValueError("no controller appears in both tables")
    for controller in controllers:
        before = nominal[nominal["controller"] == controller]
        after = disturbed[disturbed["controller"] == controller]
        if _goal_set(before) != _goal_set(after):
            raise ValueError(f"goal sets of the {controller} rows differ between the two tables")
        for metric in METRICS:
            normal_mean = before.loc[before["success"].astype(bool), metric].mean()
            disturbed_mean = after.loc[after["success"].astype(bool), metric].mean()
            rows.append(
                {
                    "agent": controller,
                    "metric": metric,
                    "normal": float(normal_mean),
                    "disturbed": float(disturbed_mean),
                    "degradation_pct": percent_change(float(normal_mean), float(disturbed_mean)),
                }
            )
    return pd.DataFrame(rows, columns=["agent", "metric", "normal", "disturbed", "degradation_pct"])


def sweep_degradation(table: pd.DataFrame) -> pd.DataFrame:
    """Degradation of every sweep value against the smallest value of the same table."""
    values = sorted(table["sweep_value"].dropna().unique())
    if len(values) < 2:
        raise ValueError("a single table needs at least two sweep values to compare")
    nominal = table[table["sweep_value"] == values[0]]
    frames = []
    for value in values[1:]:
        frame = degradation_table(nominal, table[table["sweep_value"] == value])
        frame.insert(1, "sweep_value", value)
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def format_degradation(table: pd.DataFrame) -> str:
    def cell(value: float) -> str:
        return "undefined" if pd.isna(value) else f"{value:.3f}"

    with_value = "sweep_value" in table.columns
    lines = ["Agent | " + ("Value | " if with_value else "") + "Metric | Normal | Disturbed | Degradation %"]
    for row in table.to_dict("records"):
        pct = "undefined" if pd.isna(row["degradation_pct"]) else f"{row['degradation_pct']:+.2f}"
        value = f"{row['sweep_value']:g} | " if with_value else ""
        lines.append(
            f"{row['agent']} | {value}{row['metric']} | {cell(row['normal'])} | {cell(row['disturbed'])} | {pct}"
        )
    return "\n".join(lines)


def degradation_records(table: pd.DataFrame) -> List[Mapping[str, Any]]:
    return [
        {key: (None if isinstance(value, float) and math.isnan(value) else value) for key, value in row.items()}
        for row in table.to_dict("records")
    ]
