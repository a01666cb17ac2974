from pathlib import Path
from typing import Any

from django.core.management.base import CommandParser

from capture.evaluation import ControllerFactory, collect_trajectories, parse_condition, trajectory_goals
from capture.management.base import CaptureCommand
from capture.plots import plot_trajectories


class Command(CaptureCommand):
    help = (
        "Run the representative goal subset (3/6/9 m at -45/0/45 deg, from rest) per controller "
        "and condition; writes trajectory CSVs and overhead figures."
    )
    output_name = "plot"

    def add_arguments(self, parser: CommandParser) -> None:
        super().add_arguments(parser)
        parser.add_argument("--checkpoint", type=Path, default=None, help="Policy weights for the rl controller.")
        parser.add_argument("--controllers", default="rl,mpc", help="Comma-separated controllers.")
        parser.add_argument(
            "--conditions",
            nargs="+",
            default=["nominal"],
            help="Conditions to plot: nominal, com=<m>, nr=<value>, xu=..., mass=..., inertia=...",
        )

    def run(self, options: dict[str, Any]) -> None:
        controllers = self.parse_controllers(options["controllers"])
        for condition in options["conditions"]:
            parse_condition(condition)
        config = self.load_config(options)
        policy = self.load_policy(options["checkpoint"], controllers, config)
        output = self.output_dir(options)
        self.echo_config(config, output)

        factories = [
            ControllerFactory.for_policy(policy) if name == "rl" and policy is not None
            else ControllerFactory.for_mpc(config.mpc_model(), config.mpc)
            for name in controllers
        ]
        goals = trajectory_goals()
        for condition in options["conditions"]:
            records = collect_trajectories(
                factories, condition, goals, config.dynamics, config.reward, config.task, self.jobs(options)
            )
            slug = condition.replace("=", "_")
            directory = output / slug
            directory.mkdir(parents=True, exist_ok=True)
            for record in records:
                name = f"{record.controller}_d{record.goal_distance:g}_b{record.goal_bearing_deg:+g}.csv"
                record.trajectory_frame().to_csv(directory / name, index=False)
            figure = plot_trajectories(records, output / f"trajectories_{slug}.svg", title=condition)
            captured = sum(record.success for record in records)
            self.stdout.write(f"{condition}: {captured}/{len(records)} captured, figure {figure}")
        self.stdout.write(self.style.SUCCESS(f"Trajectories written to {output}"))
