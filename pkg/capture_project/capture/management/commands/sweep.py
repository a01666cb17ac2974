from pathlib import Path
from typing import Any

from django.core.management.base import CommandParser

from capture.evaluation import SWEEP_AXES, run_sweep, write_sweep
from capture.management.base import CaptureCommand


class Command(CaptureCommand):
    help = "Run a robustness sweep over the goal grid; writes the metrics CSV and summary JSON."
    output_name = "sweep"

    def add_arguments(self, parser: CommandParser) -> None:
        super().add_arguments(parser)
        parser.add_argument("--checkpoint", type=Path, default=None, help="Policy weights for the rl controller.")
        parser.add_argument(
            "--axis",
            choices=sorted(SWEEP_AXES),
            default=None,
            help="Swept parameter (default: sweep.axis from the config).",
        )
        parser.add_argument(
            "--controllers",
            default=None,
            help="Comma-separated controllers, e.g. rl,mpc (default: sweep.controllers).",
        )
        parser.add_argument(
            "--values",
            default=None,
            help="Comma-separated sweep values (default: sweep.values, else the axis defaults).",
        )

    def run(self, options: dict[str, Any]) -> None:
        overrides = list(options["overrides"])
        if options["axis"]:
            overrides.append(f"sweep.axis={options['axis']}")
            if options["values"] is None:
                # values from the config belong to its own axis
                overrides.append("sweep.values=[]")
        if options["values"] is not None:
            overrides.append(f"sweep.values=[{options['values']}]")
        if options["controllers"] is not None:
            controllers = self.parse_controllers(options["controllers"])
            overrides.append(f"sweep.controllers=[{','.join(controllers)}]")
        config = self.load_config({**options, "overrides": overrides})
        spec = config.sweep

        policy = self.load_policy(options["checkpoint"], spec.controllers, config)
        output = self.output_dir(options)
        self.echo_config(config, output)

        table = run_sweep(
            spec,
            policy=policy,
            mpc_model=config.mpc_model(),
            ocp=config.mpc,
            base_params=config.dynamics,
            weights=config.reward,
            task=config.task,
            jobs=self.jobs(options),
        )
        csv_path, json_path = write_sweep(table, output, f"sweep_{spec.axis}")

        for controller, rows in table.groupby("controller", sort=False):
            self.stdout.write(f"{controller}: success rate {rows['success'].mean():.3f} over {len(rows)} episodes")
        self.stdout.write(self.style.SUCCESS(f"Wrote {len(table)} rows to {csv_path} and {json_path}"))
