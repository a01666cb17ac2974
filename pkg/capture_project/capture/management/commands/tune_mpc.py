import itertools
from typing import Any, List

import pandas as pd
from django.core.exceptions import ValidationError
from django.core.management.base import CommandError, CommandParser

from capture.evaluation import SweepSpec, run_sweep
from capture.management.base import USAGE_ERROR, CaptureCommand


def _floats(text: str) -> List[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise CommandError(f"{text!r} is not a comma-separated list of numbers", returncode=USAGE_ERROR) from None


class Command(CaptureCommand):
    help = (
        "Grid-search the MPC stage weights on nominal dead-ahead goals and report "
        "success rate and mean T_norm per candidate."
    )
    output_name = "tune_mpc"

    def add_arguments(self, parser: CommandParser) -> None:
        super().add_arguments(parser)
        parser.add_argument("--position-weights", default="1.0", help="Comma-separated candidates.")
        parser.add_argument("--velocity-weights", default="0.05,0.1,0.2", help="Comma-separated candidates.")
        parser.add_argument("--control-weights", default="0.01,0.05,0.1", help="Comma-separated candidates.")

    def run(self, options: dict[str, Any]) -> None:
        config = self.load_config(options)
        output = self.output_dir(options)
        self.echo_config(config, output)
        spec = SweepSpec(
            axis="nr",
            values=(float(config.dynamics.N_r),),
            distances=config.sweep.distances,
            bearings_deg=(0.0,),
            speeds=(0.0,),
            controllers=("mpc",),
        )

        candidates = itertools.product(
            _floats(options["position_weights"]),
            _floats(options["velocity_weights"]),
            _floats(options["control_weights"]),
        )
        rows = []
        for position, velocity, control in candidates:
            try:
                ocp = config.mpc.replace(position_weight=position, velocity_weight=velocity, control_weight=control)
            except ValidationError as exc:
                raise CommandError(
                    f"invalid candidate ({position}, {velocity}, {control}): {exc}", returncode=USAGE_ERROR
                ) from exc
            table = run_sweep(
                spec,
                mpc_model=config.mpc_model(),
                ocp=ocp,
                base_params=config.dynamics,
                weights=config.reward,
                task=config.task,
                jobs=self.jobs(options),
            )
            succeeded = table[table["success"]]
            rows.append(
                {
                    "position_weight": position,
                    "velocity_weight": velocity,
                    "control_weight": control,
                    "success_rate": float(table["success"].mean()),
                    "T_norm_mean": float(succeeded["T_norm"].mean()) if len(succeeded) else float("nan"),
                }
            )
            self.stdout.write(
                f"position {position:g} velocity {velocity:g} control {control:g}: "
                f"success {rows[-1]['success_rate']:.3f} T_norm {rows[-1]['T_norm_mean']:.3f}"
            )

        results = pd.DataFrame(rows).sort_values(["success_rate", "T_norm_mean"], ascending=[False, True])
        results.to_csv(output / "tune_mpc.csv", index=False)
        best = results.iloc[0]
        self.stdout.write(
            self.style.SUCCESS(
                f"Best candidate: position {best.position_weight:g}, velocity {best.velocity_weight:g}, "
                f"control {best.control_weight:g} (success {best.success_rate:.3f})"
            )
        )
