import dataclasses
import math
from typing import Any

import torch
from django.core.management.base import CommandParser

from capture.management.base import CaptureCommand
from capture.ppo import train, write_curve


class Command(CaptureCommand):
    help = "Train the PPO capture policy; writes checkpoints and the training curve CSV."
    output_name = "train"

    def add_arguments(self, parser: CommandParser) -> None:
        super().add_arguments(parser)
        parser.add_argument(
            "--no-checkpoints",
            action="store_true",
            help="Only write the final weights, not the periodic checkpoints.",
        )

    def run(self, options: dict[str, Any]) -> None:
        config = self.load_config(options)
        output = self.output_dir(options)
        self.echo_config(config, output)
        if not config.ppo.single_threaded:
            torch.set_num_threads(self.jobs(options))
        if options["no_checkpoints"]:
            config = config.replace(ppo=dataclasses.replace(config.ppo, checkpoint_interval=0))

        result = train(config.make_env(), config.ppo, config.seed, checkpoint_dir=output)
        write_curve(result.curve, output / "training_curve.csv")

        rate = result.final_success_rate
        rate_text = "n/a (no finished episodes)" if math.isnan(rate) else f"{rate:.3f}"
        self.stdout.write(
            self.style.SUCCESS(
                f"Trained {len(result.curve)} iterations; final success rate {rate_text}. "
                f"Weights in {output / 'policy_final.pt'}"
            )
        )
