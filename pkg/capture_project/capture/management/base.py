from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, List

from django.conf import settings
from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError, CommandParser

from capture.config import RunConfig, dump_run_config, load_run_config
from capture.evaluation import CONTROLLERS
from capture.ppo import ActorCritic, CheckpointError, TrainingDivergedError, load_checkpoint

logger = logging.getLogger(__name__)

USAGE_ERROR = 2
RUNTIME_ERROR = 1


def format_validation_error(error: ValidationError) -> str:
    if hasattr(error, "error_dict"):
        return "; ".join(f"{key}: {' '.join(messages)}" for key, messages in sorted(error.message_dict.items()))
    return "; ".join(error.messages)


class CaptureCommand(BaseCommand):
    """
    Shared plumbing for the workbench commands: run-config loading with
    ``--set`` overrides, the output directory and exit codes (2 for usage
    and config errors, 1 for runtime failures).
    """

    output_name = "run"

    def add_arguments(self, parser: CommandParser) -> None:
        parser.add_argument(
            "--config",
            type=Path,
            default=None,
            help="YAML run config (default: ASV_DEFAULT_CONFIG).",
        )
        parser.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.FIELD=VALUE",
            help="Override one config field; repeatable.",
        )
        parser.add_argument("--seed", type=int, default=None, help="Root seed, overrides the config.")
        parser.add_argument(
            "--output",
            type=Path,
            default=None,
            help="Output directory (default: <ASV_OUTPUT_ROOT>/<command>).",
        )
        parser.add_argument(
            "--jobs",
            type=int,
            default=None,
            help="Worker processes (default: ASV_JOBS, the available cores).",
        )

    def load_config(self, options: dict[str, Any]) -> RunConfig:
        path = options["config"] or Path(settings.ASV_DEFAULT_CONFIG)
        overrides: List[str] = list(options["overrides"])
        if options["seed"] is not None:
            overrides.append(f"seed={options['seed']}")
        try:
            return load_run_config(path, overrides)
        except FileNotFoundError as exc:
            raise CommandError(str(exc), returncode=USAGE_ERROR) from exc
        except ValidationError as exc:
            raise CommandError(f"invalid config: {format_validation_error(exc)}", returncode=USAGE_ERROR) from exc

    def output_dir(self, options: dict[str, Any]) -> Path:
        directory = options["output"] or Path(settings.ASV_OUTPUT_ROOT) / self.output_name
        directory.mkdir(parents=True, exist_ok=True)
        return directory

    def jobs(self, options: dict[str, Any]) -> int:
        jobs = options["jobs"] if options["jobs"] is not None else settings.ASV_JOBS
        if jobs < 1:
            raise CommandError("--jobs must be >= 1", returncode=USAGE_ERROR)
        return jobs

    def echo_config(self, config: RunConfig, directory: Path) -> Path:
        return dump_run_config(config, directory / "resolved_config.yaml")

    def parse_controllers(self, text: str) -> tuple[str, ...]:
        controllers = tuple(name.strip() for name in text.split(",") if name.strip())
        unknown = [name for name in controllers if name not in CONTROLLERS]
        if unknown or not controllers:
            raise CommandError(
                f"unknown controllers {unknown}; choose from {', '.join(CONTROLLERS)}",
                returncode=USAGE_ERROR,
            )
        return controllers

    def load_policy(self, path: Path | None, controllers: tuple[str, ...], config: RunConfig) -> ActorCritic | None:
        if "rl" not in controllers:
            return None
        if path is None:
            raise CommandError("--checkpoint is required for the rl controller", returncode=USAGE_ERROR)
        expected = ActorCritic(hidden_size=config.ppo.hidden_size).architecture()
        try:
            return load_checkpoint(path, expected)
        except CheckpointError as exc:
            raise CommandError(str(exc), returncode=USAGE_ERROR) from exc

    def handle(self, *args: Any, **options: Any) -> None:
        try:
            self.run(options)
        except CommandError:
            raise
        except (ValueError, FileNotFoundError) as exc:
            raise CommandError(str(exc), returncode=USAGE_ERROR) from exc
        except (TrainingDivergedError, RuntimeError, OSError) as exc:
            logger.exception("%s failed", self.output_name)
            raise CommandError(f"{self.output_name} failed: {exc}", returncode=RUNTIME_ERROR) from exc

    def run(self, options: dict[str, Any]) -> None:
        raise NotImplementedError
