import json
from pathlib import Path
from typing import Any

import pandas as pd
from django.conf import settings
from django.core.management.base import CommandError, CommandParser

from capture.evaluation import (
    degradation_records,
    degradation_table,
    format_degradation,
    load_metrics_csv,
    sweep_degradation,
)
from capture.management.base import USAGE_ERROR, CaptureCommand
from capture.plots import emit_plots


class Command(CaptureCommand):
    help = (
        "Degradation table from sweep CSVs. With one CSV every sweep value is compared "
        "against the smallest one; with several, the first CSV is the nominal condition."
    )
    output_name = "report"

    def add_arguments(self, parser: CommandParser) -> None:
        parser.add_argument("csvs", nargs="+", type=Path, help="Metrics CSVs written by the sweep command.")
        parser.add_argument(
            "--output",
            type=Path,
            default=None,
            help="Output directory (default: <ASV_OUTPUT_ROOT>/report).",
        )
        parser.add_argument("--no-plots", action="store_true", help="Skip the sweep figures.")

    def run(self, options: dict[str, Any]) -> None:
        tables = [load_metrics_csv(path) for path in options["csvs"]]
        try:
            if len(tables) == 1:
                result = sweep_degradation(tables[0])
            else:
                frames = []
                for path, table in zip(options["csvs"][1:], tables[1:]):
                    frame = degradation_table(tables[0], table)
                    frame.insert(1, "disturbed_csv", path.name)
                    frames.append(frame)
                result = pd.concat(frames, ignore_index=True)
        except ValueError as exc:
            raise CommandError(str(exc), returncode=USAGE_ERROR) from exc

        output = options["output"] or Path(settings.ASV_OUTPUT_ROOT) / self.output_name
        output.mkdir(parents=True, exist_ok=True)
        text = format_degradation(result)
        (output / "degradation.txt").write_text(text + "\n")
        (output / "degradation.json").write_text(json.dumps(degradation_records(result), indent=2))
        self.stdout.write(text)

        if not options["no_plots"]:
            written = emit_plots(pd.concat(tables, ignore_index=True), output)
            self.stdout.write(f"Wrote {len(written)} plot files to {output}")
        self.stdout.write(self.style.SUCCESS(f"Degradation table written to {output}"))
