"""
cli.py - Command-line entry point.

    python -m markerless run --config scene/config.json
    python -m markerless sync --config scene/config.json --fixtures recorded/
    python -m markerless plot out/angles_left_knee.csv --reference reference/angles_left_knee.csv
    python -m markerless synthgen scene/ --set noise_px=1 --set distractors=2
    python -m markerless schemas schemas/

Exit codes: 0 success, 1 stage failure, 2 configuration error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from .artifacts import write_schemas
from .config import apply_overrides, load_config
from .errors import ConfigError, MarkerlessError, StageError
from .kinematics import read_angle_csv
from .log_setup import configure_logging
from .pipeline import STAGES, run_pipeline
from .plotting import plot_angles
from .synthgen import SceneSpec, generate

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_CONFIG_ERROR = 2

# subcommands that run a single pipeline stage
STAGE_COMMANDS = ("sync", "track", "lift", "angles")


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="Path to the pipeline config JSON")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value, e.g. --set sync.seed=3 (repeatable)")
    parser.add_argument("--fixtures", help="Replay agent replies from this fixture directory")
    parser.add_argument("--out", help="Output directory (overrides output_dir)")
    parser.add_argument("--resume", action="store_true", help="Reuse stage artifacts that already exist and parse")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="markerless", description="Markerless two-camera joint-angle pipeline.")
    parser.add_argument("--verbose", action="store_true", help="Enable debug output")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run the pipeline")
    _add_run_options(run)
    run.add_argument("--stage", dest="stages", action="append", choices=STAGES,
                     help="Only run this stage (repeatable); upstream artifacts are read from disk")

    for name in STAGE_COMMANDS:
        _add_run_options(sub.add_parser(name, help=f"Run only the {name} stage"))

    plot = sub.add_parser("plot", help="Plot an angle CSV as SVG")
    plot.add_argument("angles", help="angles_<triple>.csv written by the pipeline")
    plot.add_argument("--reference", help="Reference angle CSV drawn in red")
    plot.add_argument("--out", help="SVG path (default: next to the CSV)")

    synth = sub.add_parser("synthgen", help="Write a synthetic scene directory")
    synth.add_argument("out_dir", help="Scene directory to create")
    synth.add_argument("--spec", help="SceneSpec JSON file")
    synth.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="Override a scene parameter (repeatable)")

    schemas = sub.add_parser("schemas", help="Write JSON Schemas of every artifact")
    schemas.add_argument("out_dir", help="Directory for the *.schema.json files")
    return parser


def _cli_overrides(args) -> list[str]:
    overrides = list(args.overrides)
    if args.fixtures:
        overrides += [f"agent.fixtures={json.dumps(str(Path(args.fixtures).resolve()))}", "agent.url=null"]
    if args.out:
        overrides.append(f"output_dir={json.dumps(str(Path(args.out).resolve()))}")
    return overrides


def _print_stage(name: str, paths: list[Path]) -> None:
    print(f"✅ {name} complete")
    for path in paths:
        print(f"   {path}")


def cmd_run(args, stages: Optional[Sequence[str]]) -> int:
    try:
        config = load_config(args.config, _cli_overrides(args))
        config.check_paths()
    except ConfigError as e:
        print(f"❌ ERROR: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR

    print(f"🚀 Running {', '.join(stages) if stages else 'all stages'} -> {config.output_dir}")
    try:
        run_pipeline(config, stages, resume=args.resume, progress=True, on_stage=_print_stage)
    except StageError as e:
        print(f"❌ ERROR in stage '{e.stage}': {e.cause}", file=sys.stderr)
        logger.debug("Stage failure", exc_info=e)
        return EXIT_STAGE_FAILURE
    return EXIT_OK


def cmd_plot(args) -> int:
    csv_path = Path(args.angles)
    out = Path(args.out) if args.out else csv_path.with_suffix(".svg")
    try:
        estimate = read_angle_csv(csv_path)
        reference = read_angle_csv(args.reference, estimate.name) if args.reference else None
        plot_angles(estimate, out, reference)
    except (MarkerlessError, OSError, ValueError) as e:
        print(f"❌ ERROR: {e}", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    print(f"✅ Plot written: {out}")
    return EXIT_OK


def cmd_synthgen(args) -> int:
    try:
        data = json.loads(Path(args.spec).read_text(encoding="utf-8")) if args.spec else {}
        spec = SceneSpec.model_validate(apply_overrides(data, args.overrides))
    except (ConfigError, ValidationError, OSError, json.JSONDecodeError) as e:
        print(f"❌ ERROR: invalid scene spec: {e}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    try:
        files = generate(spec, args.out_dir)
    except MarkerlessError as e:
        print(f"❌ ERROR: {e}", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    print(f"✅ Scene written: {files.root}")
    print(f"   Config: {files.config}")
    return EXIT_OK


def cmd_schemas(args) -> int:
    for path in write_schemas(args.out_dir):
        print(f"📄 {path}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)

    if args.command == "run":
        return cmd_run(args, args.stages)
    if args.command in STAGE_COMMANDS:
        return cmd_run(args, [args.command])
    if args.command == "plot":
        return cmd_plot(args)
    if args.command == "synthgen":
        return cmd_synthgen(args)
    return cmd_schemas(args)


if __name__ == "__main__":
    sys.exit(main())
