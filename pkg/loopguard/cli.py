"""
Command-line entry point.

Subcommands::

    loopguard generate --config world.cfg --out world.lgds
    loopguard run --input world.lgds --gt world.gt --ttime 0.7 --out out/
    loopguard eval --input out/ --gt world.gt
    loopguard sweep --input world.lgds --gt world.gt --thresholds 0.05,0.1,0.2

Configuration precedence is defaults, then the ``--config`` file, then flags.
Exit codes: 0 on success, 2 for usage and configuration errors (including
missing input files), 1 for failures during processing.
"""

from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence
import argparse
import logging
import sys

from dateutil.parser import isoparse

from loopguard import __version__, constants
from loopguard.enums import ClockMode, SweepMode
from loopguard.eval import (
    pr_sweep,
    plot_pr_curve,
    plot_timing,
    read_detections,
    score,
    timing_summary,
    write_detections,
    write_iterations,
    write_pr_curve,
    write_timing_summary,
)
from loopguard.exceptions import ConfigError, LoopGuardError
from loopguard.ingest import (
    SyntheticWorldConfig,
    generate_synthetic,
    load_ground_truth,
    read_stream,
    write_ground_truth,
    write_stream,
)
from loopguard.loopguard import LoopGuard
from loopguard.pipeline import IterationReport, PipelineConfig
from loopguard.utils import parse_float, parse_float_list, read_csv_rows, read_json, write_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


@dataclass
class RunManifest:
    """
    Everything needed to reproduce a run.

    Attributes:
        config: Pipeline config as ``key -> text`` (readable by :meth:`PipelineConfig.from_dict`)
        input: Descriptor stream path
        gt: Ground truth path, if any
        output: Output directory
        seed: Seed of the run
        tool_version: Package version
        created_at: UTC time the run started
    """

    config: Dict[str, str]
    input: str
    output: str
    seed: int
    gt: Optional[str] = None
    tool_version: str = __version__
    created_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc))

    @classmethod
    def for_run(cls, config: PipelineConfig, input_path: Path, output: Path, gt: Optional[Path]) -> "RunManifest":
        values = {
            key: value.value if isinstance(value, Enum) else str(value)
            for key, value in config.to_dict().items()
        }
        return cls(
            config=values,
            input=str(input_path),
            output=str(output),
            seed=config.seed,
            gt=str(gt) if gt else None,
        )

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig.from_dict(self.config)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunManifest":
        return cls(
            config=dict(data["config"]),
            input=data["input"],
            output=data["output"],
            seed=int(data["seed"]),
            gt=data.get("gt"),
            tool_version=data.get("tool_version", ""),
            created_at=isoparse(data["created_at"]),
        )

    def write(self, path: Path) -> None:
        write_json(self.to_dict(), path)

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        return cls.from_dict(read_json(path))


def _require_file(path: Optional[Path], flag: str) -> Path:
    if path is None:
        raise ConfigError(f"{flag} is required", field=flag)
    if not path.is_file():
        raise ConfigError(f"File not found: {path}", field=flag, value=str(path))
    return path


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    config = PipelineConfig()
    if args.config is not None:
        config = PipelineConfig.from_file(args.config, base=config)
    overrides: Dict[str, Any] = {}
    if args.ttime is not None:
        overrides["time_limit"] = parse_float(args.ttime, "ttime")
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.clock is not None:
        overrides["clock"] = ClockMode(args.clock)
    config = replace(config, **overrides)
    config.validate()
    return config


def cmd_run(args: argparse.Namespace) -> int:
    """Run the pipeline over a stream and write the run directory."""
    input_path = _require_file(args.input, "--input")
    gt_path = _require_file(args.gt, "--gt") if args.gt is not None else None
    config = _pipeline_config(args)
    gt = load_ground_truth(gt_path) if gt_path else None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    RunManifest.for_run(config, input_path, out, gt_path).write(out / constants.MANIFEST_FILE)

    stream = read_stream(input_path)
    with LoopGuard(config, store_path=out / constants.LTM_FILE) as detector:
        result = detector.run(stream)
    write_iterations(result.reports, out / constants.ITERATIONS_FILE)
    write_detections(result.detections, out / constants.DETECTIONS_FILE)

    print(f"Processed {len(result.reports)} images, {len(result.detections)} loop closures -> {out}")
    if gt is not None:
        _print_point(score(result.detections, gt, config.loop_threshold))
    if args.plot and result.reports:
        plot_timing(result.reports, out / "timing.svg", time_limit=config.time_limit)
    return EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    """Write a synthetic descriptor stream and its ground truth."""
    world = SyntheticWorldConfig()
    if args.config is not None:
        world = SyntheticWorldConfig.from_file(_require_file(args.config, "--config"))
    if args.seed is not None:
        world = replace(world, seed=args.seed)
    world.validate()

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frames, gt = generate_synthetic(world)
    write_stream(frames, out, dim=world.dim)
    gt_path = out.with_suffix(".gt")
    write_ground_truth(gt, gt_path)
    print(f"Wrote {len(frames)} images to {out} and {len(gt)} ground truth pairs to {gt_path}")
    return EXIT_OK


def _read_reports(path: Path) -> List[IterationReport]:
    reports = []
    for row in read_csv_rows(path):
        reports.append(
            IterationReport(
                image_id=int(row["image_id"]),
                location_id=-1,
                elapsed=float(row["elapsed_s"]),
                wm_size=int(row["wm_size"]),
                stm_size=int(row["stm_size"]),
                dictionary_size=int(row["dict_size"]),
                retrieved=int(row["retrieved"]),
                transferred=int(row["transferred"]),
            )
        )
    return reports


def cmd_eval(args: argparse.Namespace) -> int:
    """Score a run directory against ground truth and summarize its timing."""
    run_dir = Path(args.input) if args.input is not None else None
    if run_dir is None or not run_dir.is_dir():
        raise ConfigError(f"Run directory not found: {run_dir}", field="--input", value=str(run_dir))
    detections_path = _require_file(run_dir / constants.DETECTIONS_FILE, "--input")
    iterations_path = _require_file(run_dir / constants.ITERATIONS_FILE, "--input")
    gt = load_ground_truth(_require_file(args.gt, "--gt"))

    threshold = None
    manifest_path = run_dir / constants.MANIFEST_FILE
    if manifest_path.is_file():
        threshold = RunManifest.read(manifest_path).pipeline_config().loop_threshold

    out = Path(args.out) if args.out is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)
    point = score(read_detections(detections_path), gt, threshold)
    write_pr_curve([point], out / constants.PR_CURVE_FILE)
    _print_point(point)

    reports = _read_reports(iterations_path)
    if reports:
        summary = timing_summary(reports)
        write_timing_summary(summary, out / constants.TIMING_FILE)
        print(
            f"iterations={summary.iterations} max={summary.max_elapsed:.6f}s mean={summary.mean_elapsed:.6f}s "
            f"p95={summary.p95_elapsed:.6f}s max_wm={summary.max_wm} max_dict={summary.max_dictionary}"
        )
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    """Precision-recall curve of a stream over loop thresholds."""
    input_path = _require_file(args.input, "--input")
    gt = load_ground_truth(_require_file(args.gt, "--gt"))
    config = _pipeline_config(args)
    thresholds = (
        parse_float_list(args.thresholds, "thresholds") if args.thresholds else list(constants.DEFAULT_SWEEP_THRESHOLDS)
    )

    points = pr_sweep(read_stream(input_path), config, gt, thresholds, SweepMode(args.mode))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pr_curve(points, out / constants.PR_CURVE_FILE)
    for point in points:
        _print_point(point)
    if args.plot:
        plot_pr_curve(points, out / "pr_curve.svg")
    return EXIT_OK


def _print_point(point) -> None:
    threshold = "-" if point.threshold is None else f"{point.threshold:g}"
    print(
        f"threshold={threshold} precision={point.precision:.4f} recall={point.recall:.4f} "
        f"tp={point.tp} fp={point.fp} gt_count={point.gt_count}"
    )


def _add_pipeline_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--input", type=Path, help="Descriptor stream (.lgds)")
    parser.add_argument("--gt", type=Path, help="Ground truth pairs file")
    parser.add_argument("--config", type=Path, help="Pipeline key = value config file")
    parser.add_argument("--ttime", help="Iteration time limit in seconds, or 'inf'")
    parser.add_argument("--seed", type=int, help="Seed recorded with the run")
    parser.add_argument("--clock", choices=[mode.value for mode in ClockMode], help="Time measurement")
    parser.add_argument("--plot", action="store_true", help="Also write an SVG plot (needs matplotlib)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loopguard", description="Appearance-based loop closure detection")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", help="DEBUG, INFO, WARNING or ERROR")
    subparsers = parser.add_subparsers(dest="command", required=True)

    run_parser = subparsers.add_parser("run", help="Process a stream and write a run directory")
    _add_pipeline_args(run_parser)
    run_parser.add_argument("--out", type=Path, required=True, help="Output directory")
    run_parser.set_defaults(func=cmd_run)

    generate_parser = subparsers.add_parser("generate", help="Write a synthetic stream and its ground truth")
    generate_parser.add_argument("--config", type=Path, help="Synthetic world key = value file")
    generate_parser.add_argument("--seed", type=int, help="Override the world's seed")
    generate_parser.add_argument("--out", type=Path, required=True, help="Stream path; ground truth gets a .gt suffix")
    generate_parser.set_defaults(func=cmd_generate)

    eval_parser = subparsers.add_parser("eval", help="Score a run directory")
    eval_parser.add_argument("--input", type=Path, help="Run directory")
    eval_parser.add_argument("--gt", type=Path, help="Ground truth pairs file")
    eval_parser.add_argument("--out", type=Path, help="Output directory (default: the run directory)")
    eval_parser.set_defaults(func=cmd_eval)

    sweep_parser = subparsers.add_parser("sweep", help="Precision-recall curve over loop thresholds")
    _add_pipeline_args(sweep_parser)
    sweep_parser.add_argument("--thresholds", help="Comma separated loop thresholds")
    sweep_parser.add_argument(
        "--mode", choices=[mode.value for mode in SweepMode], default=SweepMode.REPLAY.value, help="Sweep mode"
    )
    sweep_parser.add_argument("--out", type=Path, required=True, help="Output directory")
    sweep_parser.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"loopguard: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (LoopGuardError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"loopguard: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    raise SystemExit(main())
