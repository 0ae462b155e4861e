"""
Precision/recall scoring, threshold sweeps and timing statistics.

A detection is correct when any image of the matched location shows the
same place as the query image. Recall is counted per query image over the
images that have at least one ground truth match.
"""

from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union
import logging
import math

import numpy as np

from loopguard import constants
from loopguard.enums import SweepMode
from loopguard.exceptions import ConfigError, EvaluationError
from loopguard.ingest import DescriptorSet, GroundTruth
from loopguard.loopguard import LoopGuard
from loopguard.pipeline import (
    ITERATION_COLUMNS,
    Detection,
    IterationReport,
    PipelineConfig,
    RunResult,
)
from loopguard.utils import export_rows_to_csv, write_json

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PR_COLUMNS = ("threshold", "precision", "recall", "tp", "fp", "gt_count")


@dataclass
class PRPoint:
    """
    One operating point of a precision-recall curve.

    Attributes:
        threshold: Loop threshold (None for a plain run)
        precision: tp / (tp + fp), 1.0 without detections
        recall: tp / gt_count
        tp: Correct detections
        fp: Wrong detections
        gt_count: Query images with at least one ground truth match
    """

    threshold: Optional[float]
    precision: float
    recall: float
    tp: int
    fp: int
    gt_count: int

    def to_row(self) -> Dict:
        return asdict(self)


@dataclass
class TimingSummary:
    """Timing and size statistics of a run."""

    iterations: int
    max_elapsed: float
    mean_elapsed: float
    p95_elapsed: float
    max_wm: int
    max_dictionary: int

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class TimeLimitResult:
    """Outcome of a run under one time limit."""

    time_limit: float
    max_wm: int
    max_dictionary: int
    max_elapsed: float
    mean_elapsed: float
    transferred: int
    retrieved: int
    recall_at_full_precision: float

    def to_dict(self) -> Dict:
        return asdict(self)


def score(detections: Iterable[Detection], gt: GroundTruth, threshold: Optional[float] = None) -> PRPoint:
    """
    Score a detection log against ground truth.

    Detections of the same query image are combined first, so the result
    does not depend on the log's order.

    Args:
        detections: Accepted loop closures
        gt: Ground truth pairs
        threshold: Recorded in the returned point

    Returns:
        Precision, recall and counts
    """
    matched: Dict[int, set] = {}
    for detection in detections:
        matched.setdefault(detection.image_id, set()).update(detection.matched_images)

    tp = sum(1 for query, images in matched.items() if any((query, m) in gt for m in images))
    fp = len(matched) - tp
    gt_count = len(gt.queries())
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / gt_count if gt_count else 0.0
    return PRPoint(threshold, precision, recall, tp, fp, gt_count)


def _check_thresholds(thresholds: Sequence[float]) -> List[float]:
    if not thresholds:
        raise ConfigError("At least one threshold is required", field="thresholds", value=list(thresholds))
    for threshold in thresholds:
        if not 0.0 < threshold <= 1.0:
            raise ConfigError("Thresholds must be in (0, 1]", field="thresholds", value=threshold)
    return sorted(thresholds)


def replay_sweep(reports: Sequence[IterationReport], gt: GroundTruth, thresholds: Sequence[float]) -> List[PRPoint]:
    """
    Precision-recall points from recorded hypotheses.

    A report's candidate counts as a detection at threshold ``T`` when its
    summed probability exceeds ``T``.
    """
    points = []
    for threshold in _check_thresholds(thresholds):
        detections = [
            Detection(r.image_id, r.candidate.location_id, r.candidate.probability, r.candidate_images)
            for r in reports
            if r.candidate is not None and r.candidate.probability > threshold
        ]
        points.append(score(detections, gt, threshold))
    return points


def run_stream(
    stream: Sequence[DescriptorSet], config: PipelineConfig, store_path: Optional[PathLike] = None
) -> RunResult:
    """Run a fresh detector over ``stream``, with a temporary database unless ``store_path`` is given."""
    with LoopGuard(config, store_path=store_path) as detector:
        return detector.run(stream)


def pr_sweep(
    stream: Sequence[DescriptorSet],
    config: PipelineConfig,
    gt: GroundTruth,
    thresholds: Sequence[float] = constants.DEFAULT_SWEEP_THRESHOLDS,
    mode: SweepMode = SweepMode.REPLAY,
) -> List[PRPoint]:
    """
    Precision-recall curve over loop thresholds.

    Args:
        stream: Descriptor sets (iterated once per run)
        config: Base run parameters
        gt: Ground truth
        thresholds: Loop thresholds in (0, 1]
        mode: REPLAY runs once at the lowest threshold and filters the
            recorded hypotheses; RERUN runs once per threshold

    Returns:
        One point per threshold, ascending

    Raises:
        ConfigError: If a threshold is outside (0, 1]
    """
    ordered = _check_thresholds(thresholds)
    if mode == SweepMode.REPLAY:
        result = run_stream(stream, replace(config, loop_threshold=ordered[0]))
        points = replay_sweep(result.reports, gt, ordered)
    else:
        points = []
        for threshold in ordered:
            result = run_stream(stream, replace(config, loop_threshold=threshold))
            points.append(score(result.detections, gt, threshold))
    logger.info(f"Swept {len(points)} thresholds ({mode.value}), best recall at full precision "
                f"{recall_at_full_precision(points):.3f}")
    return points


def recall_at_full_precision(points: Iterable[PRPoint]) -> float:
    """Highest recall among points with precision 1.0 (0.0 if none)."""
    return max((p.recall for p in points if p.precision >= 1.0), default=0.0)


def timing_summary(reports: Sequence[IterationReport]) -> TimingSummary:
    """
    Aggregate iteration times and memory sizes.

    Raises:
        EvaluationError: If ``reports`` is empty
    """
    if not reports:
        raise EvaluationError("Cannot summarize an empty run")
    elapsed = np.array([r.elapsed for r in reports], dtype=np.float64)
    return TimingSummary(
        iterations=len(reports),
        max_elapsed=float(elapsed.max()),
        mean_elapsed=float(elapsed.mean()),
        p95_elapsed=float(np.percentile(elapsed, 95)),
        max_wm=max(r.wm_size for r in reports),
        max_dictionary=max(r.dictionary_size for r in reports),
    )


def moving_average(values: Sequence[float], window: int = constants.DEFAULT_TIMING_WINDOW) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` entries average what is available."""
    data = np.asarray(values, dtype=np.float64)
    if data.size == 0:
        return data
    sums = np.cumsum(data)
    out = np.empty_like(data)
    for i in range(data.size):
        start = max(0, i - window + 1)
        out[i] = (sums[i] - (sums[start - 1] if start > 0 else 0.0)) / (i - start + 1)
    return out


def compare_time_limits(
    stream: Sequence[DescriptorSet],
    config: PipelineConfig,
    time_limits: Sequence[float],
    gt: Optional[GroundTruth] = None,
    thresholds: Sequence[float] = constants.DEFAULT_SWEEP_THRESHOLDS,
) -> List[TimeLimitResult]:
    """
    Run the same stream under several time limits.

    Each run uses the lowest threshold and its recorded hypotheses are
    replayed over ``thresholds`` to find the recall at full precision.

    Args:
        stream: Descriptor sets
        config: Base run parameters
        time_limits: Budgets in seconds (``inf`` allowed)
        gt: Ground truth (recall reported as 0.0 without it)
        thresholds: Loop thresholds for the replay

    Returns:
        One result per time limit, in the given order
    """
    ordered = _check_thresholds(thresholds)
    results = []
    for time_limit in time_limits:
        result = run_stream(stream, replace(config, time_limit=time_limit, loop_threshold=ordered[0]))
        summary = timing_summary(result.reports)
        recall = recall_at_full_precision(replay_sweep(result.reports, gt, ordered)) if gt is not None else 0.0
        results.append(
            TimeLimitResult(
                time_limit=time_limit,
                max_wm=summary.max_wm,
                max_dictionary=summary.max_dictionary,
                max_elapsed=summary.max_elapsed,
                mean_elapsed=summary.mean_elapsed,
                transferred=sum(r.transferred for r in result.reports),
                retrieved=sum(r.retrieved for r in result.reports),
                recall_at_full_precision=recall,
            )
        )
        logger.info(f"time_limit={time_limit}: max WM {summary.max_wm}, max elapsed {summary.max_elapsed:.4f}s")
    return results


# ------------------------------------------------------------------ files


def write_iterations(reports: Iterable[IterationReport], path: PathLike) -> None:
    """Write the per-iteration CSV."""
    export_rows_to_csv((r.to_row() for r in reports), ITERATION_COLUMNS, path)


def write_detections(detections: Iterable[Detection], path: PathLike) -> None:
    """Write ``query: match,match`` lines."""
    lines = [detection.to_line() for detection in detections]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_detections(path: PathLike) -> List[Detection]:
    """
    Read a detection log written by :func:`write_detections`.

    Location ids and probabilities are not part of the log; they are read
    back as -1 and NaN.

    Raises:
        EvaluationError: On a malformed line
    """
    detections = []
    text = Path(path).read_text(encoding="utf-8")
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        query, sep, matches = line.partition(":")
        try:
            if not sep:
                raise ValueError("missing ':'")
            images = [int(m) for m in matches.split(",") if m.strip()]
            detections.append(Detection(int(query), -1, math.nan, images))
        except ValueError as e:
            raise EvaluationError(f"{path}:{number}: malformed detection line: {e}", {"line": raw})
    return detections


def write_pr_curve(points: Iterable[PRPoint], path: PathLike) -> None:
    export_rows_to_csv((p.to_row() for p in points), PR_COLUMNS, path)


def write_timing_summary(summary: TimingSummary, path: PathLike) -> None:
    write_json(summary.to_dict(), path)


# ------------------------------------------------------------------ plots


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise EvaluationError("Plotting needs matplotlib: pip install loopguard[plot]")
    return plt


def plot_pr_curve(points: Sequence[PRPoint], path: PathLike) -> None:
    """
    Save a precision-recall curve as a vector graphic (format from the suffix, e.g. ``.svg``).

    Raises:
        EvaluationError: If matplotlib is not installed
    """
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([p.recall for p in points], [p.precision for p in points], marker="o")
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.debug(f"Wrote PR curve plot {path}")


def plot_timing(
    reports: Sequence[IterationReport],
    path: PathLike,
    time_limit: Optional[float] = None,
    window: int = constants.DEFAULT_TIMING_WINDOW,
) -> None:
    """
    Save iteration times, their moving average and the time limit as a vector graphic.

    Raises:
        EvaluationError: If matplotlib is not installed or ``reports`` is empty
    """
    if not reports:
        raise EvaluationError("Cannot plot an empty run")
    plt = _pyplot()
    elapsed = [r.elapsed for r in reports]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(elapsed, linewidth=0.5, label="iteration")
    ax.plot(moving_average(elapsed, window), linewidth=1.5, label=f"moving average ({window})")
    if time_limit is not None and math.isfinite(time_limit):
        ax.axhline(time_limit, color="red", linestyle="--", label="time limit")
    ax.set_xlabel("Location")
    ax.set_ylabel("Time (s)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.debug(f"Wrote timing plot {path}")
