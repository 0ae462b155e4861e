"""
loopguard: real-time appearance-based loop closure detection

Each image is quantized into visual words and compared with the locations
of working memory by a discrete Bayesian filter. Memory is managed so the
time spent per image stays under a budget:
- Short-term memory absorbs consecutive similar images (rehearsal)
- Working memory holds the locations loop closures are searched in
- Long-term memory keeps transferred locations on disk
- Neighbours of strong hypotheses are retrieved back into working memory

Example:
    >>> from loopguard import LoopGuard, PipelineConfig
    >>> from loopguard.ingest import SyntheticWorldConfig, generate_synthetic
    >>> frames, gt = generate_synthetic(SyntheticWorldConfig(num_places=20, laps=2))
    >>> with LoopGuard(PipelineConfig(time_limit=0.5)) as detector:
    ...     result = detector.run(frames)
    >>> print(f"{len(result.detections)} loop closures")
"""

try:
    from ._version import version as __version__
except ImportError:
    __version__ = "0.1.0"

from .loopguard import LoopGuard
from .pipeline import Detection, IterationReport, Pipeline, PipelineConfig, RunResult
from .exceptions import (
    LoopGuardError,
    ConfigError,
    StreamFormatError,
    DimensionMismatchError,
    ConsistencyError,
    ContractError,
    StoreError,
    StoreIOError,
    EvaluationError,
)
from . import utils
from . import enums
from . import ingest

__all__ = [
    "LoopGuard",
    "Pipeline",
    "PipelineConfig",
    "IterationReport",
    "Detection",
    "RunResult",
    # Exceptions
    "LoopGuardError",
    "ConfigError",
    "StreamFormatError",
    "DimensionMismatchError",
    "ConsistencyError",
    "ContractError",
    "StoreError",
    "StoreIOError",
    "EvaluationError",
    # Modules
    "utils",
    "enums",
    "ingest",
]
