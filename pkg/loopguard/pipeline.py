"""
The per-image processing cycle.

Each image is quantized into a new location, rehearsed against short-term
memory, scored against working memory by the Bayesian filter, merged on an
accepted loop closure, and followed by retrieval around the best hypothesis
and, when the iteration is over its time budget, transfer to long-term
memory.
"""

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Union
import logging
import math

from loopguard import constants
from loopguard.bayes import (
    Hypothesis,
    LoopClosureFilter,
    TransitionParams,
    best_hypothesis,
    peak,
    strongest_in_window,
)
from loopguard.clock import IterationClock, TimingWindow, VirtualCosts, make_clock
from loopguard.dictionary import Dictionary
from loopguard.enums import ClockMode, HypothesisAnchor
from loopguard.exceptions import ConfigError, ConsistencyError
from loopguard.ingest import DescriptorSet
from loopguard.memory import Memory, neighborhood
from loopguard.store import LongTermStore
from loopguard.utils import format_key_value, parse_float, parse_key_value_file

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ITERATION_COLUMNS = (
    "image_id",
    "elapsed_s",
    "wm_size",
    "stm_size",
    "dict_size",
    "hypothesis_id",
    "hypothesis_p",
    "retrieved",
    "transferred",
)

_COST_PREFIX = "cost_"


def _parse_bool(text: str, field_name: str) -> bool:
    cleaned = text.strip().lower()
    if cleaned in ("1", "true", "yes", "on"):
        return True
    if cleaned in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"Expected a boolean for {field_name}, got {text!r}", field=field_name, value=text)


def _parse_int(text: str, field_name: str) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise ConfigError(f"Expected an integer for {field_name}, got {text!r}", field=field_name, value=text)


def _parse_enum(enum_cls) -> Callable[[str, str], Any]:
    def parse(text: str, field_name: str):
        try:
            return enum_cls(text.strip().lower())
        except ValueError:
            choices = ", ".join(member.value for member in enum_cls)
            raise ConfigError(f"{field_name} must be one of {choices}, got {text!r}", field=field_name, value=text)

    return parse


_PARSERS: Dict[str, Callable[[str, str], Any]] = {
    "time_limit": parse_float,
    "rehearsal_threshold": parse_float,
    "loop_threshold": parse_float,
    "min_hypotheses": _parse_int,
    "stm_size": _parse_int,
    "match_ratio": parse_float,
    "gaussian_sigma": parse_float,
    "neighbor_radius": _parse_int,
    "max_retrieved": _parse_int,
    "seed": _parse_int,
    "clock": _parse_enum(ClockMode),
    "enable_retrieval": _parse_bool,
    "hypothesis_anchor": _parse_enum(HypothesisAnchor),
    "check_invariants": _parse_bool,
    "exact_scan_limit": _parse_int,
}


@dataclass
class PipelineConfig:
    """
    Parameters of a run.

    Attributes:
        time_limit: Iteration time budget in seconds (``inf`` disables transfer)
        rehearsal_threshold: Similarity from which a new location merges with an STM one
        loop_threshold: Summed probability a hypothesis must exceed
        min_hypotheses: WM size below which no loop closure is accepted
        stm_size: STM capacity
        match_ratio: Nearest-neighbour distance ratio for word matching
        gaussian_sigma: Width of the transition model's Gaussian
        neighbor_radius: Graph radius of hypothesis neighbourhoods
        max_retrieved: Locations retrieved per iteration
        seed: Recorded with the run for reproduction
        clock: Wall or virtual time
        costs: Virtual clock costs
        enable_retrieval: Retrieve LTM neighbours of the best hypothesis
        hypothesis_anchor: How the best hypothesis is scored (window sum or posterior peak)
        check_invariants: Verify memory invariants after every iteration
        exact_scan_limit: Dictionary size from which a k-d tree is used
    """

    time_limit: float = math.inf
    rehearsal_threshold: float = constants.DEFAULT_REHEARSAL_THRESHOLD
    loop_threshold: float = constants.DEFAULT_LOOP_THRESHOLD
    min_hypotheses: int = constants.DEFAULT_MIN_HYPOTHESES
    stm_size: int = constants.DEFAULT_STM_SIZE
    match_ratio: float = constants.DEFAULT_MATCH_RATIO
    gaussian_sigma: float = constants.DEFAULT_GAUSSIAN_SIGMA
    neighbor_radius: int = constants.DEFAULT_NEIGHBOR_RADIUS
    max_retrieved: int = constants.DEFAULT_MAX_RETRIEVED
    seed: int = 0
    clock: ClockMode = ClockMode.WALL
    costs: VirtualCosts = field(default_factory=VirtualCosts)
    enable_retrieval: bool = True
    hypothesis_anchor: HypothesisAnchor = HypothesisAnchor.WINDOW
    check_invariants: bool = False
    exact_scan_limit: int = constants.EXACT_SCAN_LIMIT

    def validate(self) -> None:
        """
        Check the parameters.

        Raises:
            ConfigError: Naming the first invalid field
        """
        if math.isnan(self.time_limit) or self.time_limit <= 0:
            raise ConfigError("time_limit must be positive or inf", field="time_limit", value=self.time_limit)
        for name in ("rehearsal_threshold", "loop_threshold", "match_ratio"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigError(f"{name} must be in (0, 1]", field=name, value=value)
        if self.stm_size < 1:
            raise ConfigError("stm_size must be at least 1", field="stm_size", value=self.stm_size)
        if self.min_hypotheses < 0:
            raise ConfigError("min_hypotheses must be non-negative", field="min_hypotheses", value=self.min_hypotheses)
        if self.gaussian_sigma <= 0:
            raise ConfigError("gaussian_sigma must be positive", field="gaussian_sigma", value=self.gaussian_sigma)
        if self.neighbor_radius < 0:
            raise ConfigError(
                "neighbor_radius must be non-negative", field="neighbor_radius", value=self.neighbor_radius
            )
        if self.max_retrieved < 0:
            raise ConfigError("max_retrieved must be non-negative", field="max_retrieved", value=self.max_retrieved)
        if self.exact_scan_limit < 1:
            raise ConfigError(
                "exact_scan_limit must be positive", field="exact_scan_limit", value=self.exact_scan_limit
            )
        self.costs.validate()

    def to_dict(self) -> Dict[str, Any]:
        """Flat mapping, virtual costs as ``cost_<name>`` keys."""
        values: Dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "costs":
                for cost_name, cost in value.to_dict().items():
                    values[_COST_PREFIX + cost_name] = cost
            else:
                values[f.name] = value
        return values

    def to_text(self) -> str:
        """Render as a ``key = value`` file that :meth:`from_file` reads back."""
        return format_key_value(self.to_dict())

    @classmethod
    def from_dict(cls, values: Mapping[str, str], base: Optional["PipelineConfig"] = None) -> "PipelineConfig":
        """
        Build a config from raw ``key = value`` strings.

        Args:
            values: Raw values
            base: Config whose values are overridden (defaults if None)

        Raises:
            ConfigError: On unknown keys or unparsable values
        """
        base = base or cls()
        changes: Dict[str, Any] = {}
        cost_changes: Dict[str, float] = {}
        cost_names = set(VirtualCosts().to_dict())
        for key, raw in values.items():
            if key.startswith(_COST_PREFIX) and key[len(_COST_PREFIX):] in cost_names:
                cost_changes[key[len(_COST_PREFIX):]] = parse_float(str(raw), key)
            elif key in _PARSERS:
                changes[key] = _PARSERS[key](str(raw), key)
            else:
                raise ConfigError(f"Unknown pipeline config key {key!r}", field=key, value=raw)
        if cost_changes:
            changes["costs"] = replace(base.costs, **cost_changes)
        return replace(base, **changes)

    @classmethod
    def from_file(cls, path: PathLike, base: Optional["PipelineConfig"] = None) -> "PipelineConfig":
        """Read a flat ``key = value`` config file."""
        return cls.from_dict(parse_key_value_file(path), base)

    def transition_params(self) -> TransitionParams:
        return TransitionParams(gaussian_sigma=self.gaussian_sigma, radius=self.neighbor_radius)


@dataclass
class Detection:
    """An accepted loop closure: ``image_id`` revisits the images of ``location_id``."""

    image_id: int
    location_id: int
    probability: float
    matched_images: List[int]

    def to_line(self) -> str:
        return f"{self.image_id}: {','.join(str(m) for m in self.matched_images)}"


@dataclass
class IterationReport:
    """
    Outcome of one iteration.

    Attributes:
        image_id: Image processed
        location_id: Location created for it
        elapsed: Iteration time in seconds
        accepted_hypothesis: Accepted (location id, summed probability), if any
        matched_images: Member images of the accepted location
        candidate: Best hypothesis when WM was large enough, accepted or not
        candidate_images: Member images of the candidate location
        wm_size: WM size at the end of the iteration
        stm_size: STM size at the end of the iteration
        dictionary_size: Dictionary size at the end of the iteration
        retrieved: Locations retrieved
        transferred: Locations transferred
        rehearsed: Location absorbed by rehearsal, if any
    """

    image_id: int
    location_id: int
    elapsed: float = 0.0
    accepted_hypothesis: Optional[Hypothesis] = None
    matched_images: List[int] = field(default_factory=list)
    candidate: Optional[Hypothesis] = None
    candidate_images: List[int] = field(default_factory=list)
    wm_size: int = 0
    stm_size: int = 0
    dictionary_size: int = 0
    retrieved: int = 0
    transferred: int = 0
    rehearsed: Optional[int] = None

    @property
    def detection(self) -> Optional[Detection]:
        if self.accepted_hypothesis is None:
            return None
        return Detection(
            self.image_id,
            self.accepted_hypothesis.location_id,
            self.accepted_hypothesis.probability,
            list(self.matched_images),
        )

    def to_row(self) -> Dict[str, Any]:
        hypothesis = self.accepted_hypothesis
        return {
            "image_id": self.image_id,
            "elapsed_s": self.elapsed,
            "wm_size": self.wm_size,
            "stm_size": self.stm_size,
            "dict_size": self.dictionary_size,
            "hypothesis_id": hypothesis.location_id if hypothesis else None,
            "hypothesis_p": hypothesis.probability if hypothesis else None,
            "retrieved": self.retrieved,
            "transferred": self.transferred,
        }


@dataclass
class RunResult:
    """Reports and detections of a run."""

    reports: List[IterationReport] = field(default_factory=list)
    detections: List[Detection] = field(default_factory=list)

    def detection_lines(self) -> List[str]:
        return [detection.to_line() for detection in self.detections]


class Pipeline:
    """
    Loop-closure detection over a stream of descriptor sets.

    Example:
        >>> with LongTermStore(tmp_path / "ltm.db") as store:
        ...     pipeline = Pipeline(PipelineConfig(time_limit=0.5), store)
        ...     result = pipeline.run(frames)
    """

    def __init__(self, config: PipelineConfig, store: LongTermStore, clock: Optional[IterationClock] = None):
        """
        Initialize the modules of a run.

        Args:
            config: Run parameters
            store: Long-term memory database
            clock: Iteration clock (built from ``config.clock`` if None)

        Raises:
            ConfigError: If the config is invalid
        """
        config.validate()
        self.config = config
        self.store = store
        self.clock = clock or make_clock(config.clock, config.costs)
        self.dictionary = Dictionary(match_ratio=config.match_ratio, exact_limit=config.exact_scan_limit)
        self.memory = Memory(
            self.dictionary,
            store,
            stm_size=config.stm_size,
            rehearsal_threshold=config.rehearsal_threshold,
            neighbor_radius=config.neighbor_radius,
            max_retrieved=config.max_retrieved,
        )
        self.filter = LoopClosureFilter(config.transition_params())
        self.timing = TimingWindow()
        self.iteration = 0
        logger.info(
            f"Pipeline initialized: time_limit={config.time_limit}, clock={config.clock.value}, "
            f"stm_size={config.stm_size}, loop_threshold={config.loop_threshold}"
        )

    def process(self, ds: DescriptorSet) -> IterationReport:
        """
        Process one image.

        Args:
            ds: Descriptors of the image

        Returns:
            Report of the iteration

        Raises:
            ConsistencyError: If invariant checks are enabled and one fails
            DimensionMismatchError: If the descriptor dimension changes
        """
        config = self.config
        memory = self.memory
        dictionary = self.dictionary
        clock = self.clock

        clock.start()
        memory.begin_iteration()
        dictionary.begin_iteration()
        if dictionary.index.dirty:
            dictionary.rebuild_index()
            clock.charge_rebuild(len(dictionary))

        location_id = memory.allocate_id()
        signature = dictionary.quantize(ds, location_id)
        clock.charge_quantize(len(ds))
        location = memory.add_location(location_id, signature, ds.image_id, self.iteration)

        rehearsed = memory.rehearse(location)

        memory.insert_stm(location)
        memory.promote_oldest()

        wm_states = memory.wm_states()
        signatures = {state: memory.locations[state].signature for state in wm_states}
        posterior, _ = self.filter.step(location.signature, wm_states, signatures, memory.graph)
        clock.charge_comparisons(len(wm_states))

        report = IterationReport(image_id=ds.image_id, location_id=location_id, rehearsed=rehearsed)
        if len(wm_states) >= config.min_hypotheses:
            candidate = best_hypothesis(posterior, memory.graph, config.neighbor_radius, config.hypothesis_anchor)
            if candidate is not None:
                # The window names a neighbourhood; the merge goes to its strongest member.
                target = strongest_in_window(posterior, memory.graph, candidate.location_id, config.neighbor_radius)
                candidate = Hypothesis(target, candidate.probability)
                report.candidate = candidate
                report.candidate_images = list(memory.locations[candidate.location_id].member_images)
                if candidate.probability > config.loop_threshold:
                    report.accepted_hypothesis = candidate
                    report.matched_images = list(report.candidate_images)
                    memory.merge_loop_closure(location, candidate.location_id)

        top = peak(posterior)
        purged = memory.purge_merged(top)
        if purged:
            self.filter.adjust(removed=purged)
            if top in purged:
                top = None

        if config.enable_retrieval and top is not None:
            retrieved = memory.retrieve(top)
            if retrieved:
                clock.charge_retrieval(len(retrieved))
                self.filter.adjust(added=retrieved)
            report.retrieved = len(retrieved)

        if clock.elapsed() > config.time_limit:
            immune = neighborhood(memory.graph, top, config.neighbor_radius) if top is not None else {}
            victims = memory.select_transfer_victims(dictionary.words_added, immune)
            report.transferred = memory.transfer(victims)
            if victims:
                self.filter.adjust(removed=victims)

        if config.check_invariants:
            self.check_invariants()

        report.elapsed = clock.elapsed()
        report.wm_size = memory.wm_size
        report.stm_size = memory.stm_len
        report.dictionary_size = len(dictionary)
        self.timing.record(report.elapsed)
        self.iteration += 1
        if report.accepted_hypothesis is not None:
            logger.debug(
                f"Image {ds.image_id}: loop closure with location {report.accepted_hypothesis.location_id} "
                f"(p={report.accepted_hypothesis.probability:.3f})"
            )
        return report

    def check_invariants(self) -> None:
        """
        Verify memory and posterior invariants.

        Raises:
            ConsistencyError: Naming the broken invariant
        """
        self.memory.check_consistency()
        posterior = self.filter.posterior
        if not posterior.is_normalized():
            raise ConsistencyError(
                f"Posterior sums to {posterior.total()!r}", invariant="posterior-normalized"
            )
        if set(posterior.states) - self.memory.wm:
            raise ConsistencyError("Posterior holds states outside WM", invariant="posterior-states")

    def run(self, stream: Iterable[DescriptorSet]) -> RunResult:
        """
        Process a whole stream.

        Args:
            stream: Descriptor sets in acquisition order

        Returns:
            Iteration reports and the detection log
        """
        result = RunResult()
        for ds in stream:
            report = self.process(ds)
            result.reports.append(report)
            detection = report.detection
            if detection is not None:
                result.detections.append(detection)
        logger.info(
            f"Run finished: {len(result.reports)} images, {len(result.detections)} loop closures, "
            f"max WM {max((r.wm_size for r in result.reports), default=0)}"
        )
        return result

    def get_stats(self) -> dict:
        """
        Get pipeline statistics.

        Returns:
            Dictionary with iteration count, memory, dictionary and timing statistics
        """
        return {
            "iterations": self.iteration,
            "memory": self.memory.get_stats(),
            "dictionary": self.dictionary.get_stats(),
            "timing": self.timing.get_stats(),
        }
