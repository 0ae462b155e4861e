"""
Iteration clocks and timing statistics.

The wall clock measures real processing time. The virtual clock charges
fixed costs per unit of work instead, so runs that depend on the time
budget are reproducible.
"""

from collections import deque
from dataclasses import asdict, dataclass
from typing import Deque, Dict, Optional
import logging
import threading
import time

from loopguard import constants
from loopguard.enums import ClockMode
from loopguard.exceptions import ConfigError

logger = logging.getLogger(__name__)


@dataclass
class VirtualCosts:
    """
    Seconds charged by the virtual clock per unit of work.

    Attributes:
        per_resident_word: Per dictionary word when the word index is rebuilt
        per_descriptor: Per descriptor quantized
        per_comparison: Per WM location scored by the likelihood
        per_retrieval: Per location read back from LTM
        per_iteration: Fixed overhead of every iteration
    """

    per_resident_word: float = constants.COST_PER_RESIDENT_WORD
    per_descriptor: float = constants.COST_PER_DESCRIPTOR
    per_comparison: float = constants.COST_PER_COMPARISON
    per_retrieval: float = constants.COST_PER_RETRIEVAL
    per_iteration: float = 0.0

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if value < 0:
                raise ConfigError(f"Virtual cost {name} must be non-negative", field=f"cost_{name}", value=value)

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


class IterationClock:
    """Base clock: time elapsed since :meth:`start`, plus work charges."""

    mode: ClockMode

    def start(self) -> None:
        raise NotImplementedError

    def elapsed(self) -> float:
        raise NotImplementedError

    def charge_rebuild(self, words: int) -> None:
        pass

    def charge_quantize(self, descriptors: int) -> None:
        pass

    def charge_comparisons(self, locations: int) -> None:
        pass

    def charge_retrieval(self, locations: int) -> None:
        pass


class WallClock(IterationClock):
    """Real elapsed time from ``time.perf_counter``; charges are ignored."""

    mode = ClockMode.WALL

    def __init__(self):
        self._start = time.perf_counter()

    def start(self) -> None:
        self._start = time.perf_counter()

    def elapsed(self) -> float:
        return max(0.0, time.perf_counter() - self._start)


class VirtualClock(IterationClock):
    """
    Deterministic clock advanced only by work charges.

    Example:
        >>> clock = VirtualClock(VirtualCosts(per_descriptor=0.001))
        >>> clock.start()
        >>> clock.charge_quantize(100)
        >>> clock.elapsed()
        0.1
    """

    mode = ClockMode.VIRTUAL

    def __init__(self, costs: Optional[VirtualCosts] = None):
        self.costs = costs or VirtualCosts()
        self.costs.validate()
        self._elapsed = 0.0

    def start(self) -> None:
        self._elapsed = self.costs.per_iteration

    def elapsed(self) -> float:
        return self._elapsed

    def charge(self, seconds: float) -> None:
        self._elapsed += seconds

    def charge_rebuild(self, words: int) -> None:
        self._elapsed += words * self.costs.per_resident_word

    def charge_quantize(self, descriptors: int) -> None:
        self._elapsed += descriptors * self.costs.per_descriptor

    def charge_comparisons(self, locations: int) -> None:
        self._elapsed += locations * self.costs.per_comparison

    def charge_retrieval(self, locations: int) -> None:
        self._elapsed += locations * self.costs.per_retrieval


def make_clock(mode: ClockMode, costs: Optional[VirtualCosts] = None) -> IterationClock:
    """Clock for ``mode``."""
    if mode == ClockMode.VIRTUAL:
        return VirtualClock(costs)
    return WallClock()


class TimingWindow:
    """
    Moving average of iteration times over the last ``size`` iterations.

    Thread-safe so statistics can be read while a run is in progress.
    """

    def __init__(self, size: int = constants.DEFAULT_TIMING_WINDOW):
        if size < 1:
            raise ConfigError("Timing window size must be at least 1", field="size", value=size)
        self.size = size
        self.samples: Deque[float] = deque(maxlen=size)
        self.count = 0
        self.maximum = 0.0
        self.lock = threading.Lock()

    def record(self, elapsed: float) -> float:
        """Add a sample and return the current moving average."""
        with self.lock:
            self.samples.append(elapsed)
            self.count += 1
            self.maximum = max(self.maximum, elapsed)
            return sum(self.samples) / len(self.samples)

    @property
    def average(self) -> float:
        with self.lock:
            return sum(self.samples) / len(self.samples) if self.samples else 0.0

    def get_stats(self) -> dict:
        """
        Get timing statistics.

        Returns:
            Dictionary with the moving average, last and maximum samples
        """
        with self.lock:
            return {
                "window": self.size,
                "iterations": self.count,
                "moving_average": sum(self.samples) / len(self.samples) if self.samples else 0.0,
                "last": self.samples[-1] if self.samples else 0.0,
                "max": self.maximum,
            }

    def reset(self) -> None:
        """Forget all samples."""
        with self.lock:
            self.samples.clear()
            self.count = 0
            self.maximum = 0.0
            logger.debug("Timing window reset")
