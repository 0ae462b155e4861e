from pathlib import Path
from typing import Dict, Iterable, Optional, Union
import logging
import tempfile

from loopguard import constants
from loopguard.clock import IterationClock
from loopguard.ingest import DescriptorSet
from loopguard.pipeline import IterationReport, Pipeline, PipelineConfig, RunResult
from loopguard.store import LongTermStore

logger = logging.getLogger(__name__)


class LoopGuard:
    def __init__(
        self,
        config: Optional[PipelineConfig] = None,
        store_path: Optional[Union[str, Path]] = None,
        queue_size: int = constants.LTM_QUEUE_SIZE,
        fsync: bool = False,
        clock: Optional[IterationClock] = None,
        log_level: Optional[str] = None,
    ):
        """
        Initialize a loop-closure detector.

        Args:
            config: Run parameters (defaults if None)
            store_path: Long-term memory database file; a temporary file
                removed on :meth:`close` if None
            queue_size: Capacity of the database write queue
            fsync: Sync the database after every write
            clock: Iteration clock overriding ``config.clock``
            log_level: Logging level (DEBUG, INFO, WARNING, ERROR)

        Raises:
            ConfigError: If the config is invalid
            StoreIOError: If the database cannot be opened

        Example:
            >>> with LoopGuard(PipelineConfig(time_limit=0.7), store_path="out/ltm.db") as detector:
            ...     result = detector.run(frames)
        """
        if log_level:
            logging.basicConfig(
                level=getattr(logging, log_level.upper()),
                format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
            )

        self.config = config or PipelineConfig()
        self.config.validate()

        self._tmpdir: Optional[tempfile.TemporaryDirectory] = None
        if store_path is None:
            self._tmpdir = tempfile.TemporaryDirectory(prefix="loopguard-")
            store_path = Path(self._tmpdir.name) / constants.LTM_FILE
        self.store = LongTermStore(store_path, queue_size=queue_size, fsync=fsync)
        self.pipeline = Pipeline(self.config, self.store, clock=clock)
        self._closed = False
        logger.info("LoopGuard initialized successfully")

    @property
    def memory(self):
        return self.pipeline.memory

    @property
    def dictionary(self):
        return self.pipeline.dictionary

    def process(self, ds: DescriptorSet) -> IterationReport:
        """Process one image, see :meth:`Pipeline.process`."""
        return self.pipeline.process(ds)

    def run(self, stream: Iterable[DescriptorSet]) -> RunResult:
        """Process a whole stream, see :meth:`Pipeline.run`."""
        return self.pipeline.run(stream)

    def get_memory_stats(self) -> Dict:
        """
        Get memory tier statistics.

        Returns:
            Dictionary with STM, WM and LTM sizes and lifetime counters
        """
        return self.memory.get_stats()

    def get_dictionary_stats(self) -> Dict:
        return self.dictionary.get_stats()

    def get_store_stats(self) -> Dict:
        """
        Get long-term memory database statistics.

        Returns:
            Dictionary with record, queue and frame counts
        """
        return self.store.get_stats()

    def get_timing_stats(self) -> Dict:
        """
        Get iteration timing statistics.

        Returns:
            Dictionary with the moving average and maximum iteration time
        """
        stats = self.pipeline.timing.get_stats()
        stats["time_limit"] = self.config.time_limit
        return stats

    def flush(self) -> None:
        """Wait until every long-term memory write is on disk."""
        self.store.flush()

    def close(self) -> None:
        """Close the database and remove the temporary one, if any."""
        if self._closed:
            return
        self._closed = True
        self.store.close()
        if self._tmpdir is not None:
            self._tmpdir.cleanup()
            self._tmpdir = None
        logger.info("LoopGuard closed")

    def __enter__(self) -> "LoopGuard":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()
