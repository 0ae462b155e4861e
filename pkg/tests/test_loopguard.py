"""
Tests for loopguard.loopguard module.

Tests the LoopGuard facade: construction, statistics and cleanup.
"""

import logging
from pathlib import Path

import pytest

from loopguard import LoopGuard, PipelineConfig
from loopguard.clock import VirtualClock, VirtualCosts
from loopguard.enums import ClockMode
from loopguard.exceptions import ConfigError, StoreError
from tests.helpers import make_frame


@pytest.mark.unit
class TestLoopGuardInit:
    """Test LoopGuard initialization."""

    def test_defaults(self):
        with LoopGuard() as detector:
            assert detector.config == PipelineConfig()
            assert detector.get_memory_stats()["wm"] == 0

    def test_temporary_store_removed_on_close(self):
        detector = LoopGuard(PipelineConfig(clock=ClockMode.VIRTUAL))
        path = Path(detector.store.path)
        assert path.parent.is_dir()
        detector.close()
        assert not path.parent.exists()
        detector.close()

    def test_explicit_store_kept(self, tmp_path):
        path = tmp_path / "ltm.db"
        with LoopGuard(store_path=path):
            pass
        assert path.is_file()

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            LoopGuard(PipelineConfig(loop_threshold=2.0))

    def test_log_level(self, mocker):
        basic_config = mocker.patch("loopguard.loopguard.logging.basicConfig")
        with LoopGuard(log_level="debug"):
            pass
        assert basic_config.call_args.kwargs["level"] == logging.DEBUG

    def test_clock_override(self):
        clock = VirtualClock(
            VirtualCosts(
                per_resident_word=0.0, per_descriptor=0.0, per_comparison=0.0, per_retrieval=0.0, per_iteration=0.5
            )
        )
        with LoopGuard(clock=clock) as detector:
            report = detector.process(make_frame(0, seed=1))
        assert report.elapsed == 0.5


@pytest.mark.unit
class TestLoopGuardRun:
    """Test processing and statistics through the facade."""

    def test_process_and_stats(self, virtual_config):
        with LoopGuard(virtual_config) as detector:
            for t in range(7):
                detector.process(make_frame(t, seed=t))
            memory_stats = detector.get_memory_stats()
            assert memory_stats["stm"] == 5
            assert memory_stats["wm"] == 2
            assert detector.get_dictionary_stats()["words"] == 140
            timing = detector.get_timing_stats()
            assert timing["iterations"] == 7
            assert timing["time_limit"] == virtual_config.time_limit
            detector.flush()
            assert detector.get_store_stats()["pending_writes"] == 0

    def test_run(self, virtual_config, small_world):
        frames, _ = small_world
        with LoopGuard(virtual_config) as detector:
            result = detector.run(frames)
            assert detector.memory.get_stats()["created"] == len(frames)
            assert detector.dictionary is detector.pipeline.dictionary
        assert len(result.reports) == len(frames)

    def test_closed_detector(self, virtual_config):
        detector = LoopGuard(virtual_config, clock=VirtualClock())
        detector.close()
        with pytest.raises(StoreError):
            detector.flush()
