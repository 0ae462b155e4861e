"""
Pytest configuration and shared fixtures for loopguard tests.
"""

import pytest

from loopguard.clock import VirtualCosts
from loopguard.dictionary import Dictionary
from loopguard.enums import ClockMode
from loopguard.ingest import SyntheticWorldConfig, generate_synthetic
from loopguard.memory import Memory
from loopguard.pipeline import PipelineConfig
from loopguard.store import LongTermStore


@pytest.fixture
def store(tmp_path):
    """Fixture providing an open long-term memory database."""
    ltm = LongTermStore(tmp_path / "ltm.db")
    yield ltm
    ltm.close()


@pytest.fixture
def dictionary():
    """Fixture providing an empty dictionary."""
    return Dictionary(match_ratio=0.8)


@pytest.fixture
def memory(dictionary, store):
    """Fixture providing a Memory with a small STM."""
    return Memory(dictionary, store, stm_size=3, rehearsal_threshold=0.2)


@pytest.fixture
def virtual_config():
    """Fixture providing a deterministic config with invariant checks on."""
    return PipelineConfig(
        clock=ClockMode.VIRTUAL,
        costs=VirtualCosts(),
        stm_size=5,
        min_hypotheses=3,
        check_invariants=True,
    )


@pytest.fixture
def world_config():
    """Fixture providing a two-lap synthetic world of 12 places."""
    return SyntheticWorldConfig(
        num_places=12, words_per_place=25, dim=16, laps=2, noise_sigma=0.01, aliasing_rate=0.1, seed=3
    )


@pytest.fixture
def small_world(world_config):
    """Fixture providing the frames and ground truth of ``world_config``."""
    return generate_synthetic(world_config)
