from enum import Enum


class ClockMode(Enum):
    """
    Enum representing how iteration time is measured.

    Attributes:
        WALL (str): Real elapsed time from a monotonic performance counter.
        VIRTUAL (str): Deterministic time charged per dictionary and filter operation.
    """

    WALL = "wall"
    VIRTUAL = "virtual"


class SweepMode(Enum):
    """
    Enum representing how a precision-recall sweep is produced.

    Attributes:
        REPLAY (str): Filter hypotheses recorded once at a permissive threshold.
        RERUN (str): Run the whole pipeline again for every threshold.
    """

    REPLAY = "replay"
    RERUN = "rerun"


class HypothesisAnchor(Enum):
    """
    Enum representing which state a loop closure hypothesis is anchored on.

    Attributes:
        PEAK (str): The state with the highest posterior, scored by its neighborhood sum.
        WINDOW (str): The state whose neighborhood sum is the largest.
    """

    PEAK = "peak"
    WINDOW = "window"


class Tier(Enum):
    """
    Enum representing the memory tier a location lives in.

    Attributes:
        STM (str): Short-term memory.
        WM (str): Working memory.
        LTM (str): Long-term memory.
    """

    STM = "stm"
    WM = "wm"
    LTM = "ltm"
