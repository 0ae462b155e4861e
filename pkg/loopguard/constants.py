"""
This module contains constants used in the loopguard package.

Attributes:
    NEW_PLACE (int): State id of the virtual "new place" hypothesis.
    STREAM_MAGIC (bytes): Magic of the binary descriptor stream format.
    LTM_MAGIC (bytes): Magic of the long-term memory database file.
"""

NEW_PLACE = -1

# Descriptor stream file
STREAM_MAGIC = b"LGDS"
STREAM_VERSION = 1
DEFAULT_DIM = 64
DEFAULT_FRAME_RATE_HZ = 1.0

# Long-term memory database file
LTM_MAGIC = b"LGLT"
LTM_VERSION = 1
LTM_QUEUE_SIZE = 128

# Memory management
DEFAULT_STM_SIZE = 25
DEFAULT_REHEARSAL_THRESHOLD = 0.20
DEFAULT_MAX_RETRIEVED = 2
DEFAULT_NEIGHBOR_RADIUS = 4

# Bayesian filter
DEFAULT_LOOP_THRESHOLD = 0.10
DEFAULT_MIN_HYPOTHESES = 15
DEFAULT_GAUSSIAN_SIGMA = 1.6
P_NEW_GIVEN_NEW = 0.9
P_LOOP_GIVEN_NEW = 0.1
P_NEW_GIVEN_LOOP = 0.1
NEIGHBOR_MASS = 0.9
DEGENERATE_NEW_PLACE_FACTOR = 10.0
NORMALIZATION_TOLERANCE = 1e-9

# Dictionary
DEFAULT_MATCH_RATIO = 0.8
EXACT_SCAN_LIMIT = 5000
DEFAULT_KDTREE_LEAFSIZE = 16

# Virtual clock costs (seconds)
COST_PER_RESIDENT_WORD = 1e-5
COST_PER_DESCRIPTOR = 2e-5
COST_PER_COMPARISON = 1e-5
COST_PER_RETRIEVAL = 5e-3

# Evaluation
DEFAULT_TIMING_WINDOW = 20
DEFAULT_SWEEP_THRESHOLDS = (0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)

# Run directory artifacts
MANIFEST_FILE = "manifest.json"
ITERATIONS_FILE = "iterations.csv"
DETECTIONS_FILE = "detections.txt"
LTM_FILE = "ltm.db"
PR_CURVE_FILE = "pr_curve.csv"
TIMING_FILE = "timing.json"
