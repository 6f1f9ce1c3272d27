"""Configuration settings for particle system simulations and studies."""

# Config format
SCHEMA_VERSION = 1
LIST_SEPARATOR = ","
PARAM_PREFIX = "param."

# Random streams (second entry of every SeedSequence spawn key)
STREAM_PARTICLE = 0
STREAM_COMMON = 1
STREAM_ETA = 2
STREAM_BRIDGE_PARTICLE = 3
STREAM_BRIDGE_COMMON = 4
STREAM_INITIAL = 5
STREAM_BOOTSTRAP = 6

# Scheme settings
DROP_MEASURE_TERMS_ABOVE = 64  # particles

# Metric settings
EXACT_ASSIGNMENT_MAX_PARTICLES = 12
DEFAULT_NORM_EXPONENT = 2.0
DEFAULT_BOOTSTRAP_RESAMPLES = 200
MIN_FIT_LEVELS = 3

# Study settings
MOMENT_VARIATION_TOLERANCE = 0.2
QUADRATURE_FINE_SUBSTEPS = 64

# Output settings
TRAJECTORY_COLUMNS = ["t", "i"]  # followed by x_1..x_d
STUDY_COLUMNS = ["level", "error", "std_error", "M", "slope", "slope_lo", "slope_hi"]
TRAJECTORY_FILE = "trajectory.csv"
STUDY_FILE = "{kind}.csv"
MANIFEST_FILE = "manifest.json"
FAILURE_FILE = "failure.json"
JSON_INDENT = 2
