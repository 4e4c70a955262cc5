"""Self-supervised lidar depth-bias calibration from map consistency."""

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
