"""Exact count transforms shared by the encoders and window engine."""

from __future__ import annotations

import math

import numpy as np

_LOG_TABLE = np.array([math.log(1 + i) for i in range(4096)])


def log_count(counts: np.ndarray | int):
    """``log(1 + I)`` for non-negative integer counts.

    Array inputs are served from a table of ``math.log`` values so that the
    vectorised path is bit-identical to scalar evaluation (numpy's SIMD log
    can differ from libm in the last ulp).
    """
    global _LOG_TABLE
    if np.isscalar(counts):
        return math.log(1 + int(counts))
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size == 0:
        return np.zeros(counts.shape)
    top = int(counts.max())
    if top >= len(_LOG_TABLE):
        size = max(top + 1, 2 * len(_LOG_TABLE))
        _LOG_TABLE = np.array([math.log(1 + i) for i in range(size)])
    return _LOG_TABLE[counts]
