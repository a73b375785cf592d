"""Left-right consistency check: prunes disparities the two views disagree
on, yielding the sparse pseudo ground truth and the inconsistency count used
for convergence tracking and early stopping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .imgio import DisparityMap

DEFAULT_THRESHOLD = 1.1


@dataclass
class ConsistencyConfig:
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self) -> None:
        if not self.threshold > 0:
            raise ValueError(f"threshold must be > 0, got {self.threshold}")


@dataclass
class ConsistencyResult:
    sparse: DisparityMap
    inconsistent_count: int


def lr_check(d_left: DisparityMap, d_right: DisparityMap, cfg: ConsistencyConfig | None = None) -> ConsistencyResult:
    """Keep pixel (x, y) iff the right-view disparity at (x - round(d), y)
    exists and agrees within the threshold; everything else (including
    out-of-bounds lookups, occlusion semantics) counts as inconsistent.
    """
    if cfg is None:
        cfg = ConsistencyConfig()
    if d_left.values.shape != d_right.values.shape:
        raise ValueError(f"map sizes differ: {d_left.values.shape} vs {d_right.values.shape}")
    height, width = d_left.values.shape
    xs = np.arange(width)[None, :]
    lookup = xs - np.rint(d_left.values).astype(np.int64)
    in_bounds = (lookup >= 0) & (lookup < width)
    safe = np.clip(lookup, 0, width - 1)
    rows = np.arange(height)[:, None]
    right_vals = d_right.values[rows, safe]
    right_ok = d_right.valid[rows, safe]
    agree = np.abs(d_left.values - right_vals) <= cfg.threshold
    keep = d_left.valid & in_bounds & right_ok & agree
    sparse = DisparityMap(values=np.where(keep, d_left.values, 0.0), valid=keep)
    return ConsistencyResult(sparse=sparse, inconsistent_count=int(height * width - keep.sum()))


def count_history_should_stop(history: Sequence[int], patience: int) -> bool:
    """True iff the last ``patience`` steps were each a strict increase.

    A plateau (tie) anywhere in that window resets the run; histories shorter
    than patience + 1 never trigger.
    """
    if patience < 1:
        raise ValueError(f"patience must be >= 1, got {patience}")
    if len(history) < patience + 1:
        return False
    tail = list(history[-(patience + 1) :])
    return all(b > a for a, b in zip(tail, tail[1:]))
