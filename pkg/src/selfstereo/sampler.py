"""Training-batch construction: patch triplets drawn around pixels of the
current sparse pseudo ground truth.

The reference patch is centered on a uniformly chosen valid pixel of the
left image; the positive patch sits at the disparity-displaced position in
the right image; the negative patch is the positive shifted horizontally by
a random offset whose magnitude lies in [neg_offset_min, neg_offset_max]
(both sides, never 0 or +-1 with the defaults). Draws whose patches leave
the image are rejected and resampled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgio import DisparityMap

_MAX_ATTEMPTS = 10_000


class SamplingExhaustedError(RuntimeError):
    """No admissible triplet center found within the retry budget."""


@dataclass
class SamplerConfig:
    patch_size: int = 11
    batch_size: int = 500
    neg_offset_min: int = 2
    neg_offset_max: int = 8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.patch_size % 2 != 1 or self.patch_size < 1:
            raise ValueError(f"patch_size must be odd and positive, got {self.patch_size}")
        if not 1 <= self.neg_offset_min <= self.neg_offset_max:
            raise ValueError(
                f"need 1 <= neg_offset_min <= neg_offset_max, got "
                f"[{self.neg_offset_min}, {self.neg_offset_max}]"
            )
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class PatchTriplet:
    reference: np.ndarray  # patch_size x patch_size crop of the left image
    positive: np.ndarray  # matching crop of the right image
    negative: np.ndarray  # horizontally offset non-matching crop
    center: tuple[int, int]  # (y, x) of the reference center
    disparity: int
    offset: int


def sample_triplet(
    left: np.ndarray,
    right: np.ndarray,
    pseudo_gt: DisparityMap,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    candidates: np.ndarray | None = None,
) -> PatchTriplet:
    """Draw one admissible patch triplet (uniform over valid pseudo-GT pixels).

    ``candidates`` may carry precomputed flat indices of valid pixels to
    avoid rescanning the mask; RNG consumption is identical either way.
    """
    if candidates is None:
        candidates = np.flatnonzero(pseudo_gt.valid)
    if candidates.size == 0:
        raise SamplingExhaustedError("pseudo ground truth has no valid pixels")
    height, width = pseudo_gt.values.shape
    half = cfg.patch_size // 2
    n_offsets = 2 * (cfg.neg_offset_max - cfg.neg_offset_min + 1)

    for _ in range(_MAX_ATTEMPTS):
        flat = int(candidates[rng.integers(0, candidates.size)])
        y, x = divmod(flat, width)
        slot = int(rng.integers(0, n_offsets))
        mag = cfg.neg_offset_min + slot % (cfg.neg_offset_max - cfg.neg_offset_min + 1)
        offset = mag if slot < n_offsets // 2 else -mag

        disp = int(np.rint(pseudo_gt.values[y, x]))
        x_pos = x - disp
        x_neg = x_pos + offset
        if y - half < 0 or y + half >= height:
            continue
        if x - half < 0 or x + half >= width:
            continue
        if x_pos - half < 0 or x_pos + half >= width:
            continue
        if x_neg - half < 0 or x_neg + half >= width:
            continue
        rows = slice(y - half, y + half + 1)
        return PatchTriplet(
            reference=left[rows, x - half : x + half + 1].copy(),
            positive=right[rows, x_pos - half : x_pos + half + 1].copy(),
            negative=right[rows, x_neg - half : x_neg + half + 1].copy(),
            center=(y, x),
            disparity=disp,
            offset=offset,
        )
    raise SamplingExhaustedError(
        f"no admissible triplet in {_MAX_ATTEMPTS} attempts "
        f"({candidates.size} valid pixels, patch {cfg.patch_size})"
    )


def sample_batch(
    left: np.ndarray,
    right: np.ndarray,
    pseudo_gt: DisparityMap,
    cfg: SamplerConfig,
    rng: np.random.Generator,
) -> list[PatchTriplet]:
    """Draw cfg.batch_size independent triplets (deterministic given the RNG)."""
    candidates = np.flatnonzero(pseudo_gt.valid)
    return [
        sample_triplet(left, right, pseudo_gt, cfg, rng, candidates=candidates)
        for _ in range(cfg.batch_size)
    ]
