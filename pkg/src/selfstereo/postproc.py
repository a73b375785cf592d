"""Sub-pixel disparity refinement from neighboring cost-volume cells and
the evaluation metrics (tau-point error, completion).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgio import DisparityMap

VARIANT_AS_PRINTED = "as-printed"
VARIANT_SYMMETRIC = "symmetric"

_DIV_GUARD = 1e-12


class MetricUndefinedError(ValueError):
    """The metric denominator is empty (no jointly valid pixels)."""


@dataclass
class SubpixelConfig:
    variant: str = VARIANT_AS_PRINTED
    clamp_to_half: bool = True

    def __post_init__(self) -> None:
        if self.variant not in (VARIANT_AS_PRINTED, VARIANT_SYMMETRIC):
            raise ValueError(f"unknown subpixel variant {self.variant!r}")


@dataclass
class MetricsConfig:
    tau: float = 4.0

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


def subpixel_refine(volume: np.ndarray, disp: DisparityMap, cfg: SubpixelConfig | None = None) -> DisparityMap:
    """Fractional correction of integer winner-take-all disparities.

    With similarities c at the winning cell d and its neighbors,
    ld = c[d-1] - c[d] and rd = c[d+1] - c[d]. The as-printed variant returns
    d - 0.5 + arctan(ld/rd) when ld <= rd and d - 0.5 + arctan(rd/ld)
    otherwise; the symmetric variant mirrors the second branch to
    d + 0.5 - arctan(rd/ld). Divisors below 1e-12 in magnitude leave d
    unchanged, as do border disparities and pixels next to sentinel cells.
    The validity mask is never modified; clamp_to_half keeps the result
    within half a pixel of d.
    """
    if cfg is None:
        cfg = SubpixelConfig()
    volume = np.asarray(volume)
    dmax = volume.shape[0] - 1
    if volume.shape[1:] != disp.values.shape:
        raise ValueError(f"volume spatial dims {volume.shape[1:]} != map {disp.values.shape}")
    if dmax < 2:
        # No disparity has two in-range neighbors.
        return DisparityMap(values=disp.values.copy(), valid=disp.valid.copy())

    d_int = np.rint(disp.values).astype(np.int64)
    interior = disp.valid & (d_int >= 1) & (d_int <= dmax - 1)
    safe = np.clip(d_int, 1, max(dmax - 1, 1))

    c_mid = np.take_along_axis(volume, safe[None], axis=0)[0].astype(np.float64)
    c_lo = np.take_along_axis(volume, (safe - 1)[None], axis=0)[0].astype(np.float64)
    c_hi = np.take_along_axis(volume, (safe + 1)[None], axis=0)[0].astype(np.float64)
    eligible = interior & np.isfinite(c_lo) & np.isfinite(c_hi) & np.isfinite(c_mid)

    # Zero out sentinel lanes so the vectorized arithmetic stays warning-free;
    # those pixels are already excluded by the eligibility mask.
    c_lo = np.where(eligible, c_lo, 0.0)
    c_mid = np.where(eligible, c_mid, 0.0)
    c_hi = np.where(eligible, c_hi, 0.0)

    ld = c_lo - c_mid
    rd = c_hi - c_mid
    first = ld <= rd
    divisor = np.where(first, rd, ld)
    numerator = np.where(first, ld, rd)
    guarded = np.abs(divisor) < _DIV_GUARD
    ratio = np.divide(numerator, divisor, out=np.zeros_like(ld), where=~guarded)

    base = d_int.astype(np.float64)
    if cfg.variant == VARIANT_AS_PRINTED:
        refined = base - 0.5 + np.arctan(ratio)
    else:
        refined = np.where(first, base - 0.5 + np.arctan(ratio), base + 0.5 - np.arctan(ratio))
    if cfg.clamp_to_half:
        refined = np.clip(refined, base - 0.5, base + 0.5)

    use = eligible & ~guarded
    values = np.where(use, refined, disp.values.astype(np.float64)).astype(np.float32)
    return DisparityMap(values=np.where(disp.valid, values, 0.0), valid=disp.valid.copy())


def point_error(pred: DisparityMap, gt: DisparityMap, cfg: MetricsConfig) -> float:
    """Percentage of jointly valid pixels with |gt - pred| >= tau."""
    if pred.values.shape != gt.values.shape:
        raise ValueError(f"map sizes differ: {pred.values.shape} vs {gt.values.shape}")
    both = pred.valid & gt.valid
    total = int(both.sum())
    if total == 0:
        raise MetricUndefinedError("no jointly valid pixels")
    wrong = int((np.abs(gt.values[both] - pred.values[both]) >= cfg.tau).sum())
    return 100.0 * wrong / total


def completion(pred: DisparityMap, gt: DisparityMap) -> float:
    """Percentage of ground-truth-valid pixels carrying a prediction."""
    if pred.values.shape != gt.values.shape:
        raise ValueError(f"map sizes differ: {pred.values.shape} vs {gt.values.shape}")
    gt_total = int(gt.valid.sum())
    if gt_total == 0:
        raise MetricUndefinedError("ground truth has no valid pixels")
    covered = int((pred.valid & gt.valid).sum())
    return 100.0 * covered / gt_total
