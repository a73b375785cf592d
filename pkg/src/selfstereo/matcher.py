"""Cost-volume construction (cosine or trained-head similarity) and
winner-take-all disparity estimation for both stereo views.

A cost volume is a (dmax + 1, H, W) float32 array of similarity scores;
cells whose matching coordinate falls outside the image hold the sentinel
-inf. Left-direction cell (d, y, x) scores ref(x, y) against other(x - d, y),
right-direction against other(x + d, y). Feature maps are (H, W, C).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgio import DisparityMap
from .model import SimilarityHead, StereoModel, extract_features, head_apply_map, normalize_image

SENTINEL = np.float32(-np.inf)

MODE_COSINE = "cosine"
MODE_TRAINED = "trained"

_NORM_GUARD = 1e-12


@dataclass
class MatchConfig:
    dmax: int = 64
    mode: str = MODE_TRAINED
    tie_break: str = "lowest-d"

    def __post_init__(self) -> None:
        if self.dmax < 1:
            raise ValueError(f"dmax must be >= 1, got {self.dmax}")
        if self.mode not in (MODE_COSINE, MODE_TRAINED):
            raise ValueError(f"unknown match mode {self.mode!r}")
        if self.tie_break != "lowest-d":
            raise ValueError(f"unsupported tie break {self.tie_break!r}")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """dot(a, b) / (|a||b|); 0 when either norm is below 1e-12."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < _NORM_GUARD or nb < _NORM_GUARD:
        return 0.0
    return float(a @ b / (na * nb))


def _unit_features(features: np.ndarray) -> np.ndarray:
    """L2-normalize an (H, W, C) raster per pixel; near-zero norms become zero vectors."""
    f = np.asarray(features, dtype=np.float32)
    norms = np.sqrt(np.sum(np.square(f), axis=-1, keepdims=True))
    inv = np.where(norms < _NORM_GUARD, np.float32(0.0), np.float32(1.0) / norms)
    return f * inv


def build_cost_volume(
    f_ref: np.ndarray,
    f_other: np.ndarray,
    cfg: MatchConfig,
    head: SimilarityHead | None = None,
    direction: str = "left",
) -> np.ndarray:
    """Dense per-disparity similarity scores for one reference view."""
    f_ref = np.asarray(f_ref, dtype=np.float32)
    f_other = np.asarray(f_other, dtype=np.float32)
    if f_ref.shape != f_other.shape:
        raise ValueError(f"feature maps differ: {f_ref.shape} vs {f_other.shape}")
    if f_ref.ndim != 3:
        raise ValueError(f"feature maps must be (H, W, C), got {f_ref.shape}")
    if direction not in ("left", "right"):
        raise ValueError(f"unknown direction {direction!r}")
    if (cfg.mode == MODE_TRAINED) != (head is not None):
        raise ValueError("similarity head must be supplied exactly when mode is 'trained'")

    height, width, _ = f_ref.shape
    volume = np.full((cfg.dmax + 1, height, width), SENTINEL, dtype=np.float32)

    if cfg.mode == MODE_COSINE:
        ref_n = _unit_features(f_ref)
        oth_n = _unit_features(f_other)

    for d in range(min(cfg.dmax, width - 1) + 1):
        span = width - d
        if direction == "left":
            ref_cols = slice(d, width)
            oth_cols = slice(0, span)
            out_slice = (d, slice(None), slice(d, width))
        else:
            ref_cols = slice(0, span)
            oth_cols = slice(d, width)
            out_slice = (d, slice(None), slice(0, span))
        if cfg.mode == MODE_COSINE:
            # Clip float32 rounding so scores stay inside [-1, 1].
            scores = np.sum(ref_n[:, ref_cols, :] * oth_n[:, oth_cols, :], axis=-1)
            volume[out_slice] = np.clip(scores, -1.0, 1.0)
        else:
            concat = np.concatenate([f_ref[:, ref_cols, :], f_other[:, oth_cols, :]], axis=-1)
            volume[out_slice] = head_apply_map(concat, head)
    return volume


def wta_disparity(volume: np.ndarray) -> DisparityMap:
    """Per-pixel argmax over non-sentinel cells; ties break toward smallest d.

    Pixels whose every cell is the sentinel are invalid.
    """
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ValueError(f"cost volume must be (D+1, H, W), got {volume.shape}")
    best = np.argmax(volume, axis=0)  # first maximum = smallest d
    top = np.max(volume, axis=0)
    valid = np.isfinite(top)
    values = np.where(valid, best, 0).astype(np.float32)
    return DisparityMap(values=values, valid=valid)


def predict_both(
    left: np.ndarray, right: np.ndarray, model: StereoModel, cfg: MatchConfig
) -> tuple[DisparityMap, DisparityMap]:
    """WTA disparity maps for both views from one shared feature extraction."""
    left = np.asarray(left)
    right = np.asarray(right)
    if left.shape != right.shape:
        raise ValueError(f"stereo pair differs in size: {left.shape} vs {right.shape}")
    f_left = extract_features(normalize_image(left), model.extractor, mode="same")
    f_right = extract_features(normalize_image(right), model.extractor, mode="same")
    head = model.head if cfg.mode == MODE_TRAINED else None
    vol_left = build_cost_volume(f_left, f_right, cfg, head=head, direction="left")
    vol_right = build_cost_volume(f_right, f_left, cfg, head=head, direction="right")
    return wta_disparity(vol_left), wta_disparity(vol_right)
