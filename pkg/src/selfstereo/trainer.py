"""Adaptive self-supervised training loop: predict both views, prune with
the left-right consistency check, sample patch triplets from the surviving
pseudo ground truth, take hinge-loss gradient steps, and refresh the pseudo
ground truth after every epoch. Convergence is tracked by the total number
of inconsistent pixels; training stops early once that count rises for
``patience`` consecutive epochs.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import model as model_mod
from .consistency import ConsistencyConfig, ConsistencyResult, count_history_should_stop, lr_check
from .imgio import DisparityMap
from .matcher import MODE_COSINE, MODE_TRAINED, MatchConfig, build_cost_volume, predict_both, wta_disparity
from .model import StereoModel, normalize_image, triplet_loss
from .nncore import AdamState, adam_step, init_adam
from .postproc import MetricUndefinedError
from .sampler import SamplerConfig, SamplingExhaustedError, sample_batch

logger = logging.getLogger(__name__)

EPOCH0_FEATURE_COSINE = "feature-cosine"
EPOCH0_RAW_COSINE = "raw-cosine"

CSV_HEADER = ("epoch", "loss", "inconsistent")


class TrainingAbortError(RuntimeError):
    """An epoch could not be completed (e.g. sampling exhausted on a pair)."""

    def __init__(self, message: str, pair_index: int, valid_pixels: int):
        super().__init__(message)
        self.pair_index = pair_index
        self.valid_pixels = valid_pixels


@dataclass
class TrainConfig:
    lr: float = 6.0e-5
    margin: float = 0.2
    batch_size: int = 500
    batches_per_epoch: int = 32
    max_epochs: int = 300
    patience: int = 50
    dmax: int = 64
    seed: int = 0
    epoch0_mode: str = EPOCH0_FEATURE_COSINE
    checkpoint_every: int = 50

    def __post_init__(self) -> None:
        counts = {
            "batch_size": self.batch_size,
            "batches_per_epoch": self.batches_per_epoch,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "dmax": self.dmax,
            "checkpoint_every": self.checkpoint_every,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValueError(f"{name} must be >= 1, got {value}")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not self.margin > 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.epoch0_mode not in (EPOCH0_FEATURE_COSINE, EPOCH0_RAW_COSINE):
            raise ValueError(f"unknown epoch0_mode {self.epoch0_mode!r}")


@dataclass
class TrainState:
    model: StereoModel
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0
    epoch0_inconsistent: int | None = None
    inconsistency_history: list[int] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)
    pseudo_gt: list[ConsistencyResult] = field(default_factory=list)
    prediction_log: list[list[DisparityMap]] | None = None


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    inconsistent_count: int
    per_pair_inconsistent: list[int]


def _check_pairs(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> None:
    if len(pairs) == 0:
        raise ValueError("empty stereo pair set")
    for i, (left, right) in enumerate(pairs):
        if left.shape != right.shape:
            raise ValueError(f"pair {i}: image sizes differ ({left.shape} vs {right.shape})")


def _raw_patch_features(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Each pixel's reflect-padded patch_size² neighborhood as a feature vector."""
    half = patch_size // 2
    padded = np.pad(np.asarray(image, dtype=np.float32), half, mode="reflect")
    win = np.lib.stride_tricks.sliding_window_view(padded, (patch_size, patch_size))
    h, w = image.shape
    return np.ascontiguousarray(win.reshape(h, w, patch_size * patch_size))


def _predict_pair(
    left: np.ndarray,
    right: np.ndarray,
    state: TrainState,
    cfg: TrainConfig,
    mode: str,
    patch_size: int,
) -> tuple[DisparityMap, DisparityMap]:
    match_cfg = MatchConfig(dmax=cfg.dmax, mode=MODE_TRAINED if mode == MODE_TRAINED else MODE_COSINE)
    if mode == MODE_TRAINED or cfg.epoch0_mode == EPOCH0_FEATURE_COSINE:
        return predict_both(left, right, state.model, match_cfg)
    f_left = _raw_patch_features(normalize_image(left), patch_size)
    f_right = _raw_patch_features(normalize_image(right), patch_size)
    vol_left = build_cost_volume(f_left, f_right, match_cfg, direction="left")
    vol_right = build_cost_volume(f_right, f_left, match_cfg, direction="right")
    return wta_disparity(vol_left), wta_disparity(vol_right)


def initialize_pseudo_gt(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    state: TrainState,
    cfg: TrainConfig,
    check_cfg: ConsistencyConfig | None = None,
    patch_size: int = 11,
) -> list[ConsistencyResult]:
    """Epoch-0 pseudo ground truth from cosine-similarity matching.

    Features come from the randomly initialized extractor (feature-cosine
    mode) or from raw normalized intensity patches (raw-cosine mode); the
    result is stored on the state and returned.
    """
    check_cfg = check_cfg or ConsistencyConfig()
    results = []
    for left, right in pairs:
        d_left, d_right = _predict_pair(left, right, state, cfg, MODE_COSINE, patch_size)
        results.append(lr_check(d_left, d_right, check_cfg))
    state.pseudo_gt = results
    state.epoch0_inconsistent = sum(r.inconsistent_count for r in results)
    total_px = sum(left.size for left, _ in pairs)
    consistent = total_px - state.epoch0_inconsistent
    if consistent < 0.01 * total_px:
        logger.warning(
            "epoch-0 pseudo ground truth is nearly empty (%d of %d pixels consistent); "
            "training may not bootstrap",
            consistent,
            total_px,
        )
    if state.prediction_log is not None:
        state.prediction_log.append([r.sparse for r in results])
    return results


def train_epoch(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    state: TrainState,
    cfg: TrainConfig,
    sampler_cfg: SamplerConfig | None = None,
    check_cfg: ConsistencyConfig | None = None,
) -> EpochReport:
    """One epoch: gradient steps on every pair, then a pseudo-GT refresh with
    the trained similarity head.
    """
    sampler_cfg = sampler_cfg or SamplerConfig(batch_size=cfg.batch_size, seed=cfg.seed)
    check_cfg = check_cfg or ConsistencyConfig()
    if len(state.pseudo_gt) != len(pairs):
        raise ValueError("pseudo ground truth not initialized for this pair set")

    losses = []
    for pair_idx, (left, right) in enumerate(pairs):
        left_n = normalize_image(left)
        right_n = normalize_image(right)
        pgt = state.pseudo_gt[pair_idx].sparse
        try:
            for _ in range(cfg.batches_per_epoch):
                batch = sample_batch(left_n, right_n, pgt, sampler_cfg, state.rng)
                loss, grad = triplet_loss(batch, state.model.extractor, state.model.head, cfg.margin)
                adam_step(state.model.params, grad, state.adam)
                losses.append(loss)
        except SamplingExhaustedError as exc:
            raise TrainingAbortError(
                f"pair {pair_idx}: {exc} (valid pixels: {pgt.valid_count})",
                pair_index=pair_idx,
                valid_pixels=pgt.valid_count,
            ) from exc

    new_results = []
    for left, right in pairs:
        d_left, d_right = _predict_pair(left, right, state, cfg, MODE_TRAINED, sampler_cfg.patch_size)
        new_results.append(lr_check(d_left, d_right, check_cfg))
    state.pseudo_gt = new_results
    per_pair = [r.inconsistent_count for r in new_results]
    total = int(sum(per_pair))
    mean_loss = float(np.mean(losses))
    state.inconsistency_history.append(total)
    state.loss_history.append(mean_loss)
    state.epoch += 1
    if state.prediction_log is not None:
        state.prediction_log.append([r.sparse for r in new_results])
    return EpochReport(
        epoch=state.epoch,
        mean_loss=mean_loss,
        inconsistent_count=total,
        per_pair_inconsistent=per_pair,
    )


def fit(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: TrainConfig,
    sampler_cfg: SamplerConfig | None = None,
    check_cfg: ConsistencyConfig | None = None,
    out_dir: str | Path | None = None,
    log_predictions: bool = False,
    epoch_callback: Callable[[TrainState, EpochReport], None] | None = None,
) -> TrainState:
    """Run the full loop until max_epochs or the early-stopping rule fires.

    When ``out_dir`` is given, writes checkpoints every ``checkpoint_every``
    epochs plus a final one, and a per-epoch convergence CSV with columns
    epoch,loss,inconsistent.
    """
    _check_pairs(pairs)
    sampler_cfg = sampler_cfg or SamplerConfig(batch_size=cfg.batch_size, seed=cfg.seed)
    check_cfg = check_cfg or ConsistencyConfig()

    rng = np.random.default_rng(cfg.seed)
    model = model_mod.init_model(rng)
    adam = init_adam(model.param_count, lr=cfg.lr)
    state = TrainState(model=model, adam=adam, rng=rng)
    if log_predictions:
        state.prediction_log = []
    logger.info("model parameters: %d", model.param_count)

    out_path = Path(out_dir) if out_dir is not None else None
    csv_fh = None
    csv_writer = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        csv_fh = open(out_path / "convergence.csv", "w", newline="")
        csv_writer = csv.writer(csv_fh)
        csv_writer.writerow(CSV_HEADER)
        csv_fh.flush()

    try:
        initialize_pseudo_gt(pairs, state, cfg, check_cfg, sampler_cfg.patch_size)
        logger.info("epoch 0: inconsistent=%d", state.epoch0_inconsistent)
        for _ in range(cfg.max_epochs):
            report = train_epoch(pairs, state, cfg, sampler_cfg, check_cfg)
            logger.info(
                "epoch %d: loss=%.6g inconsistent=%d",
                report.epoch,
                report.mean_loss,
                report.inconsistent_count,
            )
            if csv_writer is not None:
                csv_writer.writerow(
                    (report.epoch, f"{report.mean_loss:.9g}", report.inconsistent_count)
                )
                csv_fh.flush()
            if out_path is not None and report.epoch % cfg.checkpoint_every == 0:
                model_mod.save_model(out_path / f"ckpt_ep{report.epoch:04d}.sada", state.model, state.adam)
            if epoch_callback is not None:
                epoch_callback(state, report)
            if count_history_should_stop(state.inconsistency_history, cfg.patience):
                logger.info(
                    "early stop: inconsistent count rose for %d consecutive epochs", cfg.patience
                )
                break
        if out_path is not None:
            model_mod.save_model(out_path / "ckpt_final.sada", state.model, state.adam)
    finally:
        if csv_fh is not None:
            csv_fh.close()
    return state


def _pooled_point_error(preds: Sequence[DisparityMap], gts: Sequence[DisparityMap], tau: float) -> float:
    wrong = 0
    total = 0
    for pred, gt in zip(preds, gts):
        both = pred.valid & gt.valid
        total += int(both.sum())
        wrong += int((np.abs(gt.values[both] - pred.values[both]) >= tau).sum())
    if total == 0:
        raise MetricUndefinedError("no jointly valid pixels in an epoch prediction")
    return 100.0 * wrong / total


def track_correlation(state: TrainState, gt: Sequence[DisparityMap], tau: float) -> float:
    """Pearson correlation between the per-epoch inconsistent count and the
    per-epoch tau-point error of the logged predictions (evaluation only).

    Returns NaN when either series is constant (correlation undefined).
    """
    if state.prediction_log is None:
        raise ValueError("fit() must be run with log_predictions=True to track correlation")
    if len(state.inconsistency_history) < 3:
        raise ValueError("need at least 3 epochs of history")
    # prediction_log[0] is the epoch-0 initialization; align with per-epoch counts.
    per_epoch_preds = state.prediction_log[1 : len(state.inconsistency_history) + 1]
    errors = np.array([_pooled_point_error(preds, gt, tau) for preds in per_epoch_preds])
    counts = np.asarray(state.inconsistency_history, dtype=np.float64)
    return pearson(counts, errors)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("series lengths differ")
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da**2).sum() * (db**2).sum())
    if denom < 1e-30:
        return float("nan")
    return float((da * db).sum() / denom)
