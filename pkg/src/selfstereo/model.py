"""Siamese feature extractor, trained similarity head, and the margin hinge
loss over patch triplets.

The extractor maps a normalized grayscale image to an (H, W, 60) feature
raster through five 3x3 convolutions (ReLU between layers, none after the
last); an 11x11 patch collapses to a single feature vector in valid mode.
The head scores a concatenated feature pair through 1x1 convolutions
(120 -> 60 -> 60 -> 1), i.e. a per-pixel MLP with an unbounded output.

All dense compute in this module runs channels-last (N, H, W, C).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nncore
from .nncore import AdamState, ConvLayer

FEATURE_CHANNELS = 60
DEFAULT_MARGIN = 0.2

_EXTRACTOR_ARCH = [(1, 60), (60, 60), (60, 60), (60, 60), (60, 60)]
_HEAD_ARCH = [(120, 60), (60, 60), (60, 1)]


@dataclass
class FeatureExtractor:
    layers: list[ConvLayer]


@dataclass
class SimilarityHead:
    layers: list[ConvLayer]


@dataclass
class StereoModel:
    """Extractor + head sharing one flat parameter vector.

    Layer weights and biases are views into ``params``; in-place optimizer
    updates on ``params`` are immediately visible to every branch, which is
    what makes the siamese weight sharing literal.
    """

    extractor: FeatureExtractor
    head: SimilarityHead
    params: np.ndarray

    @property
    def param_count(self) -> int:
        return int(self.params.size)

    @property
    def dtype(self) -> np.dtype:
        return self.params.dtype

    def all_layers(self) -> list[ConvLayer]:
        return [*self.extractor.layers, *self.head.layers]


def context_radius(extractor: FeatureExtractor) -> int:
    """Half-width of the receptive field of one output feature."""
    return sum(layer.kernel_size - 1 for layer in extractor.layers) // 2


def init_model(seed: int | np.random.Generator = 0, dtype: np.dtype = np.float32) -> StereoModel:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ext_layers = [
        nncore.init_conv_layer(rng, cin, cout, kernel_size=3, padding=nncore.PAD_VALID, dtype=dtype)
        for cin, cout in _EXTRACTOR_ARCH
    ]
    head_layers = [
        nncore.init_conv_layer(rng, cin, cout, kernel_size=1, padding=nncore.PAD_VALID, dtype=dtype)
        for cin, cout in _HEAD_ARCH
    ]
    return _bundle(ext_layers, head_layers, dtype)


def _bundle(ext_layers: list[ConvLayer], head_layers: list[ConvLayer], dtype: np.dtype) -> StereoModel:
    layers = [*ext_layers, *head_layers]
    flat = nncore.consolidate(layers, dtype=dtype)
    return StereoModel(
        extractor=FeatureExtractor(layers=layers[: len(ext_layers)]),
        head=SimilarityHead(layers=layers[len(ext_layers) :]),
        params=flat,
    )


def model_from_layers(layers: Sequence[ConvLayer], dtype: np.dtype = np.float32) -> StereoModel:
    """Validate a checkpoint layer list against the fixed architecture."""
    shapes = [(l.in_channels, l.out_channels, l.kernel_size) for l in layers]
    expect = [(cin, cout, 3) for cin, cout in _EXTRACTOR_ARCH] + [(cin, cout, 1) for cin, cout in _HEAD_ARCH]
    if shapes != expect:
        raise ValueError(f"checkpoint architecture {shapes} does not match {expect}")
    n_ext = len(_EXTRACTOR_ARCH)
    return _bundle(list(layers[:n_ext]), list(layers[n_ext:]), dtype)


def clone_model(model: StereoModel, dtype: np.dtype) -> StereoModel:
    layers = [
        ConvLayer(
            in_channels=l.in_channels,
            out_channels=l.out_channels,
            kernel_size=l.kernel_size,
            padding=l.padding,
            weight=l.weight.astype(dtype),
            bias=l.bias.astype(dtype),
        )
        for l in model.all_layers()
    ]
    return model_from_layers(layers, dtype=dtype)


def save_model(path: str | Path, model: StereoModel, adam: AdamState | None = None) -> None:
    nncore.save_checkpoint(path, model.all_layers(), adam)


def load_model(path: str | Path) -> tuple[StereoModel, AdamState | None]:
    layers, adam = nncore.load_checkpoint(path)
    return model_from_layers(layers), adam


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Per-image zero mean, unit standard deviation (network input contract)."""
    arr = np.asarray(image, dtype=np.float32)
    std = float(arr.std())
    return (arr - np.float32(arr.mean())) / np.float32(max(std, 1e-8))


def _stack_forward(
    x: np.ndarray, layers: Sequence[ConvLayer], want_cache: bool = False
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray, np.ndarray | None]] | None]:
    """Channels-last conv stack with ReLU between layers and none after the
    last; the cache keeps each layer's input, pre-activation, and im2col."""
    cache = [] if want_cache else None
    cur = x
    for i, layer in enumerate(layers):
        z, cols = nncore._conv_fwd_nhwc(cur, layer, want_cols=want_cache)
        if want_cache:
            cache.append((cur, z, cols))
        cur = nncore.relu_forward(z) if i < len(layers) - 1 else z
    return cur, cache


def _stack_backward(
    grad_out: np.ndarray,
    layers: Sequence[ConvLayer],
    cache: list[tuple[np.ndarray, np.ndarray, np.ndarray | None]],
    need_input_grad: bool = False,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray | None]:
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(layers)  # type: ignore[list-item]
    g = grad_out
    grad_input = None
    for i in reversed(range(len(layers))):
        x_in, _, cols = cache[i]
        gx, gw, gb = nncore._conv_bwd_nhwc(
            x_in, layers[i], g, cols=cols, need_grad_input=(i > 0 or need_input_grad)
        )
        grads[i] = (gw, gb)
        if i > 0:
            g = nncore.relu_backward(cache[i - 1][1], gx)
        else:
            grad_input = gx
    return grads, grad_input


def extract_features(image: np.ndarray, extractor: FeatureExtractor, mode: str = "same") -> np.ndarray:
    """Run the extractor over a normalized image.

    mode "same" reflect-pads the image by the context radius and returns
    (H, W, 60); mode "valid" returns (H - 2r, W - 2r, 60).
    """
    if mode not in ("same", "valid"):
        raise ValueError(f"unknown mode {mode!r}")
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"expected a single-channel image, got shape {arr.shape}")
    radius = context_radius(extractor)
    dtype = extractor.layers[0].weight.dtype
    x = arr.astype(dtype)[None, :, :, None]
    if mode == "same":
        if arr.shape[0] <= radius or arr.shape[1] <= radius:
            raise ValueError(f"image {arr.shape} too small to reflect-pad by {radius}")
        x = np.pad(x, ((0, 0), (radius, radius), (radius, radius), (0, 0)), mode="reflect")
    else:
        if arr.shape[0] < 2 * radius + 1 or arr.shape[1] < 2 * radius + 1:
            raise ValueError(f"image {arr.shape} smaller than receptive field {2 * radius + 1}")
    out, _ = _stack_forward(x, extractor.layers)
    return out[0]


def score_pairs(feats_a: np.ndarray, feats_b: np.ndarray, head: SimilarityHead) -> np.ndarray:
    """Score (B, 60) feature batches pairwise -> (B,) similarity scores."""
    a = np.atleast_2d(np.asarray(feats_a))
    b = np.atleast_2d(np.asarray(feats_b))
    if a.shape != b.shape:
        raise ValueError(f"feature batches differ: {a.shape} vs {b.shape}")
    dtype = head.layers[0].weight.dtype
    x = np.concatenate([a, b], axis=1).astype(dtype)[:, None, None, :]
    out, _ = _stack_forward(x, head.layers)
    return out.reshape(-1)


def score_pair(feat_a: np.ndarray, feat_b: np.ndarray, head: SimilarityHead) -> float:
    """Similarity score for one feature pair (higher = more similar after training)."""
    return float(score_pairs(feat_a[None], feat_b[None], head)[0])


def head_apply_map(concat_features: np.ndarray, head: SimilarityHead) -> np.ndarray:
    """Apply the head per pixel to an (H, W, 2C) concatenated feature raster."""
    out, _ = _stack_forward(np.asarray(concat_features)[None], head.layers)
    return out[0, :, :, 0]


def hinge_loss(pos_score: float, neg_score: float, margin: float = DEFAULT_MARGIN) -> float:
    """max(0, margin + neg_score - pos_score)."""
    return max(0.0, margin + float(neg_score) - float(pos_score))


def triplet_loss(
    batch: Sequence, extractor: FeatureExtractor, head: SimilarityHead, margin: float = DEFAULT_MARGIN
) -> tuple[float, np.ndarray]:
    """Mean hinge loss over a triplet batch plus the full parameter gradient.

    All three patches of every triplet run through the shared extractor in a
    single pass; the returned gradient vector follows the declaration order
    of the extractor layers then the head layers (weight before bias), i.e.
    the layout of the model's flat parameter vector.
    """
    if len(batch) == 0:
        raise ValueError("empty triplet batch")
    dtype = extractor.layers[0].weight.dtype
    refs = np.stack([t.reference for t in batch]).astype(dtype)
    poss = np.stack([t.positive for t in batch]).astype(dtype)
    negs = np.stack([t.negative for t in batch]).astype(dtype)
    n = refs.shape[0]
    radius = context_radius(extractor)
    side = 2 * radius + 1
    if refs.shape[1:] != (side, side):
        raise ValueError(f"patches must be {side}x{side} for this extractor, got {refs.shape[1:]}")

    stacked = np.concatenate([refs, poss, negs], axis=0)[:, :, :, None]
    feats, ext_cache = _stack_forward(stacked, extractor.layers, want_cache=True)
    flat = feats.reshape(3 * n, -1)
    f_ref, f_pos, f_neg = flat[:n], flat[n : 2 * n], flat[2 * n :]

    pair_in = np.concatenate(
        [
            np.concatenate([f_ref, f_pos], axis=1),
            np.concatenate([f_ref, f_neg], axis=1),
        ],
        axis=0,
    )[:, None, None, :]
    scores, head_cache = _stack_forward(pair_in, head.layers, want_cache=True)
    scores = scores.reshape(2 * n)
    s_pos, s_neg = scores[:n], scores[n:]

    losses = np.maximum(0.0, margin + s_neg - s_pos)
    loss = float(losses.mean())

    active = (losses > 0).astype(dtype) / dtype.type(n)
    g_scores = np.concatenate([-active, active]).reshape(2 * n, 1, 1, 1)  # NHWC: (B, 1, 1, 1)
    head_grads, g_pair = _stack_backward(g_scores, head.layers, head_cache, need_input_grad=True)
    g_pair = g_pair.reshape(2 * n, -1)
    c = flat.shape[1]
    g_flat = np.empty_like(flat)
    g_flat[:n] = g_pair[:n, :c] + g_pair[n:, :c]
    g_flat[n : 2 * n] = g_pair[:n, c:]
    g_flat[2 * n :] = g_pair[n:, c:]

    ext_grads, _ = _stack_backward(g_flat.reshape(feats.shape), extractor.layers, ext_cache)
    grad_vec = nncore.grads_to_vector([*ext_grads, *head_grads], dtype=dtype)
    return loss, grad_vec
