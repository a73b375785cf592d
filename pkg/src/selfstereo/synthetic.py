"""Synthetic stereo pairs with known planar disparity, for experiments and
end-to-end verification: a smoothed-noise texture paired with a horizontally
shifted copy of itself.
"""

from __future__ import annotations

import numpy as np

from .imgio import DisparityMap
from .nncore import ConvLayer, _conv_fwd_nhwc


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur with reflect padding (kernel radius 3*sigma)."""
    if sigma <= 0:
        return np.asarray(image, dtype=np.float32)
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (xs / sigma) ** 2)
    g /= g.sum()
    k = 2 * radius + 1
    layer = ConvLayer(
        in_channels=1,
        out_channels=1,
        kernel_size=k,
        padding="valid",
        weight=np.outer(g, g)[None, None].astype(np.float32),
        bias=np.zeros(1, np.float32),
    )
    padded = np.pad(
        np.asarray(image, dtype=np.float32)[None, :, :, None],
        ((0, 0), (radius, radius), (radius, radius), (0, 0)),
        mode="reflect",
    )
    return _conv_fwd_nhwc(padded, layer)[0][0, :, :, 0]


def shifted_texture_pair(
    height: int = 128,
    width: int = 128,
    shift: int = 7,
    seed: int = 0,
    smooth_sigma: float = 1.5,
    contrast_range: tuple[float, float] = (1.0, 1.0),
    contrast_sigma: float = 16.0,
) -> tuple[np.ndarray, np.ndarray, DisparityMap]:
    """Build (left, right, ground_truth) with a constant disparity plane.

    A (height, width + shift) noise texture is smoothed and min-max scaled to
    [0, 1]; the left image is its left window and the right image the window
    shifted by ``shift`` columns, so left(x) == right(x - shift) exactly. The
    ground truth is ``shift`` everywhere a correspondence exists (x >= shift).

    ``contrast_range`` = (lo, hi) modulates the texture amplitude by a smooth
    (blob scale ``contrast_sigma``) log-spaced envelope between lo and hi,
    producing realistic low-contrast regions that are hard to match before
    features are trained. The default (1, 1) leaves the contrast uniform.
    """
    if shift < 0:
        raise ValueError(f"shift must be >= 0, got {shift}")
    lo_c, hi_c = contrast_range
    if not 0 < lo_c <= hi_c:
        raise ValueError(f"need 0 < lo <= hi in contrast_range, got {contrast_range}")
    rng = np.random.default_rng(seed)
    texture = rng.uniform(size=(height, width + shift)).astype(np.float32)
    texture = gaussian_blur(texture, smooth_sigma)
    texture -= texture.mean()

    if hi_c > lo_c:
        blobs = gaussian_blur(rng.uniform(size=texture.shape).astype(np.float32), contrast_sigma)
        b_lo, b_hi = float(blobs.min()), float(blobs.max())
        u = (blobs - b_lo) / max(b_hi - b_lo, 1e-12)
        envelope = lo_c * (hi_c / lo_c) ** u
        texture = texture * envelope
    else:
        texture = texture * lo_c

    t_lo, t_hi = float(texture.min()), float(texture.max())
    texture = (texture - t_lo) / max(t_hi - t_lo, 1e-12)

    left = np.ascontiguousarray(texture[:, :width])
    right = np.ascontiguousarray(texture[:, shift : shift + width])

    values = np.full((height, width), float(shift), dtype=np.float32)
    valid = np.zeros((height, width), dtype=bool)
    valid[:, shift:] = True
    return left, right, DisparityMap(values=values, valid=valid)
