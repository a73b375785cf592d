"""Grayscale image loading, PFM disparity exchange, and colormap rendering.

Images are (H, W) float32 arrays with intensities in [0, 1]. Disparity maps
carry an explicit validity mask; the PFM exchange encoding for an invalid
pixel is +infinity ("Pf" single-channel, scale -1.0, little-endian floats,
rows stored bottom to top).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

# Fixed perceptual ramp (dark purple -> green -> yellow), linearly
# interpolated between anchors. Anchor 0 renders the minimum disparity.
_RAMP_ANCHORS = np.array(
    [
        (0.267004, 0.004874, 0.329415),
        (0.282623, 0.140926, 0.457517),
        (0.253935, 0.265254, 0.529983),
        (0.206756, 0.371758, 0.553117),
        (0.163625, 0.471133, 0.558148),
        (0.127568, 0.566949, 0.550556),
        (0.134692, 0.658636, 0.517649),
        (0.477504, 0.821444, 0.318195),
        (0.993248, 0.906157, 0.143936),
    ],
    dtype=np.float64,
)


@dataclass
class DisparityMap:
    """Dense disparity raster plus validity mask.

    values : (H, W) float32, finite and >= 0 wherever ``valid`` is True
    valid  : (H, W) bool
    """

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        self.valid = np.ascontiguousarray(self.valid, dtype=bool)
        if self.values.ndim != 2:
            raise ValueError("disparity values must be a 2-D raster")
        if self.values.shape != self.valid.shape:
            raise ValueError(
                f"values shape {self.values.shape} != mask shape {self.valid.shape}"
            )

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def valid_count(self) -> int:
        return int(self.valid.sum())


def load_gray(path: str | Path) -> np.ndarray:
    """Load an 8/16-bit grayscale PGM (P5) or PNG as float32 in [0, 1].

    Color PNG input is converted by unweighted channel mean. Raises OSError
    for unreadable/truncated files and ValueError for unsupported formats.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic[:2] == b"P5":
        return _load_pgm(path)
    if magic == _PNG_MAGIC:
        return _load_png(path)
    raise ValueError(f"{path}: unsupported image format (need P5 PGM or PNG)")


def _load_pgm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    pos = 0
    tokens = []
    while len(tokens) < 4:
        if pos >= len(raw):
            raise OSError(f"{path}: truncated PGM header")
        c = raw[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace():
                pos += 1
            tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    try:
        width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PGM header") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ValueError(f"{path}: bad PGM dimensions/maxval")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    payload = raw[pos : pos + need]
    if len(payload) < need:
        raise OSError(f"{path}: truncated PGM payload")
    data = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return (data.astype(np.float32) / np.float32(maxval)).astype(np.float32)


def _load_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "L":
                arr = np.asarray(im, dtype=np.float32) / 255.0
            elif mode == "LA":
                arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
            elif mode in ("I", "I;16", "I;16B", "I;16L"):
                arr = np.asarray(im, dtype=np.float32) / 65535.0
            elif mode in ("RGB", "RGBA", "P"):
                rgb = np.asarray(im.convert("RGB"), dtype=np.float32)
                arr = rgb.mean(axis=2) / 255.0
            else:
                raise ValueError(f"{path}: unsupported PNG mode {mode!r}")
    except Image.UnidentifiedImageError as exc:
        raise ValueError(f"{path}: not a decodable PNG") from exc
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def write_pfm(dmap: DisparityMap, path: str | Path) -> None:
    """Write a disparity map as single-channel PFM; invalid pixels become +inf."""
    payload = np.where(dmap.valid, dmap.values, np.float32(np.inf))
    header = f"Pf\n{dmap.width} {dmap.height}\n-1.0\n".encode("ascii")
    # PFM stores rows bottom to top.
    body = np.flipud(payload).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def read_pfm(path: str | Path) -> DisparityMap:
    """Read a single-channel PFM. Non-finite or negative cells become invalid."""
    path = Path(path)
    raw = path.read_bytes()
    parts = raw.split(b"\n", 1)
    magic = parts[0].strip()
    if magic == b"PF":
        raise ValueError(f"{path}: color PFM ('PF') is not supported")
    if magic != b"Pf":
        raise ValueError(f"{path}: bad PFM magic {magic!r}")
    rest = parts[1] if len(parts) > 1 else b""
    dims_line, rest = _split_line(rest, path)
    dims = dims_line.split()
    if len(dims) != 2:
        raise ValueError(f"{path}: bad PFM dimensions line {dims_line!r}")
    try:
        width, height = int(dims[0]), int(dims[1])
    except ValueError as exc:
        raise ValueError(f"{path}: bad PFM dimensions {dims!r}") from exc
    if width <= 0 or height <= 0:
        raise ValueError(f"{path}: non-positive PFM dimensions")
    scale_line, rest = _split_line(rest, path)
    try:
        scale = float(scale_line)
    except ValueError as exc:
        raise ValueError(f"{path}: bad PFM scale {scale_line!r}") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    need = width * height * 4
    if len(rest) < need:
        raise OSError(f"{path}: truncated PFM payload")
    data = np.frombuffer(rest[:need], dtype=dtype).reshape(height, width)
    data = np.flipud(data).astype(np.float32)
    valid = np.isfinite(data) & (data >= 0)
    values = np.where(valid, data, np.float32(0.0))
    return DisparityMap(values=values, valid=valid)


def _split_line(buf: bytes, path: Path) -> tuple[bytes, bytes]:
    idx = buf.find(b"\n")
    if idx < 0:
        raise OSError(f"{path}: truncated PFM header")
    return buf[:idx].strip(), buf[idx + 1 :]


def render_colormap(dmap: DisparityMap, path: str | Path) -> None:
    """Render a disparity map to an 8-bit color PNG.

    Valid values are min-max normalized over the valid pixels and mapped
    through the fixed ramp; invalid pixels are black. A constant valid map
    renders at the ramp midpoint.
    """
    rgb = colormap_rgb(dmap)
    Image.fromarray(rgb, mode="RGB").save(Path(path), format="PNG")


def colormap_rgb(dmap: DisparityMap) -> np.ndarray:
    """Colormap a disparity map to an (H, W, 3) uint8 array (black = invalid)."""
    out = np.zeros((dmap.height, dmap.width, 3), dtype=np.uint8)
    if not dmap.valid.any():
        return out
    vals = dmap.values[dmap.valid].astype(np.float64)
    vmin, vmax = float(vals.min()), float(vals.max())
    span = vmax - vmin
    if span < 1e-12:
        t = np.full(vals.shape, 0.5)
    else:
        t = (vals - vmin) / span
    out[dmap.valid] = _apply_ramp(t)
    return out


def _apply_ramp(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    pos = t * (len(_RAMP_ANCHORS) - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, len(_RAMP_ANCHORS) - 1)
    frac = (pos - lo)[:, None]
    color = _RAMP_ANCHORS[lo] * (1.0 - frac) + _RAMP_ANCHORS[hi] * frac
    return np.round(color * 255.0).astype(np.uint8)
