"""Minimal dense numeric core: 2-D convolution with exact gradients, ReLU,
Adam, a finite-difference gradient checker, and checkpoint serialization.

Public tensors are numpy arrays shaped (C, H, W) or (N, C, H, W); the
compute kernels run channels-last internally (contiguous channel runs feed
BLAS directly). Training runs in float32; gradient checks should be run in
float64. Convolution is cross-correlation (no kernel flip).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

PAD_VALID = "valid"
PAD_REFLECT = "reflect-same"

_CHECKPOINT_MAGIC = b"SADA"
_CHECKPOINT_VERSION = 1
_PAD_TAGS = {PAD_VALID: 0, PAD_REFLECT: 1}
_PAD_FROM_TAG = {v: k for k, v in _PAD_TAGS.items()}


@dataclass
class ConvLayer:
    """Square-kernel 2-D convolution layer (cross-correlation plus bias)."""

    in_channels: int
    out_channels: int
    kernel_size: int
    padding: str
    weight: np.ndarray  # (out, in, k, k)
    bias: np.ndarray  # (out,)

    def __post_init__(self) -> None:
        if self.padding not in _PAD_TAGS:
            raise ValueError(f"unknown padding mode {self.padding!r}")
        expect = (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        if tuple(self.weight.shape) != expect:
            raise ValueError(f"weight shape {self.weight.shape} != {expect}")
        if tuple(self.bias.shape) != (self.out_channels,):
            raise ValueError(f"bias shape {self.bias.shape} != ({self.out_channels},)")

    @property
    def param_count(self) -> int:
        return self.weight.size + self.bias.size


def init_conv_layer(
    rng: np.random.Generator,
    in_channels: int,
    out_channels: int,
    kernel_size: int = 3,
    padding: str = PAD_VALID,
    dtype: np.dtype = np.float32,
) -> ConvLayer:
    """Glorot-uniform weights (fan counts include the kernel area), zero bias."""
    fan_in = in_channels * kernel_size * kernel_size
    fan_out = out_channels * kernel_size * kernel_size
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    weight = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size, kernel_size))
    return ConvLayer(
        in_channels=in_channels,
        out_channels=out_channels,
        kernel_size=kernel_size,
        padding=padding,
        weight=weight.astype(dtype),
        bias=np.zeros(out_channels, dtype=dtype),
    )


def _as_batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"tensor must be (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _reflect_pad_nhwc(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    if x.shape[1] < pad + 1 or x.shape[2] < pad + 1:
        raise ValueError(f"spatial dims {x.shape[1:3]} too small for reflect pad {pad}")
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")


def _reflect_pad_adjoint_nhwc(g: np.ndarray, pad: int) -> np.ndarray:
    """Fold gradients w.r.t. a reflect-padded tensor back onto the original."""
    if pad == 0:
        return g
    _, hp, wp, _ = g.shape
    h, w = hp - 2 * pad, wp - 2 * pad
    rows = g[:, pad : pad + h, :, :].copy()
    for j in range(pad):
        rows[:, pad - j, :, :] += g[:, j, :, :]
        rows[:, h - 2 - j, :, :] += g[:, pad + h + j, :, :]
    out = rows[:, :, pad : pad + w, :].copy()
    for j in range(pad):
        out[:, :, pad - j, :] += rows[:, :, j, :]
        out[:, :, w - 2 - j, :] += rows[:, :, pad + w + j, :]
    return out


def _im2col_nhwc(x: np.ndarray, k: int) -> np.ndarray:
    """(N, H, W, C) -> (N*Ho*Wo, k*k*C) patch matrix for a valid correlation.

    Filled with one contiguous channel-run copy per kernel offset.
    """
    n, h, w, c = x.shape
    ho, wo = h - k + 1, w - k + 1
    if k == 1:
        return x.reshape(n * ho * wo, c)
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, :, dy, dx, :] = x[:, dy : dy + ho, dx : dx + wo, :]
    return cols.reshape(n * ho * wo, k * k * c)


def _weight_as_matrix(weight: np.ndarray) -> np.ndarray:
    """(O, C, k, k) -> (k*k*C, O) matching the im2col inner order."""
    o, c, k, _ = weight.shape
    return np.ascontiguousarray(weight.transpose(2, 3, 1, 0).reshape(k * k * c, o))


def _conv_fwd_nhwc(
    x: np.ndarray, layer: ConvLayer, want_cols: bool = False
) -> tuple[np.ndarray, np.ndarray | None]:
    """Valid/reflect-same correlation on (N, H, W, C) input."""
    k = layer.kernel_size
    if layer.padding == PAD_REFLECT:
        x = _reflect_pad_nhwc(x, (k - 1) // 2)
    n, h, w, _ = x.shape
    if h < k or w < k:
        raise ValueError(f"spatial dims {(h, w)} smaller than kernel {k}")
    cols = _im2col_nhwc(x, k)
    out = cols @ _weight_as_matrix(layer.weight).astype(x.dtype)
    out += layer.bias.astype(x.dtype)
    return out.reshape(n, h - k + 1, w - k + 1, layer.out_channels), (cols if want_cols else None)


def _conv_bwd_nhwc(
    x: np.ndarray,
    layer: ConvLayer,
    grad_out: np.ndarray,
    cols: np.ndarray | None = None,
    need_grad_input: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients for _conv_fwd_nhwc; ``cols`` may reuse the forward's im2col.

    Pass need_grad_input=False when the layer input is raw data (saves the
    col2im pass).
    """
    k = layer.kernel_size
    o = layer.out_channels
    c = layer.in_channels
    pad = (k - 1) // 2 if layer.padding == PAD_REFLECT else 0
    xp = _reflect_pad_nhwc(x, pad)
    n, hp, wp, _ = xp.shape
    ho, wo = hp - k + 1, wp - k + 1
    if tuple(grad_out.shape) != (n, ho, wo, o):
        raise ValueError(f"grad_out shape {grad_out.shape} != forward output shape {(n, ho, wo, o)}")

    go_mat = grad_out.reshape(-1, o)
    grad_bias = go_mat.sum(axis=0)
    if cols is None:
        cols = _im2col_nhwc(xp, k)
    gw_mat = cols.T @ go_mat  # (k*k*C, O)
    grad_weight = np.ascontiguousarray(gw_mat.reshape(k, k, c, o).transpose(3, 2, 0, 1))

    grad_x = None
    if need_grad_input:
        # col2im: per-patch gradients scattered back onto the (padded) input.
        gcols = go_mat @ _weight_as_matrix(layer.weight).astype(x.dtype).T
        if k == 1:
            grad_xp = gcols.reshape(n, hp, wp, c)
        else:
            grad_xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
            gview = gcols.reshape(n, ho, wo, k, k, c)
            for dy in range(k):
                for dx in range(k):
                    grad_xp[:, dy : dy + ho, dx : dx + wo, :] += gview[:, :, :, dy, dx, :]
        grad_x = _reflect_pad_adjoint_nhwc(grad_xp, pad) if pad else grad_xp
    return grad_x, grad_weight, grad_bias


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Cross-correlate a (C,H,W) or (N,C,H,W) tensor with the layer kernel.

    Valid mode shrinks each spatial dim by kernel_size - 1; reflect-same
    preserves the spatial dims.
    """
    x4, squeeze = _as_batched(x)
    if x4.shape[1] != layer.in_channels:
        raise ValueError(f"input has {x4.shape[1]} channels, layer expects {layer.in_channels}")
    out_nhwc, _ = _conv_fwd_nhwc(np.ascontiguousarray(x4.transpose(0, 2, 3, 1)), layer)
    out = np.ascontiguousarray(out_nhwc.transpose(0, 3, 1, 2))
    return out[0] if squeeze else out


def conv2d_backward(
    x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of conv2d_forward: (grad_input, grad_weight, grad_bias)."""
    x4, squeeze = _as_batched(x)
    go4, _ = _as_batched(grad_out)
    if x4.shape[1] != layer.in_channels:
        raise ValueError(f"input has {x4.shape[1]} channels, layer expects {layer.in_channels}")
    gx_nhwc, gw, gb = _conv_bwd_nhwc(
        np.ascontiguousarray(x4.transpose(0, 2, 3, 1)),
        layer,
        np.ascontiguousarray(go4.transpose(0, 2, 3, 1)),
    )
    gx = np.ascontiguousarray(gx_nhwc.transpose(0, 3, 1, 2))
    return (gx[0] if squeeze else gx), gw, gb


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pass gradient where the forward input was > 0 (exact zeros block it)."""
    return grad_out * (x > 0)


@dataclass
class AdamState:
    """Adam moment buffers plus hyperparameters for one parameter vector."""

    m: np.ndarray
    v: np.ndarray
    lr: float = 6.0e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0


def init_adam(n_params: int, lr: float = 6.0e-5, dtype: np.dtype = np.float32) -> AdamState:
    return AdamState(m=np.zeros(n_params, dtype=dtype), v=np.zeros(n_params, dtype=dtype), lr=lr)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> None:
    """One in-place Adam update with bias correction."""
    if params.shape != grads.shape or params.shape != state.m.shape or params.shape != state.v.shape:
        raise ValueError(
            f"length mismatch: params {params.shape}, grads {grads.shape}, "
            f"m {state.m.shape}, v {state.v.shape}"
        )
    state.step += 1
    t = state.step
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * np.square(grads)
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    params -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(params.dtype)


def consolidate(layers: Sequence[ConvLayer], dtype: np.dtype | None = None) -> np.ndarray:
    """Pack all layer parameters into one flat vector, in declaration order
    (per layer: weight then bias), and re-point the layers at views of it.
    """
    if dtype is None:
        dtype = layers[0].weight.dtype
    total = sum(layer.param_count for layer in layers)
    flat = np.empty(total, dtype=dtype)
    offset = 0
    for layer in layers:
        w_view = flat[offset : offset + layer.weight.size].reshape(layer.weight.shape)
        w_view[...] = layer.weight
        layer.weight = w_view
        offset += layer.weight.size
        b_view = flat[offset : offset + layer.bias.size]
        b_view[...] = layer.bias
        layer.bias = b_view
        offset += layer.bias.size
    return flat


def grads_to_vector(grads: Sequence[tuple[np.ndarray, np.ndarray]], dtype: np.dtype = np.float32) -> np.ndarray:
    """Flatten per-layer (grad_weight, grad_bias) pairs in declaration order."""
    return np.concatenate([np.concatenate([gw.ravel(), gb.ravel()]) for gw, gb in grads]).astype(dtype)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_index: int
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check(
    closure: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    tolerance: float = 1e-4,
    num_checks: int = 25,
    h: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare the closure's analytic gradient against central finite
    differences on a random parameter subset. Runs in float64.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    params = params.astype(np.float64)
    _, analytic = closure(params)
    analytic = np.asarray(analytic, dtype=np.float64)
    n = params.size
    indices = rng.choice(n, size=min(num_checks, n), replace=False)
    max_rel = 0.0
    worst = int(indices[0])
    for i in indices:
        shifted = params.copy()
        shifted[i] += h
        loss_plus, _ = closure(shifted)
        shifted[i] -= 2 * h
        loss_minus, _ = closure(shifted)
        numeric = (loss_plus - loss_minus) / (2 * h)
        denom = max(abs(analytic[i]), abs(numeric), 1e-8)
        rel = abs(analytic[i] - numeric) / denom
        if rel > max_rel:
            max_rel = rel
            worst = int(i)
    return GradCheckReport(max_rel_err=float(max_rel), worst_index=worst, checked=len(indices), tolerance=tolerance)


def save_checkpoint(path: str | Path, layers: Sequence[ConvLayer], adam: AdamState | None = None) -> None:
    """Serialize layers (and optionally Adam state) to the binary format:

    magic "SADA", version u32, layer count u32, per-layer header
    (in u32, out u32, kernel u32, padding tag u32), float32 little-endian
    weight-then-bias blocks in declaration order, then an Adam presence
    flag u32 followed, if set, by step u64, lr/beta1/beta2/epsilon f64 and
    the float32 m and v vectors.
    """
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", _CHECKPOINT_VERSION, len(layers)))
        for layer in layers:
            fh.write(
                struct.pack(
                    "<IIII",
                    layer.in_channels,
                    layer.out_channels,
                    layer.kernel_size,
                    _PAD_TAGS[layer.padding],
                )
            )
        for layer in layers:
            fh.write(layer.weight.astype("<f4").tobytes())
            fh.write(layer.bias.astype("<f4").tobytes())
        if adam is None:
            fh.write(struct.pack("<I", 0))
        else:
            fh.write(struct.pack("<I", 1))
            fh.write(struct.pack("<Qdddd", adam.step, adam.lr, adam.beta1, adam.beta2, adam.epsilon))
            fh.write(adam.m.astype("<f4").tobytes())
            fh.write(adam.v.astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[list[ConvLayer], AdamState | None]:
    path = Path(path)
    raw = path.read_bytes()
    view = memoryview(raw)
    if bytes(view[:4]) != _CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {bytes(view[:4])!r}")
    version, count = struct.unpack_from("<II", view, 4)
    if version != _CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    headers = []
    for _ in range(count):
        if pos + 16 > len(raw):
            raise OSError(f"{path}: truncated checkpoint header")
        in_ch, out_ch, k, tag = struct.unpack_from("<IIII", view, pos)
        pos += 16
        if tag not in _PAD_FROM_TAG:
            raise ValueError(f"{path}: unknown padding tag {tag}")
        headers.append((in_ch, out_ch, k, _PAD_FROM_TAG[tag]))
    layers = []
    for in_ch, out_ch, k, padding in headers:
        w_count = out_ch * in_ch * k * k
        w, pos = _read_f32(view, pos, w_count, path)
        b, pos = _read_f32(view, pos, out_ch, path)
        layers.append(
            ConvLayer(
                in_channels=in_ch,
                out_channels=out_ch,
                kernel_size=k,
                padding=padding,
                weight=w.reshape(out_ch, in_ch, k, k),
                bias=b,
            )
        )
    if pos + 4 > len(raw):
        raise OSError(f"{path}: truncated checkpoint (missing Adam flag)")
    (flag,) = struct.unpack_from("<I", view, pos)
    pos += 4
    adam = None
    if flag:
        if pos + 40 > len(raw):
            raise OSError(f"{path}: truncated Adam header")
        step, lr, beta1, beta2, epsilon = struct.unpack_from("<Qdddd", view, pos)
        pos += 40
        n_params = sum(layer.param_count for layer in layers)
        m, pos = _read_f32(view, pos, n_params, path)
        v, pos = _read_f32(view, pos, n_params, path)
        adam = AdamState(m=m, v=v, lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon, step=step)
    return layers, adam


def _read_f32(view: memoryview, pos: int, count: int, path: Path) -> tuple[np.ndarray, int]:
    nbytes = count * 4
    if pos + nbytes > len(view):
        raise OSError(f"{path}: truncated checkpoint payload")
    arr = np.frombuffer(view, dtype="<f4", count=count, offset=pos).astype(np.float32)
    return arr, pos + nbytes
