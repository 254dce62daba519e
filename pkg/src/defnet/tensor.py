"""Dense float64 tensor primitives: valid convolution, max-pooling, file I/O.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 laid out
row-major as ``[C, H, W]`` (an optional leading batch axis is accepted by
the convolution and pooling routines).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"DPTENSR1"


class DimensionError(ValueError):
    """Raised when array shapes do not compose."""


class ParameterError(ValueError):
    """Raised for invalid operator parameters (kernel sizes, strides, labels)."""


class FormatError(ValueError):
    """Raised when a tensor file is malformed."""


def as_tensor(data, shape=None) -> np.ndarray:
    """Build a float64 tensor, optionally from a flat buffer and a shape."""
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != arr.size:
            raise DimensionError(f"cannot view {arr.size} values as {shape}")
        arr = arr.reshape(shape)
    if any(s < 1 for s in arr.shape):
        raise DimensionError(f"all dimensions must be >= 1, got {arr.shape}")
    return np.ascontiguousarray(arr)


@dataclass
class ConvFilterBank:
    filters: np.ndarray  # [K, C, kh, kw]
    bias: np.ndarray  # [K]

    def __post_init__(self):
        self.filters = np.asarray(self.filters, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.filters.ndim != 4:
            raise DimensionError("filters must be [K, C, kh, kw]")
        if self.bias.shape != (self.filters.shape[0],):
            raise DimensionError("bias length must equal filter count")


def _im2col(x, kh, kw):
    B, C, H, W = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # B,C,Ho,Wo,kh,kw
    Ho, Wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw), Ho, Wo


def conv2d(x: np.ndarray, bank: ConvFilterBank) -> np.ndarray:
    """Valid 2-D cross-correlation.

    ``out[k, i, j] = bias[k] + sum_{c,u,v} x[c, i+u, j+v] * filters[k, c, u, v]``.
    ``x`` may be ``[C, H, W]`` or ``[B, C, H, W]``.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"expected [C,H,W] or [B,C,H,W], got {x.shape}")
    K, C, kh, kw = bank.filters.shape
    if x.shape[1] != C:
        raise DimensionError(f"input has {x.shape[1]} channels, bank expects {C}")
    if kh > x.shape[2] or kw > x.shape[3]:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {x.shape[2:]}")
    cols, Ho, Wo = _im2col(x, kh, kw)
    out = cols @ bank.filters.reshape(K, -1).T + bank.bias
    out = out.reshape(x.shape[0], Ho, Wo, K).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out[0] if single else out)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, bank: ConvFilterBank,
                    input_grad: bool = True):
    """Gradients of :func:`conv2d` w.r.t. input, filters and bias.

    With ``input_grad=False`` the input gradient is skipped and returned as None.
    """
    single = x.ndim == 3
    if single:
        x, grad_out = x[None], grad_out[None]
    K, C, kh, kw = bank.filters.shape
    B, _, H, W = x.shape
    cols, Ho, Wo = _im2col(x, kh, kw)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, K)
    g_filters = (g.T @ cols).reshape(bank.filters.shape)
    g_bias = g.sum(axis=0)
    if not input_grad:
        return None, g_filters, g_bias
    gcols = (g @ bank.filters.reshape(K, -1)).reshape(B, Ho, Wo, C, kh, kw)
    gcols = np.ascontiguousarray(gcols.transpose(4, 5, 0, 3, 1, 2))  # kh,kw,B,C,Ho,Wo
    g_x = np.zeros((B, C, H, W))
    for u in range(kh):
        for v in range(kw):
            g_x[:, :, u:u + Ho, v:v + Wo] += gcols[u, v]
    if single:
        g_x = g_x[0]
    return g_x, g_filters, g_bias


def max_pool(x: np.ndarray, k: int, stride: int, pad: int = 0):
    """Block-wise maximum over ``k x k`` windows stepped by ``stride``.

    With ``pad > 0`` the map is surrounded by ``-inf`` so windows are centred
    on ``stride * index`` when ``k == 2 * pad + 1``.  Returns ``(out, argmax)``
    where ``argmax`` holds flat ``h * W + w`` source indices into the unpadded
    map, ties resolved toward the first element in row-major order.
    """
    if k < 1 or stride < 1 or pad < 0:
        raise ParameterError("kernel size and stride must be >= 1, pad >= 0")
    H, W = x.shape[-2:]
    if k > H + 2 * pad or k > W + 2 * pad:
        raise ParameterError(f"kernel {k} larger than map {H}x{W}")
    lead = x.shape[:-2]
    xp = x
    if pad:
        widths = [(0, 0)] * len(lead) + [(pad, pad), (pad, pad)]
        xp = np.pad(x, widths, constant_values=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(-2, -1))[..., ::stride, ::stride, :, :]
    Ho, Wo = win.shape[-4:-2]
    flat = win.reshape(*lead, Ho, Wo, k * k)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(Ho)[:, None] * stride + local // k - pad
    cols = np.arange(Wo)[None, :] * stride + local % k - pad
    return out, rows * W + cols


def max_pool_backward(grad_out: np.ndarray, argmax: np.ndarray, in_shape) -> np.ndarray:
    """Route each output gradient to the input element that won the max."""
    H, W = in_shape[-2:]
    lead = int(np.prod(in_shape[:-2], dtype=np.int64))
    idx = argmax.reshape(lead, -1) + (np.arange(lead) * (H * W))[:, None]
    g = np.bincount(idx.ravel(), weights=grad_out.ravel(), minlength=lead * H * W)
    return g.reshape(in_shape)


def save_tensor(t: np.ndarray, path) -> None:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = t.reshape(1)
    header = MAGIC + struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise FormatError(f"{os.fspath(path)}: bad magic")
    if len(blob) < 12:
        raise FormatError("truncated header")
    (rank,) = struct.unpack_from("<I", blob, 8)
    if rank < 1 or len(blob) < 12 + 4 * rank:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}I", blob, 12)
    if any(d < 1 for d in dims):
        raise FormatError(f"invalid dims {dims}")
    payload = blob[12 + 4 * rank:]
    if len(payload) != 8 * int(np.prod(dims, dtype=np.int64)):
        raise FormatError(
            f"header declares {int(np.prod(dims))} values, payload holds {len(payload) / 8:g}"
        )
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
