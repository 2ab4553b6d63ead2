"""Dense tensor helpers, im2col convolution and the finite-difference oracle.

Tensors are plain float64 numpy arrays in channels-last layout (H x W x C).
Convolution routines also accept a leading batch axis (N x H x W x C); the
network code relies on that to keep Python overhead per layer constant.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from irdseg.rng import SplitMix64

TENSOR_MAGIC = b"IRDT"
TENSOR_VERSION = 1
_MAX_ELEMENTS = 2**62


class TensorFormatError(ValueError):
    pass


def tensor_create(shape, fill: float = 0.0, seed: int | None = None) -> np.ndarray:
    """Create a float64 tensor filled with a constant, or N(0, 1) draws if ``seed`` is given."""
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ValueError(f"negative extent in shape {shape}")
    size = 1
    for s in shape:
        size *= s
        if size > _MAX_ELEMENTS:
            raise OverflowError(f"shape {shape} overflows the flat index space")
    if seed is None:
        return np.full(shape, float(fill), dtype=np.float64)
    return SplitMix64(seed).normal(size).reshape(shape)


@dataclass(frozen=True)
class ConvGeometry:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    in_channels: int | None = None
    out_channels: int | None = None

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1 or self.kernel_h % 2 == 0 or self.kernel_w % 2 == 0:
            raise ValueError(f"kernel extents must be odd and >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")

    @classmethod
    def for_kernel(cls, kernel: np.ndarray, stride: int = 1, padding: int = 0) -> "ConvGeometry":
        kh, kw, cin, cout = kernel.shape
        return cls(kh, kw, stride, padding, cin, cout)

    @property
    def taps(self) -> int:
        return self.kernel_h * self.kernel_w

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        out = []
        for extent, k in ((h, self.kernel_h), (w, self.kernel_w)):
            span = extent + 2 * self.padding - k
            if span < 0 or span % self.stride:
                raise ValueError(
                    f"non-integral output extent: ({extent} + 2*{self.padding} - {k}) / {self.stride}"
                )
            out.append(span // self.stride + 1)
        return out[0], out[1]


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ValueError(f"expected rank {rank} (or {rank + 1} batched), got shape {x.shape}")


def windows(x: np.ndarray, geom: ConvGeometry, pad_value: float = 0.0) -> np.ndarray:
    """Strided receptive-field view of a batched N x H x W x C array.

    Returns N x Ho x Wo x Kh x Kw x C (a copy).
    """
    ho, wo = geom.output_size(x.shape[1], x.shape[2])
    p = geom.padding
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), constant_values=pad_value)
    view = sliding_window_view(x, (geom.kernel_h, geom.kernel_w), axis=(1, 2))
    s = geom.stride
    view = view[:, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    # view: N, Ho, Wo, C, Kh, Kw
    return np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3))


def im2col(x: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """(H*W_out) x (Kh*Kw*C) patch matrix; row r is the receptive field of output pixel r.

    Column order is (kh, kw, c), matching ``kernel.reshape(-1, C_out)``.
    A batched input gives N x (Ho*Wo) x (Kh*Kw*C).
    """
    xb, single = _batched(np.asarray(x, dtype=np.float64), 3)
    win = windows(xb, geom)
    n, ho, wo = win.shape[:3]
    cols = win.reshape(n, ho * wo, -1)
    return cols[0] if single else cols


def col2im(cols: np.ndarray, input_shape: tuple, geom: ConvGeometry) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the image."""
    single = len(input_shape) == 3
    if single:
        cols = cols[None]
        input_shape = (1, *input_shape)
    n, h, w, c = input_shape
    ho, wo = geom.output_size(h, w)
    p, s = geom.padding, geom.stride
    kh, kw = geom.kernel_h, geom.kernel_w
    patches = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros((n, h + 2 * p, w + 2 * p, c))
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += patches[:, :, :, i, j]
    out = out[:, p : p + h, p : p + w]
    return out[0] if single else out


def _check_kernel(x: np.ndarray, kernel: np.ndarray, geom: ConvGeometry) -> None:
    if kernel.ndim != 4:
        raise ValueError(f"kernel must be Kh x Kw x C_in x C_out, got shape {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if (kh, kw) != (geom.kernel_h, geom.kernel_w):
        raise ValueError(f"kernel {kh}x{kw} does not match geometry {geom.kernel_h}x{geom.kernel_w}")
    if x.shape[-1] != cin:
        raise ValueError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    if geom.in_channels is not None and geom.in_channels != cin:
        raise ValueError(f"geometry in_channels {geom.in_channels} != kernel {cin}")
    if geom.out_channels is not None and geom.out_channels != cout:
        raise ValueError(f"geometry out_channels {geom.out_channels} != kernel {cout}")


def conv2d(x: np.ndarray, kernel: np.ndarray, geom: ConvGeometry) -> np.ndarray:
    """Zero-padded cross-correlation, H x W x C_in -> H_out x W_out x C_out."""
    x = np.asarray(x, dtype=np.float64)
    _check_kernel(x, kernel, geom)
    xb, single = _batched(x, 3)
    ho, wo = geom.output_size(xb.shape[1], xb.shape[2])
    cols = im2col(xb, geom)
    out = (cols @ kernel.reshape(-1, kernel.shape[3])).reshape(xb.shape[0], ho, wo, -1)
    return out[0] if single else out


def conv2d_backward(x: np.ndarray, kernel: np.ndarray, geom: ConvGeometry, grad_out: np.ndarray):
    """Gradients of ``sum(grad_out * conv2d(x, kernel))`` w.r.t. input and kernel."""
    x = np.asarray(x, dtype=np.float64)
    _check_kernel(x, kernel, geom)
    xb, single = _batched(x, 3)
    gb = grad_out[None] if single else grad_out
    cols = im2col(xb, geom)
    g = gb.reshape(xb.shape[0], -1, kernel.shape[3])
    kmat = kernel.reshape(-1, kernel.shape[3])
    grad_kernel = (cols.reshape(-1, cols.shape[-1]).T @ g.reshape(-1, g.shape[-1])).reshape(kernel.shape)
    grad_x = col2im(g @ kmat.T, xb.shape, geom)
    return (grad_x[0] if single else grad_x), grad_kernel


def finite_diff_grad(f: Callable[[np.ndarray], float], at: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.array(at, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"function returned non-finite value at element {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def tensor_to_bytes(t: np.ndarray) -> bytes:
    t = np.ascontiguousarray(t, dtype="<f8")
    head = TENSOR_MAGIC + struct.pack("<II", TENSOR_VERSION, t.ndim)
    head += struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + t.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (tensor, next offset)."""
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise TensorFormatError(f"bad tensor magic at byte {offset}")
    if len(buf) < offset + 12:
        raise TensorFormatError(f"truncated tensor header at byte {offset}")
    version, rank = struct.unpack_from("<II", buf, offset + 4)
    if version != TENSOR_VERSION:
        raise TensorFormatError(f"unsupported tensor version {version} at byte {offset + 4}")
    pos = offset + 12
    if len(buf) < pos + 8 * rank:
        raise TensorFormatError(f"truncated tensor extents at byte {pos}")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = pos + 8 * count
    if len(buf) < end:
        raise TensorFormatError(f"truncated tensor payload at byte {pos}: need {8 * count} bytes")
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return data.reshape(shape), end


def save_tensor(path, t: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        t, end = tensor_from_bytes(buf)
    except TensorFormatError as exc:
        raise TensorFormatError(f"{path}: {exc}") from None
    if end != len(buf):
        raise TensorFormatError(f"{path}: {len(buf) - end} trailing bytes at byte {end}")
    return t
